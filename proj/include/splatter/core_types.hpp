// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include "splatter/errors.hpp"
#include "splatter/sh_color.hpp"

#include <Eigen/Core>
#include <Eigen/LU>

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace splatter {

using Vec2 = Eigen::Vector2d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;

/// Quaternions are stored scalar-first: (w, x, y, z).
using Quat = Eigen::Vector4d;

inline Quat
identityQuat() {
    return Quat(1, 0, 0, 0);
}

/// Rotation matrix of a unit quaternion.
inline Mat3
quatToMatrix(const Quat &q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y), //
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),  //
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

/// Hamilton product a * b (apply b, then a).
inline Quat
quatMultiply(const Quat &a, const Quat &b) {
    return Quat(a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

/// Matrix L(a) with quatMultiply(a, b) == L(a) * b.
inline Eigen::Matrix4d
quatLeftMatrix(const Quat &a) {
    Eigen::Matrix4d m;
    m << a[0], -a[1], -a[2], -a[3], //
        a[1], a[0], -a[3], a[2],    //
        a[2], a[3], a[0], -a[1],    //
        a[3], -a[2], a[1], a[0];
    return m;
}

inline Quat
normalizedQuat(const Quat &raw) {
    const double n = raw.norm();
    if (!raw.allFinite() || n < 1e-12) {
        throw NumericalDegeneracy("quaternion norm is below 1e-12; rotation is undefined");
    }
    return raw / n;
}

/// Sum in a fixed pairwise order; the result does not depend on how the caller parallelizes.
template <typename T>
T
pairwiseSum(std::span<const T> values, const T &zero) {
    if (values.empty()) {
        return zero;
    }
    if (values.size() <= 8) {
        T acc = values[0];
        for (std::size_t i = 1; i < values.size(); ++i) {
            acc = acc + values[i];
        }
        return acc;
    }
    const std::size_t half = values.size() / 2;
    return pairwiseSum(values.first(half), zero) + pairwiseSum(values.subspan(half), zero);
}

/// Sigma = R(q) diag(scale)^2 R(q)^T.
inline Mat3
covarianceFrom(const Vec3 &scale, const Quat &rotation) {
    if (!scale.allFinite() || !rotation.allFinite()) {
        throw InvalidParameter("covarianceFrom: non-finite input");
    }
    if ((scale.array() <= 0.0).any()) {
        throw InvalidParameter("covarianceFrom: scale components must be positive");
    }
    const Mat3 m = quatToMatrix(normalizedQuat(rotation)) * scale.asDiagonal();
    // The product is symmetric only up to rounding.
    const Mat3 c = m * m.transpose();
    return 0.5 * (c + c.transpose());
}

/// One colored anisotropic Gaussian. The quaternion is normalized on construction.
class Gaussian3D {
  public:
    Gaussian3D(double opacity, const Vec3 &mean, const Vec3 &scale, const Quat &rotation,
               SHCoeffs sh)
        : mOpacity(opacity), mMean(mean), mScale(scale), mSh(std::move(sh)) {
        if (!std::isfinite(opacity) || opacity < 0.0 || opacity > 1.0) {
            throw InvalidParameter("Gaussian opacity must lie in [0, 1]");
        }
        if (!mean.allFinite()) {
            throw InvalidParameter("Gaussian mean must be finite");
        }
        if (!scale.allFinite() || (scale.array() <= 0.0).any()) {
            throw InvalidParameter("Gaussian scale components must be positive and finite");
        }
        if (!rotation.allFinite()) {
            throw InvalidParameter("Gaussian rotation must be finite");
        }
        mRotation = normalizedQuat(rotation);
    }

    double opacity() const noexcept { return mOpacity; }
    const Vec3 &mean() const noexcept { return mMean; }
    const Vec3 &scale() const noexcept { return mScale; }
    const Quat &rotation() const noexcept { return mRotation; }
    const SHCoeffs &sh() const noexcept { return mSh; }

    Mat3 rotationMatrix() const { return quatToMatrix(mRotation); }
    Mat3 covariance() const { return covarianceFrom(mScale, mRotation); }

    Gaussian3D
    withOpacity(double opacity) const {
        return Gaussian3D(opacity, mMean, mScale, mRotation, mSh);
    }

  private:
    double mOpacity;
    Vec3 mMean;
    Vec3 mScale;
    Quat mRotation;
    SHCoeffs mSh;
};

struct GaussianCloud {
    std::vector<Gaussian3D> gaussians;
    std::string frameId = "world";

    std::size_t size() const noexcept { return gaussians.size(); }
    bool empty() const noexcept { return gaussians.empty(); }
};

class RigidTransform {
  public:
    RigidTransform() = default;

    RigidTransform(const Mat3 &rotation, const Vec3 &translation)
        : mRotation(rotation), mTranslation(translation) {
        if (!rotation.allFinite() || !translation.allFinite()) {
            throw InvalidParameter("rigid transform must be finite");
        }
        if ((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
            std::abs(rotation.determinant() - 1.0) > 1e-9) {
            throw InvalidParameter("rigid transform rotation must be orthonormal with det +1");
        }
    }

    static RigidTransform identity() { return RigidTransform(); }

    const Mat3 &rotation() const noexcept { return mRotation; }
    const Vec3 &translation() const noexcept { return mTranslation; }

    Vec3 apply(const Vec3 &x) const { return mRotation * x + mTranslation; }

    /// (this * other)(x) == this(other(x)).
    RigidTransform
    compose(const RigidTransform &other) const {
        return fromUnchecked(mRotation * other.mRotation, mRotation * other.mTranslation + mTranslation);
    }

    RigidTransform
    inverse() const {
        const Mat3 rt = mRotation.transpose();
        return fromUnchecked(rt, -(rt * mTranslation));
    }

    /// Row-major 3x4 [R | T].
    std::array<double, 12>
    toRowMajor3x4() const {
        std::array<double, 12> out{};
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
                out[4 * r + c] = mRotation(r, c);
            }
            out[4 * r + 3] = mTranslation[r];
        }
        return out;
    }

    static RigidTransform
    fromRowMajor3x4(std::span<const double, 12> m) {
        Mat3 r;
        Vec3 t;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                r(i, j) = m[4 * i + j];
            }
            t[i] = m[4 * i + 3];
        }
        return RigidTransform(r, t);
    }

  private:
    // Products of valid rotations drift by a few ulps; skip the tolerance check for them.
    static RigidTransform
    fromUnchecked(const Mat3 &r, const Vec3 &t) {
        RigidTransform out;
        out.mRotation    = r;
        out.mTranslation = t;
        return out;
    }

    Mat3 mRotation    = Mat3::Identity();
    Vec3 mTranslation = Vec3::Zero();
};

/// Pinhole camera. `frame` names the coordinate frame consumed by `worldToCam`; `name` is the
/// label of the camera's own frame (the frame of Gaussians unpacked from its splatter image).
struct Camera {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    int width = 1, height = 1;
    RigidTransform worldToCam;
    double zNear = 0.1, zFar = 10.0;
    std::string frame = "world";
    std::string name  = "camera";

    void
    validate() const {
        if (!(fx > 0) || !(fy > 0) || !std::isfinite(fx) || !std::isfinite(fy) ||
            !std::isfinite(cx) || !std::isfinite(cy)) {
            throw InvalidParameter("camera focal lengths must be positive and finite");
        }
        if (!(zNear > 0) || !(zNear < zFar) || !std::isfinite(zFar)) {
            throw InvalidParameter("camera requires 0 < z_near < z_far");
        }
        if (width < 1 || height < 1) {
            throw InvalidParameter("camera image size must be at least 1x1");
        }
    }

    /// Camera center expressed in `frame`.
    Vec3 center() const { return -(worldToCam.rotation().transpose() * worldToCam.translation()); }

    /// Un-normalized ray (u1, u2, 1) through the center of pixel (row, col), camera coordinates.
    Vec3
    pixelRay(double row, double col) const {
        return Vec3((col + 0.5 - cx) / fx, (row + 0.5 - cy) / fy, 1.0);
    }

    /// The same camera observing points given in another frame: `toFrame` maps the new frame
    /// into `frame`.
    Camera
    composed(const RigidTransform &toFrame, std::string newFrame) const {
        Camera out     = *this;
        out.worldToCam = worldToCam.compose(toFrame);
        out.frame      = std::move(newFrame);
        return out;
    }

    /// The camera at the origin of its own frame.
    Camera
    inOwnFrame() const {
        Camera out     = *this;
        out.worldToCam = RigidTransform::identity();
        out.frame      = name;
        return out;
    }
};

/// g(x) = exp(-1/2 (x - mu)^T Sigma^-1 (x - mu)), evaluated through the scale/rotation factors.
inline double
evalGaussian(const Gaussian3D &g, const Vec3 &x) {
    const Vec3 &s = g.scale();
    for (int k = 0; k < 3; ++k) {
        if (!std::isnormal(s[k] * s[k])) {
            throw NumericalDegeneracy("Gaussian covariance is singular (scale underflow)");
        }
    }
    const Vec3 local = (g.rotationMatrix().transpose() * (x - g.mean())).cwiseQuotient(s);
    return std::exp(-0.5 * local.squaredNorm());
}

/// Partial derivatives of a scalar loss with respect to one Gaussian. `dQuat` is taken in raw
/// (pre-normalization) quaternion coordinates at the stored unit quaternion; `dSh` follows the
/// flattened SHCoeffs layout.
struct GaussianGrad {
    double dOpacity = 0.0;
    Vec3 dMean      = Vec3::Zero();
    Vec3 dLogScale  = Vec3::Zero();
    Quat dQuat      = Quat::Zero();
    std::vector<double> dSh;
};

struct FieldSample {
    double density = 0.0;
    Vec3 color     = Vec3::Zero();
};

inline constexpr double kFieldDensityGuard = 1e-12;

/// Mixture field with explicit per-Gaussian density coefficients (the opacities for the plain mixture).
inline FieldSample
evalField(std::span<const Gaussian3D> gaussians, std::span<const double> densityCoeffs,
          const Vec3 &x, const Vec3 &dir) {
    if (gaussians.size() != densityCoeffs.size()) {
        throw DimensionMismatch("evalField: one density coefficient per Gaussian required");
    }
    thread_local std::vector<double> weights;
    thread_local std::vector<Vec3> colored;
    weights.resize(gaussians.size());
    colored.resize(gaussians.size());
    for (std::size_t i = 0; i < gaussians.size(); ++i) {
        weights[i] = densityCoeffs[i] * evalGaussian(gaussians[i], x);
        colored[i] = weights[i] * evalColor(gaussians[i].sh(), dir);
    }
    FieldSample out;
    out.density = pairwiseSum<double>(weights, 0.0);
    if (out.density > kFieldDensityGuard) {
        out.color = pairwiseSum<Vec3>(colored, Vec3::Zero()) / out.density;
    }
    return out;
}

/// Density sum_i sigma_i g_i(x) and the density-weighted mean color at x seen along `dir`.
inline FieldSample
evalField(const GaussianCloud &cloud, const Vec3 &x, const Vec3 &dir) {
    if (cloud.empty()) {
        throw InvalidParameter("evalField: cloud must be non-empty");
    }
    requireUnitDirection(dir);
    std::vector<double> opacities;
    opacities.reserve(cloud.size());
    for (const auto &g : cloud.gaussians) {
        opacities.push_back(g.opacity());
    }
    return evalField(cloud.gaussians, opacities, x, dir);
}

} // namespace splatter
