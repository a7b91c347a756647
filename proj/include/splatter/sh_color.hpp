// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0
//
// View-dependent color from real spherical harmonics of order 0 and 1.
//
// The degree-1 band is stacked as Y1 = [Y_1^-1, Y_1^0, Y_1^1] = sqrt(3/4pi) * P * v, where P is
// the cyclic permutation mapping (x, y, z) to (y, z, x). The constant band is folded into the
// dc term, so a channel evaluates to dc + linear.row(channel) . Y1(v).
//
#pragma once

#include "splatter/errors.hpp"

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace splatter {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kShY00 = 0.28209479177387814; // 1 / (2 sqrt(pi))
inline constexpr double kShY1  = 0.48860251190291992; // sqrt(3 / (4 pi))

/// The cyclic permutation (x, y, z) -> (y, z, x).
inline Mat3
shPermutation() {
    Mat3 p;
    p << 0, 1, 0, //
        0, 0, 1,  //
        1, 0, 0;
    return p;
}

/// Number of flattened color scalars for an SH order (k_c).
inline int
shChannelCount(int order) {
    if (order == 0) {
        return 3;
    }
    if (order == 1) {
        return 12;
    }
    throw UnsupportedOrder("spherical harmonics order " + std::to_string(order) +
                           " is not supported (orders 0 and 1 only)");
}

inline int
shOrderForChannelCount(int kc) {
    if (kc == 3) {
        return 0;
    }
    if (kc == 12) {
        return 1;
    }
    throw InvalidParameter("invalid color channel count " + std::to_string(kc) +
                           " (expected 3 or 12)");
}

/// Color coefficients of one Gaussian. Rows of `linear` are RGB channels, columns the Y1 slots.
class SHCoeffs {
  public:
    SHCoeffs() = default;

    /// Lambertian coefficients.
    explicit SHCoeffs(const Vec3 &dc) : mOrder(0), mDc(dc) { validate(); }

    SHCoeffs(const Vec3 &dc, const Mat3 &linear) : mOrder(1), mDc(dc), mLinear(linear) {
        validate();
    }

    /// Builds from the flattened layout: dc[3] followed (order 1) by `linear` row-major.
    static SHCoeffs
    fromFlat(std::span<const double> flat) {
        const int order = shOrderForChannelCount(static_cast<int>(flat.size()));
        const Vec3 dc(flat[0], flat[1], flat[2]);
        if (order == 0) {
            return SHCoeffs(dc);
        }
        Mat3 lin;
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
                lin(r, c) = flat[3 + 3 * r + c];
            }
        }
        return SHCoeffs(dc, lin);
    }

    int order() const noexcept { return mOrder; }
    int channelCount() const noexcept { return mOrder == 0 ? 3 : 12; }
    const Vec3 &dc() const noexcept { return mDc; }
    /// Zero for order 0.
    const Mat3 &linear() const noexcept { return mLinear; }

    std::vector<double>
    flat() const {
        std::vector<double> out{mDc[0], mDc[1], mDc[2]};
        if (mOrder == 1) {
            for (int r = 0; r < 3; ++r) {
                for (int c = 0; c < 3; ++c) {
                    out.push_back(mLinear(r, c));
                }
            }
        }
        return out;
    }

    friend bool
    operator==(const SHCoeffs &a, const SHCoeffs &b) {
        return a.mOrder == b.mOrder && a.mDc == b.mDc && a.mLinear == b.mLinear;
    }

  private:
    void
    validate() const {
        if (!mDc.allFinite() || !mLinear.allFinite()) {
            throw InvalidParameter("spherical harmonics coefficients must be finite");
        }
    }

    int mOrder = 0;
    Vec3 mDc   = Vec3::Zero();
    Mat3 mLinear = Mat3::Zero();
};

inline void
requireUnitDirection(const Vec3 &dir) {
    if (!dir.allFinite() || std::abs(dir.norm() - 1.0) > 1e-6) {
        throw InvalidParameter("view direction must be a unit vector");
    }
}

/// Basis values [Y00] (order 0) or [Y00, Y1(v)] (order 1).
inline std::vector<double>
shBasis(const Vec3 &dir, int order) {
    shChannelCount(order);
    requireUnitDirection(dir);
    std::vector<double> out{kShY00};
    if (order == 1) {
        out.push_back(kShY1 * dir.y());
        out.push_back(kShY1 * dir.z());
        out.push_back(kShY1 * dir.x());
    }
    return out;
}

/// Unclamped per-channel color. Order 0 ignores the direction.
inline Vec3
evalColor(const SHCoeffs &c, const Vec3 &dir) {
    if (c.order() == 0) {
        return c.dc();
    }
    requireUnitDirection(dir);
    const Vec3 y1(kShY1 * dir.y(), kShY1 * dir.z(), kShY1 * dir.x());
    return c.dc() + c.linear() * y1;
}

/// Matrix acting on the degree-1 coefficient vector of each channel under a rotation R.
/// Only orders 0 and 1 are closed-form; higher orders need Wigner matrices.
inline Mat3
shRotationMatrix(int order, const Mat3 &rotation) {
    shChannelCount(order);
    const Mat3 p = shPermutation();
    return p * rotation * p.transpose();
}

/// Coefficients such that evalColor(rotateSh(c, R), R v) == evalColor(c, v) for every v.
inline SHCoeffs
rotateSh(const SHCoeffs &c, const Mat3 &rotation) {
    if (!rotation.allFinite() ||
        (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
        std::abs(rotation.determinant() - 1.0) > 1e-6) {
        throw InvalidParameter("rotateSh requires a proper rotation matrix");
    }
    if (c.order() == 0) {
        return c;
    }
    if (rotation == Mat3::Identity()) {
        return c;
    }
    const Mat3 m = shRotationMatrix(c.order(), rotation);
    return SHCoeffs(c.dc(), c.linear() * m.transpose());
}

} // namespace splatter
