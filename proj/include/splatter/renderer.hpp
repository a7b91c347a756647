// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0
//
// Tile-based Gaussian rasterizer (forward and analytic backward) and a ray-marching quadrature
// oracle for the emission-absorption integral over the mixture field.
//
#pragma once

#include "splatter/core_types.hpp"
#include "splatter/errors.hpp"
#include "splatter/sh_color.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <thread>
#include <vector>

namespace splatter {

inline constexpr double kAlphaMax             = 0.999;
inline constexpr double kTransmittanceMin     = 1e-4;
inline constexpr double kCovarianceDilation   = 0.3; // px^2, added to the projected diagonal
inline constexpr int kTileSize                = 16;
inline constexpr double kFootprintSigmas      = 3.0;

/// RGB image, row-major, channel-minor.
template <typename Real>
struct ImageT {
    int height = 0;
    int width  = 0;
    std::vector<Real> pixels;

    ImageT() = default;
    ImageT(int h, int w, Real fill = Real(0))
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {
        if (h < 1 || w < 1) {
            throw InvalidParameter("image must be at least 1x1");
        }
    }

    std::size_t pixelCount() const noexcept { return static_cast<std::size_t>(height) * width; }

    Real &at(int r, int c, int ch) { return pixels[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
    Real at(int r, int c, int ch) const {
        return pixels[(static_cast<std::size_t>(r) * width + c) * 3 + ch];
    }

    template <typename Other>
    ImageT<Other>
    cast() const {
        ImageT<Other> out;
        out.height = height;
        out.width  = width;
        out.pixels.assign(pixels.begin(), pixels.end());
        return out;
    }

    friend bool operator==(const ImageT &, const ImageT &) = default;
};

using Image  = ImageT<float>;
using ImageD = ImageT<double>;

template <typename Real>
struct RenderAux {
    std::vector<Real> finalTransmittance;
    /// Gaussians composited at each pixel (falloff at or above the smallest normal number).
    std::vector<int> contribCount;
};

template <typename Real>
struct RenderResult {
    ImageT<Real> image;
    RenderAux<Real> aux;
};

/// One entry per Gaussian of the rendered cloud.
using GradientBundle = std::vector<GaussianGrad>;

struct RenderOptions {
    /// Worker threads over tiles. Output is identical for every value.
    int threads = 1;
};

struct ProjectedGaussian {
    Vec2 mean2d;
    Mat2 cov2d;
    double depth;
};

namespace detail {

inline double
cullDepth(const Camera &cam) {
    return std::max(0.5 * cam.zNear, 1e-4);
}

/// Everything the forward pass derives from one Gaussian; the backward pass reuses it.
struct Projection {
    Vec3 camPoint;
    Eigen::Matrix<double, 2, 3> jac;
    Mat3 covCam;
    Mat2 cov2d;
    Mat2 conic;
    Vec2 mean2d;
    Vec3 viewDir;
    double viewDist;
    Vec3 rawColor;
};

inline std::optional<Projection>
project(const Gaussian3D &g, const Camera &cam) {
    const Mat3 &w = cam.worldToCam.rotation();
    Projection p;
    p.camPoint = cam.worldToCam.apply(g.mean());
    const double z = p.camPoint.z();
    if (!(z > cullDepth(cam))) {
        return std::nullopt;
    }
    const double x = p.camPoint.x(), y = p.camPoint.y();
    p.mean2d = Vec2(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
    p.jac << cam.fx / z, 0.0, -cam.fx * x / (z * z), //
        0.0, cam.fy / z, -cam.fy * y / (z * z);
    p.covCam = w * g.covariance() * w.transpose();
    p.cov2d  = p.jac * p.covCam * p.jac.transpose();
    p.cov2d(0, 1) = p.cov2d(1, 0) = 0.5 * (p.cov2d(0, 1) + p.cov2d(1, 0));
    p.cov2d(0, 0) += kCovarianceDilation;
    p.cov2d(1, 1) += kCovarianceDilation;
    const double det = p.cov2d.determinant();
    if (!(det > 0.0) || !std::isfinite(det)) {
        return std::nullopt;
    }
    p.conic << p.cov2d(1, 1) / det, -p.cov2d(0, 1) / det, //
        -p.cov2d(0, 1) / det, p.cov2d(0, 0) / det;

    const Vec3 toMean = g.mean() - cam.center();
    p.viewDist        = toMean.norm();
    p.viewDir         = toMean / p.viewDist;
    p.rawColor        = evalColor(g.sh(), p.viewDir);
    return p;
}

template <typename Real>
struct Splat {
    Real mx, my;
    Real ca, cb, cc; // conic entries [[ca, cb], [cb, cc]]
    Real opacity;
    Real color[3];
};

template <typename Real>
struct Prepared {
    std::vector<std::optional<Projection>> proj;
    std::vector<Splat<Real>> splats;
    /// Per tile: Gaussian indices in depth order (ties by index).
    std::vector<std::vector<std::uint32_t>> tiles;
    int tilesX = 0, tilesY = 0;
};

template <typename Fn>
void
parallelFor(int count, int threads, Fn &&fn) {
    threads = std::clamp(threads, 1, std::max(1, count));
    if (threads == 1) {
        for (int i = 0; i < count; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            for (int i = t; i < count; i += threads) {
                fn(i);
            }
        });
    }
    for (auto &th : pool) {
        th.join();
    }
}

inline void
checkInputs(const GaussianCloud &cloud, const Camera &cam) {
    cam.validate();
    if (cloud.frameId != cam.frame) {
        throw FrameMismatch("cloud is in frame \"" + cloud.frameId + "\" but camera observes \"" +
                            cam.frame + "\"");
    }
}

template <typename Real>
Prepared<Real>
prepare(const GaussianCloud &cloud, const Camera &cam) {
    const std::size_t n = cloud.size();
    Prepared<Real> prep;
    prep.proj.resize(n);
    prep.splats.resize(n);
    prep.tilesX = (cam.width + kTileSize - 1) / kTileSize;
    prep.tilesY = (cam.height + kTileSize - 1) / kTileSize;
    prep.tiles.resize(static_cast<std::size_t>(prep.tilesX) * prep.tilesY);

    std::vector<std::uint32_t> order;
    order.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        prep.proj[i] = project(cloud.gaussians[i], cam);
        if (!prep.proj[i]) {
            continue;
        }
        const Projection &p = *prep.proj[i];
        Splat<Real> &s      = prep.splats[i];
        s.mx                = static_cast<Real>(p.mean2d.x());
        s.my                = static_cast<Real>(p.mean2d.y());
        s.ca                = static_cast<Real>(p.conic(0, 0));
        s.cb                = static_cast<Real>(p.conic(0, 1));
        s.cc                = static_cast<Real>(p.conic(1, 1));
        s.opacity           = static_cast<Real>(cloud.gaussians[i].opacity());
        for (int ch = 0; ch < 3; ++ch) {
            s.color[ch] = static_cast<Real>(std::clamp(p.rawColor[ch], 0.0, 1.0));
        }
        order.push_back(static_cast<std::uint32_t>(i));
    }
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        const double da = prep.proj[a]->camPoint.z(), db = prep.proj[b]->camPoint.z();
        return da < db || (da == db && a < b);
    });

    for (std::uint32_t i : order) {
        const Projection &p = *prep.proj[i];
        // Axis-aligned bounding box of the 3-sigma ellipse.
        const double rx = kFootprintSigmas * std::sqrt(p.cov2d(0, 0));
        const double ry = kFootprintSigmas * std::sqrt(p.cov2d(1, 1));
        const double x0 = p.mean2d.x() - rx, x1 = p.mean2d.x() + rx;
        const double y0 = p.mean2d.y() - ry, y1 = p.mean2d.y() + ry;
        if (x1 < 0.0 || y1 < 0.0 || x0 >= cam.width || y0 >= cam.height) {
            continue;
        }
        const int tx0 = std::max(0, static_cast<int>(std::floor(x0 / kTileSize)));
        const int tx1 = std::min(prep.tilesX - 1, static_cast<int>(std::floor(x1 / kTileSize)));
        const int ty0 = std::max(0, static_cast<int>(std::floor(y0 / kTileSize)));
        const int ty1 = std::min(prep.tilesY - 1, static_cast<int>(std::floor(y1 / kTileSize)));
        for (int ty = ty0; ty <= ty1; ++ty) {
            for (int tx = tx0; tx <= tx1; ++tx) {
                prep.tiles[static_cast<std::size_t>(ty) * prep.tilesX + tx].push_back(i);
            }
        }
    }
    return prep;
}

/// Depth ordering is resolved globally, so pixels only need the compositing recurrence.
template <typename Real>
struct Contribution {
    std::uint32_t local; // position within the tile list
    Real alpha;
    Real gauss;
    Real transmittance; // before this contribution
    bool saturated;     // alpha hit kAlphaMax
};

/// Contiguous copy of the splats listed for one tile.
template <typename Real>
std::vector<Splat<Real>>
gatherTile(const Prepared<Real> &prep, const std::vector<std::uint32_t> &list) {
    std::vector<Splat<Real>> local(list.size());
    for (std::size_t j = 0; j < list.size(); ++j) {
        local[j] = prep.splats[list[j]];
    }
    return local;
}

/// Falloff values below the smallest normal number are treated as zero, which keeps the
/// compositing loops off the denormal slow path.
template <typename Real>
inline const Real kExpUnderflow = std::log(std::numeric_limits<Real>::min());

template <typename Real, typename Visit>
Real
compositePixel(const std::vector<Splat<Real>> &local, int row, int col, Visit &&visit) {
    const Real px = static_cast<Real>(col) + Real(0.5);
    const Real py = static_cast<Real>(row) + Real(0.5);
    Real trans    = Real(1);
    const auto count = static_cast<std::uint32_t>(local.size());
    for (std::uint32_t j = 0; j < count; ++j) {
        const Splat<Real> &s = local[j];
        const Real dx        = px - s.mx;
        const Real dy        = py - s.my;
        const Real power     = Real(-0.5) * (s.ca * dx * dx + s.cc * dy * dy) - s.cb * dx * dy;
        if (power < kExpUnderflow<Real>) {
            continue;
        }
        const Real gauss     = std::exp(power);
        Real alpha           = s.opacity * gauss;
        const bool saturated = alpha > static_cast<Real>(kAlphaMax);
        if (saturated) {
            alpha = static_cast<Real>(kAlphaMax);
        }
        visit(Contribution<Real>{j, alpha, gauss, trans, saturated});
        trans *= Real(1) - alpha;
        if (trans < static_cast<Real>(kTransmittanceMin)) {
            break;
        }
    }
    return trans;
}

/// dR/dq_k for the quaternion-to-matrix polynomial.
inline std::array<Mat3, 4>
rotationJacobian(const Quat &q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    std::array<Mat3, 4> d;
    d[0] << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
    d[1] << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
    d[2] << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
    d[3] << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
    return d;
}

/// Screen-space partials of one Gaussian, summed over every pixel it touched.
struct ScreenGrad {
    double mx = 0, my = 0, ca = 0, cb = 0, cc = 0, opacity = 0;
    double color[3] = {0, 0, 0};

    ScreenGrad &
    operator+=(const ScreenGrad &o) {
        mx += o.mx;
        my += o.my;
        ca += o.ca;
        cb += o.cb;
        cc += o.cc;
        opacity += o.opacity;
        for (int k = 0; k < 3; ++k) {
            color[k] += o.color[k];
        }
        return *this;
    }
};

/// Chain from screen-space partials to the Gaussian's parameters.
inline GaussianGrad
chainToGaussian(const Gaussian3D &g, const Camera &cam, const Projection &p, const ScreenGrad &sg) {
    GaussianGrad out;
    out.dOpacity = sg.opacity;

    // conic -> 2D covariance
    Mat2 dConic;
    dConic << sg.ca, 0.5 * sg.cb, 0.5 * sg.cb, sg.cc;
    const Mat2 dCov2d = -(p.conic * dConic * p.conic);

    // 2D covariance -> camera covariance and Jacobian
    const Mat3 dCovCam                     = p.jac.transpose() * dCov2d * p.jac;
    const Eigen::Matrix<double, 2, 3> dJac = 2.0 * dCov2d * p.jac * p.covCam;

    const double x = p.camPoint.x(), y = p.camPoint.y(), z = p.camPoint.z();
    const double z2 = z * z, z3 = z2 * z;
    Vec3 dCam = Vec3::Zero();
    dCam.x() += dJac(0, 2) * (-cam.fx / z2);
    dCam.y() += dJac(1, 2) * (-cam.fy / z2);
    dCam.z() += dJac(0, 0) * (-cam.fx / z2) + dJac(0, 2) * (2.0 * cam.fx * x / z3) +
                dJac(1, 1) * (-cam.fy / z2) + dJac(1, 2) * (2.0 * cam.fy * y / z3);
    dCam.x() += sg.mx * cam.fx / z;
    dCam.y() += sg.my * cam.fy / z;
    dCam.z() += -sg.mx * cam.fx * x / z2 - sg.my * cam.fy * y / z2;

    const Mat3 &w = cam.worldToCam.rotation();
    out.dMean     = w.transpose() * dCam;

    // covariance -> scale and rotation, Sigma = M M^T with M = R diag(s)
    const Mat3 dCov = w.transpose() * dCovCam * w;
    const Mat3 rot  = g.rotationMatrix();
    const Vec3 &s   = g.scale();
    const Mat3 m    = rot * s.asDiagonal();
    const Mat3 dM   = (dCov + dCov.transpose()) * m;
    for (int j = 0; j < 3; ++j) {
        out.dLogScale[j] = s[j] * dM.col(j).dot(rot.col(j));
    }
    const Mat3 dRot = dM * s.asDiagonal();
    const auto dR   = rotationJacobian(g.rotation());
    Quat dq;
    for (int k = 0; k < 4; ++k) {
        dq[k] = (dRot.array() * dR[k].array()).sum();
    }
    const Quat &q = g.rotation();
    out.dQuat     = dq - q * q.dot(dq);

    // color
    const SHCoeffs &sh = g.sh();
    Vec3 dColor;
    for (int ch = 0; ch < 3; ++ch) {
        const bool inside = p.rawColor[ch] >= 0.0 && p.rawColor[ch] <= 1.0;
        dColor[ch]        = inside ? sg.color[ch] : 0.0;
    }
    out.dSh.assign(static_cast<std::size_t>(sh.channelCount()), 0.0);
    for (int ch = 0; ch < 3; ++ch) {
        out.dSh[ch] = dColor[ch];
    }
    if (sh.order() == 1) {
        const Vec3 &v = p.viewDir;
        const Vec3 y1(kShY1 * v.y(), kShY1 * v.z(), kShY1 * v.x());
        for (int ch = 0; ch < 3; ++ch) {
            for (int k = 0; k < 3; ++k) {
                out.dSh[3 + 3 * ch + k] = dColor[ch] * y1[k];
            }
        }
        const Vec3 dY1  = sh.linear().transpose() * dColor;
        const Vec3 dDir = kShY1 * (shPermutation().transpose() * dY1);
        out.dMean += (dDir - v * v.dot(dDir)) / p.viewDist;
    }
    return out;
}

} // namespace detail

/// Camera-space projection with the first-order covariance map; nullopt when culled.
inline std::optional<ProjectedGaussian>
projectGaussian(const Gaussian3D &g, const Camera &cam) {
    cam.validate();
    const auto p = detail::project(g, cam);
    if (!p) {
        return std::nullopt;
    }
    return ProjectedGaussian{p->mean2d, p->cov2d, p->camPoint.z()};
}

/// Front-to-back alpha compositing over a black background.
template <typename Real = float>
RenderResult<Real>
rasterize(const GaussianCloud &cloud, const Camera &cam, const RenderOptions &opts = {}) {
    detail::checkInputs(cloud, cam);
    const auto prep = detail::prepare<Real>(cloud, cam);

    RenderResult<Real> out{ImageT<Real>(cam.height, cam.width), {}};
    out.aux.finalTransmittance.assign(out.image.pixelCount(), Real(1));
    out.aux.contribCount.assign(out.image.pixelCount(), 0);

    detail::parallelFor(prep.tilesX * prep.tilesY, opts.threads, [&](int tile) {
        const auto local = detail::gatherTile(prep, prep.tiles[tile]);
        const int tx = tile % prep.tilesX, ty = tile / prep.tilesX;
        const int r1 = std::min(cam.height, (ty + 1) * kTileSize);
        const int c1 = std::min(cam.width, (tx + 1) * kTileSize);
        for (int r = ty * kTileSize; r < r1; ++r) {
            for (int c = tx * kTileSize; c < c1; ++c) {
                Real color[3] = {0, 0, 0};
                int count     = 0;
                const Real trans =
                    detail::compositePixel(local, r, c, [&](const detail::Contribution<Real> &k) {
                        const auto &s = local[k.local];
                        const Real wgt = k.transmittance * k.alpha;
                        for (int ch = 0; ch < 3; ++ch) {
                            color[ch] += wgt * s.color[ch];
                        }
                        ++count;
                    });
                const std::size_t pix = static_cast<std::size_t>(r) * cam.width + c;
                for (int ch = 0; ch < 3; ++ch) {
                    out.image.pixels[pix * 3 + ch] = std::clamp(color[ch], Real(0), Real(1));
                }
                out.aux.finalTransmittance[pix] = std::clamp(trans, Real(0), Real(1));
                out.aux.contribCount[pix]       = count;
            }
        }
    });
    return out;
}

/// Exact gradients of sum(upstream * rasterize(cloud, cam).image) with respect to every
/// Gaussian parameter. `upstream` has the image layout (H * W * 3).
template <typename Real = float>
GradientBundle
rasterizeBackward(const GaussianCloud &cloud, const Camera &cam, std::span<const Real> upstream,
                  const RenderOptions &opts = {}) {
    detail::checkInputs(cloud, cam);
    const std::size_t pixels = static_cast<std::size_t>(cam.width) * cam.height;
    if (upstream.size() != pixels * 3) {
        throw DimensionMismatch("upstream gradient must have H * W * 3 entries");
    }
    for (Real v : upstream) {
        if (!std::isfinite(v)) {
            throw InvalidParameter("upstream gradient must be finite");
        }
    }
    const auto prep = detail::prepare<Real>(cloud, cam);

    // Per-tile partial sums, reduced afterwards in tile order for schedule independence.
    std::vector<std::vector<detail::ScreenGrad>> partial(prep.tiles.size());
    detail::parallelFor(prep.tilesX * prep.tilesY, opts.threads, [&](int tile) {
        const auto &list = prep.tiles[tile];
        auto &acc        = partial[tile];
        acc.assign(list.size(), {});
        if (list.empty()) {
            return;
        }
        const auto local = detail::gatherTile(prep, list);
        std::vector<detail::Contribution<Real>> contribs;
        const int tx = tile % prep.tilesX, ty = tile / prep.tilesX;
        const int r1 = std::min(cam.height, (ty + 1) * kTileSize);
        const int c1 = std::min(cam.width, (tx + 1) * kTileSize);
        for (int r = ty * kTileSize; r < r1; ++r) {
            for (int c = tx * kTileSize; c < c1; ++c) {
                const std::size_t pix = static_cast<std::size_t>(r) * cam.width + c;
                const Real up[3] = {upstream[pix * 3], upstream[pix * 3 + 1], upstream[pix * 3 + 2]};
                if (up[0] == Real(0) && up[1] == Real(0) && up[2] == Real(0)) {
                    continue;
                }
                contribs.clear();
                detail::compositePixel(local, r, c,
                                       [&](const detail::Contribution<Real> &k) { contribs.push_back(k); });
                // Accumulated in double: float products of small upstream values and small
                // falloffs land in the denormal range, which is both slow and lossy.
                const double px = c + 0.5, py = r + 0.5;
                const double upD[3] = {up[0], up[1], up[2]};
                double behind[3] = {0, 0, 0};
                for (auto it = contribs.rbegin(); it != contribs.rend(); ++it) {
                    const auto &s       = local[it->local];
                    auto &g             = acc[it->local];
                    const double alpha  = it->alpha;
                    const double trans  = it->transmittance;
                    const double wgt    = static_cast<double>(it->transmittance * it->alpha);
                    double dAlpha       = 0;
                    for (int ch = 0; ch < 3; ++ch) {
                        const double color = s.color[ch];
                        g.color[ch] += wgt * upD[ch];
                        dAlpha += trans * (color - behind[ch]) * upD[ch];
                        behind[ch] = alpha * color + (1.0 - alpha) * behind[ch];
                    }
                    if (it->saturated) {
                        continue;
                    }
                    const double gauss = it->gauss;
                    g.opacity += gauss * dAlpha;
                    const double dPower = gauss * static_cast<double>(s.opacity) * dAlpha;
                    const double dx = px - static_cast<double>(s.mx), dy = py - static_cast<double>(s.my);
                    g.mx += dPower * (s.ca * dx + s.cb * dy);
                    g.my += dPower * (s.cb * dx + s.cc * dy);
                    g.ca += dPower * -0.5 * dx * dx;
                    g.cb += -dPower * dx * dy;
                    g.cc += dPower * -0.5 * dy * dy;
                }
            }
        }
    });

    std::vector<detail::ScreenGrad> screen(cloud.size());
    for (std::size_t t = 0; t < prep.tiles.size(); ++t) {
        for (std::size_t j = 0; j < prep.tiles[t].size(); ++j) {
            screen[prep.tiles[t][j]] += partial[t][j];
        }
    }

    GradientBundle grads(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Gaussian3D &g = cloud.gaussians[i];
        if (!prep.proj[i]) {
            grads[i].dSh.assign(static_cast<std::size_t>(g.sh().channelCount()), 0.0);
            continue;
        }
        grads[i] = detail::chainToGaussian(g, cam, *prep.proj[i], screen[i]);
    }
    return grads;
}

// ---------------------------------------------------------------------------------------------
// Quadrature oracle

/// Length of the line integral of g through its mean along a unit direction:
/// integral of exp(-1/2 t^2 d^T Sigma^-1 d) dt = sqrt(2 pi / (d^T Sigma^-1 d)).
inline double
gaussianChordLength(const Gaussian3D &g, const Vec3 &dir) {
    const Vec3 local = (g.rotationMatrix().transpose() * dir).cwiseQuotient(g.scale());
    return std::sqrt(2.0 * std::numbers::pi / local.squaredNorm());
}

/// Optical depth through the center that best reproduces the alpha profile a * G over the
/// footprint in the least-squares sense: minimizes the area integral of
/// (1 - exp(-tau G) - a G)^2, with G the footprint falloff in (0, 1].
inline double
footprintOpticalDepth(double alpha) {
    if (!(alpha > 0.0)) {
        return 0.0;
    }
    // Stationarity condition scaled by tau; negative below the root, positive above it.
    auto stationarity = [alpha](double tau) {
        const double e = std::exp(-tau);
        return -std::expm1(-tau) + 0.5 * std::expm1(-2.0 * tau) - alpha * (1.0 - e * (1.0 + tau)) / tau;
    };
    double lo = 0.0, hi = 64.0;
    for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        (stationarity(mid) < 0.0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

/// Per-Gaussian density coefficient: footprintOpticalDepth(min(opacity, alpha max)) spread over
/// the Gaussian's chord length along the camera-to-mean direction.
inline std::vector<double>
oracleDensityCoefficients(const GaussianCloud &cloud, const Camera &cam) {
    std::vector<double> out;
    out.reserve(cloud.size());
    const Vec3 center = cam.center();
    for (const auto &g : cloud.gaussians) {
        const Vec3 toMean = g.mean() - center;
        const double dist = toMean.norm();
        if (dist == 0.0) {
            out.push_back(0.0);
            continue;
        }
        const double alpha = std::min(g.opacity(), kAlphaMax);
        out.push_back(footprintOpticalDepth(alpha) / gaussianChordLength(g, toMean / dist));
    }
    return out;
}

/// Emission-absorption quadrature along each pixel-center ray, tau in [0, tMax], sampling the
/// mixture field at segment midpoints. Within a segment the field is held constant, so each
/// segment contributes T (1 - exp(-sigma h)) c.
inline Image
renderOracle(const GaussianCloud &cloud, const Camera &cam, int stepsPerRay, double tMax) {
    detail::checkInputs(cloud, cam);
    if (stepsPerRay < 16) {
        throw InvalidParameter("renderOracle requires at least 16 steps per ray");
    }
    if (!(tMax > 0) || !std::isfinite(tMax)) {
        throw InvalidParameter("renderOracle requires a positive finite t_max");
    }
    Image out(cam.height, cam.width);
    if (cloud.empty()) {
        return out;
    }
    const std::vector<double> coeffs = oracleDensityCoefficients(cloud, cam);
    const Vec3 origin                = cam.center();
    const Mat3 camToWorld            = cam.worldToCam.rotation().transpose();
    const double h                   = tMax / stepsPerRay;
    // Gaussians whose ray minimum of the Mahalanobis term exceeds this contribute < e^-40.
    constexpr double kSkipQuadratic = 80.0;

    std::vector<Mat3> whiten(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto &g = cloud.gaussians[i];
        whiten[i]     = g.scale().cwiseInverse().asDiagonal() * g.rotationMatrix().transpose();
    }

    std::vector<Gaussian3D> active;
    std::vector<double> activeCoeffs;
    for (int r = 0; r < cam.height; ++r) {
        for (int c = 0; c < cam.width; ++c) {
            const Vec3 dir = (camToWorld * cam.pixelRay(r, c)).normalized();
            active.clear();
            activeCoeffs.clear();
            for (std::size_t i = 0; i < cloud.size(); ++i) {
                if (coeffs[i] <= 0.0) {
                    continue;
                }
                const Vec3 a = whiten[i] * dir;
                const Vec3 b = whiten[i] * (origin - cloud.gaussians[i].mean());
                const double aa = a.squaredNorm();
                double tStar    = -a.dot(b) / aa;
                tStar           = std::clamp(tStar, 0.0, tMax);
                if ((b + tStar * a).squaredNorm() <= kSkipQuadratic) {
                    active.push_back(cloud.gaussians[i]);
                    activeCoeffs.push_back(coeffs[i]);
                }
            }
            if (active.empty()) {
                continue;
            }
            double trans  = 1.0;
            Vec3 radiance = Vec3::Zero();
            for (int k = 0; k < stepsPerRay; ++k) {
                const Vec3 x            = origin + ((k + 0.5) * h) * dir;
                const FieldSample field = evalField(active, activeCoeffs, x, dir);
                if (field.density <= 0.0) {
                    continue;
                }
                const double absorbed = -std::expm1(-field.density * h);
                radiance += trans * absorbed * field.color.cwiseMax(0.0).cwiseMin(1.0);
                trans *= 1.0 - absorbed;
            }
            for (int ch = 0; ch < 3; ++ch) {
                out.at(r, c, ch) = static_cast<float>(std::clamp(radiance[ch], 0.0, 1.0));
            }
        }
    }
    return out;
}

} // namespace splatter
