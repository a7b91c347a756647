// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of the rasterizer's analytic gradients.
//
#pragma once

#include "splatter/core_types.hpp"
#include "splatter/renderer.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace splatter {

struct GradcheckReport {
    double maxRelError = 0.0;
    std::size_t checked = 0;  // parameters with |FD| above the floor
    std::string worst;        // "gaussian 3 mean[1]" style label
};

struct GradcheckOptions {
    double step     = 1e-5;
    double fdFloor  = 1e-8;
};

namespace detail {

enum class ParamKind { Opacity, Mean, LogScale, Quat, Sh };

inline Gaussian3D
perturbed(const Gaussian3D &g, ParamKind kind, int k, double delta) {
    double opacity = g.opacity();
    Vec3 mean      = g.mean();
    Vec3 scale     = g.scale();
    Quat q         = g.rotation();
    auto sh        = g.sh().flat();
    switch (kind) {
    case ParamKind::Opacity: opacity += delta; break;
    case ParamKind::Mean: mean[k] += delta; break;
    case ParamKind::LogScale: scale[k] = std::exp(std::log(scale[k]) + delta); break;
    case ParamKind::Quat: q[k] += delta; break;
    case ParamKind::Sh: sh[k] += delta; break;
    }
    return Gaussian3D(opacity, mean, scale, q, SHCoeffs::fromFlat(sh));
}

inline double
gradientEntry(const GaussianGrad &g, ParamKind kind, int k) {
    switch (kind) {
    case ParamKind::Opacity: return g.dOpacity;
    case ParamKind::Mean: return g.dMean[k];
    case ParamKind::LogScale: return g.dLogScale[k];
    case ParamKind::Quat: return g.dQuat[k];
    case ParamKind::Sh: return g.dSh[k];
    }
    return 0.0;
}

inline const char *
kindName(ParamKind kind) {
    switch (kind) {
    case ParamKind::Opacity: return "opacity";
    case ParamKind::Mean: return "mean";
    case ParamKind::LogScale: return "log_scale";
    case ParamKind::Quat: return "quat";
    case ParamKind::Sh: return "sh";
    }
    return "?";
}

} // namespace detail

/// Weighted-sum loss used by the check: sum(upstream * image), rendered in 64-bit.
inline double
weightedRenderLoss(const GaussianCloud &cloud, const Camera &cam, const std::vector<double> &upstream) {
    const auto img = rasterize<double>(cloud, cam).image;
    double loss    = 0.0;
    for (std::size_t k = 0; k < upstream.size(); ++k) {
        loss += upstream[k] * img.pixels[k];
    }
    return loss;
}

/// Compares rasterizeBackward<double> with central differences for every parameter.
inline GradcheckReport
gradcheck(const GaussianCloud &cloud, const Camera &cam, const std::vector<double> &upstream,
          const GradcheckOptions &opts = {}) {
    using detail::ParamKind;
    const GradientBundle analytic = rasterizeBackward<double>(cloud, cam, upstream);
    GradcheckReport report;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Gaussian3D &g = cloud.gaussians[i];
        const int kc        = g.sh().channelCount();
        const std::pair<ParamKind, int> groups[] = {{ParamKind::Opacity, 1}, {ParamKind::Mean, 3},
                                                    {ParamKind::LogScale, 3}, {ParamKind::Quat, 4},
                                                    {ParamKind::Sh, kc}};
        for (const auto &[kind, count] : groups) {
            for (int k = 0; k < count; ++k) {
                GaussianCloud plus = cloud, minus = cloud;
                plus.gaussians[i]  = detail::perturbed(g, kind, k, opts.step);
                minus.gaussians[i] = detail::perturbed(g, kind, k, -opts.step);
                const double fd = (weightedRenderLoss(plus, cam, upstream) -
                                   weightedRenderLoss(minus, cam, upstream)) /
                                  (2.0 * opts.step);
                if (std::abs(fd) <= opts.fdFloor) {
                    continue;
                }
                const double a   = detail::gradientEntry(analytic[i], kind, k);
                const double rel = std::abs(a - fd) / std::max(std::abs(a), std::abs(fd));
                ++report.checked;
                if (rel > report.maxRelError) {
                    report.maxRelError = rel;
                    report.worst       = "gaussian " + std::to_string(i) + " " +
                                   detail::kindName(kind) + "[" + std::to_string(k) + "]";
                }
            }
        }
    }
    return report;
}

struct GradcheckScene {
    GaussianCloud cloud;
    Camera camera;
    std::vector<double> upstream;
};

/// Random scene of `count` Gaussians in front of a camera at the origin. Opacities stay below
/// the alpha clamp and colors inside [0, 1] so the rendered function is smooth at the sample.
inline GradcheckScene
makeGradcheckScene(std::uint64_t seed, int count = 8, int size = 32) {
    std::mt19937_64 rng(seed);
    auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    std::normal_distribution<double> normal;

    GradcheckScene scene;
    Camera &cam = scene.camera;
    cam.fx = cam.fy = 0.9 * size;
    cam.cx          = 0.5 * size + uni(-0.3, 0.3);
    cam.cy          = 0.5 * size + uni(-0.3, 0.3);
    cam.width = cam.height = size;
    cam.zNear              = 0.5;
    cam.zFar               = 5.0;
    scene.cloud.frameId    = cam.frame;
    for (int i = 0; i < count; ++i) {
        const Vec3 mean(uni(-0.45, 0.45), uni(-0.45, 0.45), uni(1.6, 2.6));
        const Vec3 scale(std::exp(uni(std::log(0.06), std::log(0.25))),
                         std::exp(uni(std::log(0.06), std::log(0.25))),
                         std::exp(uni(std::log(0.06), std::log(0.25))));
        const Quat q(normal(rng), normal(rng), normal(rng), normal(rng));
        Mat3 lin;
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
                lin(r, c) = uni(-0.15, 0.15);
            }
        }
        const Vec3 dc(uni(0.25, 0.75), uni(0.25, 0.75), uni(0.25, 0.75));
        scene.cloud.gaussians.emplace_back(uni(0.2, 0.85), mean, scale, q, SHCoeffs(dc, lin));
    }
    scene.upstream.resize(static_cast<std::size_t>(size) * size * 3);
    for (double &u : scene.upstream) {
        u = uni(0.0, 1.0);
    }
    return scene;
}

} // namespace splatter
