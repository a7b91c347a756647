// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0
//
// Rigid warps of Gaussian mixtures between camera frames and multi-view unions.
//
#pragma once

#include "splatter/core_types.hpp"
#include "splatter/errors.hpp"
#include "splatter/sh_color.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace splatter {

/// Unit quaternion of a rotation matrix, branching on the largest of (trace, R00, R11, R22).
inline Quat
matrixToQuat(const Mat3 &r) {
    const double tr = r.trace();
    Quat q;
    if (tr >= r(0, 0) && tr >= r(1, 1) && tr >= r(2, 2)) {
        const double s = 2.0 * std::sqrt(1.0 + tr);
        q << 0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s;
    } else if (r(0, 0) >= r(1, 1) && r(0, 0) >= r(2, 2)) {
        const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
        q << (r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s;
    } else if (r(1, 1) >= r(2, 2)) {
        const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
        q << (r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s;
    } else {
        const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
        q << (r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s;
    }
    return q.normalized();
}

/// Applies a rigid transform: mean R mu + T, orientation p * q with p = quat(R), SH rotated.
/// Opacity and scale carry over unchanged.
inline Gaussian3D
warpGaussian(const Gaussian3D &g, const RigidTransform &phi) {
    const Quat p = matrixToQuat(phi.rotation());
    return Gaussian3D(g.opacity(), phi.apply(g.mean()), g.scale(), quatMultiply(p, g.rotation()),
                      rotateSh(g.sh(), phi.rotation()));
}

inline GaussianCloud
warpCloud(const GaussianCloud &cloud, const RigidTransform &phi, std::string newFrameId) {
    GaussianCloud out;
    out.frameId = std::move(newFrameId);
    out.gaussians.reserve(cloud.size());
    for (const auto &g : cloud.gaussians) {
        out.gaussians.push_back(warpGaussian(g, phi));
    }
    return out;
}

/// Pulls gradients taken with respect to warpGaussian(g, phi) back onto g.
inline GaussianGrad
warpBackward(const Gaussian3D &g, const RigidTransform &phi, const GaussianGrad &warped) {
    GaussianGrad out;
    out.dOpacity  = warped.dOpacity;
    out.dLogScale = warped.dLogScale;
    out.dMean     = phi.rotation().transpose() * warped.dMean;
    const Quat p  = matrixToQuat(phi.rotation());
    out.dQuat     = quatLeftMatrix(p).transpose() * warped.dQuat;
    out.dSh       = warped.dSh;
    if (g.sh().order() == 1 && out.dSh.size() == 12) {
        const Mat3 m = shRotationMatrix(1, phi.rotation());
        Mat3 dLin;
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
                dLin(r, c) = warped.dSh[3 + 3 * r + c];
            }
        }
        const Mat3 back = dLin * m;
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
                out.dSh[3 + 3 * r + c] = back(r, c);
            }
        }
    }
    return out;
}

/// Concatenation in argument order; every cloud must share one frame.
inline GaussianCloud
unionClouds(std::span<const GaussianCloud> clouds) {
    GaussianCloud out;
    if (clouds.empty()) {
        return out;
    }
    out.frameId = clouds.front().frameId;
    std::size_t total = 0;
    for (const auto &c : clouds) {
        if (c.frameId != out.frameId) {
            throw FrameMismatch("unionClouds: mixed frames \"" + out.frameId + "\" and \"" +
                                c.frameId + "\"");
        }
        total += c.size();
    }
    out.gaussians.reserve(total);
    for (const auto &c : clouds) {
        out.gaussians.insert(out.gaussians.end(), c.gaussians.begin(), c.gaussians.end());
    }
    return out;
}

} // namespace splatter
