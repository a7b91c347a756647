// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0
//
// Image quality metrics over [0, 1] RGB images.
//
#pragma once

#include "splatter/errors.hpp"
#include "splatter/renderer.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace splatter {

struct Metrics {
    double psnr = 0.0;
    double ssim = 0.0;
};

namespace detail {

template <typename RealA, typename RealB>
void
requireSameDims(const ImageT<RealA> &a, const ImageT<RealB> &b, const char *what) {
    if (a.height != b.height || a.width != b.width) {
        throw DimensionMismatch(std::string(what) + ": images are " + std::to_string(a.width) + "x" +
                                std::to_string(a.height) + " and " + std::to_string(b.width) + "x" +
                                std::to_string(b.height));
    }
}

} // namespace detail

/// 10 log10(1 / MSE); +infinity for identical images.
template <typename RealA, typename RealB>
double
psnr(const ImageT<RealA> &a, const ImageT<RealB> &b) {
    detail::requireSameDims(a, b, "psnr");
    double sum = 0.0;
    for (std::size_t k = 0; k < a.pixels.size(); ++k) {
        const double d = static_cast<double>(a.pixels[k]) - static_cast<double>(b.pixels[k]);
        sum += d * d;
    }
    if (sum == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return -10.0 * std::log10(sum / static_cast<double>(a.pixels.size()));
}

inline constexpr int kSsimWindow     = 11;
inline constexpr double kSsimSigma   = 1.5;
inline constexpr double kSsimK1      = 0.01;
inline constexpr double kSsimK2      = 0.03;

namespace detail {

inline const std::array<double, kSsimWindow> &
ssimWeights() {
    static const std::array<double, kSsimWindow> weights = [] {
        std::array<double, kSsimWindow> w{};
        double total = 0.0;
        for (int k = 0; k < kSsimWindow; ++k) {
            const double x = k - kSsimWindow / 2;
            w[k]           = std::exp(-x * x / (2.0 * kSsimSigma * kSsimSigma));
            total += w[k];
        }
        for (double &v : w) {
            v /= total;
        }
        return w;
    }();
    return weights;
}

/// Plane of doubles, row-major.
struct Plane {
    int height = 0, width = 0;
    std::vector<double> v;

    Plane(int h, int w) : height(h), width(w), v(static_cast<std::size_t>(h) * w, 0.0) {}
    double &operator()(int r, int c) { return v[static_cast<std::size_t>(r) * width + c]; }
    double operator()(int r, int c) const { return v[static_cast<std::size_t>(r) * width + c]; }
};

/// Separable Gaussian filter, valid region only.
inline Plane
filterValid(const Plane &in) {
    const auto &w = ssimWeights();
    Plane horiz(in.height, in.width - kSsimWindow + 1);
    for (int r = 0; r < horiz.height; ++r) {
        for (int c = 0; c < horiz.width; ++c) {
            double s = 0.0;
            for (int k = 0; k < kSsimWindow; ++k) {
                s += w[k] * in(r, c + k);
            }
            horiz(r, c) = s;
        }
    }
    Plane out(in.height - kSsimWindow + 1, horiz.width);
    for (int r = 0; r < out.height; ++r) {
        for (int c = 0; c < out.width; ++c) {
            double s = 0.0;
            for (int k = 0; k < kSsimWindow; ++k) {
                s += w[k] * horiz(r + k, c);
            }
            out(r, c) = s;
        }
    }
    return out;
}

/// Adjoint of filterValid: scatters a valid-region plane back onto the full plane.
inline Plane
filterValidAdjoint(const Plane &in, int height, int width) {
    const auto &w = ssimWeights();
    Plane vert(height, in.width);
    for (int r = 0; r < in.height; ++r) {
        for (int c = 0; c < in.width; ++c) {
            for (int k = 0; k < kSsimWindow; ++k) {
                vert(r + k, c) += w[k] * in(r, c);
            }
        }
    }
    Plane out(height, width);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < vert.width; ++c) {
            for (int k = 0; k < kSsimWindow; ++k) {
                out(r, c + k) += w[k] * vert(r, c);
            }
        }
    }
    return out;
}

template <typename Real>
Plane
channelPlane(const ImageT<Real> &img, int ch) {
    Plane p(img.height, img.width);
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            p(r, c) = static_cast<double>(img.at(r, c, ch));
        }
    }
    return p;
}

} // namespace detail

struct SsimResult {
    double value = 0.0;
    /// d value / d a, interleaved RGB like the image; empty unless requested.
    std::vector<double> gradient;
};

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, data
/// range 1. The map covers positions whose window lies inside the image and is averaged over
/// positions and channels. Optionally returns the gradient with respect to `a`.
template <typename RealA, typename RealB>
SsimResult
ssimWithGradient(const ImageT<RealA> &a, const ImageT<RealB> &b, bool wantGradient) {
    detail::requireSameDims(a, b, "ssim");
    if (a.height < kSsimWindow || a.width < kSsimWindow) {
        throw InvalidParameter("ssim requires images of at least 11x11 pixels");
    }
    using detail::Plane;
    const double c1 = kSsimK1 * kSsimK1;
    const double c2 = kSsimK2 * kSsimK2;
    const int vh    = a.height - kSsimWindow + 1;
    const int vw    = a.width - kSsimWindow + 1;
    const double n  = 3.0 * vh * vw;

    SsimResult result;
    if (wantGradient) {
        result.gradient.assign(a.pixels.size(), 0.0);
    }
    double total = 0.0;
    for (int ch = 0; ch < 3; ++ch) {
        const Plane x = detail::channelPlane(a, ch);
        const Plane y = detail::channelPlane(b, ch);
        Plane xx(x.height, x.width), yy(x.height, x.width), xy(x.height, x.width);
        for (std::size_t k = 0; k < x.v.size(); ++k) {
            xx.v[k] = x.v[k] * x.v[k];
            yy.v[k] = y.v[k] * y.v[k];
            xy.v[k] = x.v[k] * y.v[k];
        }
        const Plane mx = detail::filterValid(x), my = detail::filterValid(y);
        const Plane exx = detail::filterValid(xx), eyy = detail::filterValid(yy);
        const Plane exy = detail::filterValid(xy);

        Plane gMean(vh, vw), gSq(vh, vw), gCross(vh, vw);
        for (std::size_t k = 0; k < mx.v.size(); ++k) {
            const double mux = mx.v[k], muy = my.v[k];
            const double a1 = 2.0 * mux * muy + c1;
            const double a2 = 2.0 * (exy.v[k] - mux * muy) + c2;
            const double b1 = mux * mux + muy * muy + c1;
            const double b2 = (exx.v[k] - mux * mux) + (eyy.v[k] - muy * muy) + c2;
            const double s  = (a1 * a2) / (b1 * b2);
            total += s;
            if (wantGradient) {
                gMean.v[k] = s * (2.0 * muy / a1 - 2.0 * mux / b1 - 2.0 * muy / a2 + 2.0 * mux / b2) / n;
                gSq.v[k]    = -s / b2 / n;
                gCross.v[k] = 2.0 * s / a2 / n;
            }
        }
        if (wantGradient) {
            const Plane dMean  = detail::filterValidAdjoint(gMean, a.height, a.width);
            const Plane dSq    = detail::filterValidAdjoint(gSq, a.height, a.width);
            const Plane dCross = detail::filterValidAdjoint(gCross, a.height, a.width);
            for (int r = 0; r < a.height; ++r) {
                for (int c = 0; c < a.width; ++c) {
                    result.gradient[(static_cast<std::size_t>(r) * a.width + c) * 3 + ch] =
                        dMean(r, c) + 2.0 * x(r, c) * dSq(r, c) + y(r, c) * dCross(r, c);
                }
            }
        }
    }
    result.value = total / n;
    return result;
}

template <typename RealA, typename RealB>
double
ssim(const ImageT<RealA> &a, const ImageT<RealB> &b) {
    return ssimWithGradient(a, b, false).value;
}

template <typename RealA, typename RealB>
Metrics
compareImages(const ImageT<RealA> &a, const ImageT<RealB> &b) {
    return {psnr(a, b), ssim(a, b)};
}

} // namespace splatter
