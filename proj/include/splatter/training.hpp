// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0
//
// Photometric and scale losses, Adam, per-scene splatter image fitting, and a small
// convolutional predictor trained across scenes.
//
#pragma once

#include "splatter/core_types.hpp"
#include "splatter/errors.hpp"
#include "splatter/fusion.hpp"
#include "splatter/metrics.hpp"
#include "splatter/renderer.hpp"
#include "splatter/splatter_image.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace splatter {

struct LossConfig {
    double lambdaBig   = 0.01;
    double lambdaSmall = 0.01;
    /// Threshold on activated scale components.
    double sBig = 20.0;
    /// Threshold on raw log-scale components.
    double sHatSmall = -5.0;
    /// Mixing weight w of the optional term: (1 - w) L2 + w (1 - SSIM). Zero disables it.
    double ssimWeight = 0.0;

    void
    validate() const {
        if (!(lambdaBig >= 0) || !(lambdaSmall >= 0) || !std::isfinite(lambdaBig) ||
            !std::isfinite(lambdaSmall)) {
            throw InvalidParameter("regularizer weights must be finite and non-negative");
        }
        if (!std::isfinite(sBig) || !std::isfinite(sHatSmall)) {
            throw InvalidParameter("regularizer thresholds must be finite");
        }
        if (!(ssimWeight >= 0.0 && ssimWeight <= 1.0)) {
            throw InvalidParameter("ssim weight must lie in [0, 1]");
        }
    }
};

/// A scalar loss and its gradient with respect to the input values.
struct ScalarLoss {
    double value = 0.0;
    std::vector<double> gradient;
};

/// Mean squared error over all pixel channels.
template <typename RealA, typename RealB>
ScalarLoss
l2Loss(const ImageT<RealA> &rendered, const ImageT<RealB> &target) {
    detail::requireSameDims(rendered, target, "l2Loss");
    const double n = static_cast<double>(rendered.pixels.size());
    ScalarLoss out;
    out.gradient.resize(rendered.pixels.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < rendered.pixels.size(); ++k) {
        const double d = static_cast<double>(rendered.pixels[k]) - static_cast<double>(target.pixels[k]);
        sum += d * d;
        out.gradient[k] = 2.0 * d / n;
    }
    out.value = sum / n;
    return out;
}

/// L2, or the (1 - w) L2 + w (1 - SSIM) mixture when cfg.ssimWeight > 0.
template <typename RealA, typename RealB>
ScalarLoss
photometricLoss(const ImageT<RealA> &rendered, const ImageT<RealB> &target, const LossConfig &cfg) {
    ScalarLoss out = l2Loss(rendered, target);
    if (cfg.ssimWeight <= 0.0) {
        return out;
    }
    const SsimResult s = ssimWithGradient(rendered, target, true);
    const double w     = cfg.ssimWeight;
    out.value          = (1.0 - w) * out.value + w * (1.0 - s.value);
    for (std::size_t k = 0; k < out.gradient.size(); ++k) {
        out.gradient[k] = (1.0 - w) * out.gradient[k] - w * s.gradient[k];
    }
    return out;
}

/// Mean of the scales above sBig; 0 when none is.
inline ScalarLoss
regBig(std::span<const double> scales, double sBig) {
    ScalarLoss out;
    out.gradient.assign(scales.size(), 0.0);
    double sum        = 0.0;
    std::size_t count = 0;
    for (double s : scales) {
        if (s > sBig) {
            sum += s;
            ++count;
        }
    }
    if (count == 0) {
        return out;
    }
    out.value = sum / static_cast<double>(count);
    for (std::size_t k = 0; k < scales.size(); ++k) {
        if (scales[k] > sBig) {
            out.gradient[k] = 1.0 / static_cast<double>(count);
        }
    }
    return out;
}

/// Mean of the negated raw log-scales below sHatSmall; 0 when none is.
inline ScalarLoss
regSmall(std::span<const double> rawLogScales, double sHatSmall) {
    ScalarLoss out;
    out.gradient.assign(rawLogScales.size(), 0.0);
    double sum        = 0.0;
    std::size_t count = 0;
    for (double s : rawLogScales) {
        if (s < sHatSmall) {
            sum -= s;
            ++count;
        }
    }
    if (count == 0) {
        return out;
    }
    out.value = sum / static_cast<double>(count);
    for (std::size_t k = 0; k < rawLogScales.size(); ++k) {
        if (rawLogScales[k] < sHatSmall) {
            out.gradient[k] = -1.0 / static_cast<double>(count);
        }
    }
    return out;
}

// Adam

struct OptimState {
    double learningRate = 1e-3;
    double beta1        = 0.9;
    double beta2        = 0.999;
    double epsilon      = 1e-8;
    std::uint64_t step  = 0;
    std::vector<double> firstMoment;
    std::vector<double> secondMoment;

    OptimState() = default;
    OptimState(std::size_t parameterCount, double lr)
        : learningRate(lr), firstMoment(parameterCount, 0.0), secondMoment(parameterCount, 0.0) {}
};

/// One bias-corrected Adam update. A non-finite gradient aborts the step before any state
/// changes.
inline void
adamStep(OptimState &state, std::span<double> params, std::span<const double> grads) {
    if (params.size() != grads.size() || state.firstMoment.size() != params.size() ||
        state.secondMoment.size() != params.size()) {
        throw DimensionMismatch("adamStep: parameter, gradient and moment sizes differ");
    }
    for (std::size_t k = 0; k < grads.size(); ++k) {
        if (!std::isfinite(grads[k])) {
            throw NonFiniteGradient(k, "non-finite gradient at parameter " + std::to_string(k));
        }
    }
    ++state.step;
    const double t    = static_cast<double>(state.step);
    const double corr1 = 1.0 - std::pow(state.beta1, t);
    const double corr2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        double &m = state.firstMoment[k];
        double &v = state.secondMoment[k];
        m         = state.beta1 * m + (1.0 - state.beta1) * grads[k];
        v         = state.beta2 * v + (1.0 - state.beta2) * grads[k] * grads[k];
        params[k] -= state.learningRate * (m / corr1) / (std::sqrt(v / corr2) + state.epsilon);
    }
}

// Rendering loss through a splatter image

/// A posed image.
struct View {
    Camera camera;
    Image image;
};

/// Raw values that start every pixel as a mid-gray, half-transparent Gaussian at mid depth,
/// roughly one pixel wide.
inline RawPixelParams
initialRawPixel(int height, int width, int order, double zNear, double zFar) {
    RawPixelParams raw;
    raw.logScale = Vec3::Constant(std::log(2.0 * (zFar - zNear) / std::max(height, width)));
    raw.shRaw.assign(static_cast<std::size_t>(shChannelCount(order)), 0.0);
    for (int ch = 0; ch < 3; ++ch) {
        raw.shRaw[ch] = 0.5;
    }
    return raw;
}

inline SplatterImage
initialSplatterImage(int height, int width, int order, double zNear, double zFar) {
    SplatterImage m(height, width, order, zNear, zFar);
    const RawPixelParams raw = initialRawPixel(height, width, order, m.zNear(), m.zFar());
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            m.setPixel(r, c, raw);
        }
    }
    return m;
}

struct SplatterLoss {
    double value = 0.0;
    /// Gradient with respect to the raw channels, laid out like SplatterImage::data().
    std::vector<double> rawGradient;
};

namespace detail {

inline void
accumulate(GaussianGrad &into, const GaussianGrad &g) {
    into.dOpacity += g.dOpacity;
    into.dMean += g.dMean;
    into.dLogScale += g.dLogScale;
    into.dQuat += g.dQuat;
    if (into.dSh.size() < g.dSh.size()) {
        into.dSh.resize(g.dSh.size(), 0.0);
    }
    for (std::size_t k = 0; k < g.dSh.size(); ++k) {
        into.dSh[k] += g.dSh[k];
    }
}

template <typename Real>
void
renderTargets(const GaussianCloud &world, std::span<const View *const> targets, const LossConfig &cfg,
              const RenderOptions &opts, double &loss, std::vector<GaussianGrad> &acc) {
    const double inv = 1.0 / static_cast<double>(targets.size());
    for (const View *view : targets) {
        const auto rendered    = rasterize<Real>(world, view->camera, opts).image;
        const ScalarLoss photo = photometricLoss(rendered, view->image, cfg);
        loss += inv * photo.value;
        std::vector<Real> upstream(photo.gradient.size());
        for (std::size_t k = 0; k < upstream.size(); ++k) {
            upstream[k] = static_cast<Real>(inv * photo.gradient[k]);
        }
        const GradientBundle grads = rasterizeBackward<Real>(world, view->camera, upstream, opts);
        for (std::size_t i = 0; i < grads.size(); ++i) {
            accumulate(acc[i], grads[i]);
        }
    }
}

} // namespace detail

/// Total loss of a splatter image anchored at `reference`: the mean photometric loss over the
/// targets plus the weighted scale regularizers, with its gradient on the raw channels. The
/// unpacked cloud is warped out of the reference camera frame before rendering.
inline SplatterLoss
splatterLossAndGradient(const SplatterImage &m, const Camera &reference,
                        std::span<const View *const> targets, const LossConfig &cfg,
                        const RenderOptions &opts = {}, bool f64 = false) {
    if (targets.empty()) {
        throw InvalidParameter("splatterLossAndGradient needs at least one target view");
    }
    const Camera refCam       = unpackCamera(m, reference);
    const GaussianCloud local = unpack(m, refCam);
    const RigidTransform toWorld = reference.worldToCam.inverse();
    const GaussianCloud world    = warpCloud(local, toWorld, reference.frame);

    SplatterLoss out;
    const int kc = m.colorChannels();
    std::vector<GaussianGrad> acc(local.size());
    for (auto &g : acc) {
        g.dSh.assign(static_cast<std::size_t>(kc), 0.0);
    }
    if (f64) {
        detail::renderTargets<double>(world, targets, cfg, opts, out.value, acc);
    } else {
        detail::renderTargets<float>(world, targets, cfg, opts, out.value, acc);
    }

    const std::size_t channels = static_cast<std::size_t>(m.channelCount());
    const auto data            = m.data();
    out.rawGradient.assign(data.size(), 0.0);
    std::vector<double> raw(channels), pixelGrad(channels);
    for (int r = 0; r < m.height(); ++r) {
        for (int c = 0; c < m.width(); ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * m.width() + c;
            for (std::size_t k = 0; k < channels; ++k) {
                raw[k] = data[i * channels + k];
            }
            const GaussianGrad back = warpBackward(local.gaussians[i], toWorld, acc[i]);
            activationBackward(raw, refCam.pixelRay(r, c), m.zNear(), m.zFar(), back, pixelGrad);
            for (std::size_t k = 0; k < channels; ++k) {
                out.rawGradient[i * channels + k] = pixelGrad[k];
            }
        }
    }

    const std::size_t n = local.size();
    std::vector<double> scales(3 * n), logScales(3 * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k) {
            logScales[3 * i + k] = data[i * channels + channel::kScale + k];
            scales[3 * i + k]    = local.gaussians[i].scale()[k];
        }
    }
    const ScalarLoss big   = regBig(scales, cfg.sBig);
    const ScalarLoss small = regSmall(logScales, cfg.sHatSmall);
    out.value += cfg.lambdaBig * big.value + cfg.lambdaSmall * small.value;
    for (std::size_t i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k) {
            const std::size_t j = 3 * i + k;
            // d s / d s_hat = s
            out.rawGradient[i * channels + channel::kScale + k] +=
                cfg.lambdaBig * big.gradient[j] * scales[j] + cfg.lambdaSmall * small.gradient[j];
        }
    }
    return out;
}

namespace detail {

/// Chooses min(count, pool) distinct indices from [0, pool) by partial Fisher-Yates.
inline std::vector<std::size_t>
sampleDistinct(std::mt19937_64 &rng, std::size_t pool, std::size_t count) {
    std::vector<std::size_t> idx(pool);
    for (std::size_t k = 0; k < pool; ++k) {
        idx[k] = k;
    }
    const std::size_t take = std::min(count, pool);
    for (std::size_t k = 0; k < take; ++k) {
        const std::size_t j = k + static_cast<std::size_t>(rng() % (pool - k));
        std::swap(idx[k], idx[j]);
    }
    idx.resize(take);
    return idx;
}

inline void
writeBack(SplatterImage &m, std::span<const double> params) {
    auto data = m.data();
    for (std::size_t k = 0; k < data.size(); ++k) {
        data[k] = static_cast<float>(params[k]);
    }
}

} // namespace detail

// Per-scene fitting

struct FitOptions {
    int steps              = 2000;
    double learningRate    = 0.02;
    int targetsPerStep     = 2;
    std::uint64_t seed     = 0;
    bool f64               = false;
    RenderOptions render;
};

struct FitResult {
    SplatterImage image;
    std::vector<double> lossTrace;
};

/// Optimizes the raw channels of `init` against the views. views[0] is the reference camera
/// the splatter image is anchored to; every view is a candidate target.
inline FitResult
fitSplatter(std::span<const View> views, const SplatterImage &init, const LossConfig &cfg,
            const FitOptions &opts) {
    cfg.validate();
    if (views.size() < 2) {
        throw InvalidParameter("fitSplatter requires at least two views");
    }
    if (opts.steps < 0 || opts.targetsPerStep < 1 || !(opts.learningRate > 0)) {
        throw InvalidParameter("fitSplatter: steps >= 0, targets >= 1 and a positive rate required");
    }
    FitResult result{init, {}};
    std::vector<double> params(init.data().begin(), init.data().end());
    OptimState state(params.size(), opts.learningRate);
    std::mt19937_64 rng(opts.seed);
    std::vector<const View *> targets;
    for (int step = 0; step < opts.steps; ++step) {
        targets.clear();
        for (std::size_t j : detail::sampleDistinct(rng, views.size(), opts.targetsPerStep)) {
            targets.push_back(&views[j]);
        }
        const SplatterLoss loss =
            splatterLossAndGradient(result.image, views[0].camera, targets, cfg, opts.render, opts.f64);
        result.lossTrace.push_back(loss.value);
        adamStep(state, params, loss.rawGradient);
        detail::writeBack(result.image, params);
    }
    return result;
}

// Predictor network

struct ConvShape {
    int in  = 0;
    int out = 0;

    std::size_t weightCount() const { return static_cast<std::size_t>(in) * out * 9; }

    friend bool operator==(const ConvShape &, const ConvShape &) = default;
};

inline constexpr double kLeakySlope = 0.01;

/// 3x3 same-padded convolutions with leaky ReLU between layers and a linear last layer.
/// Parameters live in one flat vector: per layer, weights in (out, in, 3, 3) order, then biases.
class PredictorNet {
  public:
    PredictorNet() = default;

    PredictorNet(std::vector<ConvShape> shapes, std::vector<double> params)
        : mShapes(std::move(shapes)), mParams(std::move(params)) {
        validateShapes();
        if (mParams.size() != expectedParameterCount()) {
            throw DimensionMismatch("predictor parameter count does not match layer shapes");
        }
    }

    /// 3 -> hidden -> hidden -> hidden -> 12 + k_c. Hidden layers use fan-in scaled uniform
    /// weights and zero bias; the last layer uses small weights and `outputBias`.
    static PredictorNet
    create(int order, std::uint64_t seed, std::span<const double> outputBias, int hidden = 32,
           double outputGain = 0.05) {
        const int outChannels = kGeometryChannels + shChannelCount(order);
        if (static_cast<int>(outputBias.size()) != outChannels) {
            throw DimensionMismatch("output bias must have 12 + k_c entries");
        }
        if (hidden < 1) {
            throw InvalidParameter("hidden width must be positive");
        }
        std::vector<ConvShape> shapes{{3, hidden}, {hidden, hidden}, {hidden, hidden}, {hidden, outChannels}};
        std::mt19937_64 rng(seed);
        std::vector<double> params;
        for (std::size_t l = 0; l < shapes.size(); ++l) {
            const bool last    = l + 1 == shapes.size();
            const double bound = std::sqrt(6.0 / (shapes[l].in * 9.0)) * (last ? outputGain : 1.0);
            std::uniform_real_distribution<double> uni(-bound, bound);
            for (std::size_t k = 0; k < shapes[l].weightCount(); ++k) {
                params.push_back(uni(rng));
            }
            for (int o = 0; o < shapes[l].out; ++o) {
                params.push_back(last ? outputBias[o] : 0.0);
            }
        }
        return PredictorNet(std::move(shapes), std::move(params));
    }

    const std::vector<ConvShape> &shapes() const noexcept { return mShapes; }
    std::size_t layerCount() const noexcept { return mShapes.size(); }
    int outputChannels() const { return mShapes.back().out; }

    std::span<double> parameters() noexcept { return mParams; }
    std::span<const double> parameters() const noexcept { return mParams; }

    std::size_t
    weightOffset(std::size_t layer) const {
        std::size_t off = 0;
        for (std::size_t l = 0; l < layer; ++l) {
            off += mShapes[l].weightCount() + static_cast<std::size_t>(mShapes[l].out);
        }
        return off;
    }
    std::size_t biasOffset(std::size_t layer) const { return weightOffset(layer) + mShapes[layer].weightCount(); }

    std::span<const double>
    weights(std::size_t layer) const {
        return std::span<const double>(mParams).subspan(weightOffset(layer), mShapes[layer].weightCount());
    }
    std::span<const double>
    biases(std::size_t layer) const {
        return std::span<const double>(mParams).subspan(biasOffset(layer), mShapes[layer].out);
    }

    friend bool operator==(const PredictorNet &, const PredictorNet &) = default;

  private:
    std::size_t
    expectedParameterCount() const {
        std::size_t n = 0;
        for (const auto &s : mShapes) {
            n += s.weightCount() + static_cast<std::size_t>(s.out);
        }
        return n;
    }

    void
    validateShapes() const {
        if (mShapes.empty()) {
            throw InvalidParameter("predictor needs at least one layer");
        }
        if (mShapes.front().in != 3) {
            throw InvalidParameter("predictor input must have 3 channels");
        }
        for (std::size_t l = 0; l < mShapes.size(); ++l) {
            if (mShapes[l].in < 1 || mShapes[l].out < 1) {
                throw InvalidParameter("predictor layer widths must be positive");
            }
            if (l > 0 && mShapes[l].in != mShapes[l - 1].out) {
                throw DimensionMismatch("predictor layer " + std::to_string(l) +
                                        " input does not match the previous output");
            }
        }
        const int last = mShapes.back().out;
        if (last != kGeometryChannels + 3 && last != kGeometryChannels + 12) {
            throw InvalidParameter("predictor output must have 12 + k_c channels with k_c in {3, 12}");
        }
    }

    std::vector<ConvShape> mShapes;
    std::vector<double> mParams;
};

namespace detail {

using ColMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// (channels * 9) x (height * width) patch matrix; row c * 9 + ky * 3 + kx.
inline ColMatrix
im2col(const ColMatrix &act, int height, int width) {
    const int channels = static_cast<int>(act.rows());
    ColMatrix cols     = ColMatrix::Zero(channels * 9, static_cast<Eigen::Index>(height) * width);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const Eigen::Index p = static_cast<Eigen::Index>(y) * width + x;
            for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= height) {
                    continue;
                }
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = x + kx - 1;
                    if (sx < 0 || sx >= width) {
                        continue;
                    }
                    const Eigen::Index src = static_cast<Eigen::Index>(sy) * width + sx;
                    for (int c = 0; c < channels; ++c) {
                        cols(c * 9 + ky * 3 + kx, p) = act(c, src);
                    }
                }
            }
        }
    }
    return cols;
}

/// Adjoint of im2col.
inline ColMatrix
col2im(const ColMatrix &cols, int channels, int height, int width) {
    ColMatrix act = ColMatrix::Zero(channels, static_cast<Eigen::Index>(height) * width);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const Eigen::Index p = static_cast<Eigen::Index>(y) * width + x;
            for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= height) {
                    continue;
                }
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = x + kx - 1;
                    if (sx < 0 || sx >= width) {
                        continue;
                    }
                    const Eigen::Index dst = static_cast<Eigen::Index>(sy) * width + sx;
                    for (int c = 0; c < channels; ++c) {
                        act(c, dst) += cols(c * 9 + ky * 3 + kx, p);
                    }
                }
            }
        }
    }
    return act;
}

} // namespace detail

/// Intermediate values kept from a forward pass for backpropagation.
struct PredictorTape {
    int height = 0, width = 0;
    std::vector<detail::ColMatrix> patches;    // im2col of each layer input
    std::vector<detail::ColMatrix> preActivations;
    /// Raw output, laid out like SplatterImage::data().
    std::vector<double> output;
};

/// Raw (12 + k_c) x H x W prediction, returned interleaved per pixel.
template <typename Real>
PredictorTape
predictorForwardTape(const PredictorNet &net, const ImageT<Real> &image) {
    const int h = image.height, w = image.width;
    if (h < 1 || w < 1 || image.pixels.size() != static_cast<std::size_t>(h) * w * 3) {
        throw DimensionMismatch("predictor input image is malformed");
    }
    PredictorTape tape;
    tape.height = h;
    tape.width  = w;
    const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
    detail::ColMatrix act(3, hw);
    for (Eigen::Index p = 0; p < hw; ++p) {
        for (int c = 0; c < 3; ++c) {
            act(c, p) = static_cast<double>(image.pixels[static_cast<std::size_t>(p) * 3 + c]);
        }
    }
    for (std::size_t l = 0; l < net.layerCount(); ++l) {
        const ConvShape &s = net.shapes()[l];
        tape.patches.push_back(detail::im2col(act, h, w));
        const auto weights = net.weights(l);
        const auto biases  = net.biases(l);
        const Eigen::Map<const detail::RowMatrix> wm(weights.data(), s.out, static_cast<Eigen::Index>(s.in) * 9);
        const Eigen::Map<const Eigen::VectorXd> bv(biases.data(), s.out);
        detail::ColMatrix z = wm * tape.patches.back();
        z.colwise() += bv;
        tape.preActivations.push_back(z);
        if (l + 1 < net.layerCount()) {
            act = z.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
        } else {
            act = z;
        }
    }
    const int out = net.outputChannels();
    tape.output.resize(static_cast<std::size_t>(hw) * out);
    for (Eigen::Index p = 0; p < hw; ++p) {
        for (int c = 0; c < out; ++c) {
            tape.output[static_cast<std::size_t>(p) * out + c] = act(c, p);
        }
    }
    return tape;
}

/// Splatter image predicted from `image`; no activation is applied to the raw channels.
template <typename Real>
SplatterImage
predictorForward(const PredictorNet &net, const ImageT<Real> &image, double zNear, double zFar) {
    const PredictorTape tape = predictorForwardTape(net, image);
    SplatterImage m(image.height, image.width,
                    shOrderForChannelCount(net.outputChannels() - kGeometryChannels), zNear, zFar);
    detail::writeBack(m, tape.output);
    return m;
}

/// Gradient of sum(upstream * output) with respect to the flat parameter vector.
inline std::vector<double>
predictorBackward(const PredictorNet &net, const PredictorTape &tape, std::span<const double> upstream) {
    const int h = tape.height, w = tape.width;
    const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
    const int out         = net.outputChannels();
    if (upstream.size() != static_cast<std::size_t>(hw) * out || tape.patches.size() != net.layerCount()) {
        throw DimensionMismatch("predictorBackward: upstream does not match the forward pass");
    }
    std::vector<double> grads(net.parameters().size(), 0.0);
    detail::ColMatrix dz(out, hw);
    for (Eigen::Index p = 0; p < hw; ++p) {
        for (int c = 0; c < out; ++c) {
            dz(c, p) = upstream[static_cast<std::size_t>(p) * out + c];
        }
    }
    for (std::size_t li = net.layerCount(); li-- > 0;) {
        const ConvShape &s = net.shapes()[li];
        const Eigen::Index k = static_cast<Eigen::Index>(s.in) * 9;
        Eigen::Map<detail::RowMatrix> dw(grads.data() + net.weightOffset(li), s.out, k);
        Eigen::Map<Eigen::VectorXd> db(grads.data() + net.biasOffset(li), s.out);
        dw.noalias() = dz * tape.patches[li].transpose();
        db           = dz.rowwise().sum();
        if (li == 0) {
            break;
        }
        const auto weights = net.weights(li);
        const Eigen::Map<const detail::RowMatrix> wm(weights.data(), s.out, k);
        const detail::ColMatrix dcols = wm.transpose() * dz;
        detail::ColMatrix da          = detail::col2im(dcols, s.in, h, w);
        const detail::ColMatrix &zPrev = tape.preActivations[li - 1];
        dz = da.binaryExpr(zPrev, [](double g, double z) { return z > 0.0 ? g : kLeakySlope * g; });
    }
    return grads;
}

template <typename Real>
std::vector<double>
predictorBackward(const PredictorNet &net, const ImageT<Real> &image, std::span<const double> upstream) {
    return predictorBackward(net, predictorForwardTape(net, image), upstream);
}

// SPNT checkpoint

inline constexpr std::uint32_t kPredictorFileVersion = 1;

inline std::vector<unsigned char>
encodePredictor(const PredictorNet &net) {
    std::vector<unsigned char> out{'S', 'P', 'N', 'T'};
    detail::putU32(out, kPredictorFileVersion);
    detail::putU32(out, static_cast<std::uint32_t>(net.layerCount()));
    for (std::size_t l = 0; l < net.layerCount(); ++l) {
        detail::putU32(out, static_cast<std::uint32_t>(net.shapes()[l].in));
        detail::putU32(out, static_cast<std::uint32_t>(net.shapes()[l].out));
        for (double v : net.weights(l)) {
            detail::putF32(out, static_cast<float>(v));
        }
        for (double v : net.biases(l)) {
            detail::putF32(out, static_cast<float>(v));
        }
    }
    return out;
}

inline PredictorNet
decodePredictor(std::span<const unsigned char> bytes) {
    detail::ByteReader in(bytes);
    in.expectMagic("SPNT");
    const std::size_t versionAt = in.offset();
    const std::uint32_t version = in.u32("version");
    if (version != kPredictorFileVersion) {
        throw ParseError(ParseError::Kind::VersionMismatch, versionAt,
                         "unsupported SPNT version " + std::to_string(version));
    }
    const std::size_t countAt = in.offset();
    const std::uint32_t layers = in.u32("layer count");
    if (layers == 0 || layers > 64) {
        throw ParseError(ParseError::Kind::Invalid, countAt, "invalid layer count " + std::to_string(layers));
    }
    std::vector<ConvShape> shapes;
    std::vector<double> params;
    for (std::uint32_t l = 0; l < layers; ++l) {
        const std::size_t shapeAt = in.offset();
        const std::uint32_t cin   = in.u32("input channels");
        const std::uint32_t cout  = in.u32("output channels");
        if (cin == 0 || cout == 0 || cin > 4096 || cout > 4096 ||
            (l == 0 && cin != 3) || (l > 0 && static_cast<int>(cin) != shapes.back().out)) {
            throw ParseError(ParseError::Kind::Invalid, shapeAt,
                             "layer " + std::to_string(l) + " has inconsistent channel counts");
        }
        if (l + 1 == layers && cout != kGeometryChannels + 3 && cout != kGeometryChannels + 12) {
            throw ParseError(ParseError::Kind::InvalidChannelCount, shapeAt + 4,
                             "output layer must have 12 + k_c channels");
        }
        shapes.push_back({static_cast<int>(cin), static_cast<int>(cout)});
        const std::size_t count = shapes.back().weightCount() + cout;
        if (in.remaining() < 4 * count) {
            throw ParseError(ParseError::Kind::Truncated, bytes.size(), "truncated predictor weights");
        }
        for (std::size_t k = 0; k < count; ++k) {
            params.push_back(in.f32("weights"));
        }
    }
    in.expectEnd();
    return PredictorNet(std::move(shapes), std::move(params));
}

inline void
writePredictorFile(const PredictorNet &net, const std::filesystem::path &path) {
    detail::writeAllBytes(path, encodePredictor(net));
}

inline PredictorNet
readPredictorFile(const std::filesystem::path &path) {
    return decodePredictor(detail::readAllBytes(path));
}

// Amortized training

struct TrainOptions {
    /// Iterations; each predicts one source view and renders targetsPerStep targets.
    int steps           = 1000;
    double learningRate = 5e-4;
    int targetsPerStep  = 4;
    /// Adam moments are cleared every this many iterations; 0 keeps them for the whole run.
    /// Without restarts the moments left by the large early gradients hold training on the
    /// mean-image plateau for thousands of iterations.
    int restartEvery    = 250;
    std::uint64_t seed  = 0;
    bool f64            = false;
    RenderOptions render;
};

struct TrainResult {
    PredictorNet net;
    std::vector<double> lossTrace;
};

/// Trains on multi-view scenes. Each iteration takes the next scene of a per-epoch shuffled
/// order, predicts a splatter image from its view 0 and renders targets drawn from its other
/// views.
inline TrainResult
trainPredictor(std::span<const std::vector<View>> dataset, PredictorNet net, const LossConfig &cfg,
               const TrainOptions &opts) {
    cfg.validate();
    if (opts.steps < 0 || opts.targetsPerStep < 1 || !(opts.learningRate > 0) || opts.restartEvery < 0) {
        throw InvalidParameter(
            "trainPredictor: steps >= 0, targets >= 1, restartEvery >= 0 and a positive rate required");
    }
    for (const auto &scene : dataset) {
        if (scene.size() < 2) {
            throw InvalidParameter("every training scene needs a source view and at least one target");
        }
    }
    TrainResult result{std::move(net), {}};
    if (opts.steps == 0) {
        return result;
    }
    if (dataset.empty()) {
        throw InvalidParameter("trainPredictor needs at least one scene");
    }
    OptimState state(result.net.parameters().size(), opts.learningRate);
    std::mt19937_64 rng(opts.seed);
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::vector<const View *> targets;
    for (int step = 0; step < opts.steps; ++step) {
        if (opts.restartEvery > 0 && step > 0 && step % opts.restartEvery == 0) {
            state = OptimState(result.net.parameters().size(), opts.learningRate);
        }
        if (cursor == order.size()) {
            order  = detail::sampleDistinct(rng, dataset.size(), dataset.size());
            cursor = 0;
        }
        const std::vector<View> &scene = dataset[order[cursor++]];
        const View &source             = scene.front();
        targets.clear();
        for (std::size_t j : detail::sampleDistinct(rng, scene.size() - 1, opts.targetsPerStep)) {
            targets.push_back(&scene[j + 1]);
        }
        const PredictorTape tape = predictorForwardTape(result.net, source.image);
        SplatterImage predicted(source.image.height, source.image.width,
                                shOrderForChannelCount(result.net.outputChannels() - kGeometryChannels),
                                source.camera.zNear, source.camera.zFar);
        detail::writeBack(predicted, tape.output);
        const SplatterLoss loss =
            splatterLossAndGradient(predicted, source.camera, targets, cfg, opts.render, opts.f64);
        result.lossTrace.push_back(loss.value);
        const std::vector<double> grads = predictorBackward(result.net, tape, loss.rawGradient);
        adamStep(state, result.net.parameters(), grads);
    }
    return result;
}

} // namespace splatter
