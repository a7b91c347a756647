// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0
//
// The splatter image: an H x W grid of raw per-pixel Gaussian parameters, their activation into
// camera-frame Gaussians, and the SPLT1 binary format.
//
// Channel layout per pixel (12 + k_c scalars):
//   [0]      opacity logit
//   [1..3]   offset (dx, dy, dz), scene units
//   [4]      depth logit
//   [5..7]   log scale
//   [8..11]  raw quaternion (w, x, y, z)
//   [12..]   color coefficients (dc, then the 3x3 linear block row-major when k_c = 12)
//
#pragma once

#include "splatter/core_types.hpp"
#include "splatter/errors.hpp"
#include "splatter/sh_color.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace splatter {

namespace channel {
inline constexpr int kOpacity = 0;
inline constexpr int kOffset  = 1;
inline constexpr int kDepth   = 4;
inline constexpr int kScale   = 5;
inline constexpr int kQuat    = 8;
inline constexpr int kColor   = 12;
} // namespace channel

inline constexpr int kGeometryChannels = 12;

inline double
sigmoid(double x) {
    if (x >= 0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Raw (pre-activation) parameters of one pixel.
struct RawPixelParams {
    double opacityLogit = 0.0;
    Vec3 offset         = Vec3::Zero();
    double depthLogit   = 0.0;
    Vec3 logScale       = Vec3::Zero();
    Quat quatRaw        = identityQuat();
    std::vector<double> shRaw = std::vector<double>(3, 0.0);

    int colorChannels() const { return static_cast<int>(shRaw.size()); }
    int channelCount() const { return kGeometryChannels + colorChannels(); }

    static RawPixelParams
    fromChannels(std::span<const double> ch) {
        if (ch.size() != 15 && ch.size() != 24) {
            throw InvalidParameter("raw pixel must have 12 + k_c channels with k_c in {3, 12}");
        }
        RawPixelParams p;
        p.opacityLogit = ch[channel::kOpacity];
        p.offset       = Vec3(ch[1], ch[2], ch[3]);
        p.depthLogit   = ch[channel::kDepth];
        p.logScale     = Vec3(ch[5], ch[6], ch[7]);
        p.quatRaw      = Quat(ch[8], ch[9], ch[10], ch[11]);
        p.shRaw.assign(ch.begin() + channel::kColor, ch.end());
        return p;
    }

    std::vector<double>
    channels() const {
        std::vector<double> ch{opacityLogit, offset[0],  offset[1],  offset[2],
                               depthLogit,   logScale[0], logScale[1], logScale[2],
                               quatRaw[0],   quatRaw[1], quatRaw[2], quatRaw[3]};
        ch.insert(ch.end(), shRaw.begin(), shRaw.end());
        return ch;
    }
};

/// Activated depth d = (z_far - z_near) sigmoid(depth_logit) + z_near.
inline double
activateDepth(double depthLogit, double zNear, double zFar) {
    return (zFar - zNear) * sigmoid(depthLogit) + zNear;
}

/// Activation along an explicit camera ray u = (u1, u2, 1): mean = (u1 d + dx, u2 d + dy, d + dz).
inline Gaussian3D
activateAlongRay(const RawPixelParams &raw, const Vec3 &ray, double zNear, double zFar) {
    const auto ch = raw.channels();
    for (double v : ch) {
        if (!std::isfinite(v)) {
            throw InvalidParameter("raw pixel parameters must be finite");
        }
    }
    const double n = raw.quatRaw.norm();
    if (n < 1e-12) {
        throw NumericalDegeneracy("degenerate rotation: raw quaternion norm below 1e-12");
    }
    const double depth = activateDepth(raw.depthLogit, zNear, zFar);
    const Vec3 mean(ray[0] * depth + raw.offset[0], ray[1] * depth + raw.offset[1],
                    depth + raw.offset[2]);
    const Vec3 scale = raw.logScale.array().exp().matrix();
    return Gaussian3D(sigmoid(raw.opacityLogit), mean, scale, raw.quatRaw / n,
                      SHCoeffs::fromFlat(raw.shRaw));
}

/// Gaussian for pixel (row, col) in the camera frame of `cam`.
inline Gaussian3D
activatePixel(const RawPixelParams &raw, int row, int col, const Camera &cam) {
    return activateAlongRay(raw, cam.pixelRay(row, col), cam.zNear, cam.zFar);
}

/// Chain rule from Gaussian-space gradients back to the raw channels of one pixel.
/// `out` receives 12 + k_c values (overwritten).
inline void
activationBackward(std::span<const double> rawChannels, const Vec3 &ray, double zNear,
                   double zFar, const GaussianGrad &grad, std::span<double> out) {
    const std::size_t kc = rawChannels.size() - kGeometryChannels;
    const double opacity = sigmoid(rawChannels[channel::kOpacity]);
    out[channel::kOpacity] = grad.dOpacity * opacity * (1.0 - opacity);

    for (int k = 0; k < 3; ++k) {
        out[channel::kOffset + k] = grad.dMean[k];
    }
    const double s    = sigmoid(rawChannels[channel::kDepth]);
    const double dDep = grad.dMean.dot(ray);
    out[channel::kDepth] = dDep * (zFar - zNear) * s * (1.0 - s);

    for (int k = 0; k < 3; ++k) {
        out[channel::kScale + k] = grad.dLogScale[k];
    }

    const Quat raw(rawChannels[8], rawChannels[9], rawChannels[10], rawChannels[11]);
    const double n = raw.norm();
    const Quat q   = raw / n;
    const Quat dq  = (grad.dQuat - q * q.dot(grad.dQuat)) / n;
    for (int k = 0; k < 4; ++k) {
        out[channel::kQuat + k] = dq[k];
    }
    for (std::size_t k = 0; k < kc; ++k) {
        out[channel::kColor + k] = k < grad.dSh.size() ? grad.dSh[k] : 0.0;
    }
}

/// H x W grid of raw parameters with per-image depth bounds. Storage is f32, row-major,
/// channel-minor, exactly as serialized.
class SplatterImage {
  public:
    SplatterImage() = default;

    SplatterImage(int height, int width, int order, double zNear, double zFar)
        : mHeight(height), mWidth(width), mOrder(order), mZNear(static_cast<float>(zNear)),
          mZFar(static_cast<float>(zFar)) {
        shChannelCount(order);
        if (height < 1 || width < 1) {
            throw InvalidParameter("splatter image must be at least 1x1");
        }
        if (!(mZNear < mZFar) || !std::isfinite(mZNear) || !std::isfinite(mZFar) || !(mZNear > 0)) {
            throw InvalidParameter("splatter image requires 0 < z_near < z_far");
        }
        mData.assign(static_cast<std::size_t>(height) * width * channelCount(), 0.0f);
    }

    int height() const noexcept { return mHeight; }
    int width() const noexcept { return mWidth; }
    int order() const noexcept { return mOrder; }
    int colorChannels() const { return shChannelCount(mOrder); }
    int channelCount() const { return kGeometryChannels + colorChannels(); }
    double zNear() const noexcept { return mZNear; }
    double zFar() const noexcept { return mZFar; }

    std::span<float> data() noexcept { return mData; }
    std::span<const float> data() const noexcept { return mData; }

    std::span<float>
    pixelChannels(int row, int col) {
        return std::span<float>(mData).subspan(offsetOf(row, col), channelCount());
    }
    std::span<const float>
    pixelChannels(int row, int col) const {
        return std::span<const float>(mData).subspan(offsetOf(row, col), channelCount());
    }

    RawPixelParams
    pixel(int row, int col) const {
        const auto ch = pixelChannels(row, col);
        std::vector<double> d(ch.begin(), ch.end());
        return RawPixelParams::fromChannels(d);
    }

    void
    setPixel(int row, int col, const RawPixelParams &raw) {
        const auto ch = raw.channels();
        if (static_cast<int>(ch.size()) != channelCount()) {
            throw DimensionMismatch("pixel channel count does not match the splatter image");
        }
        auto dst = pixelChannels(row, col);
        for (std::size_t k = 0; k < ch.size(); ++k) {
            dst[k] = static_cast<float>(ch[k]);
        }
    }

    friend bool
    operator==(const SplatterImage &a, const SplatterImage &b) {
        if (a.mHeight != b.mHeight || a.mWidth != b.mWidth || a.mOrder != b.mOrder ||
            std::bit_cast<std::uint32_t>(a.mZNear) != std::bit_cast<std::uint32_t>(b.mZNear) ||
            std::bit_cast<std::uint32_t>(a.mZFar) != std::bit_cast<std::uint32_t>(b.mZFar)) {
            return false;
        }
        return std::memcmp(a.mData.data(), b.mData.data(), a.mData.size() * sizeof(float)) == 0;
    }

  private:
    std::size_t
    offsetOf(int row, int col) const {
        if (row < 0 || row >= mHeight || col < 0 || col >= mWidth) {
            throw InvalidParameter("pixel (" + std::to_string(row) + ", " + std::to_string(col) +
                                   ") is outside the splatter image");
        }
        return (static_cast<std::size_t>(row) * mWidth + col) * channelCount();
    }

    int mHeight = 0, mWidth = 0, mOrder = 0;
    // Stored at file precision so a round trip reproduces activation exactly.
    float mZNear = 0.1f, mZFar = 1.0f;
    std::vector<float> mData;
};

/// Optional diagnostics collected while unpacking.
struct UnpackReport {
    /// Pixels whose offset norm exceeds 2 (z_far - z_near).
    std::size_t largeOffsets = 0;
};

/// Camera used to unpack a splatter image: the image's depth range replaces the camera's.
inline Camera
unpackCamera(const SplatterImage &m, const Camera &cam) {
    Camera c = cam;
    c.zNear  = m.zNear();
    c.zFar   = m.zFar();
    return c;
}

/// Activates every pixel (row-major) into a cloud expressed in the camera's own frame.
/// The image's depth range takes precedence over the camera's.
inline GaussianCloud
unpack(const SplatterImage &m, const Camera &cam, UnpackReport *report = nullptr) {
    cam.validate();
    if (cam.width != m.width() || cam.height != m.height()) {
        throw DimensionMismatch("unpack: camera is " + std::to_string(cam.width) + "x" +
                                std::to_string(cam.height) + " but splatter image is " +
                                std::to_string(m.width()) + "x" + std::to_string(m.height()));
    }
    GaussianCloud cloud;
    cloud.frameId = cam.name;
    cloud.gaussians.reserve(static_cast<std::size_t>(m.height()) * m.width());
    const double offsetLimit = 2.0 * (m.zFar() - m.zNear());
    for (int r = 0; r < m.height(); ++r) {
        for (int c = 0; c < m.width(); ++c) {
            const RawPixelParams raw = m.pixel(r, c);
            if (report != nullptr && raw.offset.norm() > offsetLimit) {
                ++report->largeOffsets;
            }
            try {
                cloud.gaussians.push_back(
                    activateAlongRay(raw, cam.pixelRay(r, c), m.zNear(), m.zFar()));
            } catch (const NumericalDegeneracy &e) {
                throw NumericalDegeneracy("pixel (" + std::to_string(r) + ", " + std::to_string(c) +
                                          "): " + e.what());
            } catch (const InvalidParameter &e) {
                throw InvalidParameter("pixel (" + std::to_string(r) + ", " + std::to_string(c) +
                                       "): " + e.what());
            }
        }
    }
    return cloud;
}

inline constexpr double kDefaultCullThreshold = 1.0 / 255.0;

/// Subsequence of Gaussians with opacity >= minOpacity, order preserved.
inline GaussianCloud
cull(const GaussianCloud &cloud, double minOpacity = kDefaultCullThreshold) {
    if (!(minOpacity >= 0.0 && minOpacity < 1.0)) {
        throw InvalidParameter("cull threshold must lie in [0, 1)");
    }
    GaussianCloud out;
    out.frameId = cloud.frameId;
    for (const auto &g : cloud.gaussians) {
        if (g.opacity() >= minOpacity) {
            out.gaussians.push_back(g);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Little-endian binary helpers shared by the file formats.

namespace detail {

inline void
putU32(std::vector<unsigned char> &out, std::uint32_t v) {
    for (int k = 0; k < 4; ++k) {
        out.push_back(static_cast<unsigned char>((v >> (8 * k)) & 0xFFu));
    }
}

inline void
putF32(std::vector<unsigned char> &out, float v) {
    putU32(out, std::bit_cast<std::uint32_t>(v));
}

/// Bounds-checked little-endian reader; every failure reports the byte offset.
class ByteReader {
  public:
    explicit ByteReader(std::span<const unsigned char> bytes) : mBytes(bytes) {}

    std::size_t offset() const noexcept { return mPos; }
    std::size_t remaining() const noexcept { return mBytes.size() - mPos; }

    void
    expectMagic(const char (&magic)[5]) {
        need(4, "magic");
        if (std::memcmp(mBytes.data() + mPos, magic, 4) != 0) {
            throw ParseError(ParseError::Kind::BadMagic, mPos,
                             std::string("bad magic: expected \"") + magic + "\"");
        }
        mPos += 4;
    }

    std::uint32_t
    u32(const char *field) {
        need(4, field);
        std::uint32_t v = 0;
        for (int k = 0; k < 4; ++k) {
            v |= static_cast<std::uint32_t>(mBytes[mPos + k]) << (8 * k);
        }
        mPos += 4;
        return v;
    }

    float
    f32(const char *field) {
        const std::size_t at = mPos;
        const float v        = std::bit_cast<float>(u32(field));
        if (!std::isfinite(v)) {
            throw ParseError(ParseError::Kind::NonFinite, at,
                             std::string("non-finite value in ") + field);
        }
        return v;
    }

    void
    expectEnd() const {
        if (mPos != mBytes.size()) {
            throw ParseError(ParseError::Kind::Invalid, mPos,
                             std::to_string(remaining()) + " trailing bytes after payload");
        }
    }

  private:
    void
    need(std::size_t n, const char *field) const {
        if (remaining() < n) {
            throw ParseError(ParseError::Kind::Truncated, mBytes.size(),
                             std::string("truncated file while reading ") + field);
        }
    }

    std::span<const unsigned char> mBytes;
    std::size_t mPos = 0;
};

inline std::vector<unsigned char>
readAllBytes(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string() + " for reading");
    }
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void
writeAllBytes(const std::filesystem::path &path, std::span<const unsigned char> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(reinterpret_cast<const char *>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

} // namespace detail

inline constexpr std::uint32_t kSplatterFileVersion = 1;

inline std::vector<unsigned char>
encodeSplatterImage(const SplatterImage &m) {
    std::vector<unsigned char> out{'S', 'P', 'L', 'T'};
    detail::putU32(out, kSplatterFileVersion);
    detail::putU32(out, static_cast<std::uint32_t>(m.height()));
    detail::putU32(out, static_cast<std::uint32_t>(m.width()));
    detail::putU32(out, static_cast<std::uint32_t>(m.colorChannels()));
    detail::putF32(out, static_cast<float>(m.zNear()));
    detail::putF32(out, static_cast<float>(m.zFar()));
    out.reserve(out.size() + m.data().size() * 4);
    for (float v : m.data()) {
        if (!std::isfinite(v)) {
            throw InvalidParameter("cannot serialize a splatter image with non-finite values");
        }
        detail::putF32(out, v);
    }
    return out;
}

inline SplatterImage
decodeSplatterImage(std::span<const unsigned char> bytes) {
    detail::ByteReader in(bytes);
    in.expectMagic("SPLT");
    const std::size_t versionAt = in.offset();
    const std::uint32_t version = in.u32("version");
    if (version != kSplatterFileVersion) {
        throw ParseError(ParseError::Kind::VersionMismatch, versionAt,
                         "unsupported SPLT version " + std::to_string(version));
    }
    const std::size_t dimsAt = in.offset();
    const std::uint32_t height = in.u32("height");
    const std::uint32_t width  = in.u32("width");
    if (height == 0 || width == 0 || height > (1u << 16) || width > (1u << 16)) {
        throw ParseError(ParseError::Kind::Invalid, dimsAt, "invalid image dimensions");
    }
    const std::size_t kcAt = in.offset();
    const std::uint32_t kc = in.u32("k_c");
    if (kc != 3 && kc != 12) {
        throw ParseError(ParseError::Kind::InvalidChannelCount, kcAt,
                         "invalid channel count k_c = " + std::to_string(kc));
    }
    const std::size_t rangeAt = in.offset();
    const float zNear         = in.f32("z_near");
    const float zFar          = in.f32("z_far");
    if (!(zNear > 0) || !(zNear < zFar)) {
        throw ParseError(ParseError::Kind::Invalid, rangeAt, "depth range requires 0 < z_near < z_far");
    }
    SplatterImage m(static_cast<int>(height), static_cast<int>(width),
                    shOrderForChannelCount(static_cast<int>(kc)), zNear, zFar);
    for (float &v : m.data()) {
        v = in.f32("payload");
    }
    in.expectEnd();
    return m;
}

inline void
writeSplatterFile(const SplatterImage &m, const std::filesystem::path &path) {
    detail::writeAllBytes(path, encodeSplatterImage(m));
}

inline SplatterImage
readSplatterFile(const std::filesystem::path &path) {
    return decodeSplatterImage(detail::readAllBytes(path));
}

} // namespace splatter
