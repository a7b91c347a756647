// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0
//
// Procedural multi-view scenes and their on-disk form: a JSON document with cameras and the
// ground-truth mixture, f32 image sidecars, and 8-bit PNG previews.
//
#pragma once

#include "splatter/core_types.hpp"
#include "splatter/errors.hpp"
#include "splatter/metrics.hpp"
#include "splatter/renderer.hpp"
#include "splatter/splatter_image.hpp"
#include "splatter/training.hpp"

#include <Eigen/Geometry>
#include <json.hpp>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace splatter {

struct Scene {
    GaussianCloud groundTruth;
    std::vector<View> views;
    std::uint64_t seed = 0;
};

inline constexpr double kSceneCameraDistance = 2.0;
inline constexpr double kSceneZNear          = 0.8;
inline constexpr double kSceneZFar           = 3.2;
inline constexpr double kSceneFovDegrees     = 70.0;
/// Non-reference views sit at uniform azimuth in [-a, a] and elevation in [-e, e] degrees.
inline constexpr double kSceneAzimuthDegrees   = 30.0;
inline constexpr double kSceneElevationDegrees = 15.0;
inline constexpr int kSceneOracleSteps         = 256;

/// Ray length that covers the unit ball from every scene camera, corners included.
inline double
sceneRayLength() {
    return kSceneZFar + 1.0;
}

/// Camera on the sphere of radius kSceneCameraDistance looking at the origin. Image rows grow
/// along world +y at zero elevation.
inline Camera
lookAtOriginCamera(double azimuth, double elevation, int height, int width) {
    const Vec3 center(kSceneCameraDistance * std::sin(azimuth) * std::cos(elevation),
                      -kSceneCameraDistance * std::sin(elevation),
                      -kSceneCameraDistance * std::cos(azimuth) * std::cos(elevation));
    const Vec3 forward = -center.normalized();
    const Vec3 right   = Vec3(0, 1, 0).cross(forward).normalized();
    const Vec3 down    = forward.cross(right);
    Mat3 r;
    r.row(0) = right;
    r.row(1) = down;
    r.row(2) = forward;

    Camera cam;
    cam.fx = cam.fy = width / (2.0 * std::tan(0.5 * kSceneFovDegrees * std::numbers::pi / 180.0));
    cam.cx          = 0.5 * width;
    cam.cy          = 0.5 * height;
    cam.width       = width;
    cam.height      = height;
    cam.worldToCam  = RigidTransform(r, -(r * center));
    cam.zNear       = kSceneZNear;
    cam.zFar        = kSceneZFar;
    return cam;
}

/// Random mixture inside the unit ball with views rendered by the quadrature oracle. View 0
/// faces the scene head-on.
inline Scene
generateScene(std::uint64_t seed, int nGaussians, int nViews, int height, int width) {
    if (nGaussians < 1) {
        throw InvalidParameter("generateScene needs at least one Gaussian");
    }
    if (nViews < 2) {
        throw InvalidParameter("generateScene needs at least two views");
    }
    if (height < 1 || width < 1) {
        throw InvalidParameter("generateScene needs a positive image size");
    }
    std::mt19937_64 rng(seed);
    auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    std::normal_distribution<double> normal;

    Scene scene;
    scene.seed                = seed;
    scene.groundTruth.frameId = "world";
    for (int i = 0; i < nGaussians; ++i) {
        Vec3 mean;
        do {
            mean = Vec3(uni(-1, 1), uni(-1, 1), uni(-1, 1));
        } while (mean.squaredNorm() > 1.0);
        Vec3 scale;
        for (int k = 0; k < 3; ++k) {
            scale[k] = std::exp(uni(std::log(0.02), std::log(0.2)));
        }
        Quat q;
        do {
            q = Quat(normal(rng), normal(rng), normal(rng), normal(rng));
        } while (q.norm() < 1e-6);
        const Vec3 dc(uni(0.2, 0.8), uni(0.2, 0.8), uni(0.2, 0.8));
        Mat3 linear;
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
                linear(r, c) = uni(-0.1, 0.1);
            }
        }
        scene.groundTruth.gaussians.emplace_back(uni(0.5, 1.0), mean, scale, q, SHCoeffs(dc, linear));
    }

    const double deg = std::numbers::pi / 180.0;
    for (int j = 0; j < nViews; ++j) {
        double azimuth = 0.0, elevation = 0.0;
        if (j > 0) {
            azimuth   = uni(-kSceneAzimuthDegrees, kSceneAzimuthDegrees) * deg;
            elevation = uni(-kSceneElevationDegrees, kSceneElevationDegrees) * deg;
        }
        View view;
        view.camera      = lookAtOriginCamera(azimuth, elevation, height, width);
        view.camera.name = "view" + std::to_string(j);
        view.image = renderOracle(scene.groundTruth, view.camera, kSceneOracleSteps, sceneRayLength());
        scene.views.push_back(std::move(view));
    }
    return scene;
}

/// The last quarter of the views (rounded down) is held out.
inline std::size_t
heldOutCount(std::size_t nViews) {
    return nViews / 4;
}

inline std::vector<View>
trainingViews(const Scene &scene) {
    const std::size_t n = scene.views.size() - heldOutCount(scene.views.size());
    return {scene.views.begin(), scene.views.begin() + static_cast<std::ptrdiff_t>(n)};
}

inline std::vector<View>
heldOutViews(const Scene &scene) {
    const std::size_t n = scene.views.size() - heldOutCount(scene.views.size());
    return {scene.views.begin() + static_cast<std::ptrdiff_t>(n), scene.views.end()};
}

/// Pixelwise mean of the images.
inline Image
meanImage(std::span<const Image> images) {
    if (images.empty()) {
        throw InvalidParameter("meanImage needs at least one image");
    }
    std::vector<double> sum(images.front().pixels.size(), 0.0);
    for (const Image &img : images) {
        detail::requireSameDims(img, images.front(), "meanImage");
        for (std::size_t k = 0; k < sum.size(); ++k) {
            sum[k] += img.pixels[k];
        }
    }
    Image out(images.front().height, images.front().width);
    for (std::size_t k = 0; k < sum.size(); ++k) {
        out.pixels[k] = static_cast<float>(sum[k] / static_cast<double>(images.size()));
    }
    return out;
}

// Image files

inline std::vector<unsigned char>
encodeImageF32(const Image &img) {
    std::vector<unsigned char> out{'I', 'M', 'G', 'F'};
    detail::putU32(out, static_cast<std::uint32_t>(img.height));
    detail::putU32(out, static_cast<std::uint32_t>(img.width));
    out.reserve(out.size() + 4 * img.pixels.size());
    for (float v : img.pixels) {
        detail::putF32(out, v);
    }
    return out;
}

inline Image
decodeImageF32(std::span<const unsigned char> bytes) {
    detail::ByteReader in(bytes);
    in.expectMagic("IMGF");
    const std::size_t dimsAt = in.offset();
    const std::uint32_t h    = in.u32("height");
    const std::uint32_t w    = in.u32("width");
    if (h == 0 || w == 0 || h > (1u << 16) || w > (1u << 16)) {
        throw ParseError(ParseError::Kind::Invalid, dimsAt, "invalid image dimensions");
    }
    Image img(static_cast<int>(h), static_cast<int>(w));
    for (float &v : img.pixels) {
        v = in.f32("pixels");
    }
    in.expectEnd();
    return img;
}

inline void
writeImageF32(const Image &img, const std::filesystem::path &path) {
    detail::writeAllBytes(path, encodeImageF32(img));
}

inline Image
readImageF32(const std::filesystem::path &path) {
    return decodeImageF32(detail::readAllBytes(path));
}

/// 8-bit RGB PNG, values clamped to [0, 1] and rounded.
inline void
writePng(const Image &img, const std::filesystem::path &path) {
    std::unique_ptr<std::FILE, int (*)(std::FILE *)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!file) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info  = png ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng initialization failed");
    }
    std::vector<png_byte> row(static_cast<std::size_t>(img.width) * 3);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < img.height; ++r) {
        for (int k = 0; k < img.width * 3; ++k) {
            const float v = img.pixels[static_cast<std::size_t>(r) * img.width * 3 + k];
            row[k]        = static_cast<png_byte>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Scene documents

inline constexpr int kSceneFormatVersion = 1;

namespace detail {

inline nlohmann::json
cameraToJson(const Camera &cam) {
    const auto m = cam.worldToCam.toRowMajor3x4();
    return {{"name", cam.name},     {"frame", cam.frame},   {"fx", cam.fx},         {"fy", cam.fy},
            {"cx", cam.cx},         {"cy", cam.cy},         {"width", cam.width},   {"height", cam.height},
            {"z_near", cam.zNear},  {"z_far", cam.zFar},
            {"world_to_cam", std::vector<double>(m.begin(), m.end())}};
}

inline Camera
cameraFromJson(const nlohmann::json &j) {
    Camera cam;
    cam.name   = j.at("name").get<std::string>();
    cam.frame  = j.value("frame", std::string("world"));
    cam.fx     = j.at("fx").get<double>();
    cam.fy     = j.at("fy").get<double>();
    cam.cx     = j.at("cx").get<double>();
    cam.cy     = j.at("cy").get<double>();
    cam.width  = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    cam.zNear  = j.at("z_near").get<double>();
    cam.zFar   = j.at("z_far").get<double>();
    const auto m = j.at("world_to_cam").get<std::vector<double>>();
    if (m.size() != 12) {
        throw InvalidParameter("world_to_cam must hold 12 values (3x4, row-major)");
    }
    cam.worldToCam = RigidTransform::fromRowMajor3x4(std::span<const double, 12>(m.data(), 12));
    cam.validate();
    return cam;
}

inline nlohmann::json
cloudToJson(const GaussianCloud &cloud) {
    nlohmann::json gaussians = nlohmann::json::array();
    for (const auto &g : cloud.gaussians) {
        gaussians.push_back({{"opacity", g.opacity()},
                             {"mean", {g.mean()[0], g.mean()[1], g.mean()[2]}},
                             {"scale", {g.scale()[0], g.scale()[1], g.scale()[2]}},
                             {"rotation", {g.rotation()[0], g.rotation()[1], g.rotation()[2], g.rotation()[3]}},
                             {"sh", g.sh().flat()}});
    }
    return {{"frame", cloud.frameId}, {"gaussians", gaussians}};
}

inline Vec3
vec3FromJson(const nlohmann::json &j, const char *field) {
    const auto v = j.at(field).get<std::vector<double>>();
    if (v.size() != 3) {
        throw InvalidParameter(std::string(field) + " must hold 3 values");
    }
    return Vec3(v[0], v[1], v[2]);
}

inline GaussianCloud
cloudFromJson(const nlohmann::json &j) {
    GaussianCloud cloud;
    cloud.frameId = j.at("frame").get<std::string>();
    for (const auto &g : j.at("gaussians")) {
        const auto q = g.at("rotation").get<std::vector<double>>();
        if (q.size() != 4) {
            throw InvalidParameter("rotation must hold 4 values");
        }
        cloud.gaussians.emplace_back(g.at("opacity").get<double>(), vec3FromJson(g, "mean"),
                                     vec3FromJson(g, "scale"), Quat(q[0], q[1], q[2], q[3]),
                                     SHCoeffs::fromFlat(g.at("sh").get<std::vector<double>>()));
    }
    return cloud;
}

inline std::string
viewStem(std::size_t j) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%03zu", j);
    return buf;
}

} // namespace detail

/// Writes `dir/scene.json`, one `.imgf32` sidecar and one `.png` preview per view.
inline std::filesystem::path
writeScene(const Scene &scene, const std::filesystem::path &dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
    }
    nlohmann::json views = nlohmann::json::array();
    for (std::size_t j = 0; j < scene.views.size(); ++j) {
        const std::string stem = detail::viewStem(j);
        writeImageF32(scene.views[j].image, dir / (stem + ".imgf32"));
        writePng(scene.views[j].image, dir / (stem + ".png"));
        nlohmann::json v = detail::cameraToJson(scene.views[j].camera);
        v["image"]       = stem + ".imgf32";
        v["preview"]     = stem + ".png";
        views.push_back(std::move(v));
    }
    std::vector<std::size_t> heldOut;
    for (std::size_t j = scene.views.size() - heldOutCount(scene.views.size()); j < scene.views.size(); ++j) {
        heldOut.push_back(j);
    }
    const nlohmann::json doc = {{"format", "splatter-scene"},
                                {"version", kSceneFormatVersion},
                                {"seed", scene.seed},
                                {"views", views},
                                {"held_out", heldOut},
                                {"ground_truth", detail::cloudToJson(scene.groundTruth)}};
    const std::string text = doc.dump(2) + "\n";
    const auto path        = dir / "scene.json";
    detail::writeAllBytes(path, std::span<const unsigned char>(
                                    reinterpret_cast<const unsigned char *>(text.data()), text.size()));
    return path;
}

inline nlohmann::json
readJsonFile(const std::filesystem::path &path) {
    const auto bytes = detail::readAllBytes(path);
    try {
        return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error &e) {
        throw ParseError(ParseError::Kind::Invalid, e.byte, path.string() + ": " + e.what());
    }
}

/// Loads a scene document; image paths resolve relative to the document.
inline Scene
readScene(const std::filesystem::path &path) {
    const nlohmann::json doc = readJsonFile(path);
    try {
        if (doc.at("format").get<std::string>() != "splatter-scene") {
            throw InvalidParameter(path.string() + " is not a scene document");
        }
        if (doc.at("version").get<int>() != kSceneFormatVersion) {
            throw InvalidParameter(path.string() + ": unsupported scene version");
        }
        Scene scene;
        scene.seed        = doc.at("seed").get<std::uint64_t>();
        scene.groundTruth = detail::cloudFromJson(doc.at("ground_truth"));
        const auto base   = path.parent_path();
        for (const auto &v : doc.at("views")) {
            View view;
            view.camera = detail::cameraFromJson(v);
            view.image  = readImageF32(base / v.at("image").get<std::string>());
            if (view.image.height != view.camera.height || view.image.width != view.camera.width) {
                throw DimensionMismatch(path.string() + ": image size does not match camera " +
                                        view.camera.name);
            }
            scene.views.push_back(std::move(view));
        }
        if (scene.views.size() < 2) {
            throw InvalidParameter(path.string() + ": a scene needs at least two views");
        }
        return scene;
    } catch (const nlohmann::json::exception &e) {
        throw InvalidParameter(path.string() + ": " + e.what());
    }
}

/// Writes `dir/dataset.json` listing scene documents by relative path.
inline std::filesystem::path
writeDatasetIndex(const std::vector<std::filesystem::path> &scenes, const std::filesystem::path &dir) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto &p : scenes) {
        list.push_back(std::filesystem::relative(p, dir).generic_string());
    }
    const nlohmann::json doc = {{"format", "splatter-dataset"}, {"version", kSceneFormatVersion}, {"scenes", list}};
    const std::string text   = doc.dump(2) + "\n";
    const auto path          = dir / "dataset.json";
    detail::writeAllBytes(path, std::span<const unsigned char>(
                                    reinterpret_cast<const unsigned char *>(text.data()), text.size()));
    return path;
}

/// Scene documents referenced by `path`: a dataset index, or a single scene document.
inline std::vector<std::filesystem::path>
resolveScenePaths(const std::filesystem::path &path) {
    const nlohmann::json doc = readJsonFile(path);
    const std::string format = doc.value("format", std::string());
    if (format == "splatter-scene") {
        return {path};
    }
    if (format != "splatter-dataset") {
        throw InvalidParameter(path.string() + " is neither a scene nor a dataset document");
    }
    std::vector<std::filesystem::path> out;
    for (const auto &p : doc.at("scenes")) {
        out.push_back(path.parent_path() / p.get<std::string>());
    }
    return out;
}

// Experiments

/// Unpacks a splatter image anchored at `reference` and moves it into the reference camera's
/// input frame.
inline GaussianCloud
anchoredCloud(const SplatterImage &m, const Camera &reference) {
    const Camera cam = unpackCamera(m, reference);
    return warpCloud(unpack(m, cam), reference.worldToCam.inverse(), reference.frame);
}

struct ViewScore {
    std::string name;
    Metrics metrics;
};

struct EvalReport {
    std::vector<ViewScore> views;
    /// Arithmetic means over the views; +infinity PSNR propagates.
    Metrics mean;
};

inline EvalReport
evaluateCloud(const GaussianCloud &cloud, std::span<const View> views, const RenderOptions &opts = {}) {
    EvalReport report;
    for (const View &v : views) {
        const Image rendered = rasterize(cloud, v.camera, opts).image;
        const Metrics m{psnr(rendered, v.image),
                        std::min(rendered.height, rendered.width) >= kSsimWindow ? ssim(rendered, v.image)
                                                                                 : std::nan("")};
        report.views.push_back({v.camera.name, m});
        report.mean.psnr += m.psnr;
        report.mean.ssim += m.ssim;
    }
    if (!views.empty()) {
        report.mean.psnr /= static_cast<double>(views.size());
        report.mean.ssim /= static_cast<double>(views.size());
    }
    return report;
}

/// Order-1 splatter image fitted to the scene's training views, anchored at view 0.
inline FitResult
fitScene(const Scene &scene, const FitOptions &opts, const LossConfig &cfg = {}) {
    const auto views  = trainingViews(scene);
    const Camera &ref = views.front().camera;
    const auto init   = initialSplatterImage(ref.height, ref.width, 1, ref.zNear, ref.zFar);
    return fitSplatter(views, init, cfg, opts);
}

/// Predictor whose untrained output is the per-scene fitting initialization.
inline PredictorNet
initialPredictor(std::uint64_t seed, int height, int width, double zNear, double zFar, int order = 1) {
    const RawPixelParams raw = initialRawPixel(height, width, order, zNear, zFar);
    return PredictorNet::create(order, seed, raw.channels());
}

/// Training views of each scene; view 0 is the source view of its scene.
inline std::vector<std::vector<View>>
amortizedDataset(std::span<const Scene> scenes) {
    std::vector<std::vector<View>> out;
    for (const Scene &s : scenes) {
        out.push_back(trainingViews(s));
    }
    return out;
}

/// Predicts from view 0 and places the result in view 0's input frame.
inline GaussianCloud
predictCloud(const PredictorNet &net, const View &source) {
    const SplatterImage m = predictorForward(net, source.image, source.camera.zNear, source.camera.zFar);
    return anchoredCloud(m, source.camera);
}

} // namespace splatter
