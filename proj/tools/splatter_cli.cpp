// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0
//
// splatter: procedural datasets, per-scene fitting, predictor training, rendering and
// evaluation from the command line.
//
// Exit codes: 0 success, 1 I/O failure, 2 invalid input or usage.

#include "splatter/gradcheck.hpp"
#include "splatter/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace splatter;

namespace {

constexpr int kExitIo    = 1;
constexpr int kExitUsage = 2;

struct Size {
    int height = 64;
    int width  = 64;
};

Size
parseSize(const std::string &text) {
    Size s;
    char x = 0, extra = 0;
    if (std::sscanf(text.c_str(), "%d%c%d%c", &s.height, &x, &s.width, &extra) != 3 || x != 'x' ||
        s.height < 1 || s.width < 1) {
        throw InvalidParameter("--size must look like HxW with positive H and W, got \"" + text + "\"");
    }
    return s;
}

Image
renderView(const GaussianCloud &cloud, const Camera &cam, bool f64) {
    if (!f64) {
        return rasterize(cloud, cam).image;
    }
    const ImageD d = rasterize<double>(cloud, cam).image;
    Image out(d.height, d.width);
    for (std::size_t k = 0; k < d.pixels.size(); ++k) {
        out.pixels[k] = static_cast<float>(d.pixels[k]);
    }
    return out;
}

std::vector<Scene>
loadScenes(const fs::path &path) {
    std::vector<Scene> scenes;
    for (const auto &p : resolveScenePaths(path)) {
        scenes.push_back(readScene(p));
    }
    if (scenes.empty()) {
        throw InvalidParameter(path.string() + " lists no scenes");
    }
    return scenes;
}

/// The cloud to score for one scene: a stored splatter image anchored at view 0, or a
/// prediction from view 0.
GaussianCloud
sceneCloud(const Scene &scene, const std::optional<SplatterImage> &pred, const std::optional<PredictorNet> &net) {
    const View &source = scene.views.front();
    if (pred) {
        return anchoredCloud(*pred, source.camera);
    }
    return predictCloud(*net, source);
}

void
printMetrics(const std::string &label, const Metrics &m) {
    std::printf("%-24s psnr %8.3f  ssim %.5f\n", label.c_str(), m.psnr, m.ssim);
}

struct Args {
    std::uint64_t seed = 0;
    std::string size   = "64x64";
    int gaussians      = 3;
    int views          = 10;
    int scenes         = 1;
    int steps          = -1;
    double lr          = 0.0;
    std::string out, scene, pred, net;
    bool f64 = false;
};

int
makeDataset(const Args &a) {
    const Size size = parseSize(a.size);
    if (a.scenes < 1) {
        throw InvalidParameter("--scenes must be positive");
    }
    const fs::path out(a.out);
    if (a.scenes == 1) {
        std::printf("%s\n", writeScene(generateScene(a.seed, a.gaussians, a.views, size.height, size.width), out)
                                .string()
                                .c_str());
        return 0;
    }
    std::vector<fs::path> written;
    for (int i = 0; i < a.scenes; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "scene_%03d", i);
        const Scene s = generateScene(a.seed + static_cast<std::uint64_t>(i), a.gaussians, a.views, size.height,
                                      size.width);
        written.push_back(writeScene(s, out / name));
    }
    std::printf("%s\n", writeDatasetIndex(written, out).string().c_str());
    return 0;
}

int
fit(const Args &a) {
    const Scene scene = readScene(a.scene);
    FitOptions opts;
    opts.seed = a.seed;
    opts.f64  = a.f64;
    if (a.steps >= 0) {
        opts.steps = a.steps;
    }
    if (a.lr > 0) {
        opts.learningRate = a.lr;
    }
    const FitResult r = fitScene(scene, opts);
    writeSplatterFile(r.image, a.out);
    if (!r.lossTrace.empty()) {
        std::printf("steps %zu  initial loss %.6g  final loss %.6g\n", r.lossTrace.size(), r.lossTrace.front(),
                    r.lossTrace.back());
    }
    std::printf("%s\n", a.out.c_str());
    return 0;
}

int
train(const Args &a) {
    const std::vector<Scene> scenes = loadScenes(a.scene);
    const Camera &ref               = scenes.front().views.front().camera;
    PredictorNet net = a.net.empty() ? initialPredictor(a.seed, ref.height, ref.width, ref.zNear, ref.zFar)
                                     : readPredictorFile(a.net);
    TrainOptions opts;
    opts.seed = a.seed;
    opts.f64  = a.f64;
    if (a.steps >= 0) {
        opts.steps = a.steps;
    }
    if (a.lr > 0) {
        opts.learningRate = a.lr;
    }
    const TrainResult r = trainPredictor(amortizedDataset(scenes), std::move(net), LossConfig{}, opts);
    writePredictorFile(r.net, a.out);
    if (!r.lossTrace.empty()) {
        std::printf("iterations %zu  initial loss %.6g  final loss %.6g\n", r.lossTrace.size(),
                    r.lossTrace.front(), r.lossTrace.back());
    }
    std::printf("%s\n", a.out.c_str());
    return 0;
}

void
requireOneModel(const Args &a) {
    if (a.pred.empty() == a.net.empty()) {
        throw InvalidParameter("pass exactly one of --pred and --net");
    }
}

int
render(const Args &a) {
    requireOneModel(a);
    const std::vector<Scene> scenes = loadScenes(a.scene);
    std::optional<SplatterImage> pred;
    std::optional<PredictorNet> net;
    if (!a.pred.empty()) {
        pred = readSplatterFile(a.pred);
    } else {
        net = readPredictorFile(a.net);
    }
    std::error_code ec;
    fs::create_directories(a.out, ec);
    if (ec) {
        throw IoError("cannot create directory " + a.out + ": " + ec.message());
    }
    for (std::size_t si = 0; si < scenes.size(); ++si) {
        const GaussianCloud cloud = sceneCloud(scenes[si], pred, net);
        for (std::size_t j = 0; j < scenes[si].views.size(); ++j) {
            const Image img  = renderView(cloud, scenes[si].views[j].camera, a.f64);
            std::string stem = detail::viewStem(j);
            if (scenes.size() > 1) {
                char prefix[32];
                std::snprintf(prefix, sizeof prefix, "scene_%03zu_", si);
                stem = prefix + stem;
            }
            writeImageF32(img, fs::path(a.out) / (stem + ".imgf32"));
            writePng(img, fs::path(a.out) / (stem + ".png"));
        }
    }
    std::printf("%s\n", a.out.c_str());
    return 0;
}

int
eval(const Args &a) {
    requireOneModel(a);
    const std::vector<Scene> scenes = loadScenes(a.scene);
    std::optional<SplatterImage> pred;
    std::optional<PredictorNet> net;
    if (!a.pred.empty()) {
        pred = readSplatterFile(a.pred);
    } else {
        net = readPredictorFile(a.net);
    }
    Metrics all{}, held{};
    std::size_t nAll = 0, nHeld = 0;
    for (const Scene &scene : scenes) {
        const GaussianCloud cloud = sceneCloud(scene, pred, net);
        const std::size_t firstHeld = scene.views.size() - heldOutCount(scene.views.size());
        for (std::size_t j = 0; j < scene.views.size(); ++j) {
            const View &v = scene.views[j];
            const Image img = renderView(cloud, v.camera, a.f64);
            const Metrics m{psnr(img, v.image),
                            std::min(img.height, img.width) >= kSsimWindow ? ssim(img, v.image) : std::nan("")};
            std::string label = (scenes.size() > 1 ? "seed " + std::to_string(scene.seed) + " " : "") + v.camera.name;
            if (j >= firstHeld) {
                label += " (held out)";
                held.psnr += m.psnr;
                held.ssim += m.ssim;
                ++nHeld;
            }
            printMetrics(label, m);
            all.psnr += m.psnr;
            all.ssim += m.ssim;
            ++nAll;
        }
    }
    printMetrics("mean", {all.psnr / nAll, all.ssim / nAll});
    if (nHeld > 0) {
        printMetrics("mean held out", {held.psnr / nHeld, held.ssim / nHeld});
    }
    return 0;
}

int
runGradcheck(const Args &a) {
    const Size size = parseSize(a.size);
    if (size.height != size.width) {
        throw InvalidParameter("gradcheck renders square images; --size must be NxN");
    }
    const GradcheckScene scene = makeGradcheckScene(a.seed, a.gaussians, size.height);
    const GradcheckReport report = gradcheck(scene.cloud, scene.camera, scene.upstream);
    std::printf("max relative error %.3e over %zu parameters (worst: %s)\n", report.maxRelError, report.checked,
                report.worst.c_str());
    return report.maxRelError <= 1e-3 ? 0 : kExitUsage;
}

} // namespace

int
main(int argc, char **argv) {
    CLI::App app{"Splatter image toolkit: datasets, fitting, training, rendering, evaluation"};
    app.require_subcommand(1);
    Args a;

    auto *make = app.add_subcommand("make-dataset", "Generate procedural scenes");
    make->add_option("--seed", a.seed, "Seed of the first scene");
    make->add_option("--scenes", a.scenes, "Number of scenes; more than one writes dataset.json");
    make->add_option("--gaussians", a.gaussians, "Gaussians per scene");
    make->add_option("--views", a.views, "Views per scene");
    make->add_option("--size", a.size, "Image size HxW");
    make->add_option("--out", a.out, "Output directory")->required();

    auto *fitCmd = app.add_subcommand("fit", "Fit a splatter image to one scene's training views");
    fitCmd->add_option("--scene", a.scene, "scene.json")->required();
    fitCmd->add_option("--steps", a.steps, "Optimizer steps (default 2000)");
    fitCmd->add_option("--lr", a.lr, "Learning rate (default 0.02)");
    fitCmd->add_option("--seed", a.seed, "Target sampling seed");
    fitCmd->add_option("--out", a.out, "Output .splt")->required();
    fitCmd->add_flag("--f64", a.f64, "Render in 64-bit");

    auto *trainCmd = app.add_subcommand("train", "Train the predictor on a dataset");
    trainCmd->add_option("--scene", a.scene, "dataset.json or scene.json")->required();
    trainCmd->add_option("--net", a.net, "Initial .spnt (default: fresh network)");
    trainCmd->add_option("--steps", a.steps, "Iterations (default 1000)");
    trainCmd->add_option("--lr", a.lr, "Learning rate (default 5e-4)");
    trainCmd->add_option("--seed", a.seed, "Initialization and sampling seed");
    trainCmd->add_option("--out", a.out, "Output .spnt")->required();
    trainCmd->add_flag("--f64", a.f64, "Render in 64-bit");

    auto *renderCmd = app.add_subcommand("render", "Render every view of the scene(s)");
    renderCmd->add_option("--scene", a.scene, "dataset.json or scene.json")->required();
    renderCmd->add_option("--pred", a.pred, "Splatter image .splt anchored at view 0");
    renderCmd->add_option("--net", a.net, "Predictor .spnt applied to view 0");
    renderCmd->add_option("--out", a.out, "Output directory")->required();
    renderCmd->add_flag("--f64", a.f64, "Render in 64-bit");

    auto *evalCmd = app.add_subcommand("eval", "Per-view PSNR and SSIM");
    evalCmd->add_option("--scene", a.scene, "dataset.json or scene.json")->required();
    evalCmd->add_option("--pred", a.pred, "Splatter image .splt anchored at view 0");
    evalCmd->add_option("--net", a.net, "Predictor .spnt applied to view 0");
    evalCmd->add_flag("--f64", a.f64, "Render in 64-bit");

    auto *gradCmd = app.add_subcommand("gradcheck", "Finite-difference check of the rasterizer");
    gradCmd->add_option("--seed", a.seed, "Scene seed");
    gradCmd->add_option("--gaussians", a.gaussians, "Gaussians (default 8)");
    gradCmd->add_option("--size", a.size, "Image size NxN (default 32x32)");

    // gradcheck has its own defaults
    gradCmd->preparse_callback([&a](std::size_t) {
        a.gaussians = 8;
        a.size      = "32x32";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (*make) {
            return makeDataset(a);
        }
        if (*fitCmd) {
            return fit(a);
        }
        if (*trainCmd) {
            return train(a);
        }
        if (*renderCmd) {
            return render(a);
        }
        if (*evalCmd) {
            return eval(a);
        }
        return runGradcheck(a);
    } catch (const IoError &e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const Error &e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
}
