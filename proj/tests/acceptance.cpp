// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero when
// any criterion fails. Criteria 1, 7 and 8 write their products under <out>/run_a and are then
// repeated into <out>/run_b; criterion 9 compares the two trees byte for byte.
//
// usage: acceptance [out_dir]   (default: ./acceptance_out)

#include "splatter/gradcheck.hpp"
#include "splatter/harness.hpp"

#include "test_util.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace splatter;

namespace {

// Tolerances and budgets.
constexpr double kOracleMeanPsnr   = 35.0;
constexpr double kOracleMinPsnr    = 30.0;
constexpr double kOracleSeconds    = 120.0;
constexpr double kGradcheckTol     = 1e-3;
constexpr double kGradcheckSeconds = 300.0;
constexpr double kShClosureTol     = 1e-10;
constexpr double kShSeconds        = 1.0;
constexpr double kWarpPsnr         = 50.0;
constexpr double kWarpSeconds      = 60.0;
constexpr double kActivationSecs   = 10.0;
constexpr double kRegularizerTol   = 1e-12;
// Central differences at h = 1e-6 on values near 30 carry ~1e-8 of rounding.
constexpr double kRegularizerFdTol = 1e-7;
// Floor for per-scene fitting, set from the pilot run recorded in README.md (held-out
// 63.55 / 66.18 dB at 2000 steps).
constexpr double kFitHeldOutPsnr = 24.0;
constexpr double kFitSeconds     = 15.0 * 60.0;
constexpr double kPredictorGain  = 5.0;
constexpr double kPredictorSecs  = 30.0 * 60.0;

// Workloads.
constexpr int kOracleScenes      = 20;
constexpr int kOracleGaussians   = 32;
constexpr int kOracleSize        = 64;
constexpr int kGradcheckScenes   = 10;
constexpr int kShTriples         = 1000;
constexpr int kWarpPairs         = 20;
constexpr int kActivationSamples = 100000;
constexpr int kFitGaussians      = 3;
constexpr int kFitViews          = 10;
constexpr int kFitSize           = 64;
constexpr int kTrainScenes       = 64;
constexpr int kTestScenes        = 8;
constexpr int kDatasetGaussians  = 3;
constexpr int kDatasetViews      = 5;
constexpr int kDatasetSize       = 32;
constexpr std::uint64_t kTrainSeed0 = 1000;
constexpr std::uint64_t kTestSeed0  = 5000;
constexpr int kPredictorSteps       = 3000;
constexpr double kPredictorRate     = 5e-4;

using Clock = std::chrono::steady_clock;

double
secondsSince(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string
format(const char *fmt, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, fmt, args...);
    return buf;
}

void
report(int id, const char *name, const Outcome &o) {
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
}

std::string
indexed(const char *stem, std::size_t i) {
    return format("%s_%03zu", stem, i);
}

// 1. Rasterizer vs quadrature oracle.
Outcome
oracleAgreement(const fs::path &out) {
    const auto t0 = Clock::now();
    double sum = 0.0, worst = std::numeric_limits<double>::infinity();
    int count = 0;
    for (int s = 0; s < kOracleScenes; ++s) {
        const Scene scene = generateScene(static_cast<std::uint64_t>(s), kOracleGaussians, 2, kOracleSize,
                                          kOracleSize);
        const fs::path dir = writeScene(scene, out / indexed("scene", s)).parent_path();
        for (std::size_t j = 0; j < scene.views.size(); ++j) {
            const Image fast = rasterize(scene.groundTruth, scene.views[j].camera).image;
            writeImageF32(fast, dir / ("raster_" + detail::viewStem(j) + ".imgf32"));
            const double p = psnr(fast, scene.views[j].image);
            sum += p;
            worst = std::min(worst, p);
            ++count;
        }
    }
    const double mean = sum / count, secs = secondsSince(t0);
    return {mean >= kOracleMeanPsnr && worst >= kOracleMinPsnr && secs < kOracleSeconds,
            format("%d renders, mean %.2f dB (>= %.0f), min %.2f dB (>= %.0f), %.1f s (< %.0f)", count, mean,
                   kOracleMeanPsnr, worst, kOracleMinPsnr, secs, kOracleSeconds)};
}

// 2. Analytic vs central-difference gradients.
Outcome
gradcheckScenes() {
    const auto t0 = Clock::now();
    double worst  = 0.0;
    std::size_t checked = 0;
    std::string where;
    for (int s = 0; s < kGradcheckScenes; ++s) {
        const GradcheckScene scene = makeGradcheckScene(static_cast<std::uint64_t>(s), 8, 32);
        const GradcheckReport r    = gradcheck(scene.cloud, scene.camera, scene.upstream);
        checked += r.checked;
        if (r.maxRelError > worst) {
            worst = r.maxRelError;
            where = format("seed %d %s", s, r.worst.c_str());
        }
    }
    const double secs = secondsSince(t0);
    return {worst <= kGradcheckTol && checked > 0 && secs < kGradcheckSeconds,
            format("max rel error %.2e (<= %.0e) at %s over %zu parameters, %.1f s (< %.0f)", worst, kGradcheckTol,
                   where.c_str(), checked, secs, kGradcheckSeconds)};
}

// 3. Color is preserved when coefficients and direction rotate together.
Outcome
shClosure() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(3);
    double worst = 0.0;
    for (int t = 0; t < kShTriples; ++t) {
        const SHCoeffs c = testing::randomSh(rng, 1);
        const Mat3 r     = testing::randomRotation(rng);
        const Vec3 v     = testing::randomUnit(rng);
        worst = std::max(worst, (evalColor(c, v) - evalColor(rotateSh(c, r), r * v)).cwiseAbs().maxCoeff());
    }
    const double secs = secondsSince(t0);
    return {worst <= kShClosureTol && secs < kShSeconds,
            format("%d triples, max |difference| %.2e (<= %.0e), %.3f s (< %.0f)", kShTriples, worst,
                   kShClosureTol, secs, kShSeconds)};
}

// 4. Rendering a warped cloud equals rendering the original from the composed camera.
Outcome
warpRenderEquivalence() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(4);
    double worst = std::numeric_limits<double>::infinity();
    for (int t = 0; t < kWarpPairs; ++t) {
        GaussianCloud cloud;
        for (int i = 0; i < 24; ++i) {
            cloud.gaussians.push_back(testing::randomGaussian(rng, 1));
        }
        const RigidTransform phi(testing::randomRotation(rng), testing::randomVec(rng, -0.5, 0.5));
        Camera cam     = testing::originCamera(48, 48, 44.0);
        cam.worldToCam = phi.inverse();
        cam.frame      = "warped";
        const Image direct    = rasterize(warpCloud(cloud, phi, "warped"), cam).image;
        const Image viaCamera = rasterize(cloud, cam.composed(phi, cloud.frameId)).image;
        worst = std::min(worst, psnr(direct, viaCamera));
    }
    const double secs = secondsSince(t0);
    return {worst >= kWarpPsnr && secs < kWarpSeconds,
            format("%d pairs, min PSNR %.2f dB (>= %.0f), %.2f s (< %.0f)", kWarpPairs, worst, kWarpPsnr, secs,
                   kWarpSeconds)};
}

// 5. Activation ranges, covariance definiteness and the zero-offset ray identity.
Outcome
activationContracts() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 4.0);
    std::uniform_int_distribution<int> pix(0, kFitSize - 1);
    const Camera cam = lookAtOriginCamera(0.0, 0.0, kFitSize, kFitSize);
    int depthBad = 0, opacityBad = 0, covBad = 0, rayBad = 0;
    for (int t = 0; t < kActivationSamples; ++t) {
        RawPixelParams raw;
        raw.opacityLogit = n(rng);
        raw.offset       = Vec3(n(rng), n(rng), n(rng)) * 0.1;
        raw.depthLogit   = n(rng);
        raw.logScale     = Vec3(n(rng), n(rng), n(rng)) * 0.5;
        raw.quatRaw      = Quat(n(rng), n(rng), n(rng), n(rng));
        raw.shRaw        = {n(rng), n(rng), n(rng)};
        const int row = pix(rng), col = pix(rng);
        const Gaussian3D g = activatePixel(raw, row, col, cam);
        const double d     = activateDepth(raw.depthLogit, cam.zNear, cam.zFar);
        depthBad += !(d > cam.zNear && d < cam.zFar);
        opacityBad += !(g.opacity() > 0.0 && g.opacity() < 1.0);
        const Eigen::SelfAdjointEigenSolver<Mat3> eig(g.covariance(), Eigen::EigenvaluesOnly);
        covBad += !(eig.eigenvalues().minCoeff() > 0.0 && (g.covariance() - g.covariance().transpose()).norm() == 0.0);

        raw.offset         = Vec3::Zero();
        const Vec3 ray     = cam.pixelRay(row, col);
        const Gaussian3D o = activatePixel(raw, row, col, cam);
        rayBad += !(o.mean() == ray * d);
    }
    const double secs = secondsSince(t0);
    return {depthBad + opacityBad + covBad + rayBad == 0 && secs < kActivationSecs,
            format("%d raw pixels, violations: depth %d, opacity %d, covariance %d, ray identity %d, %.2f s (< %.0f)",
                   kActivationSamples, depthBad, opacityBad, covBad, rayBad, secs, kActivationSecs)};
}

// 6. Regularizer hand cases and offender-only gradients.
Outcome
regularizerExactness() {
    const std::vector<double> big{25, 10, 30};
    const std::vector<double> small{-6, -4, -7};
    const ScalarLoss lb = regBig(big, 20.0);
    const ScalarLoss ls = regSmall(small, -5.0);
    const bool values   = std::abs(lb.value - 27.5) <= kRegularizerTol && std::abs(ls.value - 6.5) <= kRegularizerTol;

    const double h = 1e-6;
    double fdErr   = 0.0;
    bool offendersOnly = true;
    for (std::size_t k = 0; k < big.size(); ++k) {
        auto p = big, m = big;
        p[k] += h;
        m[k] -= h;
        fdErr = std::max(fdErr, std::abs(lb.gradient[k] - (regBig(p, 20.0).value - regBig(m, 20.0).value) / (2 * h)));
        auto ps = small, ms = small;
        ps[k] += h;
        ms[k] -= h;
        fdErr = std::max(fdErr,
                         std::abs(ls.gradient[k] - (regSmall(ps, -5.0).value - regSmall(ms, -5.0).value) / (2 * h)));
        offendersOnly &= (lb.gradient[k] != 0.0) == (big[k] > 20.0);
        offendersOnly &= (ls.gradient[k] != 0.0) == (small[k] < -5.0);
    }
    return {values && offendersOnly && fdErr <= kRegularizerFdTol,
            format("L_big %.15g (27.5), L_small %.15g (6.5), FD error %.1e (<= %.0e), offender-only gradients %s",
                   lb.value, ls.value, fdErr, kRegularizerFdTol, offendersOnly ? "yes" : "no")};
}

// 7. Per-scene fitting on the seed-0 scene.
Outcome
perSceneFit(const fs::path &out) {
    const Scene scene = generateScene(0, kFitGaussians, kFitViews, kFitSize, kFitSize);
    const auto t0     = Clock::now();
    const FitResult r = fitScene(scene, FitOptions{});
    const double secs = secondsSince(t0);

    fs::create_directories(out);
    writeSplatterFile(r.image, out / "fitted.splt");
    const GaussianCloud cloud = anchoredCloud(r.image, scene.views.front().camera);
    const auto held           = heldOutViews(scene);
    const EvalReport ev       = evaluateCloud(cloud, held);
    std::string perView;
    for (std::size_t j = 0; j < held.size(); ++j) {
        writeImageF32(rasterize(cloud, held[j].camera).image, out / (held[j].camera.name + ".imgf32"));
        perView += format("%s %.2f ", ev.views[j].name.c_str(), ev.views[j].metrics.psnr);
    }
    return {ev.mean.psnr >= kFitHeldOutPsnr && secs <= kFitSeconds,
            format("held-out mean %.2f dB (>= %.0f) [%s], SSIM %.4f, %zu steps in %.0f s (<= %.0f)", ev.mean.psnr,
                   kFitHeldOutPsnr, perView.c_str(), ev.mean.ssim, r.lossTrace.size(), secs, kFitSeconds)};
}

// 8. Amortized predictor vs the dataset mean image on unseen scenes.
Outcome
amortizedPredictor(const fs::path &out) {
    const auto t0 = Clock::now();
    std::vector<Scene> train, test;
    std::vector<Image> trainImages;
    for (int i = 0; i < kTrainScenes; ++i) {
        train.push_back(generateScene(kTrainSeed0 + i, kDatasetGaussians, kDatasetViews, kDatasetSize, kDatasetSize));
        for (const View &v : train.back().views) {
            trainImages.push_back(v.image);
        }
    }
    for (int i = 0; i < kTestScenes; ++i) {
        test.push_back(generateScene(kTestSeed0 + i, kDatasetGaussians, kDatasetViews, kDatasetSize, kDatasetSize));
    }
    const Image baseline = meanImage(trainImages);

    TrainOptions opts;
    opts.steps        = kPredictorSteps;
    opts.learningRate = kPredictorRate;
    const Camera &ref = train.front().views.front().camera;
    const TrainResult r =
        trainPredictor(amortizedDataset(train), initialPredictor(0, ref.height, ref.width, ref.zNear, ref.zFar),
                       LossConfig{}, opts);
    const double secs = secondsSince(t0);

    fs::create_directories(out);
    writePredictorFile(r.net, out / "predictor.spnt");
    writeImageF32(baseline, out / "mean_image.imgf32");
    double predicted = 0.0, mean = 0.0;
    int count = 0;
    for (std::size_t s = 0; s < test.size(); ++s) {
        const GaussianCloud cloud = predictCloud(r.net, test[s].views.front());
        for (std::size_t j = 1; j < test[s].views.size(); ++j) {
            const View &v    = test[s].views[j];
            const Image img = rasterize(cloud, v.camera).image;
            writeImageF32(img, out / (indexed("scene", s) + "_" + detail::viewStem(j) + ".imgf32"));
            predicted += psnr(img, v.image);
            mean += psnr(baseline, v.image);
            ++count;
        }
    }
    predicted /= count;
    mean /= count;
    return {predicted - mean >= kPredictorGain && secs <= kPredictorSecs,
            format("%d novel views of %d unseen scenes: predictor %.2f dB, mean image %.2f dB, gain %.2f dB "
                   "(>= %.0f); %d iterations, %.0f s (<= %.0f)",
                   count, kTestScenes, predicted, mean, predicted - mean, kPredictorGain, kPredictorSteps, secs,
                   kPredictorSecs)};
}

std::vector<fs::path>
relativeFiles(const fs::path &root) {
    std::vector<fs::path> files;
    if (fs::exists(root)) {
        for (const auto &e : fs::recursive_directory_iterator(root)) {
            if (e.is_regular_file()) {
                files.push_back(fs::relative(e.path(), root));
            }
        }
    }
    std::sort(files.begin(), files.end());
    return files;
}

std::vector<char>
bytes(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// 9. Repeated runs produce identical files.
Outcome
determinism(const fs::path &a, const fs::path &b) {
    const auto fa = relativeFiles(a), fb = relativeFiles(b);
    if (fa != fb) {
        return {false, format("file lists differ (%zu vs %zu files)", fa.size(), fb.size())};
    }
    std::size_t differing = 0;
    std::string first;
    for (const auto &f : fa) {
        if (bytes(a / f) != bytes(b / f)) {
            if (differing++ == 0) {
                first = f.string();
            }
        }
    }
    return {!fa.empty() && differing == 0,
            differing == 0 ? format("%zu files from criteria 1, 7, 8 bitwise identical across two runs", fa.size())
                           : format("%zu of %zu files differ, first %s", differing, fa.size(), first.c_str())};
}

} // namespace

int
main(int argc, char **argv) {
    const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
    fs::remove_all(out);
    const fs::path runA = out / "run_a", runB = out / "run_b";
    bool allPass = true;
    auto record  = [&](int id, const char *name, const Outcome &o) {
        report(id, name, o);
        allPass &= o.pass;
    };

    try {
        record(1, "oracle agreement", oracleAgreement(runA / "c1"));
        record(2, "gradcheck", gradcheckScenes());
        record(3, "SH closure", shClosure());
        record(4, "warp-render equivalence", warpRenderEquivalence());
        record(5, "activation contracts", activationContracts());
        record(6, "regularizer exactness", regularizerExactness());
        record(7, "per-scene fitting", perSceneFit(runA / "c7"));
        record(8, "amortized predictor", amortizedPredictor(runA / "c8"));

        std::printf("repeating criteria 1, 7, 8\n");
        std::fflush(stdout);
        oracleAgreement(runB / "c1");
        perSceneFit(runB / "c7");
        amortizedPredictor(runB / "c8");
        record(9, "determinism", determinism(runA, runB));
    } catch (const std::exception &e) {
        std::printf("FAIL aborted: %s\n", e.what());
        return 1;
    }
    return allPass ? 0 : 1;
}
