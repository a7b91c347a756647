// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0

#include "splatter/gradcheck.hpp"
#include "splatter/renderer.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

namespace splatter {
namespace {

using testing::originCamera;
using testing::randomGaussian;

double
psnrOf(const std::vector<float> &a, const std::vector<float> &b) {
    double mse = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        mse += std::pow(static_cast<double>(a[k]) - b[k], 2);
    }
    mse /= static_cast<double>(a.size());
    return mse == 0.0 ? 1e9 : 10.0 * std::log10(1.0 / mse);
}

GaussianCloud
randomCloud(std::mt19937_64 &rng, int n, int order = 1) {
    GaussianCloud cloud;
    for (int i = 0; i < n; ++i) {
        cloud.gaussians.push_back(randomGaussian(rng, order));
    }
    return cloud;
}

TEST(ProjectGaussian, OnAxis) {
    Camera cam = originCamera(128, 128, 100.0);
    const Gaussian3D g(1.0, Vec3(0, 0, 2), Vec3::Constant(0.1), identityQuat(), SHCoeffs(Vec3::Zero()));
    const auto p = projectGaussian(g, cam);
    ASSERT_TRUE(p);
    EXPECT_DOUBLE_EQ(p->mean2d.x(), 64.0);
    EXPECT_DOUBLE_EQ(p->mean2d.y(), 64.0);
    EXPECT_DOUBLE_EQ(p->depth, 2.0);
    // isotropic scale s at depth z on axis
    const double expected = std::pow(100.0 * 0.1 / 2.0, 2) + kCovarianceDilation;
    EXPECT_NEAR(p->cov2d(0, 0), expected, 1e-12);
    EXPECT_NEAR(p->cov2d(1, 1), expected, 1e-12);
    EXPECT_NEAR(p->cov2d(0, 1), 0.0, 1e-12);
}

TEST(ProjectGaussian, CovarianceMatchesNumericalJacobian) {
    // Oracle: differentiate the pinhole projection numerically and push Sigma through it.
    std::mt19937_64 rng(1);
    Camera cam     = originCamera(64, 64, 50.0);
    cam.worldToCam = RigidTransform(testing::rotationZ(0.3), Vec3(0.1, -0.2, 0.3));
    for (int trial = 0; trial < 20; ++trial) {
        const Gaussian3D g = randomGaussian(rng, 0);
        const auto p       = projectGaussian(g, cam);
        ASSERT_TRUE(p);
        auto proj = [&](const Vec3 &x) {
            const Vec3 t = cam.worldToCam.apply(x);
            return Vec2(cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy);
        };
        Eigen::Matrix<double, 2, 3> jac;
        for (int k = 0; k < 3; ++k) {
            Vec3 e   = Vec3::Zero();
            e[k]     = 1e-6;
            jac.col(k) = (proj(g.mean() + e) - proj(g.mean() - e)) / 2e-6;
        }
        const Mat2 expected = jac * g.covariance() * jac.transpose() + kCovarianceDilation * Mat2::Identity();
        EXPECT_LT((p->cov2d - expected).cwiseAbs().maxCoeff(), 1e-6 * expected.cwiseAbs().maxCoeff());
        EXPECT_LT((p->mean2d - proj(g.mean())).norm(), 1e-9);
    }
}

TEST(ProjectGaussian, BehindCameraIsCulled) {
    const Camera cam = originCamera(32, 32, 30.0);
    const Gaussian3D g(1.0, Vec3(0, 0, -1), Vec3::Constant(0.1), identityQuat(), SHCoeffs(Vec3::Zero()));
    EXPECT_FALSE(projectGaussian(g, cam));
}

TEST(Rasterize, EmptyCloudIsBlack) {
    const Camera cam = originCamera(20, 12, 10.0);
    const auto out   = rasterize(GaussianCloud{}, cam);
    for (float v : out.image.pixels) {
        EXPECT_EQ(v, 0.0f);
    }
    for (float t : out.aux.finalTransmittance) {
        EXPECT_EQ(t, 1.0f);
    }
}

TEST(Rasterize, SingleOpaqueGaussianSaturatesAlpha) {
    const Camera cam = originCamera(33, 33, 30.0);
    const Gaussian3D g(1.0, Vec3(0, 0, 2), Vec3::Constant(2.0), identityQuat(), SHCoeffs(Vec3(1, 0, 0)));
    const auto out = rasterize<double>(GaussianCloud{{g}, "world"}, cam);
    // pixel (16, 16) center sits at (16.5, 16.5) = principal point
    EXPECT_NEAR(out.image.at(16, 16, 0), 0.999, 1e-12);
    EXPECT_EQ(out.image.at(16, 16, 1), 0.0);
    EXPECT_NEAR(out.aux.finalTransmittance[16 * 33 + 16], 1e-3, 1e-12);
}

TEST(Rasterize, FrameMismatch) {
    const Camera cam = originCamera(8, 8, 10.0);
    GaussianCloud cloud;
    cloud.frameId = "elsewhere";
    EXPECT_THROW(rasterize(cloud, cam), FrameMismatch);
    EXPECT_THROW(rasterizeBackward<float>(cloud, cam, std::vector<float>(8 * 8 * 3)), FrameMismatch);
}

TEST(Rasterize, ValueRangeAndTransmittanceConservation) {
    std::mt19937_64 rng(2);
    const Camera cam = originCamera(40, 40, 36.0);
    for (int trial = 0; trial < 5; ++trial) {
        GaussianCloud cloud = randomCloud(rng, 30, 0);
        // white splats: pixel value equals the summed compositing weight
        for (auto &g : cloud.gaussians) {
            g = Gaussian3D(testing::uniform(rng, 0.2, 1.0), g.mean(), g.scale(), g.rotation(),
                           SHCoeffs(Vec3::Ones()));
        }
        const auto out = rasterize<double>(cloud, cam);
        for (std::size_t p = 0; p < out.image.pixelCount(); ++p) {
            const double t = out.aux.finalTransmittance[p];
            EXPECT_GE(t, 0.0);
            EXPECT_LE(t, 1.0);
            EXPECT_NEAR(out.image.pixels[3 * p] + t, 1.0, 1e-6);
        }
    }
}

TEST(Rasterize, DeterministicAcrossThreadCounts) {
    std::mt19937_64 rng(3);
    const Camera cam          = originCamera(70, 50, 45.0);
    const GaussianCloud cloud = randomCloud(rng, 60);
    const auto one            = rasterize(cloud, cam, {1});
    const auto four           = rasterize(cloud, cam, {4});
    EXPECT_TRUE(one.image == four.image);
    EXPECT_TRUE(rasterize(cloud, cam, {1}).image == one.image);

    std::vector<float> up(one.image.pixels.size());
    for (float &u : up) {
        u = static_cast<float>(testing::uniform(rng, -1, 1));
    }
    const auto g1 = rasterizeBackward<float>(cloud, cam, up, {1});
    const auto g4 = rasterizeBackward<float>(cloud, cam, up, {3});
    for (std::size_t i = 0; i < g1.size(); ++i) {
        EXPECT_EQ(g1[i].dMean, g4[i].dMean);
        EXPECT_EQ(g1[i].dQuat, g4[i].dQuat);
        EXPECT_EQ(g1[i].dSh, g4[i].dSh);
    }
}

TEST(Rasterize, ZeroOpacityGaussiansContributeNothing) {
    std::mt19937_64 rng(4);
    const Camera cam          = originCamera(32, 32, 30.0);
    const GaussianCloud cloud = randomCloud(rng, 12);
    GaussianCloud padded      = cloud;
    for (int i = 0; i < 6; ++i) {
        padded.gaussians.insert(padded.gaussians.begin() + 2 * i, randomGaussian(rng, 1).withOpacity(0.0));
    }
    EXPECT_TRUE(rasterize(cloud, cam).image == rasterize(padded, cam).image);
}

TEST(RasterizeBackward, ZeroUpstreamGivesZeroGradients) {
    std::mt19937_64 rng(5);
    const Camera cam          = originCamera(16, 16, 15.0);
    const GaussianCloud cloud = randomCloud(rng, 5);
    const auto grads = rasterizeBackward<double>(cloud, cam, std::vector<double>(16 * 16 * 3, 0.0));
    for (const auto &g : grads) {
        EXPECT_EQ(g.dOpacity, 0.0);
        EXPECT_EQ(g.dMean, Vec3::Zero());
        EXPECT_EQ(g.dLogScale, Vec3::Zero());
        EXPECT_EQ(g.dQuat, Quat::Zero());
        for (double v : g.dSh) {
            EXPECT_EQ(v, 0.0);
        }
    }
}

TEST(RasterizeBackward, SingleGaussianOpacityFiniteDifference) {
    const Camera cam = originCamera(24, 24, 22.0);
    const Gaussian3D g(0.6, Vec3(0.05, -0.02, 2.0), Vec3(0.2, 0.15, 0.1), Quat(0.9, 0.1, 0.3, -0.2),
                       SHCoeffs(Vec3(0.5, 0.3, 0.7)));
    const GaussianCloud cloud{{g}, "world"};
    const std::vector<double> ones(24 * 24 * 3, 1.0);
    const auto grads = rasterizeBackward<double>(cloud, cam, ones);
    const double h   = 1e-4;
    const double fd  = (weightedRenderLoss(GaussianCloud{{g.withOpacity(0.6 + h)}, "world"}, cam, ones) -
                       weightedRenderLoss(GaussianCloud{{g.withOpacity(0.6 - h)}, "world"}, cam, ones)) /
                      (2 * h);
    EXPECT_NEAR(grads[0].dOpacity, fd, 1e-4 * std::abs(fd));
}

TEST(RasterizeBackward, FullGradcheck) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto scene  = makeGradcheckScene(seed, 8, 32);
        const auto report = gradcheck(scene.cloud, scene.camera, scene.upstream);
        EXPECT_GT(report.checked, 100u);
        EXPECT_LE(report.maxRelError, 1e-3) << "worst: " << report.worst;
    }
}

TEST(RasterizeBackward, FloatPathTracksDoublePath) {
    const auto scene = makeGradcheckScene(42, 8, 32);
    std::vector<float> upF(scene.upstream.begin(), scene.upstream.end());
    const auto gd = rasterizeBackward<double>(scene.cloud, scene.camera, scene.upstream);
    const auto gf = rasterizeBackward<float>(scene.cloud, scene.camera, upF);
    for (std::size_t i = 0; i < gd.size(); ++i) {
        EXPECT_NEAR(gf[i].dOpacity, gd[i].dOpacity, 1e-3 * (1 + std::abs(gd[i].dOpacity)));
        EXPECT_LT((gf[i].dMean - gd[i].dMean).norm(), 1e-3 * (1 + gd[i].dMean.norm()));
    }
}

TEST(RenderOracle, FootprintOpticalDepthMinimizesProfileError) {
    // Oracle: brute-force scan of the discretized profile error over tau.
    auto profileError = [](double tau, double a) {
        double e = 0.0;
        for (int k = 0; k < 4000; ++k) {
            const double u = (k + 0.5) / 4000.0;
            const double d = -std::expm1(-tau * u) - a * u;
            e += d * d / u;
        }
        return e;
    };
    for (double a : {0.05, 0.3, 0.6, 0.9, 0.999}) {
        double best = 0.0, bestErr = std::numeric_limits<double>::infinity();
        for (double tau = 1e-3; tau < 4.0; tau += 1e-3) {
            const double e = profileError(tau, a);
            if (e < bestErr) {
                bestErr = e;
                best    = tau;
            }
        }
        EXPECT_NEAR(footprintOpticalDepth(a), best, 2e-3) << "alpha " << a;
    }
    EXPECT_EQ(footprintOpticalDepth(0.0), 0.0);
    EXPECT_NEAR(footprintOpticalDepth(1e-4), 1e-4, 1e-7);
    double prev = 0.0;
    for (double a = 0.01; a < 1.0; a += 0.01) {
        const double tau = footprintOpticalDepth(a);
        EXPECT_GT(tau, prev);
        prev = tau;
    }
}

TEST(RenderOracle, EmptyCloudIsBlack) {
    const Camera cam = originCamera(8, 8, 8.0);
    const Image img  = renderOracle(GaussianCloud{}, cam, 32, 4.0);
    for (float v : img.pixels) {
        EXPECT_EQ(v, 0.0f);
    }
    EXPECT_THROW(renderOracle(GaussianCloud{}, cam, 8, 4.0), InvalidParameter);
}

TEST(RenderOracle, QuadratureConverges) {
    std::mt19937_64 rng(6);
    const Camera cam = originCamera(24, 24, 22.0);
    for (int trial = 0; trial < 3; ++trial) {
        const GaussianCloud cloud = randomCloud(rng, 8);
        const Image a = renderOracle(cloud, cam, 256, 4.0);
        const Image b = renderOracle(cloud, cam, 512, 4.0);
        double worst  = 0.0;
        for (std::size_t k = 0; k < a.pixels.size(); ++k) {
            worst = std::max(worst, static_cast<double>(std::abs(a.pixels[k] - b.pixels[k])));
        }
        EXPECT_LE(worst, 1e-3);
    }
}

TEST(RenderOracle, SmallOpaqueGaussianCenterMatchesRasterizer) {
    const Camera cam = originCamera(31, 31, 40.0);
    // mean on the ray through pixel (15, 15)
    const Gaussian3D g(0.95, Vec3(0, 0, 2.0), Vec3::Constant(0.08), identityQuat(), SHCoeffs(Vec3(0.2, 0.9, 0.5)));
    const GaussianCloud cloud{{g}, "world"};
    const Image oracle = renderOracle(cloud, cam, 256, 4.0);
    const auto fast    = rasterize(cloud, cam).image;
    for (int ch = 0; ch < 3; ++ch) {
        const double ref = fast.at(15, 15, ch);
        EXPECT_NEAR(oracle.at(15, 15, ch), ref, 0.02 * ref);
    }
}

TEST(RenderOracle, AgreesWithRasterizerOnTranslucentClouds) {
    std::mt19937_64 rng(7);
    const Camera cam = originCamera(48, 48, 44.0);
    for (int trial = 0; trial < 3; ++trial) {
        GaussianCloud cloud;
        for (int i = 0; i < 16; ++i) {
            cloud.gaussians.push_back(randomGaussian(rng, 1, 0.05, 0.3));
        }
        const Image oracle = renderOracle(cloud, cam, 256, 4.0);
        const auto fast    = rasterize(cloud, cam).image;
        EXPECT_GE(psnrOf(oracle.pixels, fast.pixels), 35.0);
    }
}

} // namespace
} // namespace splatter
