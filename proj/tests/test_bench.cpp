#include <gtest/gtest.h>

#include <cmath>

#include "bvip/bench.hpp"
#include "bvip/harness/bench_runner.hpp"

using namespace bvip;

TEST(Rosenbrock, KnownValues) {
    EXPECT_EQ(rosenbrock_eval(Vec(100, 1.0)), 0.0);
    EXPECT_EQ(rosenbrock_eval(Vec(100, 0.0)), 99.0);
    // (x, y) = (-1, 1): 100·(1 − 1)² + (1 + 1)² = 4
    EXPECT_EQ(rosenbrock_eval(Vec{-1.0, 1.0}), 4.0);
    EXPECT_EQ(rosenbrock_eval(Vec{0.0, 1.0}), 101.0);
    EXPECT_THROW(rosenbrock_eval(Vec{1.0}), ConfigError);
}

TEST(Rosenbrock, GradientMatchesCentralDifferences) {
    Rng rng(42);
    for (int t = 0; t < 20; ++t) {
        Vec x(10);
        for (auto& v : x) v = rng.uniform(-1.5, 1.5);
        const Vec g = rosenbrock_grad(x);
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double h = 1e-6;
            Vec xp = x, xm = x;
            xp[j] += h;
            xm[j] -= h;
            const double fd = (rosenbrock_eval(xp) - rosenbrock_eval(xm)) / (2 * h);
            EXPECT_NEAR(g[j], fd, 1e-5 * std::max(1.0, std::abs(fd)));
        }
    }
    for (double v : rosenbrock_grad(Vec(7, 1.0))) EXPECT_EQ(v, 0.0);
}

TEST(NormalizedLoss, EndpointsAndDegenerate) {
    EXPECT_EQ(normalized_loss(0.0, 99.0, 99.0), 1.0);
    EXPECT_EQ(normalized_loss(0.0, 99.0, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(normalized_loss(1.0, 3.0, 2.0), 0.5);
    EXPECT_THROW(normalized_loss(2.0, 2.0, 1.0), Error);
}

TEST(NoisyOracle, ZeroScaleIsExactAndCountsCalls) {
    NoisyOracle o(make_rosenbrock(5), 0.0, 1);
    EXPECT_EQ(o(Vec(5, 0.0)), 4.0);
    EXPECT_EQ(o(Vec(5, 1.0)), 0.0);
    EXPECT_EQ(o.calls(), 2u);
}

TEST(NoisyOracle, ReproducibleGaussianNoise) {
    NoisyOracle a(make_rosenbrock(3), 0.5, 9), b(make_rosenbrock(3), 0.5, 9);
    const Vec x(3, 1.0);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int k = 0; k < n; ++k) {
        const double va = a(x);
        ASSERT_EQ(va, b(x));
        sum += va;
        sq += va * va;
    }
    const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_NEAR(sd, 0.5, 0.02);
    NoisyOracle c(make_rosenbrock(3), 0.5, 10);
    EXPECT_NE(c(x), NoisyOracle(make_rosenbrock(3), 0.5, 9)(x));
}

TEST(NoisyOracle, RejectsNegativeScale) {
    EXPECT_THROW(NoisyOracle(make_rosenbrock(2), -1.0, 0), ConfigError);
}

TEST(BenchRunner, QueryAccountingPerMethod) {
    ExperimentConfig cfg;
    cfg.bench.dimension = 10;
    cfg.bench.eval_budget = 1000;
    cfg.bench.log_interval = 100;
    for (const std::string m : {"spsa", "spsa_gc"}) {
        std::uint64_t calls = 0;
        const auto rows = run_bench_single(cfg, m, 0.0, 0, &calls);
        EXPECT_EQ(calls, 2 * cfg.repeats * (cfg.bench.eval_budget / (2 * cfg.repeats)));
        EXPECT_EQ(rows.back().eval_count, calls);
        EXPECT_EQ(rows.front().normalized_loss, 1.0);
    }
    std::uint64_t calls = 0;
    const auto rows = run_bench_single(cfg, "rgf", 0.0, 0, &calls);
    const std::uint64_t per = cfg.bench.rgf_q + 1;
    EXPECT_EQ(calls, per * (cfg.bench.eval_budget / per));
    EXPECT_EQ(rows.back().iteration * per, calls);
}

TEST(BenchRunner, RowsAreMonotoneInEvaluations) {
    ExperimentConfig cfg;
    cfg.bench.dimension = 20;
    cfg.bench.eval_budget = 2000;
    cfg.bench.log_interval = 250;
    for (const auto& m : bench_methods()) {
        const auto rows = run_bench_single(cfg, m, 0.0, 3);
        ASSERT_GE(rows.size(), 2u);
        for (std::size_t i = 1; i < rows.size(); ++i) {
            EXPECT_GT(rows[i].eval_count, rows[i - 1].eval_count);
            EXPECT_EQ(rows[i].method, m);
        }
    }
}

TEST(BenchRunner, NoiseKindAddsScales) {
    ExperimentConfig cfg;
    cfg.kind = ExperimentKind::BenchNoise;
    cfg.seeds = {0};
    cfg.bench.dimension = 4;
    cfg.bench.eval_budget = 100;
    cfg.bench.noise_scales = {0.0, 0.5};
    const auto out = run_bench(cfg);
    ASSERT_EQ(out.finals.size(), 2u);
    EXPECT_EQ(out.finals.at(0.0).size(), 4u);
    EXPECT_EQ(out.finals.at(0.5).size(), 3u);  // no first-order reference under noise
}
