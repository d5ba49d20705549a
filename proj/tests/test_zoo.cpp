#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "bvip/zoo.hpp"

using namespace bvip;

namespace {

double sq_norm_loss(std::span<const double> x) { return dot(x, x); }

Vec random_vec(std::size_t p, Rng& rng, double scale = 1.0) {
    Vec v(p);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

}  // namespace

TEST(GainSchedule, PowerLawValues) {
    const GainSchedule s{0.01, 0.4, 0.01, 0.1, 0.0};
    EXPECT_DOUBLE_EQ(schedule_at(s, 1).a, 0.01);
    EXPECT_DOUBLE_EQ(schedule_at(s, 1).c, 0.01);
    // 32^0.4 = 4 and 1024^0.1 = 2
    EXPECT_NEAR(schedule_at(s, 32).a, 0.0025, 1e-15);
    EXPECT_NEAR(schedule_at(s, 1024).c, 0.005, 1e-15);

    const GainSchedule off{1.0, 1.0, 0.5, 1.0, 9.0};
    EXPECT_DOUBLE_EQ(schedule_at(off, 1).a, 0.1);
    EXPECT_DOUBLE_EQ(schedule_at(off, 2).c, 0.25);
}

TEST(GainSchedule, MonotoneNonIncreasing) {
    const GainSchedule s{0.3, 0.602, 0.2, 0.101, 5.0};
    for (std::uint64_t i = 1; i < 500; ++i) {
        EXPECT_LE(schedule_at(s, i + 1).a, schedule_at(s, i).a);
        EXPECT_LE(schedule_at(s, i + 1).c, schedule_at(s, i).c);
    }
}

TEST(GainSchedule, RejectsInvalid) {
    EXPECT_THROW(schedule_at(GainSchedule{}, 0), ConfigError);
    EXPECT_THROW((GainSchedule{0.0, 0.4, 0.01, 0.1, 0}.validate()), ConfigError);
    EXPECT_THROW((GainSchedule{0.1, 1.5, 0.01, 0.1, 0}.validate()), ConfigError);
    EXPECT_THROW((GainSchedule{0.1, 0.4, 2.0, 0.1, 0}.validate()), ConfigError);
    EXPECT_THROW((GainSchedule{0.1, 0.4, 0.01, 0.0, 0}.validate()), ConfigError);
    EXPECT_THROW((GainSchedule{0.1, 0.4, 0.01, 0.1, -1}.validate()), ConfigError);
}

TEST(Perturbation, SegmentedUniformSupport) {
    Rng rng(3);
    double sum = 0.0;
    const std::size_t n = 20000;
    const auto d = sample_perturbation(n, PerturbationKind::SegmentedUniform, rng).direction;
    for (double v : d) {
        EXPECT_GE(std::abs(v), 0.5);
        EXPECT_LE(std::abs(v), 1.0);
        sum += v;
    }
    EXPECT_LT(std::abs(sum / n), 0.02);
}

TEST(Perturbation, RademacherSigns) {
    Rng rng(4);
    const auto d = sample_perturbation(10000, PerturbationKind::Rademacher, rng).direction;
    double sum = 0.0;
    for (double v : d) {
        EXPECT_EQ(std::abs(v), 1.0);
        sum += v;
    }
    EXPECT_LT(std::abs(sum / 10000.0), 0.05);
}

TEST(SpsaEstimate, ExactOnScalarQuadratic) {
    Rng pick(11), rng(12);
    for (int t = 0; t < 200; ++t) {
        const double k = pick.uniform(0.5, 2.0);
        const Vec phi{pick.uniform(-1.0, 1.0)};
        auto loss = [k](std::span<const double> x) { return k * x[0] * x[0]; };
        const auto g = spsa_estimate(loss, phi, 1e-3, PerturbationKind::SegmentedUniform, 1, rng);
        EXPECT_NEAR(g.estimate[0], 2.0 * k * phi[0], 1e-12);
    }
}

TEST(SpsaEstimate, CallCountAndRecordedLosses) {
    Rng rng(1);
    std::size_t calls = 0;
    auto loss = [&](std::span<const double> x) {
        ++calls;
        return sq_norm_loss(x);
    };
    const Vec phi(7, 0.5);
    const auto g = spsa_estimate(loss, phi, 0.01, PerturbationKind::Rademacher, 6, rng);
    EXPECT_EQ(calls, 12u);
    EXPECT_EQ(g.evaluations, 12u);
    EXPECT_EQ(g.loss_plus.size(), 6u);
    EXPECT_EQ(g.loss_minus.size(), 6u);
    EXPECT_EQ(g.repeats, 6u);
    EXPECT_DOUBLE_EQ(g.c_used, 0.01);
}

// Error of the averaged estimator on a linear loss: component j picks up
// Σ_{k≠j} g_k Δ_k/Δ_j, so E‖ê − g‖² = (p−1)‖g‖² E[Δ²] E[Δ⁻²] / R.
TEST(SpsaEstimate, ErrorVarianceMatchesClosedForm) {
    const std::size_t p = 20, repeats = 10, trials = 3000;
    Rng rng(21);
    const Vec grad = random_vec(p, rng);
    auto loss = [&](std::span<const double> x) { return dot(grad, x); };
    const Vec phi(p, 0.0);
    struct Case {
        PerturbationKind kind;
        double kappa;
    };
    // segmented uniform: E[Δ²] = 7/12, E[Δ⁻²] = 2
    for (const Case c : {Case{PerturbationKind::SegmentedUniform, 7.0 / 6.0}, Case{PerturbationKind::Rademacher, 1.0}}) {
        double mse = 0.0;
        for (std::size_t t = 0; t < trials; ++t) {
            const auto g = spsa_estimate(loss, phi, 0.1, c.kind, repeats, rng);
            for (std::size_t j = 0; j < p; ++j) mse += (g.estimate[j] - grad[j]) * (g.estimate[j] - grad[j]);
        }
        mse /= double(trials);
        const double expected = double(p - 1) * dot(grad, grad) * c.kappa / double(repeats);
        EXPECT_NEAR(mse / expected, 1.0, 0.08) << to_string(c.kind);
    }
}

TEST(SpsaEstimate, ConvergesToGradientWithManyRepeats) {
    Rng rng(5);
    const Vec phi = random_vec(10, rng);
    const auto g = spsa_estimate(sq_norm_loss, phi, 1e-3, PerturbationKind::SegmentedUniform, 20000, rng);
    Vec truth(phi.size());
    for (std::size_t j = 0; j < phi.size(); ++j) truth[j] = 2.0 * phi[j];
    EXPECT_GT(dot(g.estimate, truth) / (norm2(g.estimate) * norm2(truth)), 0.99);
}

TEST(SpsaEstimate, RejectsBadArgumentsAndNonFinite) {
    Rng rng(0);
    const Vec phi(3, 0.0);
    EXPECT_THROW(spsa_estimate(sq_norm_loss, phi, 0.0, PerturbationKind::Rademacher, 1, rng), ConfigError);
    EXPECT_THROW(spsa_estimate(sq_norm_loss, phi, 0.1, PerturbationKind::Rademacher, 0, rng), ConfigError);
    auto bad = [](std::span<const double>) { return std::nan(""); };
    EXPECT_THROW(spsa_estimate(bad, phi, 0.1, PerturbationKind::Rademacher, 2, rng), EstimationError);
}

TEST(RgfEstimate, CallCountAndLinearBias) {
    const std::size_t p = 8, q = 40000;
    Rng rng(2);
    const Vec grad = random_vec(p, rng);
    std::size_t calls = 0;
    auto loss = [&](std::span<const double> x) {
        ++calls;
        return dot(grad, x);
    };
    const auto g = rgf_estimate(loss, Vec(p, 0.3), 0.01, q, rng);
    EXPECT_EQ(calls, q + 1);
    EXPECT_EQ(g.evaluations, q + 1);
    // unit-sphere directions: E[u uᵀ] = I/p
    for (std::size_t j = 0; j < p; ++j) EXPECT_NEAR(g.estimate[j], grad[j] / double(p), 0.02 * norm2(grad));
}

TEST(SpsaIterate, AppliesGainToEstimate) {
    const GainSchedule s{0.1, 1.0, 0.01, 1.0, 0.0};
    OptimizerState st(Vec{1.0, -2.0}, s, 0.0, 0);
    GradientEstimate e;
    e.estimate = {4.0, 10.0};
    const auto next = spsa_step(st, e);
    EXPECT_DOUBLE_EQ(next.params[0], 1.0 - 0.4);
    EXPECT_DOUBLE_EQ(next.params[1], -2.0 - 1.0);
    EXPECT_EQ(next.iteration, 2u);
}

TEST(SpsaGc, BetaZeroBitwiseEqualsSpsa) {
    const GainSchedule s{0.01, 0.602, 0.05, 0.101, 1.0};
    Rng init(9);
    const Vec start = random_vec(30, init);
    OptimizerState a(start, s, 0.0, 1), b(start, s, 0.0, 1);
    Rng ra(77), rb(77);
    auto loss = [](std::span<const double> x) {
        double v = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) v += (j + 1.0) * x[j] * x[j] + std::sin(x[j]);
        return v;
    };
    for (int t = 0; t < 1000; ++t) {
        a = spsa_iterate(a, loss, PerturbationKind::SegmentedUniform, 2, ra);
        b = spsa_gc_step(b, loss, PerturbationKind::SegmentedUniform, 2, rb);
        ASSERT_EQ(std::memcmp(a.params.data(), b.params.data(), a.params.size() * sizeof(double)), 0) << "step " << t;
    }
}

TEST(SpsaGc, MatchesMomentumRecurrence) {
    const GainSchedule s{0.05, 0.5, 0.02, 0.2, 2.0};
    const double beta = 0.7;
    Rng init(14);
    OptimizerState st(random_vec(6, init), s, beta, 0);
    st.momentum = random_vec(6, init, 0.1);
    Rng r1(5), r2(5);
    GradientEstimate est;
    const auto next = spsa_gc_step(st, sq_norm_loss, PerturbationKind::SegmentedUniform, 3, r1, &est);

    Vec look(6);
    for (std::size_t j = 0; j < 6; ++j) look[j] = st.params[j] + beta * st.momentum[j];
    const Gains g = schedule_at(s, 1);
    const auto ref = spsa_estimate(sq_norm_loss, look, g.c, PerturbationKind::SegmentedUniform, 3, r2);
    for (std::size_t j = 0; j < 6; ++j) {
        const double m = beta * st.momentum[j] - g.a * ref.estimate[j];
        EXPECT_NEAR(next.momentum[j], m, 1e-15);
        EXPECT_NEAR(next.params[j], st.params[j] + m, 1e-15);
        EXPECT_EQ(est.estimate[j], ref.estimate[j]);
    }
    EXPECT_EQ(next.iteration, 2u);
}

TEST(SpsaGc, FailureLeavesStateIntact) {
    OptimizerState st(Vec{1.0, 2.0}, GainSchedule{}, 0.5, 0);
    const OptimizerState copy = st;
    Rng rng(0);
    auto bad = [](std::span<const double>) { return std::numeric_limits<double>::infinity(); };
    EXPECT_THROW(spsa_gc_step(st, bad, PerturbationKind::Rademacher, 1, rng), EstimationError);
    EXPECT_EQ(st.params, copy.params);
    EXPECT_EQ(st.momentum, copy.momentum);
    EXPECT_EQ(st.iteration, copy.iteration);
}

TEST(SpsaGc, DeterministicUnderSeed) {
    const GainSchedule s{0.02, 0.602, 0.05, 0.101, 0.0};
    auto run = [&] {
        OptimizerState st(Vec(12, 1.0), s, 0.9, 0);
        Rng rng(123);
        for (int t = 0; t < 200; ++t) st = spsa_gc_step(st, sq_norm_loss, PerturbationKind::SegmentedUniform, 5, rng);
        return st.params;
    };
    EXPECT_EQ(run(), run());
}

TEST(SpsaGc, DescendsQuadratic) {
    const GainSchedule s{0.02, 0.602, 0.05, 0.101, 0.0};
    OptimizerState st(Vec(12, 1.0), s, 0.9, 0);
    Rng rng(8);
    for (int t = 0; t < 300; ++t) st = spsa_gc_step(st, sq_norm_loss, PerturbationKind::SegmentedUniform, 5, rng);
    EXPECT_LT(sq_norm_loss(st.params), 0.01 * 12.0);
}

TEST(OptimizerState, ValidatesBeta) {
    EXPECT_THROW(OptimizerState(Vec{1.0}, GainSchedule{}, 1.0, 0), ConfigError);
    EXPECT_THROW(OptimizerState(Vec{std::nan("")}, GainSchedule{}, 0.1, 0), ConfigError);
}

TEST(Nag, HandComputedStep) {
    // f = x², grad 2x; look-ahead 1 + 0.5·(−0.2) = 0.9, u = 0.1·1.8 + 0.1 = 0.28, φ' = 0.72
    auto grad = [](std::span<const double> x) { return Vec{2.0 * x[0]}; };
    const auto r = nag_step(Vec{1.0}, Vec{-0.2}, grad, 0.1, 0.5);
    EXPECT_NEAR(r.momentum[0], -0.28, 1e-15);
    EXPECT_NEAR(r.params[0], 0.72, 1e-15);
}

TEST(Nag, BetaZeroIsGradientDescent) {
    auto grad = [](std::span<const double> x) { return Vec{2.0 * x[0], 6.0 * x[1]}; };
    const auto r = nag_step(Vec{1.0, 1.0}, Vec{0.3, 0.3}, grad, 0.1, 0.0);
    EXPECT_DOUBLE_EQ(r.params[0], 0.8);
    EXPECT_DOUBLE_EQ(r.params[1], 0.4);
}
