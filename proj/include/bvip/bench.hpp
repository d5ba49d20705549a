#pragma once

// Benchmark objectives for comparing the optimizers: the d-dimensional
// Rosenbrock function, its gradient, and a Gaussian observation-noise wrapper.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>

#include "bvip/common.hpp"

namespace bvip {

/// Σ_{j<d-1} 100 (θ_{j+1} − θ_j²)² + (1 − θ_j)².
inline double rosenbrock_eval(std::span<const double> theta) {
    require(theta.size() >= 2, "rosenbrock: dimension must be at least 2");
    double s = 0.0;
    for (std::size_t j = 0; j + 1 < theta.size(); ++j) {
        const double a = theta[j + 1] - theta[j] * theta[j];
        const double b = 1.0 - theta[j];
        s += 100.0 * a * a + b * b;
    }
    return s;
}

inline Vec rosenbrock_grad(std::span<const double> theta) {
    require(theta.size() >= 2, "rosenbrock: dimension must be at least 2");
    const std::size_t d = theta.size();
    Vec g(d, 0.0);
    for (std::size_t j = 0; j + 1 < d; ++j) {
        const double a = theta[j + 1] - theta[j] * theta[j];
        g[j] += -400.0 * theta[j] * a - 2.0 * (1.0 - theta[j]);
        g[j + 1] += 200.0 * a;
    }
    return g;
}

/// |L* − L| / |L* − L0|: 1 at the initial point, 0 at the optimum.
inline double normalized_loss(double l_star, double l_0, double l) {
    if (l_0 == l_star) throw Error("normalized_loss: degenerate run (L0 equals L*)");
    return std::abs(l_star - l) / std::abs(l_star - l_0);
}

struct BenchmarkProblem {
    std::size_t dimension = 0;
    std::function<double(std::span<const double>)> eval;
    std::optional<std::function<Vec(std::span<const double>)>> true_gradient;
    double optimum_value = 0.0;
    Vec optimum_point;
    Vec initial_point;
};

/// Rosenbrock in `d` dimensions starting from all-zeros unless `start` is given.
inline BenchmarkProblem make_rosenbrock(std::size_t d, std::optional<Vec> start = std::nullopt) {
    require(d >= 2, "rosenbrock: dimension must be at least 2");
    BenchmarkProblem p;
    p.dimension = d;
    p.eval = [](std::span<const double> x) { return rosenbrock_eval(x); };
    p.true_gradient = [](std::span<const double> x) { return rosenbrock_grad(x); };
    p.optimum_value = 0.0;
    p.optimum_point.assign(d, 1.0);
    p.initial_point = start ? *start : Vec(d, 0.0);
    require_same_length(p.initial_point.size(), d, "rosenbrock initial point");
    return p;
}

/// L_noisy(θ) = L(θ) + ξ with ξ ~ N(0, scale²), one independent draw per call.
/// The draw for call k depends only on (seed, k); the call counter is atomic.
class NoisyOracle {
public:
    NoisyOracle(BenchmarkProblem base, double noise_scale, std::uint64_t seed)
        : base_(std::move(base)), scale_(noise_scale), seed_(seed) {
        require(noise_scale >= 0.0 && std::isfinite(noise_scale),
                "noisy oracle: noise scale must be nonnegative");
    }

    NoisyOracle(const NoisyOracle& o)
        : base_(o.base_), scale_(o.scale_), seed_(o.seed_), calls_(o.calls_.load()) {}

    double operator()(std::span<const double> theta) { return noisy_eval(theta); }

    double noisy_eval(std::span<const double> theta) {
        const std::uint64_t k = calls_.fetch_add(1, std::memory_order_relaxed);
        const double v = base_.eval(theta);
        if (scale_ == 0.0) return v;
        Rng rng(derive_seed(seed_, k));
        return v + scale_ * rng.normal();
    }

    const BenchmarkProblem& base() const { return base_; }
    double noise_scale() const { return scale_; }
    std::uint64_t calls() const { return calls_.load(); }

private:
    BenchmarkProblem base_;
    double scale_;
    std::uint64_t seed_;
    std::atomic<std::uint64_t> calls_{0};
};

}  // namespace bvip
