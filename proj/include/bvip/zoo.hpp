#pragma once

// Zeroth-order gradient estimators (SPSA, RGF) and the update rules built on
// them: plain SPSA, SPSA with Nesterov-style gradient correction, and the
// first-order Nesterov step used as a reference on benchmark problems.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <utility>

#include "bvip/common.hpp"

namespace bvip {

template <typename F>
concept LossOracle = requires(F f, std::span<const double> x) {
    { f(x) } -> std::convertible_to<double>;
};

template <typename F>
concept GradientOracle = requires(F f, std::span<const double> x) {
    { f(x) } -> std::convertible_to<Vec>;
};

/// Power-decay gain sequences
///   a_i = a1 / (i + stability_offset)^alpha,   c_i = c1 / i^gamma.
struct GainSchedule {
    double a1 = 0.01;
    double alpha = 0.4;
    double c1 = 0.01;
    double gamma = 0.1;
    double stability_offset = 0.0;

    void validate() const {
        require(std::isfinite(a1) && a1 > 0.0, "gain schedule: a1 must be positive");
        require(alpha > 0.0 && alpha <= 1.0, "gain schedule: alpha must lie in (0, 1]");
        require(std::isfinite(c1) && c1 > 0.0 && c1 <= 1.0, "gain schedule: c1 must lie in (0, 1]");
        require(gamma > 0.0 && gamma <= 1.0, "gain schedule: gamma must lie in (0, 1]");
        require(std::isfinite(stability_offset) && stability_offset >= 0.0,
                "gain schedule: stability_offset must be nonnegative");
    }
};

struct Gains {
    double a;
    double c;
};

inline Gains schedule_at(const GainSchedule& s, std::uint64_t i) {
    require(i >= 1, "schedule_at: iteration index starts at 1");
    const auto di = static_cast<double>(i);
    return {s.a1 / std::pow(di + s.stability_offset, s.alpha), s.c1 / std::pow(di, s.gamma)};
}

enum class PerturbationKind { SegmentedUniform, Rademacher };

inline const char* to_string(PerturbationKind k) {
    return k == PerturbationKind::Rademacher ? "rademacher" : "segmented_uniform";
}

inline PerturbationKind parse_perturbation_kind(const std::string& s) {
    if (s == "rademacher") return PerturbationKind::Rademacher;
    if (s == "segmented_uniform") return PerturbationKind::SegmentedUniform;
    throw ConfigError("unknown perturbation distribution '" + s + "'");
}

struct Perturbation {
    Vec direction;
    PerturbationKind kind;
};

/// Draws Δ with i.i.d. mean-zero entries. Segmented-uniform entries lie in
/// [-1, -0.5] ∪ [0.5, 1]; Rademacher entries are ±1. Both keep |1/Δ_j| ≤ 2.
inline Perturbation sample_perturbation(std::size_t p, PerturbationKind kind, Rng& rng) {
    require(p >= 1, "sample_perturbation: dimension must be positive");
    Perturbation out{Vec(p), kind};
    for (auto& d : out.direction) {
        if (kind == PerturbationKind::Rademacher) {
            d = (rng.next_u64() >> 63) ? 1.0 : -1.0;
        } else {
            const double mag = 0.5 + 0.5 * rng.uniform();
            d = (rng.next_u64() >> 63) ? mag : -mag;
        }
    }
    return out;
}

struct GradientEstimate {
    Vec estimate;
    double c_used = 0.0;
    std::size_t repeats = 0;
    Vec loss_plus;   ///< per repeat; for RGF the perturbed losses
    Vec loss_minus;  ///< per repeat; for RGF a single entry holding L(φ)
    std::size_t evaluations = 0;
};

/// Two-sided SPSA estimate averaged over `repeats` independent perturbations:
///   ê = mean_r [L(φ + cΔ_r) − L(φ − cΔ_r)] / (2c) · Δ_r⁻¹.
/// Consumes exactly 2·repeats oracle calls.
template <LossOracle Loss>
GradientEstimate spsa_estimate(Loss&& loss, std::span<const double> phi, double c,
                               PerturbationKind kind, std::size_t repeats, Rng& rng) {
    require(c > 0.0 && std::isfinite(c), "spsa_estimate: c must be positive");
    require(repeats >= 1, "spsa_estimate: repeats must be at least 1");
    const std::size_t p = phi.size();
    GradientEstimate g;
    g.estimate.assign(p, 0.0);
    g.c_used = c;
    g.repeats = repeats;
    g.loss_plus.reserve(repeats);
    g.loss_minus.reserve(repeats);

    Vec plus(p), minus(p);
    for (std::size_t r = 0; r < repeats; ++r) {
        const Perturbation delta = sample_perturbation(p, kind, rng);
        for (std::size_t j = 0; j < p; ++j) {
            plus[j] = phi[j] + c * delta.direction[j];
            minus[j] = phi[j] - c * delta.direction[j];
        }
        const double lp = static_cast<double>(loss(std::span<const double>(plus)));
        const double lm = static_cast<double>(loss(std::span<const double>(minus)));
        g.evaluations += 2;
        if (!std::isfinite(lp) || !std::isfinite(lm))
            throw EstimationError("spsa_estimate: non-finite loss", r);
        g.loss_plus.push_back(lp);
        g.loss_minus.push_back(lm);
        const double scale = (lp - lm) / (2.0 * c);
        for (std::size_t j = 0; j < p; ++j) g.estimate[j] += scale / delta.direction[j];
    }
    if (repeats > 1) {
        const double inv = 1.0 / static_cast<double>(repeats);
        for (auto& e : g.estimate) e *= inv;
    }
    return g;
}

/// Random gradient-free (one-sided) estimate along q unit-normalized Gaussian
/// directions: (1/q) Σ_j [L(φ + μu_j) − L(φ)]/μ · u_j. Consumes q + 1 calls.
template <LossOracle Loss>
GradientEstimate rgf_estimate(Loss&& loss, std::span<const double> phi, double mu, std::size_t q,
                              Rng& rng) {
    require(mu > 0.0 && std::isfinite(mu), "rgf_estimate: mu must be positive");
    require(q >= 1, "rgf_estimate: q must be at least 1");
    const std::size_t p = phi.size();
    GradientEstimate g;
    g.estimate.assign(p, 0.0);
    g.c_used = mu;
    g.repeats = q;

    const double base = static_cast<double>(loss(phi));
    g.evaluations = 1;
    if (!std::isfinite(base)) throw EstimationError("rgf_estimate: non-finite base loss", 0);
    g.loss_minus.push_back(base);

    Vec u(p), probe(p);
    for (std::size_t k = 0; k < q; ++k) {
        double nrm = 0.0;
        do {
            for (auto& x : u) x = rng.normal();
            nrm = norm2(u);
        } while (nrm == 0.0);
        for (std::size_t j = 0; j < p; ++j) {
            u[j] /= nrm;
            probe[j] = phi[j] + mu * u[j];
        }
        const double lk = static_cast<double>(loss(std::span<const double>(probe)));
        ++g.evaluations;
        if (!std::isfinite(lk)) throw EstimationError("rgf_estimate: non-finite loss", k);
        g.loss_plus.push_back(lk);
        const double scale = (lk - base) / mu;
        for (std::size_t j = 0; j < p; ++j) g.estimate[j] += scale * u[j];
    }
    const double inv = 1.0 / static_cast<double>(q);
    for (auto& e : g.estimate) e *= inv;
    return g;
}

struct OptimizerState {
    std::uint64_t iteration = 1;
    Vec params;
    Vec momentum;  ///< m_i; starts at zero
    double beta = 0.0;
    GainSchedule schedule;
    std::uint64_t rng_seed = 0;

    OptimizerState() = default;
    OptimizerState(Vec initial, GainSchedule sched, double beta_, std::uint64_t seed)
        : params(std::move(initial)),
          momentum(params.size(), 0.0),
          beta(beta_),
          schedule(sched),
          rng_seed(seed) {
        validate();
    }

    void validate() const {
        schedule.validate();
        require(beta >= 0.0 && beta < 1.0, "optimizer: beta must lie in [0, 1)");
        require_same_length(momentum.size(), params.size(), "optimizer momentum");
        require(iteration >= 1, "optimizer: iteration starts at 1");
        require(all_finite(params), "optimizer: parameters must be finite");
    }
};

/// φ_{i+1} = φ_i − a_i ê. Momentum is left untouched.
inline OptimizerState spsa_step(OptimizerState state, const GradientEstimate& est) {
    require_same_length(est.estimate.size(), state.params.size(), "spsa_step");
    const double a = schedule_at(state.schedule, state.iteration).a;
    for (std::size_t j = 0; j < state.params.size(); ++j)
        state.params[j] -= a * est.estimate[j];
    ++state.iteration;
    return state;
}

/// Estimates the gradient at the current iterate and applies spsa_step.
template <LossOracle Loss>
OptimizerState spsa_iterate(const OptimizerState& state, Loss&& loss, PerturbationKind kind,
                            std::size_t repeats, Rng& rng, GradientEstimate* est_out = nullptr) {
    const double c = schedule_at(state.schedule, state.iteration).c;
    GradientEstimate est = spsa_estimate(loss, state.params, c, kind, repeats, rng);
    OptimizerState next = spsa_step(state, est);
    if (est_out) *est_out = std::move(est);
    return next;
}

/// SPSA with gradient correction:
///   m_{i+1} = β m_i − a_i ê(φ_i + β m_i),   φ_{i+1} = φ_i + m_{i+1}.
/// With β = 0 this is bitwise identical to spsa_iterate under the same Rng.
/// On estimation failure the exception propagates and the input state stays valid.
template <LossOracle Loss>
OptimizerState spsa_gc_step(const OptimizerState& state, Loss&& loss, PerturbationKind kind,
                            std::size_t repeats, Rng& rng, GradientEstimate* est_out = nullptr) {
    require(state.beta >= 0.0 && state.beta < 1.0, "spsa_gc_step: beta must lie in [0, 1)");
    const std::size_t p = state.params.size();
    const Gains g = schedule_at(state.schedule, state.iteration);

    Vec lookahead(p);
    for (std::size_t j = 0; j < p; ++j) lookahead[j] = state.params[j] + state.beta * state.momentum[j];
    GradientEstimate est = spsa_estimate(loss, lookahead, g.c, kind, repeats, rng);

    OptimizerState next = state;
    for (std::size_t j = 0; j < p; ++j) {
        // u = a ê − β m, so m' = −u and φ' = φ − u; β = 0 gives exactly φ − a ê.
        const double u = g.a * est.estimate[j] - state.beta * state.momentum[j];
        next.momentum[j] = -u;
        next.params[j] = state.params[j] - u;
    }
    ++next.iteration;
    if (est_out) *est_out = std::move(est);
    return next;
}

/// RGF estimate at the current iterate followed by a plain descent step with a_i.
template <LossOracle Loss>
OptimizerState rgf_iterate(const OptimizerState& state, Loss&& loss, double mu, std::size_t q,
                           Rng& rng, GradientEstimate* est_out = nullptr) {
    GradientEstimate est = rgf_estimate(loss, state.params, mu, q, rng);
    OptimizerState next = spsa_step(state, est);
    if (est_out) *est_out = std::move(est);
    return next;
}

struct NagResult {
    Vec params;
    Vec momentum;
};

/// First-order Nesterov step with the analytic gradient at the look-ahead point.
template <GradientOracle Grad>
NagResult nag_step(std::span<const double> phi, std::span<const double> momentum, Grad&& grad,
                   double lr, double beta) {
    require_same_length(phi.size(), momentum.size(), "nag_step");
    require(beta >= 0.0 && beta < 1.0, "nag_step: beta must lie in [0, 1)");
    const std::size_t p = phi.size();
    Vec lookahead(p);
    for (std::size_t j = 0; j < p; ++j) lookahead[j] = phi[j] + beta * momentum[j];
    const Vec g = grad(std::span<const double>(lookahead));
    require_same_length(g.size(), p, "nag_step gradient");
    NagResult out{Vec(p), Vec(p)};
    for (std::size_t j = 0; j < p; ++j) {
        const double u = lr * g[j] - beta * momentum[j];
        out.momentum[j] = -u;
        out.params[j] = phi[j] - u;
    }
    return out;
}

}  // namespace bvip
