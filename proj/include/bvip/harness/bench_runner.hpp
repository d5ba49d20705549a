#pragma once

// Optimizer comparison on the 100-D Rosenbrock benchmark: SPSA, SPSA-GC, RGF
// and first-order NAG, across seeds and observation-noise scales.

#include <limits>
#include <map>
#include <string>
#include <vector>

#include "bvip/bench.hpp"
#include "bvip/harness/config.hpp"
#include "bvip/harness/report.hpp"
#include "bvip/zoo.hpp"

namespace bvip {

inline const std::vector<std::string>& bench_methods() {
    static const std::vector<std::string> m{"spsa", "spsa_gc", "rgf", "sgd_nag"};
    return m;
}

struct BenchOutcome {
    std::vector<RunRow> rows;
    /// final normalized loss, keyed by noise scale then method; one entry per seed in seed order
    std::map<double, std::map<std::string, std::vector<double>>> finals;
    std::uint64_t oracle_calls = 0;
};

inline std::string bench_run_id(const ExperimentConfig& cfg, double noise) {
    return cfg.run_id + "-noise" + detail::format_double(noise);
}

namespace detail {

inline double finite_or_inf(double v) { return std::isfinite(v) ? v : std::numeric_limits<double>::infinity(); }

}  // namespace detail

/// One method, one seed, one noise scale. Rows are logged every
/// `log_interval` oracle evaluations (and at the end); the logged loss is the
/// noise-free objective at the current iterate.
inline std::vector<RunRow> run_bench_single(const ExperimentConfig& cfg, const std::string& method, double noise,
                                            std::uint64_t seed, std::uint64_t* calls_out = nullptr) {
    const BenchmarkProblem prob = make_rosenbrock(cfg.bench.dimension);
    const double l0 = prob.eval(prob.initial_point);
    const double lstar = prob.optimum_value;
    const std::string run_id = bench_run_id(cfg, noise);
    NoisyOracle oracle(prob, noise, derive_seed(seed, 0x6e6f697365ULL));
    Rng rng(derive_seed(seed, 0x6f7074ULL));

    const bool is_rgf = method == "rgf";
    const std::size_t per_iter = is_rgf ? cfg.bench.rgf_q + 1 : 2 * cfg.repeats;
    // NAG takes as many steps as the two-sided methods take iterations.
    const std::size_t iters = cfg.bench.eval_budget / (2 * cfg.repeats);

    std::vector<RunRow> rows;
    auto log = [&](std::uint64_t it, std::uint64_t evals, std::span<const double> params) {
        const double l = prob.eval(params);
        RunRow r;
        r.run_id = run_id;
        r.method = method;
        r.seed = seed;
        r.iteration = it;
        r.eval_count = evals;
        r.loss = l;
        r.normalized_loss = normalized_loss(lstar, l0, l);
        r.queries = evals;
        rows.push_back(std::move(r));
    };

    if (method == "sgd_nag") {
        Vec phi = prob.initial_point, m(phi.size(), 0.0);
        const std::size_t log_every = std::max<std::size_t>(1, cfg.bench.log_interval / (2 * cfg.repeats));
        log(0, 0, phi);
        for (std::size_t t = 1; t <= iters; ++t) {
            NagResult r = nag_step(phi, m, *prob.true_gradient, cfg.bench.nag_lr, cfg.bench.nag_beta);
            phi = std::move(r.params);
            m = std::move(r.momentum);
            if (t % log_every == 0 || t == iters) log(t, t, phi);
        }
        if (calls_out) *calls_out = 0;
        return rows;
    }

    const double beta = method == "spsa_gc" ? cfg.beta : 0.0;
    OptimizerState st(prob.initial_point, cfg.schedule, beta, seed);
    log(0, 0, st.params);
    std::uint64_t evals = 0, next_log = cfg.bench.log_interval;
    while (evals + per_iter <= cfg.bench.eval_budget) {
        if (is_rgf)
            st = rgf_iterate(st, oracle, cfg.bench.rgf_mu, cfg.bench.rgf_q, rng);
        else if (method == "spsa")
            st = spsa_iterate(st, oracle, cfg.perturbation, cfg.repeats, rng);
        else
            st = spsa_gc_step(st, oracle, cfg.perturbation, cfg.repeats, rng);
        evals += per_iter;
        const bool last = evals + per_iter > cfg.bench.eval_budget;
        if (evals >= next_log || last) {
            log(st.iteration - 1, evals, st.params);
            while (next_log <= evals) next_log += cfg.bench.log_interval;
        }
    }
    if (calls_out) *calls_out = oracle.calls();
    return rows;
}

/// Every method × seed × noise scale. `bench-rosenbrock` uses only the noise-free
/// scale; `bench-noise` uses all configured scales (0 is always included).
inline BenchOutcome run_bench(const ExperimentConfig& cfg) {
    cfg.validate();
    std::vector<double> scales{0.0};
    if (cfg.kind == ExperimentKind::BenchNoise)
        for (double s : cfg.bench.noise_scales)
            if (s != 0.0) scales.push_back(s);
    BenchOutcome out;
    for (double noise : scales)
        for (const auto& method : bench_methods()) {
            if (method == "sgd_nag" && noise != 0.0) continue;
            for (auto seed : cfg.seeds) {
                std::uint64_t calls = 0;
                auto rows = run_bench_single(cfg, method, noise, seed, &calls);
                out.oracle_calls += calls;
                out.finals[noise][method].push_back(detail::finite_or_inf(rows.back().normalized_loss.value_or(
                    std::numeric_limits<double>::infinity())));
                out.rows.insert(out.rows.end(), rows.begin(), rows.end());
            }
        }
    return out;
}

}  // namespace bvip
