#pragma once

// Prompt-distribution smoothing certificates: Gaussian moments from optimizer
// trajectories, Monte-Carlo smoothed prediction, Hoeffding confidence bounds,
// the minimum-eigenvalue radius and a brute-force check of that radius.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "bvip/common.hpp"
#include "bvip/coordinator.hpp"
#include "bvip/linalg.hpp"
#include "bvip/target.hpp"

namespace bvip {

// ---------------------------------------------------------------------------
// Standard normal

inline double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// Acklam's rational approximation followed by one Halley refinement.
inline double std_normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("std_normal_quantile: p must lie in (0, 1)");
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double lo = 0.02425, hi = 1.0 - lo;
    double x;
    if (p < lo) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= hi) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double e = std_normal_cdf(x) - p;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    return x - u / (1.0 + 0.5 * x * u);
}

// ---------------------------------------------------------------------------
// Prompt distribution

enum class PromptVariant { VP, BlackVIP };

inline const char* to_string(PromptVariant v) { return v == PromptVariant::VP ? "vp" : "blackvip"; }

inline PromptVariant parse_prompt_variant(const std::string& s) {
    if (s == "vp") return PromptVariant::VP;
    if (s == "blackvip") return PromptVariant::BlackVIP;
    throw ConfigError("unknown prompt variant '" + s + "'");
}

inline constexpr std::size_t kMaxCertifyDim = 512;
inline constexpr double kPsdTolerance = 1e-10;

struct TrajectorySample {
    Matrix samples;  ///< T×p, ordered by iteration
    std::size_t stride = 1;
    std::string run_id;
};

struct GaussianPromptModel {
    Vec mu;
    Matrix sigma;
    PromptVariant variant = PromptVariant::VP;

    std::size_t dim() const { return mu.size(); }
};

/// Symmetrizes and clamps eigenvalues at zero. Rejects matrices with
/// eigenvalues below −tolerance·max(1, ‖A‖).
inline Matrix repair_psd(const Matrix& a) {
    if (asymmetry(a) > kPsdTolerance) throw Error("covariance is not symmetric");
    Matrix s = a;
    symmetrize(s);
    const SymmetricEigen e = jacobi_eigen(s);
    const double scale = std::max(1.0, std::abs(e.values.front()));
    if (e.values.back() < -kPsdTolerance * scale) throw Error("covariance is not positive semi-definite");
    if (e.values.back() >= 0.0) return s;
    const std::size_t n = s.rows;
    Matrix out(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const double lam = std::max(e.values[k], 0.0);
        if (lam == 0.0) continue;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) out(i, j) += lam * e.vectors(i, k) * e.vectors(j, k);
    }
    symmetrize(out);
    return out;
}

/// Sample mean and unbiased covariance of the snapshots.
inline GaussianPromptModel estimate_moments(const TrajectorySample& traj, PromptVariant variant = PromptVariant::VP) {
    const std::size_t t = traj.samples.rows, p = traj.samples.cols;
    if (t < 2) throw Error("estimate_moments: need at least two snapshots, got " + std::to_string(t));
    if (p > kMaxCertifyDim)
        throw Error("estimate_moments: prompt dimension " + std::to_string(p) + " exceeds capacity " +
                    std::to_string(kMaxCertifyDim));
    GaussianPromptModel m{Vec(p, 0.0), Matrix(p, p), variant};
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t j = 0; j < p; ++j) m.mu[j] += traj.samples(r, j);
    for (auto& v : m.mu) v /= static_cast<double>(t);
    Vec dev(p);
    for (std::size_t r = 0; r < t; ++r) {
        for (std::size_t j = 0; j < p; ++j) dev[j] = traj.samples(r, j) - m.mu[j];
        for (std::size_t i = 0; i < p; ++i) {
            if (dev[i] == 0.0) continue;
            for (std::size_t j = i; j < p; ++j) m.sigma(i, j) += dev[i] * dev[j];
        }
    }
    const double inv = 1.0 / static_cast<double>(t - 1);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = i; j < p; ++j) {
            m.sigma(i, j) *= inv;
            m.sigma(j, i) = m.sigma(i, j);
        }
    m.sigma = repair_psd(m.sigma);
    return m;
}

/// Distribution of x⊙φ: mean x⊙μ, covariance D_x Σ D_x.
inline GaussianPromptModel transform_cov(std::span<const double> x, const GaussianPromptModel& model) {
    if (model.variant != PromptVariant::BlackVIP)
        throw ConfigError("transform_cov: only defined for the input-dependent (Hadamard) variant");
    require_same_length(x.size(), model.dim(), "transform_cov");
    GaussianPromptModel out{Vec(model.dim()), Matrix(model.dim(), model.dim()), PromptVariant::BlackVIP};
    for (std::size_t i = 0; i < model.dim(); ++i) {
        out.mu[i] = x[i] * model.mu[i];
        for (std::size_t j = 0; j < model.dim(); ++j) out.sigma(i, j) = x[i] * model.sigma(i, j) * x[j];
    }
    return out;
}

/// Smallest eigenvalue via full Jacobi diagonalization; values in [−1e−10, 0) clamp to 0.
inline double min_eigenvalue(const Matrix& sigma) {
    if (!sigma.square()) throw ShapeError("min_eigenvalue: matrix is not square");
    if (sigma.rows > kMaxCertifyDim)
        throw Error("min_eigenvalue: dimension " + std::to_string(sigma.rows) + " exceeds capacity " +
                    std::to_string(kMaxCertifyDim));
    if (asymmetry(sigma) > kPsdTolerance) throw Error("min_eigenvalue: matrix is not symmetric");
    Matrix s = sigma;
    symmetrize(s);
    const double lam = jacobi_eigen(std::move(s)).values.back();
    return (lam < 0.0 && lam >= -kPsdTolerance) ? 0.0 : lam;
}

/// min_i Σ_ii, an upper bound on λ_min by the Rayleigh quotient at e_i.
inline double rayleigh_upper_bound(const Matrix& sigma) {
    if (!sigma.square() || sigma.rows == 0) throw ShapeError("rayleigh_upper_bound: matrix is not square");
    double m = sigma(0, 0);
    for (std::size_t i = 1; i < sigma.rows; ++i) m = std::min(m, sigma(i, i));
    return m;
}

// ---------------------------------------------------------------------------
// Bounds and radius

struct ConfidenceBounds {
    double pa_lower = 0.0;
    double pb_upper = 1.0;
};

/// Hoeffding: p̂ ∓ √(ln(2/α) / 2N), clamped to [0, 1].
inline ConfidenceBounds confidence_bounds(double pa_hat, double pb_hat, std::uint64_t n, double alpha) {
    require(n >= 1, "confidence_bounds: N must be positive");
    require(alpha > 0.0 && alpha < 1.0, "confidence_bounds: alpha must lie in (0, 1)");
    const double h = std::sqrt(std::log(2.0 / alpha) / (2.0 * static_cast<double>(n)));
    return {std::clamp(pa_hat - h, 0.0, 1.0), std::clamp(pb_hat + h, 0.0, 1.0)};
}

/// Bounds from class counts: top class against the runner-up.
inline ConfidenceBounds confidence_bounds(std::span<const std::uint64_t> counts, std::uint64_t n, double alpha) {
    require(!counts.empty(), "confidence_bounds: no classes");
    std::vector<std::uint64_t> sorted(counts.begin(), counts.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const double pa = double(sorted[0]) / double(n);
    const double pb = sorted.size() > 1 ? double(sorted[1]) / double(n) : 0.0;
    return confidence_bounds(pa, pb, n, alpha);
}

/// ½·√λ_min·(Φ⁻¹(pA) − Φ⁻¹(pB)) when pA > pB, else 0.
inline double certify_radius(double pa_lower, double pb_upper, double lambda_min) {
    require(pa_lower >= 0.0 && pa_lower <= 1.0 && pb_upper >= 0.0 && pb_upper <= 1.0,
            "certify_radius: bounds must lie in [0, 1]");
    if (!(pa_lower > pb_upper) || lambda_min <= 0.0) return 0.0;
    constexpr double edge = 1e-300;
    const double za = pa_lower >= 1.0 ? std::numeric_limits<double>::infinity()
                                      : std_normal_quantile(std::max(pa_lower, edge));
    const double zb = pb_upper <= 0.0 ? -std::numeric_limits<double>::infinity()
                                      : std_normal_quantile(std::min(pb_upper, 1.0 - 1e-16));
    return 0.5 * std::sqrt(lambda_min) * (za - zb);
}

// ---------------------------------------------------------------------------
// Monte-Carlo smoothing

struct SmoothingOptions {
    std::size_t samples = 10000;
    std::size_t batch = 1000;
    std::uint64_t seed = 0;
    bool antithetic = true;  ///< pair each draw z with −z
    double epsilon = 1.0;
    double clip_low = -std::numeric_limits<double>::infinity();
    double clip_high = std::numeric_limits<double>::infinity();

    void validate() const {
        require(samples >= 1, "smoothing: sample count must be positive");
        require(batch >= 1, "smoothing: batch must be positive");
        require(!antithetic || samples % 2 == 0, "smoothing: antithetic sampling needs an even sample count");
        require(clip_low < clip_high, "smoothing: clip_low must be below clip_high");
    }
};

struct SmoothedPrediction {
    std::vector<std::uint64_t> counts;
    std::size_t top = 0;
    std::size_t runner_up = 0;
    std::uint64_t n = 0;

    double pa_hat() const { return double(counts[top]) / double(n); }
    double pb_hat() const { return counts.size() > 1 ? double(counts[runner_up]) / double(n) : 0.0; }
};

namespace detail {

inline SmoothedPrediction tally(std::vector<std::uint64_t> counts, std::uint64_t n) {
    SmoothedPrediction out{std::move(counts), 0, 0, n};
    for (std::size_t c = 1; c < out.counts.size(); ++c)
        if (out.counts[c] > out.counts[out.top]) out.top = c;
    out.runner_up = out.top == 0 ? 1 : 0;
    for (std::size_t c = 0; c < out.counts.size(); ++c)
        if (c != out.top && out.counts[c] > out.counts[out.runner_up]) out.runner_up = c;
    return out;
}

/// Standard-normal draws for sample `k`: a pure function of (seed, k), so
/// splitting the sample range across workers does not change results.
inline void draw_standard(std::uint64_t seed, std::uint64_t k, bool antithetic, Vec& z) {
    Rng rng(derive_seed(seed, antithetic ? k / 2 : k));
    for (auto& v : z) v = rng.normal();
    if (antithetic && (k % 2 == 1))
        for (auto& v : z) v = -v;
}

}  // namespace detail

/// Classifies N copies of x with prompts drawn from `model` (transformed by x
/// for the Hadamard variant) and tallies the predicted classes. Queries are
/// charged as evaluation.
inline SmoothedPrediction smoothed_predict(const BlackBoxHandle& classifier, std::span<const double> x,
                                           const GaussianPromptModel& model, const SmoothingOptions& opt) {
    opt.validate();
    require_same_length(x.size(), model.dim(), "smoothed_predict");
    require_same_length(classifier.input_shape().size(), x.size(), "smoothed_predict input");
    const GaussianPromptModel dist = model.variant == PromptVariant::BlackVIP ? transform_cov(x, model) : model;
    const Matrix factor = psd_factor(repair_psd(dist.sigma));
    const std::size_t q = x.size();

    std::vector<std::uint64_t> counts(classifier.classes(), 0);
    Vec z(q);
    for (std::size_t start = 0; start < opt.samples; start += opt.batch) {
        const std::size_t stop = std::min(opt.samples, start + opt.batch);
        ImageBatch b(classifier.input_shape(), stop - start);
        for (std::size_t k = start; k < stop; ++k) {
            detail::draw_standard(opt.seed, k, opt.antithetic, z);
            const Vec noise = matvec(factor, z);
            auto img = b.image(k - start);
            for (std::size_t j = 0; j < q; ++j)
                img[j] = std::clamp(x[j] + opt.epsilon * (dist.mu[j] + noise[j]), opt.clip_low, opt.clip_high);
        }
        const Matrix logits = classifier.query(b, QueryPhase::Evaluation);
        for (std::size_t n = 0; n < logits.rows; ++n) ++counts[argmax(logits.row(n))];
    }
    return detail::tally(std::move(counts), opt.samples);
}

struct Certificate {
    std::size_t top_class = 0;
    double pa_lower = 0.0;
    double pb_upper = 1.0;
    double lambda_min = 0.0;
    double radius = 0.0;
    std::uint64_t n = 0;
    double alpha = 0.05;
    std::uint64_t seed = 0;
    bool model_approximate = false;  ///< true when the real pipeline is approximated by the Hadamard model
};

inline nlohmann::json to_json(const Certificate& c) {
    return {{"class", c.top_class}, {"pA_lower", c.pa_lower}, {"pB_upper", c.pb_upper},
            {"lambda_min", c.lambda_min}, {"radius", c.radius}, {"N", c.n},
            {"alpha", c.alpha}, {"seed", c.seed}, {"model_approximate", c.model_approximate}};
}

inline Certificate certificate_from_json(const nlohmann::json& j) {
    Certificate c;
    c.top_class = j.at("class").get<std::size_t>();
    c.pa_lower = j.at("pA_lower").get<double>();
    c.pb_upper = j.at("pB_upper").get<double>();
    c.lambda_min = j.at("lambda_min").get<double>();
    c.radius = j.at("radius").get<double>();
    c.n = j.at("N").get<std::uint64_t>();
    c.alpha = j.at("alpha").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.model_approximate = j.value("model_approximate", false);
    return c;
}

/// Smoothed prediction at x, Hoeffding bounds, λ_min of the (transformed)
/// covariance and the resulting radius.
inline Certificate certify(const BlackBoxHandle& classifier, std::span<const double> x,
                           const GaussianPromptModel& model, const SmoothingOptions& opt, double alpha) {
    const SmoothedPrediction pred = smoothed_predict(classifier, x, model, opt);
    const ConfidenceBounds cb = confidence_bounds(pred.pa_hat(), pred.pb_hat(), pred.n, alpha);
    const Matrix& cov = model.variant == PromptVariant::BlackVIP ? transform_cov(x, model).sigma : model.sigma;
    Certificate c;
    c.top_class = pred.top;
    c.pa_lower = cb.pa_lower;
    c.pb_upper = cb.pb_upper;
    c.lambda_min = min_eigenvalue(cov);
    c.radius = certify_radius(c.pa_lower, c.pb_upper, c.lambda_min);
    c.n = pred.n;
    c.alpha = alpha;
    c.seed = opt.seed;
    return c;
}

/// Draws `trials` perturbations uniformly in the open ball ‖δ‖ < R and counts
/// how often the smoothed top class at x + δ differs from `top_class`. Every
/// trial reuses the same prompt draws (seeded by `opt.seed`), so the smoothed
/// classifier being checked is one fixed function of its input.
inline std::size_t verify_bruteforce(const BlackBoxHandle& classifier, std::span<const double> x,
                                     const GaussianPromptModel& model, std::size_t top_class, double radius,
                                     std::size_t trials, const SmoothingOptions& opt, std::uint64_t delta_seed) {
    if (radius <= 0.0 || trials == 0) return 0;
    const std::size_t q = x.size();
    Rng rng(delta_seed);
    Vec delta(q), shifted(q);
    std::size_t violations = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        double nrm = 0.0;
        do {
            for (auto& v : delta) v = rng.normal();
            nrm = norm2(delta);
        } while (nrm == 0.0);
        double u;
        do u = rng.uniform(); while (u == 0.0);
        const double r = radius * std::pow(u, 1.0 / static_cast<double>(q));
        for (std::size_t j = 0; j < q; ++j) shifted[j] = x[j] + r * delta[j] / nrm;
        if (smoothed_predict(classifier, shifted, model, opt).top != top_class) ++violations;
    }
    return violations;
}

}  // namespace bvip
