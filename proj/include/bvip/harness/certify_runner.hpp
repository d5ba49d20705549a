#pragma once

// Certification pipeline: a small-canvas prompt adaptation with trajectory
// snapshots, empirical moments, then a certificate per test input. Also the
// closed-form two-class linear construction used to check soundness.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bvip/certify.hpp"
#include "bvip/data.hpp"
#include "bvip/harness/checkpoint.hpp"
#include "bvip/harness/config.hpp"
#include "bvip/harness/report.hpp"
#include "bvip/image.hpp"
#include "bvip/target.hpp"
#include "bvip/zoo.hpp"

namespace bvip {

// ---------------------------------------------------------------------------
// Closed-form two-class construction

/// f(x) = argmax(0, w·x + b) with an additive prompt φ ~ N(μ, σ²I).
struct LinearTwoClass {
    Vec w;
    double b = 0.0;

    double margin(std::span<const double> x) const { return dot(w, x) + b; }

    BlackBoxHandle handle() const {
        const Vec wc = w;
        const double bc = b;
        const ImageShape shape{1, 1, w.size()};
        return BlackBoxHandle(
            [wc, bc](const ImageBatch& batch) {
                Matrix out(batch.count, 2);
                for (std::size_t n = 0; n < batch.count; ++n) out(n, 1) = dot(wc, batch.image(n)) + bc;
                return out;
            },
            shape, 2);
    }
};

/// Exact p_A, p_B for the construction: the prompted margin is Gaussian with
/// mean w·(x+μ)+b and standard deviation σ‖w‖.
inline Certificate analytic_linear_certificate(const LinearTwoClass& f, std::span<const double> x, std::span<const double> mu,
                                               double sigma) {
    require(sigma > 0.0, "analytic certificate: sigma must be positive");
    require_same_length(x.size(), f.w.size(), "analytic certificate");
    Vec shifted(x.begin(), x.end());
    for (std::size_t j = 0; j < shifted.size(); ++j) shifted[j] += mu[j];
    const double m = f.margin(shifted);
    const double s = sigma * norm2(f.w);
    Certificate c;
    c.top_class = m >= 0.0 ? 1 : 0;
    c.pa_lower = std_normal_cdf(std::abs(m) / s);
    c.pb_upper = 1.0 - c.pa_lower;
    c.lambda_min = sigma * sigma;
    c.radius = certify_radius(c.pa_lower, c.pb_upper, c.lambda_min);
    c.alpha = 0.0;
    return c;
}

inline GaussianPromptModel isotropic_model(std::span<const double> mu, double sigma) {
    GaussianPromptModel m;
    m.mu.assign(mu.begin(), mu.end());
    m.sigma = Matrix::identity(mu.size());
    for (auto& v : m.sigma.data) v *= sigma * sigma;
    return m;
}

// ---------------------------------------------------------------------------
// Small-canvas pipeline

struct CertifyOutcome {
    std::vector<Certificate> certificates;
    std::vector<int> labels;
    std::vector<std::size_t> violations;  ///< per input; empty when verification is off
    GaussianPromptModel model;
    double prompted_accuracy = 0.0;
    std::uint64_t estimation_queries = 0;
};

namespace detail {

inline ImageBatch apply_param_prompt(const ImageBatch& images, std::span<const double> phi, PromptVariant v,
                                     const PromptConfig& pc) {
    ImageBatch out(images.shape, images.count);
    for (std::size_t n = 0; n < images.count; ++n) {
        const auto x = images.image(n);
        auto y = out.image(n);
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double p = v == PromptVariant::VP ? phi[j] : x[j] * phi[j];
            y[j] = std::clamp(x[j] + pc.epsilon * p, pc.clip_low, pc.clip_high);
        }
    }
    return out;
}

inline std::vector<RgbCanvas> small_canvases(std::span<const DigitImage> digits, std::size_t side) {
    std::vector<RgbCanvas> out;
    for (const auto& im : digits) out.push_back(digit_on_canvas(im, side, side));
    return out;
}

}  // namespace detail

/// One seed: pretrain a target on `certify.canvas`² glyphs, learn a full-image
/// prompt (additive for VP, Hadamard for BlackVIP) with SPSA-GC while keeping
/// the last snapshots, then certify `certify.test_points` test inputs. When
/// `certify.trajectory` names an adaptation checkpoint, its trajectory and
/// target are used instead of the internal run.
inline CertifyOutcome run_certification_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t side = cfg.certify.canvas;
    const ImageShape shape{3, side, side};
    const std::size_t q = shape.size();
    const auto& d = cfg.data;

    const auto test_digits = gen_glyph_set(d.test_per_class, derive_seed(seed, 3));
    const auto test = detail::small_canvases(test_digits, side);

    CertifyOutcome out;
    std::optional<LinearSoftmaxModel> target;
    TrajectorySample traj;
    if (!cfg.certify.trajectory.empty()) {
        const Checkpoint ck = load_checkpoint(cfg.certify.trajectory);
        target = get_target(ck);
        const Section& t = ck.section("trajectory");
        if (t.shape.size() != 2 || t.shape[1] != q)
            throw ShapeError("certify: trajectory dimension does not match a " + std::to_string(side) + "x" +
                             std::to_string(side) + " full-image prompt");
        traj.samples = Matrix(t.shape[0], t.shape[1]);
        traj.samples.data = t.data;
        traj.run_id = cfg.certify.trajectory;
    } else {
        const auto target_digits = gen_glyph_set(d.target_per_class, derive_seed(seed, 1));
        const auto train_digits = gen_glyph_set(d.shots, derive_seed(seed, 2));
        const auto target_set = detail::small_canvases(target_digits, side);
        const auto train_set = detail::small_canvases(train_digits, side);
        TargetTrainConfig tc;
        tc.epochs = cfg.adapt.target_epochs;
        tc.lr = cfg.adapt.target_lr;
        tc.seed = derive_seed(seed, 9);
        target = train_target(flatten_batch(batch_from_canvases(target_set)), labels_of(target_set), kNumDigitClasses,
                              tc);

        const BlackBoxHandle h = BlackBoxHandle::from_model(*target, shape);
        const ImageBatch train = batch_from_canvases(train_set);
        const std::vector<int> train_labels = labels_of(train_set);
        const std::size_t T = cfg.adapt.iterations;
        const std::size_t keep = cfg.adapt.snapshot_last > 0 ? cfg.adapt.snapshot_last : std::max<std::size_t>(2, T / 2);
        require(T >= keep * cfg.adapt.snapshot_stride, "certify: adapt.iterations too small for the requested snapshots");

        OptimizerState st(Vec(q, 0.0), cfg.schedule, cfg.beta, seed);
        Rng rng(derive_seed(seed, 12));
        std::vector<std::size_t> order(train.count);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::size_t cursor = order.size();
        std::vector<Vec> snaps;
        for (std::size_t it = 1; it <= T; ++it) {
            std::vector<std::size_t> rows;
            while (rows.size() < std::min(cfg.adapt.batch_size, train.count)) {
                if (cursor == order.size()) {
                    shuffle(order, rng);
                    cursor = 0;
                }
                rows.push_back(order[cursor++]);
            }
            ImageBatch batch(shape, rows.size());
            std::vector<int> labels;
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const auto src = train.image(rows[i]);
                std::copy(src.begin(), src.end(), batch.image(i).begin());
                labels.push_back(train_labels[rows[i]]);
            }
            auto loss = [&](std::span<const double> phi) {
                return ce_loss(h.query(detail::apply_param_prompt(batch, phi, cfg.certify.variant, cfg.prompt)), labels);
            };
            st = spsa_gc_step(st, loss, cfg.perturbation, cfg.repeats, rng);
            if (T - it < keep * cfg.adapt.snapshot_stride && (T - it) % cfg.adapt.snapshot_stride == 0)
                snaps.push_back(st.params);
        }
        out.estimation_queries = h.ledger().estimation();
        traj.samples = Matrix(snaps.size(), q);
        for (std::size_t r = 0; r < snaps.size(); ++r) std::copy(snaps[r].begin(), snaps[r].end(), traj.samples.row(r).begin());
        traj.stride = cfg.adapt.snapshot_stride;
        traj.run_id = cfg.run_id;
    }

    out.model = estimate_moments(traj, cfg.certify.variant);
    const BlackBoxHandle h = BlackBoxHandle::from_model(*target, shape);

    SmoothingOptions opt;
    opt.samples = cfg.certify.samples;
    opt.batch = std::min<std::size_t>(opt.samples, 1000);
    opt.seed = derive_seed(seed, 13);
    opt.epsilon = cfg.prompt.epsilon;
    opt.clip_low = cfg.prompt.clip_low;
    opt.clip_high = cfg.prompt.clip_high;

    const std::size_t count = std::min(cfg.certify.test_points, test.size());
    std::size_t correct = 0;
    for (std::size_t i = 0; i < count; ++i) {
        // Spread the chosen inputs over the class-sorted test set.
        const std::size_t idx = i * test.size() / count;
        const ImageBatch one = batch_from_canvases(std::span<const RgbCanvas>(&test[idx], 1));
        const Certificate c = certify(h, one.image(0), out.model, opt, cfg.certify.alpha);
        out.certificates.push_back(c);
        out.labels.push_back(test[idx].label);
        correct += c.top_class == std::size_t(test[idx].label);
        if (cfg.certify.verify_trials > 0)
            out.violations.push_back(verify_bruteforce(h, one.image(0), out.model, c.top_class, c.radius,
                                                       cfg.certify.verify_trials, opt, derive_seed(seed, 14 + i)));
    }
    out.prompted_accuracy = count ? double(correct) / double(count) : 0.0;
    return out;
}

inline nlohmann::json certificates_json(const ExperimentConfig& cfg, std::uint64_t seed, const CertifyOutcome& o) {
    nlohmann::json list = nlohmann::json::array();
    for (std::size_t i = 0; i < o.certificates.size(); ++i) {
        nlohmann::json j = to_json(o.certificates[i]);
        j["label"] = o.labels[i];
        if (!o.violations.empty()) j["violations"] = o.violations[i];
        list.push_back(j);
    }
    return {{"run_id", cfg.run_id},
            {"seed", seed},
            {"variant", to_string(cfg.certify.variant)},
            {"dimension", o.model.dim()},
            {"smoothed_accuracy", o.prompted_accuracy},
            {"estimation_queries", o.estimation_queries},
            {"certificates", list}};
}

/// All seeds; writes `<run_id>_certificates.json` when `out_dir` is set.
inline std::vector<CertifyOutcome> run_certification(const ExperimentConfig& cfg) {
    cfg.validate();
    std::vector<CertifyOutcome> all;
    nlohmann::json doc = nlohmann::json::array();
    for (auto seed : cfg.seeds) {
        all.push_back(run_certification_seed(cfg, seed));
        doc.push_back(certificates_json(cfg, seed, all.back()));
    }
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        write_json(std::filesystem::path(cfg.out_dir) / (cfg.run_id + "_certificates.json"), doc);
    }
    return all;
}

}  // namespace bvip
