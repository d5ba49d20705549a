#pragma once

// The prompt-adaptation loop: build the desk-scale dataset, pretrain and freeze
// the target, then learn a prompt (conditional, frame or none) through
// zeroth-order estimates that only ever see the black-box handle.

#include <chrono>
#include <deque>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bvip/coordinator.hpp"
#include "bvip/data.hpp"
#include "bvip/harness/checkpoint.hpp"
#include "bvip/harness/config.hpp"
#include "bvip/harness/report.hpp"
#include "bvip/image.hpp"
#include "bvip/pca.hpp"
#include "bvip/target.hpp"
#include "bvip/zoo.hpp"

namespace bvip {

struct AdaptDataset {
    std::vector<RgbCanvas> target_train;  ///< clean images the frozen target was fitted on
    std::vector<RgbCanvas> train;         ///< few-shot train split
    std::vector<RgbCanvas> val;           ///< few-shot validation split
    std::vector<RgbCanvas> test;
};

namespace detail {

inline std::vector<DigitImage> digit_pool(const DataSettings& d, std::size_t per_class, std::uint64_t seed,
                                          std::uint64_t stream) {
    if (d.idx_images.empty()) return gen_glyph_set(per_class, derive_seed(seed, stream));
    // IDX input: deterministic per-class draw of `per_class` images for this stream.
    const auto all = parse_idx(read_file_bytes(d.idx_images), read_file_bytes(d.idx_labels));
    std::vector<int> labels;
    for (const auto& im : all) labels.push_back(im.label);
    const FewShotSplit s = few_shot_split(labels, per_class, 0, derive_seed(seed, stream));
    return gather<DigitImage>(all, s.train);
}

inline RgbCanvas gray_canvas(const DigitImage& im) { return digit_on_canvas(im, kDigitSide, kDigitSide); }

/// Large centered digits plus small edge digits without a distractor.
inline std::vector<RgbCanvas> loc_target_set(std::span<const DigitImage> pool, const LocSpec& spec) {
    LocSpec clean = spec;
    clean.with_distractor = false;
    std::vector<RgbCanvas> out = make_loc(pool, clean);
    const std::size_t f = spec.fake_side(), center = (spec.canvas_size - f) / 2;
    for (const auto& im : pool) {
        RgbCanvas cv(spec.canvas_size, spec.canvas_size, im.label);
        stamp_gray(cv, resize_digit(im, f), f, center, center);
        out.push_back(std::move(cv));
    }
    return out;
}

}  // namespace detail

inline AdaptDataset build_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
    const DataSettings& d = cfg.data;
    const auto target_pool = detail::digit_pool(d, d.target_per_class, seed, 1);
    const auto adapt_pool = detail::digit_pool(d, d.shots + d.val_shots, seed, 2);
    const auto test_pool = detail::digit_pool(d, d.test_per_class, seed, 3);

    std::vector<int> labels;
    for (const auto& im : adapt_pool) labels.push_back(im.label);
    const FewShotSplit split = few_shot_split(labels, d.shots, d.val_shots, derive_seed(seed, 4));
    const auto train_digits = gather<DigitImage>(adapt_pool, split.train);
    const auto val_digits = gather<DigitImage>(adapt_pool, split.val);

    AdaptDataset out;
    switch (d.dataset) {
        case DatasetKind::Loc: {
            LocSpec spec{d.canvas, d.scale_ratio, derive_seed(seed, 5), true};
            out.target_train = detail::loc_target_set(target_pool, LocSpec{d.canvas, d.scale_ratio, derive_seed(seed, 6)});
            out.train = make_loc(train_digits, spec);
            spec.seed = derive_seed(seed, 7);
            out.val = make_loc(val_digits, spec);
            spec.seed = derive_seed(seed, 8);
            out.test = make_loc(test_pool, spec);
            break;
        }
        case DatasetKind::Biased: {
            for (const auto& im : target_pool) out.target_train.push_back(detail::gray_canvas(im));
            BiasedSpec spec{d.rho, default_palette(), Split::Train, derive_seed(seed, 5)};
            out.train = make_biased(train_digits, spec);
            spec.seed = derive_seed(seed, 7);
            out.val = make_biased(val_digits, spec);
            spec.split = Split::Test;
            spec.seed = derive_seed(seed, 8);
            out.test = make_biased(test_pool, spec);
            break;
        }
        case DatasetKind::Glyphs: {
            for (const auto& im : target_pool) out.target_train.push_back(detail::gray_canvas(im));
            for (const auto& im : train_digits) out.train.push_back(detail::gray_canvas(im));
            for (const auto& im : val_digits) out.val.push_back(detail::gray_canvas(im));
            for (const auto& im : test_pool) out.test.push_back(detail::gray_canvas(im));
            break;
        }
    }
    return out;
}

inline LinearSoftmaxModel pretrain_target(const ExperimentConfig& cfg, const AdaptDataset& data, std::uint64_t seed) {
    const ImageBatch b = batch_from_canvases(data.target_train);
    TargetTrainConfig tc;
    tc.epochs = cfg.adapt.target_epochs;
    tc.lr = cfg.adapt.target_lr;
    tc.seed = derive_seed(seed, 9);
    return train_target(flatten_batch(b), labels_of(data.target_train), kNumDigitClasses, tc);
}

struct AdaptOutcome {
    RunRecord record;
    double zero_shot_accuracy = 0.0;  ///< frozen target on the clean (unprompted) test images
    double final_accuracy = 0.0;      ///< test accuracy with the learned prompt
    std::uint64_t estimation_queries = 0;
    std::uint64_t evaluation_queries = 0;
    double cost = 0.0;
    std::size_t learnable = 0;
    std::uint64_t target_checksum_before = 0;
    std::uint64_t target_checksum_after = 0;
    std::optional<TrajectorySample> trajectory;
    Checkpoint checkpoint;
};

namespace detail {

/// Prompt state for one run: conditional coordinator, frame, or nothing.
class PromptState {
public:
    PromptState(const ExperimentConfig& cfg, const AdaptDataset& data, const ImageBatch& train, std::uint64_t seed)
        : cfg_(cfg), shape_(train.shape) {
        if (cfg.prompt.mode == PromptMode::Frame) {
            frame_.emplace(shape_, cfg.prompt.frame_pad);
        } else if (cfg.prompt.mode == PromptMode::Conditional) {
            DecoderConfig dc;
            dc.latent = cfg.prompt.latent;
            dc.widths = cfg.adapt.widths;
            dc.out_height = shape_.height;
            dc.out_width = shape_.width;
            std::shared_ptr<const FeatureEncoder> enc;
            Composition comp;
            if (cfg.adapt.encoder == EncoderKind::Pca) {
                enc = std::make_shared<PcaEncoder>(pca_fit(flatten_batch(train), dc.latent.size()));
                comp = Composition::Sum;
            } else {
                enc = std::make_shared<FrozenRandomEncoder>(shape_.size(), cfg.adapt.frozen_dim, derive_seed(seed, 10));
                comp = Composition::Concat;
            }
            Rng rng(derive_seed(seed, 11));
            coord_.emplace(std::move(enc), comp, DecoderParams::initialize(dc, rng));
            train_features_ = coord_->encode_all(train);
            test_features_ = coord_->encode_all(batch_from_canvases(data.test));
        }
    }

    std::size_t learnable() const {
        if (frame_) return frame_->learnable_count();
        if (coord_) return coord_->learnable_count();
        return 0;
    }

    Vec params() const {
        if (frame_) return frame_->flatten();
        if (coord_) return coord_->flatten();
        return {};
    }

    void set_params(std::span<const double> phi) {
        if (frame_) frame_->unflatten(phi);
        if (coord_) coord_->unflatten(phi);
    }

    /// Prompted copy of `images`; `rows` index the matching feature table.
    ImageBatch apply(const ImageBatch& images, std::span<const std::size_t> rows, bool test, NormMode mode) {
        if (cfg_.prompt.mode == PromptMode::None) return images;
        ImageBatch out(images.shape, images.count);
        if (frame_) {
            const Vec p = frame_->prompt();
            for (std::size_t i = 0; i < images.count; ++i) {
                const Vec v = prompt_image(images.image(i), p, cfg_.prompt);
                std::copy(v.begin(), v.end(), out.image(i).begin());
            }
            return out;
        }
        const FeatureMaps p = coord_->generate(test ? test_features_ : train_features_, rows, mode);
        for (std::size_t i = 0; i < images.count; ++i) {
            const Vec v = prompt_image(images.image(i), std::span<const double>(p.item(i), p.item_size()), cfg_.prompt);
            std::copy(v.begin(), v.end(), out.image(i).begin());
        }
        return out;
    }

    Coordinator* coordinator() { return coord_ ? &*coord_ : nullptr; }
    const PcaProjection* pca() const {
        if (!coord_) return nullptr;
        const auto* p = dynamic_cast<const PcaEncoder*>(&coord_->encoder());
        return p ? &p->projection() : nullptr;
    }

private:
    const ExperimentConfig& cfg_;
    ImageShape shape_;
    std::optional<FramePrompt> frame_;
    std::optional<Coordinator> coord_;
    Matrix train_features_, test_features_;
};

inline ImageBatch subset(const ImageBatch& all, std::span<const std::size_t> rows) {
    ImageBatch b(all.shape, rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto src = all.image(rows[i]);
        std::copy(src.begin(), src.end(), b.image(i).begin());
    }
    return b;
}

}  // namespace detail

/// Dataset plus frozen target for one seed; independent of the prompt mode and
/// optimizer, so several runs can share it.
struct PreparedTask {
    AdaptDataset data;
    LinearSoftmaxModel target;
};

inline PreparedTask prepare_task(const ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    AdaptDataset data = build_dataset(cfg, seed);
    LinearSoftmaxModel target = pretrain_target(cfg, data, seed);
    return {std::move(data), std::move(target)};
}

/// Runs exactly `adapt.iterations` optimizer iterations for one seed. When
/// `csv` is given, rows are streamed as they are produced.
inline AdaptOutcome run_adaptation_seed(const ExperimentConfig& cfg, std::uint64_t seed, const PreparedTask& task,
                                        CsvWriter* csv = nullptr) {
    cfg.validate();
    const AdaptDataset& data = task.data;
    const LinearSoftmaxModel& target = task.target;

    const ImageBatch train = batch_from_canvases(data.train);
    const ImageBatch test = batch_from_canvases(data.test);
    const std::vector<int> train_labels = labels_of(data.train), test_labels = labels_of(data.test);

    const BlackBoxHandle handle =
        BlackBoxHandle::from_model(target, train.shape, cfg.adapt.counting, cfg.adapt.cost_per_query);
    AdaptOutcome out;
    out.target_checksum_before = target.checksum();
    out.zero_shot_accuracy = accuracy(handle, test, test_labels);

    detail::PromptState prompt(cfg, data, train, seed);
    out.learnable = prompt.learnable();
    const std::string method = std::string(to_string(cfg.prompt.mode)) + "_" + to_string(cfg.optimizer);

    PromptPipeline test_pipeline = [&](const ImageBatch& b, std::span<const std::size_t> rows) {
        return prompt.apply(b, rows, true, NormMode::Inference);
    };
    auto test_accuracy = [&] {
        return cfg.prompt.mode == PromptMode::None ? accuracy(handle, test, test_labels)
                                                   : accuracy(handle, test, test_labels, &test_pipeline);
    };

    const std::size_t T = cfg.prompt.mode == PromptMode::None ? 0 : cfg.adapt.iterations;
    const std::size_t eval_every = std::max<std::size_t>(1, T / 20);
    const auto t0 = std::chrono::steady_clock::now();
    auto emit = [&](std::uint64_t it, std::optional<double> loss, std::optional<double> acc) {
        RunRow r;
        r.run_id = cfg.run_id;
        r.method = method;
        r.seed = seed;
        r.iteration = it;
        r.eval_count = handle.ledger().estimation();
        r.loss = loss;
        r.queries = handle.ledger().estimation();
        r.cost = static_cast<double>(handle.ledger().estimation()) * handle.ledger().cost_per_query();
        r.accuracy = acc;
        if (csv) csv->write(r);
        out.record.rows.push_back(std::move(r));
    };

    OptimizerState st(prompt.params(), cfg.schedule, cfg.optimizer == OptimizerKind::SpsaGc ? cfg.beta : 0.0, seed);
    Rng rng(derive_seed(seed, 12));
    std::vector<std::size_t> order(train.count);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();
    std::vector<std::size_t> rows;
    std::deque<Vec> snaps;

    emit(0, std::nullopt, T == 0 ? out.zero_shot_accuracy : test_accuracy());
    for (std::size_t it = 1; it <= T; ++it) {
        rows.clear();
        while (rows.size() < std::min(cfg.adapt.batch_size, train.count)) {
            if (cursor == order.size()) {
                shuffle(order, rng);
                cursor = 0;
            }
            rows.push_back(order[cursor++]);
        }
        const ImageBatch batch = detail::subset(train, rows);
        std::vector<int> labels;
        for (auto r : rows) labels.push_back(train_labels[r]);

        auto loss = [&](std::span<const double> phi) {
            prompt.set_params(phi);
            const ImageBatch prompted = prompt.apply(batch, rows, false, NormMode::Train);
            return ce_loss(handle.query(prompted, QueryPhase::Estimation), labels);
        };
        GradientEstimate est;
        try {
            switch (cfg.optimizer) {
                case OptimizerKind::Spsa: st = spsa_iterate(st, loss, cfg.perturbation, cfg.repeats, rng, &est); break;
                case OptimizerKind::SpsaGc: st = spsa_gc_step(st, loss, cfg.perturbation, cfg.repeats, rng, &est); break;
                case OptimizerKind::Rgf: st = rgf_iterate(st, loss, cfg.bench.rgf_mu, cfg.bench.rgf_q, rng, &est); break;
            }
        } catch (const Error& e) {
            throw Error("iteration " + std::to_string(it) + ": " + e.what());
        }
        prompt.set_params(st.params);

        const Gains g = schedule_at(cfg.schedule, it);
        out.record.trace.push_back(
            {it, g.a, g.c, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
        if (cfg.adapt.snapshot_last > 0 && (T - it) % cfg.adapt.snapshot_stride == 0) {
            snaps.push_back(st.params);
            if (snaps.size() > cfg.adapt.snapshot_last) snaps.pop_front();
        }
        if (it % eval_every == 0 || it == T) {
            double mean_loss = 0.0;
            for (double v : est.loss_plus) mean_loss += v;
            for (double v : est.loss_minus) mean_loss += v;
            mean_loss /= static_cast<double>(est.loss_plus.size() + est.loss_minus.size());
            emit(it, mean_loss, test_accuracy());
        }
    }

    out.final_accuracy = *out.record.rows.back().accuracy;
    out.estimation_queries = handle.ledger().estimation();
    out.evaluation_queries = handle.ledger().evaluation();
    out.cost = handle.ledger().cost();
    out.target_checksum_after = target.checksum();
    if (!snaps.empty()) {
        TrajectorySample ts;
        ts.samples = Matrix(snaps.size(), snaps.front().size());
        for (std::size_t r = 0; r < snaps.size(); ++r) std::copy(snaps[r].begin(), snaps[r].end(), ts.samples.row(r).begin());
        ts.stride = cfg.adapt.snapshot_stride;
        ts.run_id = cfg.run_id;
        out.trajectory = std::move(ts);
    }

    out.record.final_metrics = {{"seed", seed},
                                {"method", method},
                                {"zero_shot_accuracy", out.zero_shot_accuracy},
                                {"final_accuracy", out.final_accuracy},
                                {"estimation_queries", out.estimation_queries},
                                {"evaluation_queries", out.evaluation_queries},
                                {"query_counting", to_string(cfg.adapt.counting)},
                                {"cost", out.cost},
                                {"learnable_parameters", out.learnable},
                                {"iterations", T}};

    Checkpoint& ck = out.checkpoint;
    ck.meta = {{"config", to_json(cfg)}, {"seed", seed}, {"prompt_mode", to_string(cfg.prompt.mode)}};
    put_target(ck, target);
    if (cfg.prompt.mode != PromptMode::None) put_optimizer(ck, st);
    if (Coordinator* c = prompt.coordinator()) put_coordinator(ck, *c);
    if (const PcaProjection* p = prompt.pca()) put_pca(ck, *p);
    if (cfg.prompt.mode == PromptMode::Frame) ck.add("frame.values", {st.params.size()}, st.params);
    if (out.trajectory) ck.add("trajectory", {out.trajectory->samples.rows, out.trajectory->samples.cols},
                               out.trajectory->samples.data);
    return out;
}

inline AdaptOutcome run_adaptation_seed(const ExperimentConfig& cfg, std::uint64_t seed, CsvWriter* csv = nullptr) {
    return run_adaptation_seed(cfg, seed, prepare_task(cfg, seed), csv);
}

struct AdaptSummary {
    std::vector<AdaptOutcome> seeds;
    std::vector<RunRow> rows;
};

/// All configured seeds; writes `<run_id>.csv`, the JSON summary and one
/// checkpoint per seed when `out_dir` is non-empty.
inline AdaptSummary run_adaptation(const ExperimentConfig& cfg) {
    cfg.validate();
    AdaptSummary s;
    std::optional<CsvWriter> csv;
    const std::filesystem::path dir = cfg.out_dir;
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(dir);
        csv.emplace(dir / (cfg.run_id + ".csv"));
    }
    for (auto seed : cfg.seeds) {
        AdaptOutcome o = run_adaptation_seed(cfg, seed, csv ? &*csv : nullptr);
        s.rows.insert(s.rows.end(), o.record.rows.begin(), o.record.rows.end());
        if (!cfg.out_dir.empty())
            save_checkpoint(dir / (cfg.run_id + "_seed" + std::to_string(seed) + ".ckpt"), o.checkpoint);
        s.seeds.push_back(std::move(o));
    }
    if (!cfg.out_dir.empty()) {
        nlohmann::json per_seed = nlohmann::json::array();
        for (const auto& o : s.seeds) per_seed.push_back(o.record.final_metrics);
        write_json(dir / (cfg.run_id + "_summary.json"),
                   {{"methods", summarize(s.rows)}, {"per_seed", per_seed}, {"config", to_json(cfg)}});
    }
    return s;
}

}  // namespace bvip
