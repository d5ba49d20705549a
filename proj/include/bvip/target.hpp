#pragma once

// The frozen classifier behind a query-only handle, with exact query and cost
// accounting, plus the desk-scale linear softmax target and its trainer.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>

#include "bvip/common.hpp"
#include "bvip/image.hpp"
#include "bvip/linalg.hpp"

namespace bvip {

enum class QueryPhase { Estimation, Evaluation };
enum class QueryCounting { PerBatch, PerImage };

inline const char* to_string(QueryCounting c) { return c == QueryCounting::PerBatch ? "per_batch" : "per_image"; }

inline QueryCounting parse_query_counting(const std::string& s) {
    if (s == "per_batch") return QueryCounting::PerBatch;
    if (s == "per_image") return QueryCounting::PerImage;
    throw ConfigError("unknown query counting '" + s + "'");
}

class QueryLedger {
public:
    explicit QueryLedger(double cost_per_query = 0.0) : cost_per_query_(cost_per_query) {
        require(cost_per_query >= 0.0 && std::isfinite(cost_per_query), "ledger: cost per query must be nonnegative");
    }

    void record(QueryPhase phase, std::uint64_t n) {
        (phase == QueryPhase::Estimation ? estimation_ : evaluation_).fetch_add(n, std::memory_order_relaxed);
    }

    std::uint64_t estimation() const { return estimation_.load(); }
    std::uint64_t evaluation() const { return evaluation_.load(); }
    std::uint64_t total() const { return estimation() + evaluation(); }
    double cost_per_query() const { return cost_per_query_; }
    double cost() const { return static_cast<double>(total()) * cost_per_query_; }

private:
    std::atomic<std::uint64_t> estimation_{0};
    std::atomic<std::uint64_t> evaluation_{0};
    double cost_per_query_;
};

// ---------------------------------------------------------------------------
// Linear softmax target

struct TargetTrainConfig {
    std::size_t epochs = 200;
    double lr = 0.5;
    std::size_t batch_size = 32;
    double weight_decay = 1e-4;
    std::uint64_t seed = 0;

    void validate() const {
        require(epochs >= 1, "train_target: epochs must be positive");
        require(lr > 0.0, "train_target: lr must be positive");
        require(batch_size >= 1, "train_target: batch size must be positive");
        require(weight_decay >= 0.0, "train_target: weight decay must be nonnegative");
    }
};

class LinearSoftmaxModel;
void train_target(LinearSoftmaxModel& model, const Matrix& x, std::span<const int> labels,
                  const TargetTrainConfig& cfg);

/// logits = W x + b over flattened pixels. Fields are reachable only through
/// the trainer and the checkpoint codec; everything else goes through a handle.
class LinearSoftmaxModel {
public:
    LinearSoftmaxModel(std::size_t input_dim, std::size_t classes)
        : weights_(classes, input_dim), bias_(classes, 0.0) {
        require(input_dim > 0 && classes >= 2, "linear model: need input_dim > 0 and at least 2 classes");
    }

    std::size_t input_dim() const { return weights_.cols; }
    std::size_t classes() const { return weights_.rows; }
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    Matrix logits(const ImageBatch& batch) const {
        require_same_length(batch.shape.size(), input_dim(), "linear model input");
        Matrix out(batch.count, classes());
        const std::size_t k = classes(), d = input_dim();
        Vec acc(k);
        for (std::size_t n = 0; n < batch.count; ++n) {
            const double* x = batch.image(n).data();
            std::fill(acc.begin(), acc.end(), 0.0);
            // class-interleaved accumulation keeps k independent sums in flight
            for (std::size_t j = 0; j < d; ++j)
                for (std::size_t c = 0; c < k; ++c) acc[c] += weights_.data[c * d + j] * x[j];
            for (std::size_t c = 0; c < k; ++c) out(n, c) = bias_[c] + acc[c];
        }
        return out;
    }

    /// FNV-1a over the raw bytes of weights and bias.
    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&](const Vec& v) {
            for (double d : v) {
                std::uint64_t bits;
                std::memcpy(&bits, &d, sizeof bits);
                for (int k = 0; k < 8; ++k) {
                    h ^= (bits >> (8 * k)) & 0xffU;
                    h *= 0x100000001b3ULL;
                }
            }
        };
        mix(weights_.data);
        mix(bias_);
        return h;
    }

    /// Raw parameter access for persistence.
    struct Snapshot {
        Matrix weights;
        Vec bias;
    };
    Snapshot snapshot() const { return {weights_, bias_}; }
    static LinearSoftmaxModel restore(Snapshot s) {
        require_same_length(s.bias.size(), s.weights.rows, "linear model restore");
        LinearSoftmaxModel m(s.weights.cols, s.weights.rows);
        m.weights_ = std::move(s.weights);
        m.bias_ = std::move(s.bias);
        m.frozen_ = true;
        return m;
    }

private:
    friend void train_target(LinearSoftmaxModel&, const Matrix&, std::span<const int>, const TargetTrainConfig&);

    Matrix weights_;
    Vec bias_;
    bool frozen_ = false;
};

namespace detail {

inline void softmax_row(std::span<double> z) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : z) m = std::max(m, v);
    double s = 0.0;
    for (auto& v : z) {
        v = std::exp(v - m);
        s += v;
    }
    for (auto& v : z) v /= s;
}

}  // namespace detail

/// Mini-batch gradient descent on mean cross-entropy; freezes the model.
inline void train_target(LinearSoftmaxModel& model, const Matrix& x, std::span<const int> labels,
                         const TargetTrainConfig& cfg) {
    if (model.frozen_) throw Error("train_target: model is frozen");
    cfg.validate();
    if (x.rows == 0) throw ConfigError("train_target: empty dataset");
    require_same_length(x.rows, labels.size(), "train_target labels");
    require_same_length(x.cols, model.input_dim(), "train_target input");
    const std::size_t n = x.rows, d = x.cols, k = model.classes();
    for (int y : labels) require(y >= 0 && std::size_t(y) < k, "train_target: label out of range");

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Matrix gw(k, d);
    Vec gb(k), prob(k);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle(order, rng);
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            std::fill(gw.data.begin(), gw.data.end(), 0.0);
            std::fill(gb.begin(), gb.end(), 0.0);
            for (std::size_t t = start; t < stop; ++t) {
                const auto xi = x.row(order[t]);
                for (std::size_t c = 0; c < k; ++c) prob[c] = model.bias_[c] + dot(model.weights_.row(c), xi);
                detail::softmax_row(prob);
                prob[std::size_t(labels[order[t]])] -= 1.0;
                for (std::size_t c = 0; c < k; ++c) {
                    gb[c] += prob[c];
                    auto g = gw.row(c);
                    for (std::size_t j = 0; j < d; ++j) g[j] += prob[c] * xi[j];
                }
            }
            const double step = cfg.lr / static_cast<double>(stop - start);
            for (std::size_t c = 0; c < k; ++c) {
                model.bias_[c] -= step * gb[c];
                auto w = model.weights_.row(c);
                const auto g = gw.row(c);
                for (std::size_t j = 0; j < d; ++j) w[j] -= step * g[j] + cfg.lr * cfg.weight_decay * w[j];
            }
        }
    }
    model.freeze();
}

inline LinearSoftmaxModel train_target(const Matrix& x, std::span<const int> labels, std::size_t classes,
                                       const TargetTrainConfig& cfg) {
    LinearSoftmaxModel m(x.cols, classes);
    train_target(m, x, labels, cfg);
    return m;
}

inline Matrix flatten_batch(const ImageBatch& b) {
    Matrix m(b.count, b.shape.size());
    std::copy(b.data.begin(), b.data.end(), m.data.begin());
    return m;
}

// ---------------------------------------------------------------------------
// Black-box handle

/// Query-only view of a classifier: image batch in, logits out. Each call is
/// charged to the ledger (one query per batch, or one per image).
class BlackBoxHandle {
public:
    using QueryFn = std::function<Matrix(const ImageBatch&)>;

    BlackBoxHandle(QueryFn fn, ImageShape input, std::size_t classes, QueryCounting counting = QueryCounting::PerBatch,
                   double cost_per_query = 0.0)
        : fn_(std::move(fn)),
          input_(input),
          classes_(classes),
          counting_(counting),
          ledger_(std::make_shared<QueryLedger>(cost_per_query)) {}

    /// Wraps a frozen linear model. The handle keeps its own copy.
    static BlackBoxHandle from_model(const LinearSoftmaxModel& model, ImageShape input,
                                     QueryCounting counting = QueryCounting::PerBatch, double cost_per_query = 0.0) {
        if (!model.frozen()) throw Error("black-box handle: model must be frozen");
        require_same_length(input.size(), model.input_dim(), "black-box handle input");
        auto m = std::make_shared<const LinearSoftmaxModel>(model);
        return BlackBoxHandle([m](const ImageBatch& b) { return m->logits(b); }, input, model.classes(), counting,
                              cost_per_query);
    }

    Matrix query(const ImageBatch& batch, QueryPhase phase = QueryPhase::Estimation) const {
        if (!(batch.shape == input_)) throw ShapeError("query: image shape does not match the model input");
        if (batch.count == 0) throw ShapeError("query: empty batch");
        Matrix out = fn_(batch);
        ledger_->record(phase, counting_ == QueryCounting::PerBatch ? 1 : batch.count);
        return out;
    }

    const QueryLedger& ledger() const { return *ledger_; }
    std::size_t classes() const { return classes_; }
    ImageShape input_shape() const { return input_; }
    QueryCounting counting() const { return counting_; }

private:
    QueryFn fn_;
    ImageShape input_;
    std::size_t classes_;
    QueryCounting counting_;
    std::shared_ptr<QueryLedger> ledger_;
};

/// Mean −log softmax probability of the true class.
inline double ce_loss(const Matrix& logits, std::span<const int> labels) {
    require_same_length(logits.rows, labels.size(), "ce_loss");
    require(logits.rows > 0, "ce_loss: empty batch");
    double total = 0.0;
    for (std::size_t n = 0; n < logits.rows; ++n) {
        const auto z = logits.row(n);
        const int y = labels[n];
        require(y >= 0 && std::size_t(y) < logits.cols, "ce_loss: label out of range");
        double m = -std::numeric_limits<double>::infinity();
        for (double v : z) m = std::max(m, v);
        double s = 0.0;
        for (double v : z) s += std::exp(v - m);
        total += m + std::log(s) - z[std::size_t(y)];
    }
    return total / static_cast<double>(logits.rows);
}

/// Index of the largest logit; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> z) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < z.size(); ++c)
        if (z[c] > z[best]) best = c;
    return best;
}

inline std::size_t count_correct(const Matrix& logits, std::span<const int> labels) {
    require_same_length(logits.rows, labels.size(), "count_correct");
    std::size_t ok = 0;
    for (std::size_t n = 0; n < logits.rows; ++n) ok += argmax(logits.row(n)) == std::size_t(labels[n]);
    return ok;
}

/// Maps a batch of clean images to prompted images.
using PromptPipeline = std::function<ImageBatch(const ImageBatch&, std::span<const std::size_t> rows)>;

/// Top-1 accuracy over `images` in batches, tagged as evaluation queries. `rows`
/// passed to the pipeline are absolute indices into `images`.
inline double accuracy(const BlackBoxHandle& handle, const ImageBatch& images, std::span<const int> labels,
                       const PromptPipeline* pipeline = nullptr, std::size_t batch_size = 256) {
    require_same_length(images.count, labels.size(), "accuracy");
    require(batch_size >= 1, "accuracy: batch size must be positive");
    if (images.count == 0) return 0.0;
    std::size_t ok = 0;
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < images.count; start += batch_size) {
        const std::size_t stop = std::min(images.count, start + batch_size);
        rows.clear();
        for (std::size_t i = start; i < stop; ++i) rows.push_back(i);
        ImageBatch b(images.shape, rows.size());
        std::copy(images.data.begin() + start * images.shape.size(), images.data.begin() + stop * images.shape.size(),
                  b.data.begin());
        if (pipeline) b = (*pipeline)(b, rows);
        ok += count_correct(handle.query(b, QueryPhase::Evaluation), labels.subspan(start, stop - start));
    }
    return static_cast<double>(ok) / static_cast<double>(images.count);
}

}  // namespace bvip
