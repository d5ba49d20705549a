#pragma once

// Flat key=value experiment configuration. Every key is typed and validated
// before any compute; unknown keys are rejected.

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bvip/certify.hpp"
#include "bvip/coordinator.hpp"
#include "bvip/data.hpp"
#include "bvip/target.hpp"
#include "bvip/zoo.hpp"

namespace bvip {

enum class ExperimentKind { BenchRosenbrock, BenchNoise, Adapt, Certify, Report };

inline const char* to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::BenchRosenbrock: return "bench-rosenbrock";
        case ExperimentKind::BenchNoise: return "bench-noise";
        case ExperimentKind::Adapt: return "adapt";
        case ExperimentKind::Certify: return "certify";
        case ExperimentKind::Report: return "report";
    }
    return "?";
}

inline ExperimentKind parse_experiment_kind(const std::string& s) {
    for (auto k : {ExperimentKind::BenchRosenbrock, ExperimentKind::BenchNoise, ExperimentKind::Adapt,
                   ExperimentKind::Certify, ExperimentKind::Report})
        if (s == to_string(k)) return k;
    throw ConfigError("unknown experiment kind '" + s + "'");
}

enum class OptimizerKind { Spsa, SpsaGc, Rgf };

inline const char* to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::Spsa: return "spsa";
        case OptimizerKind::SpsaGc: return "spsa_gc";
        case OptimizerKind::Rgf: return "rgf";
    }
    return "?";
}

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
    if (s == "spsa") return OptimizerKind::Spsa;
    if (s == "spsa_gc") return OptimizerKind::SpsaGc;
    if (s == "rgf") return OptimizerKind::Rgf;
    throw ConfigError("unknown optimizer '" + s + "'");
}

enum class DatasetKind { Loc, Biased, Glyphs };

inline const char* to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::Loc: return "loc";
        case DatasetKind::Biased: return "biased";
        case DatasetKind::Glyphs: return "glyphs";
    }
    return "?";
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
    if (s == "loc") return DatasetKind::Loc;
    if (s == "biased") return DatasetKind::Biased;
    if (s == "glyphs") return DatasetKind::Glyphs;
    throw ConfigError("unknown dataset '" + s + "'");
}

enum class EncoderKind { Pca, Frozen };

inline const char* to_string(EncoderKind k) { return k == EncoderKind::Pca ? "pca" : "frozen"; }

inline EncoderKind parse_encoder_kind(const std::string& s) {
    if (s == "pca") return EncoderKind::Pca;
    if (s == "frozen") return EncoderKind::Frozen;
    throw ConfigError("unknown encoder '" + s + "'");
}

struct BenchSettings {
    std::size_t dimension = 100;
    std::size_t eval_budget = 20000;
    std::vector<double> noise_scales{0.0, 0.01, 0.1, 1.0};
    std::size_t log_interval = 1000;  ///< evaluations between CSV rows
    std::size_t rgf_q = 9;
    double rgf_mu = 0.01;
    double nag_lr = 5e-4;
    double nag_beta = 0.9;
};

struct DataSettings {
    DatasetKind dataset = DatasetKind::Loc;
    std::size_t canvas = 56;
    ScaleRatio scale_ratio = ScaleRatio::OneToFour;
    double rho = 0.9;
    std::size_t shots = 16;
    std::size_t val_shots = 4;
    std::size_t test_per_class = 50;
    std::size_t target_per_class = 60;  ///< clean images used to pretrain the frozen target
    std::string idx_images;             ///< optional IDX files replacing procedural glyphs
    std::string idx_labels;
};

struct AdaptSettings {
    std::size_t iterations = 300;
    std::size_t batch_size = 32;
    EncoderKind encoder = EncoderKind::Pca;
    std::size_t frozen_dim = 768;
    std::array<std::size_t, kDecoderBlocks> widths{4, 4, 4, 4, 3};
    QueryCounting counting = QueryCounting::PerBatch;
    double cost_per_query = 0.0;
    std::size_t target_epochs = 100;
    double target_lr = 0.5;
    std::size_t snapshot_last = 0;  ///< 0 disables trajectory snapshots
    std::size_t snapshot_stride = 1;
};

struct CertifySettings {
    PromptVariant variant = PromptVariant::VP;
    std::size_t canvas = 8;  ///< certification runs on a small canvas (3·canvas² ≤ 512)
    std::size_t samples = 2000;
    double alpha = 0.05;
    std::size_t test_points = 20;
    std::size_t verify_trials = 0;
    std::string trajectory;  ///< optional trajectory file from an adapt run
};

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::BenchRosenbrock;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::string out_dir;
    std::string run_id = "run";

    OptimizerKind optimizer = OptimizerKind::SpsaGc;
    GainSchedule schedule{5e-5, 0.1, 0.01, 0.1, 0.0};
    double beta = 0.9;
    std::size_t repeats = 5;
    PerturbationKind perturbation = PerturbationKind::SegmentedUniform;

    PromptConfig prompt{1.0, 0.0, 1.0, PromptMode::Conditional, 7, LatentShape{2, 3, 3}};

    BenchSettings bench;
    DataSettings data;
    AdaptSettings adapt;
    CertifySettings certify;
    std::vector<std::string> report_inputs;

    void validate() const;
};

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const char* first = v.data();
    const char* last = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last) throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
    std::vector<T> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) throw ConfigError("config: key '" + key + "' has an empty list entry");
        if constexpr (std::is_same_v<T, std::string>)
            out.push_back(item);
        else
            out.push_back(parse_number<T>(key, item));
    }
    if (out.empty()) throw ConfigError("config: key '" + key + "' expects a non-empty list");
    return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& config_setters() {
    using C = ExperimentConfig;
    using S = const std::string&;
    auto num = [](auto member) {
        return [member](C& c, S k, S v) {
            auto& field = member(c);
            field = parse_number<std::remove_reference_t<decltype(field)>>(k, v);
        };
    };
    static const std::map<std::string, Setter> table = {
        {"kind", [](C& c, S, S v) { c.kind = parse_experiment_kind(v); }},
        {"seeds", [](C& c, S k, S v) { c.seeds = parse_list<std::uint64_t>(k, v); }},
        {"out_dir", [](C& c, S, S v) { c.out_dir = v; }},
        {"run_id", [](C& c, S, S v) { c.run_id = v; }},
        {"optimizer", [](C& c, S, S v) { c.optimizer = parse_optimizer_kind(v); }},
        {"a1", num([](C& c) -> double& { return c.schedule.a1; })},
        {"alpha", num([](C& c) -> double& { return c.schedule.alpha; })},
        {"c1", num([](C& c) -> double& { return c.schedule.c1; })},
        {"gamma", num([](C& c) -> double& { return c.schedule.gamma; })},
        {"stability_offset", num([](C& c) -> double& { return c.schedule.stability_offset; })},
        {"beta", num([](C& c) -> double& { return c.beta; })},
        {"repeats", num([](C& c) -> std::size_t& { return c.repeats; })},
        {"perturbation", [](C& c, S, S v) { c.perturbation = parse_perturbation_kind(v); }},
        {"prompt.mode", [](C& c, S, S v) { c.prompt.mode = parse_prompt_mode(v); }},
        {"prompt.epsilon", num([](C& c) -> double& { return c.prompt.epsilon; })},
        {"prompt.clip_low", num([](C& c) -> double& { return c.prompt.clip_low; })},
        {"prompt.clip_high", num([](C& c) -> double& { return c.prompt.clip_high; })},
        {"prompt.frame_pad", num([](C& c) -> std::size_t& { return c.prompt.frame_pad; })},
        {"prompt.latent",
         [](C& c, S k, S v) {
             const auto l = parse_list<std::size_t>(k, v);
             if (l.size() != 3) throw ConfigError("config: prompt.latent expects channels,height,width");
             c.prompt.latent = {l[0], l[1], l[2]};
         }},
        {"bench.dimension", num([](C& c) -> std::size_t& { return c.bench.dimension; })},
        {"bench.eval_budget", num([](C& c) -> std::size_t& { return c.bench.eval_budget; })},
        {"bench.noise_scales", [](C& c, S k, S v) { c.bench.noise_scales = parse_list<double>(k, v); }},
        {"bench.log_interval", num([](C& c) -> std::size_t& { return c.bench.log_interval; })},
        {"bench.rgf_q", num([](C& c) -> std::size_t& { return c.bench.rgf_q; })},
        {"bench.rgf_mu", num([](C& c) -> double& { return c.bench.rgf_mu; })},
        {"bench.nag_lr", num([](C& c) -> double& { return c.bench.nag_lr; })},
        {"bench.nag_beta", num([](C& c) -> double& { return c.bench.nag_beta; })},
        {"data.dataset", [](C& c, S, S v) { c.data.dataset = parse_dataset_kind(v); }},
        {"data.canvas", num([](C& c) -> std::size_t& { return c.data.canvas; })},
        {"data.scale_ratio",
         [](C& c, S, S v) {
             if (v == "1:1") c.data.scale_ratio = ScaleRatio::OneToOne;
             else if (v == "1:4") c.data.scale_ratio = ScaleRatio::OneToFour;
             else throw ConfigError("config: data.scale_ratio expects 1:1 or 1:4");
         }},
        {"data.rho", num([](C& c) -> double& { return c.data.rho; })},
        {"data.shots", num([](C& c) -> std::size_t& { return c.data.shots; })},
        {"data.val_shots", num([](C& c) -> std::size_t& { return c.data.val_shots; })},
        {"data.test_per_class", num([](C& c) -> std::size_t& { return c.data.test_per_class; })},
        {"data.target_per_class", num([](C& c) -> std::size_t& { return c.data.target_per_class; })},
        {"data.idx_images", [](C& c, S, S v) { c.data.idx_images = v; }},
        {"data.idx_labels", [](C& c, S, S v) { c.data.idx_labels = v; }},
        {"adapt.iterations", num([](C& c) -> std::size_t& { return c.adapt.iterations; })},
        {"adapt.batch_size", num([](C& c) -> std::size_t& { return c.adapt.batch_size; })},
        {"adapt.encoder", [](C& c, S, S v) { c.adapt.encoder = parse_encoder_kind(v); }},
        {"adapt.frozen_dim", num([](C& c) -> std::size_t& { return c.adapt.frozen_dim; })},
        {"adapt.widths",
         [](C& c, S k, S v) {
             const auto l = parse_list<std::size_t>(k, v);
             if (l.size() != kDecoderBlocks) throw ConfigError("config: adapt.widths expects 5 entries");
             std::copy(l.begin(), l.end(), c.adapt.widths.begin());
         }},
        {"adapt.query_counting", [](C& c, S, S v) { c.adapt.counting = parse_query_counting(v); }},
        {"adapt.cost_per_query", num([](C& c) -> double& { return c.adapt.cost_per_query; })},
        {"adapt.target_epochs", num([](C& c) -> std::size_t& { return c.adapt.target_epochs; })},
        {"adapt.target_lr", num([](C& c) -> double& { return c.adapt.target_lr; })},
        {"adapt.snapshot_last", num([](C& c) -> std::size_t& { return c.adapt.snapshot_last; })},
        {"adapt.snapshot_stride", num([](C& c) -> std::size_t& { return c.adapt.snapshot_stride; })},
        {"certify.variant", [](C& c, S, S v) { c.certify.variant = parse_prompt_variant(v); }},
        {"certify.canvas", num([](C& c) -> std::size_t& { return c.certify.canvas; })},
        {"certify.samples", num([](C& c) -> std::size_t& { return c.certify.samples; })},
        {"certify.alpha", num([](C& c) -> double& { return c.certify.alpha; })},
        {"certify.test_points", num([](C& c) -> std::size_t& { return c.certify.test_points; })},
        {"certify.verify_trials", num([](C& c) -> std::size_t& { return c.certify.verify_trials; })},
        {"certify.trajectory", [](C& c, S, S v) { c.certify.trajectory = v; }},
        {"report.inputs", [](C& c, S k, S v) { c.report_inputs = parse_list<std::string>(k, v); }},
    };
    return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& [k, _] : detail::config_setters()) out.push_back(k);
    return out;
}

/// Applies one `key=value` assignment.
inline void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("config: expected key=value, got '" + assignment + "'");
    const std::string key = detail::trim(assignment.substr(0, eq));
    const std::string value = detail::trim(assignment.substr(eq + 1));
    const auto& table = detail::config_setters();
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("config: unknown key '" + key + "'");
    if (value.empty()) throw ConfigError("config: key '" + key + "' has no value");
    it->second(cfg, key, value);
}

/// Parses config text: one key=value per line, '#' starts a comment.
inline void apply_config_text(ExperimentConfig& cfg, const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
        line = detail::trim(line);
        if (line.empty()) continue;
        try {
            apply_override(cfg, line);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
}

/// Starting point for a given experiment kind. Adaptation and certification
/// operate on cross-entropy rather than the benchmark objective and use larger gains.
inline ExperimentConfig default_config(ExperimentKind kind) {
    ExperimentConfig cfg;
    cfg.kind = kind;
    if (kind == ExperimentKind::Adapt || kind == ExperimentKind::Certify) {
        cfg.schedule = {1e-3, 0.1, 0.01, 0.1, 0.0};
        cfg.seeds = {0, 1, 2};
    }
    if (kind == ExperimentKind::Certify) {
        cfg.adapt.iterations = 600;
        cfg.adapt.snapshot_last = 300;
        cfg.adapt.batch_size = 16;
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    ExperimentConfig cfg;
    apply_config_text(cfg, ss.str());
    return cfg;
}

inline void ExperimentConfig::validate() const {
    require(!seeds.empty(), "config: at least one seed required");
    require(!run_id.empty() && run_id.find_first_of(",\n\r\"") == std::string::npos,
            "config: run_id must be non-empty and contain no commas, quotes or newlines");
    schedule.validate();
    require(beta >= 0.0 && beta < 1.0, "config: beta must lie in [0, 1)");
    require(repeats >= 1, "config: repeats must be positive");
    prompt.validate();

    require(bench.dimension >= 2, "config: bench.dimension must be at least 2");
    require(bench.eval_budget >= 1, "config: bench.eval_budget must be positive");
    require(bench.log_interval >= 1, "config: bench.log_interval must be positive");
    for (double s : bench.noise_scales) require(s >= 0.0 && std::isfinite(s), "config: noise scales must be nonnegative");
    require(bench.rgf_q >= 1, "config: bench.rgf_q must be positive");
    require(bench.rgf_mu > 0.0, "config: bench.rgf_mu must be positive");
    require(bench.nag_lr > 0.0, "config: bench.nag_lr must be positive");
    require(bench.nag_beta >= 0.0 && bench.nag_beta < 1.0, "config: bench.nag_beta must lie in [0, 1)");

    require(data.rho >= 0.0 && data.rho <= 1.0, "config: data.rho must lie in [0, 1]");
    require(data.shots >= 1, "config: data.shots must be positive");
    require(data.test_per_class >= 1, "config: data.test_per_class must be positive");
    require(data.target_per_class >= 1, "config: data.target_per_class must be positive");
    if (data.dataset == DatasetKind::Loc) LocSpec{data.canvas, data.scale_ratio, 0, true}.validate();
    require(data.idx_images.empty() == data.idx_labels.empty(),
            "config: data.idx_images and data.idx_labels must be given together");

    require(adapt.batch_size >= 1, "config: adapt.batch_size must be positive");
    require(adapt.frozen_dim >= 1, "config: adapt.frozen_dim must be positive");
    for (auto w : adapt.widths) require(w >= 1, "config: adapt.widths must be positive");
    require(adapt.widths.back() == 3, "config: last decoder width must be 3");
    require(adapt.cost_per_query >= 0.0, "config: adapt.cost_per_query must be nonnegative");
    require(adapt.target_epochs >= 1, "config: adapt.target_epochs must be positive");
    require(adapt.target_lr > 0.0, "config: adapt.target_lr must be positive");
    require(adapt.snapshot_stride >= 1, "config: adapt.snapshot_stride must be positive");
    require(adapt.snapshot_last == 0 || adapt.snapshot_last >= 2, "config: adapt.snapshot_last must be 0 or at least 2");

    require(certify.canvas >= 1 && 3 * certify.canvas * certify.canvas <= kMaxCertifyDim,
            "config: certify.canvas must satisfy 3*canvas^2 <= 512");
    require(certify.samples >= 2 && certify.samples % 2 == 0, "config: certify.samples must be even and at least 2");
    require(certify.alpha > 0.0 && certify.alpha < 1.0, "config: certify.alpha must lie in (0, 1)");
    require(certify.test_points >= 1, "config: certify.test_points must be positive");
    if (kind == ExperimentKind::Report) require(!report_inputs.empty(), "config: report.inputs required for report");
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    auto seeds = nlohmann::json::array();
    for (auto s : c.seeds) seeds.push_back(s);
    return {
        {"kind", to_string(c.kind)},
        {"seeds", seeds},
        {"run_id", c.run_id},
        {"optimizer", to_string(c.optimizer)},
        {"schedule",
         {{"a1", c.schedule.a1}, {"alpha", c.schedule.alpha}, {"c1", c.schedule.c1}, {"gamma", c.schedule.gamma},
          {"stability_offset", c.schedule.stability_offset}}},
        {"beta", c.beta},
        {"repeats", c.repeats},
        {"perturbation", to_string(c.perturbation)},
        {"prompt",
         {{"mode", to_string(c.prompt.mode)}, {"epsilon", c.prompt.epsilon}, {"clip_low", c.prompt.clip_low},
          {"clip_high", c.prompt.clip_high}, {"frame_pad", c.prompt.frame_pad},
          {"latent", {c.prompt.latent.channels, c.prompt.latent.height, c.prompt.latent.width}}}},
        {"bench",
         {{"dimension", c.bench.dimension}, {"eval_budget", c.bench.eval_budget}, {"noise_scales", c.bench.noise_scales},
          {"log_interval", c.bench.log_interval}, {"rgf_q", c.bench.rgf_q}, {"rgf_mu", c.bench.rgf_mu},
          {"nag_lr", c.bench.nag_lr}, {"nag_beta", c.bench.nag_beta}}},
        {"data",
         {{"dataset", to_string(c.data.dataset)}, {"canvas", c.data.canvas},
          {"scale_ratio", c.data.scale_ratio == ScaleRatio::OneToOne ? "1:1" : "1:4"}, {"rho", c.data.rho},
          {"shots", c.data.shots}, {"val_shots", c.data.val_shots}, {"test_per_class", c.data.test_per_class},
          {"target_per_class", c.data.target_per_class}}},
        {"adapt",
         {{"iterations", c.adapt.iterations}, {"batch_size", c.adapt.batch_size},
          {"encoder", to_string(c.adapt.encoder)}, {"frozen_dim", c.adapt.frozen_dim}, {"widths", c.adapt.widths},
          {"query_counting", to_string(c.adapt.counting)}, {"cost_per_query", c.adapt.cost_per_query},
          {"target_epochs", c.adapt.target_epochs}, {"target_lr", c.adapt.target_lr},
          {"snapshot_last", c.adapt.snapshot_last}, {"snapshot_stride", c.adapt.snapshot_stride}}},
        {"certify",
         {{"variant", to_string(c.certify.variant)}, {"canvas", c.certify.canvas}, {"samples", c.certify.samples},
          {"alpha", c.certify.alpha}, {"test_points", c.certify.test_points},
          {"verify_trials", c.certify.verify_trials}}},
    };
}

}  // namespace bvip
