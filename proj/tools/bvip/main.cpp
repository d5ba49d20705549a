// bvip: command-line front end for the benchmark, adaptation, certification
// and report experiments.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bvip/harness/adapt_runner.hpp"
#include "bvip/harness/bench_runner.hpp"
#include "bvip/harness/certify_runner.hpp"
#include "bvip/harness/config.hpp"
#include "bvip/harness/report.hpp"

namespace {

struct CommonArgs {
    std::string config;
    std::vector<std::uint64_t> seeds;
    std::string out;
    std::string run_id;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("-c,--config", a.config, "key=value config file")->check(CLI::ExistingFile);
    cmd->add_option("-s,--seed", a.seeds, "seed (repeatable; replaces the configured list)");
    cmd->add_option("-o,--out", a.out, "output directory");
    cmd->add_option("--run-id", a.run_id, "run identifier used in file names and CSV rows");
    cmd->add_option("--override,--set", a.overrides, "override one config key (key=value, repeatable)");
}

/// Output root when --out and out_dir are both absent: $BVIP_OUT_ROOT or ./runs.
std::string default_out(const std::string& run_id) {
    const char* root = std::getenv("BVIP_OUT_ROOT");
    return (std::filesystem::path(root && *root ? root : "runs") / run_id).string();
}

bvip::ExperimentConfig resolve(bvip::ExperimentKind kind, const CommonArgs& a) {
    bvip::ExperimentConfig cfg = bvip::default_config(kind);
    if (!a.config.empty()) {
        std::ifstream in(a.config);
        std::stringstream ss;
        ss << in.rdbuf();
        bvip::apply_config_text(cfg, ss.str());
    }
    for (const auto& o : a.overrides) bvip::apply_override(cfg, o);
    const bool bench = kind == bvip::ExperimentKind::BenchRosenbrock || kind == bvip::ExperimentKind::BenchNoise;
    const bool cfg_bench =
        cfg.kind == bvip::ExperimentKind::BenchRosenbrock || cfg.kind == bvip::ExperimentKind::BenchNoise;
    if (cfg.kind != kind && !(bench && cfg_bench))
        throw bvip::ConfigError(std::string("config: kind '") + bvip::to_string(cfg.kind) +
                                "' does not match the subcommand");
    if (!a.seeds.empty()) cfg.seeds = a.seeds;
    if (!a.run_id.empty()) cfg.run_id = a.run_id;
    if (!a.out.empty()) cfg.out_dir = a.out;
    if (cfg.out_dir.empty()) cfg.out_dir = default_out(cfg.run_id);
    cfg.validate();
    return cfg;
}

int run_bench_cmd(bvip::ExperimentConfig cfg) {
    const bvip::BenchOutcome out = bvip::run_bench(cfg);
    nlohmann::json medians = nlohmann::json::object();
    for (const auto& [noise, by_method] : out.finals)
        for (const auto& [method, v] : by_method)
            medians[bvip::detail::format_double(noise)][method] = bvip::median(v);
    bvip::emit_report(cfg.out_dir, cfg.run_id, out.rows,
                      {{"config", bvip::to_json(cfg)},
                       {"oracle_calls", out.oracle_calls},
                       {"median_final_normalized_loss_by_noise", medians}});
    for (const auto& [noise, by_method] : out.finals)
        for (const auto& [method, v] : by_method)
            std::cout << "noise " << noise << "  " << method << "  median final normalized loss "
                      << bvip::median(v) << "\n";
    std::cout << "wrote " << (std::filesystem::path(cfg.out_dir) / (cfg.run_id + ".csv")).string() << "\n";
    return 0;
}

int run_adapt_cmd(const bvip::ExperimentConfig& cfg) {
    const bvip::AdaptSummary s = bvip::run_adaptation(cfg);
    for (const auto& o : s.seeds)
        std::cout << "seed " << o.record.final_metrics["seed"] << "  zero-shot " << o.zero_shot_accuracy
                  << "  final " << o.final_accuracy << "  estimation queries " << o.estimation_queries << "\n";
    std::cout << "wrote " << (std::filesystem::path(cfg.out_dir) / (cfg.run_id + ".csv")).string() << "\n";
    return 0;
}

int run_certify_cmd(const bvip::ExperimentConfig& cfg) {
    const auto all = bvip::run_certification(cfg);
    for (std::size_t i = 0; i < all.size(); ++i) {
        double mean_r = 0.0;
        std::size_t certified = 0;
        for (const auto& c : all[i].certificates) {
            mean_r += c.radius;
            certified += c.radius > 0.0;
        }
        if (!all[i].certificates.empty()) mean_r /= double(all[i].certificates.size());
        std::cout << "seed " << cfg.seeds[i] << "  certified " << certified << "/" << all[i].certificates.size()
                  << "  mean radius " << mean_r << "\n";
    }
    std::cout << "wrote " << (std::filesystem::path(cfg.out_dir) / (cfg.run_id + "_certificates.json")).string()
              << "\n";
    return 0;
}

int run_report_cmd(const bvip::ExperimentConfig& cfg) {
    std::vector<bvip::RunRow> rows;
    for (const auto& path : cfg.report_inputs) {
        auto r = bvip::read_csv(path);
        rows.insert(rows.end(), r.begin(), r.end());
    }
    bvip::emit_report(cfg.out_dir, cfg.run_id, rows, {{"inputs", cfg.report_inputs}});
    std::cout << bvip::summarize(rows).dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Black-box visual prompting experiments"};
    app.require_subcommand(1);

    CommonArgs bench_args, adapt_args, certify_args, report_args;
    bool noise = false;
    auto* bench = app.add_subcommand("bench", "zeroth-order optimizer comparison on Rosenbrock");
    add_common(bench, bench_args);
    bench->add_flag("--noise", noise, "include the configured observation-noise scales");

    auto* adapt = app.add_subcommand("adapt", "learn a prompt for the frozen target");
    add_common(adapt, adapt_args);

    auto* certify = app.add_subcommand("certify", "certified radii from a prompt trajectory");
    add_common(certify, certify_args);

    auto* report = app.add_subcommand("report", "merge metric CSVs and summarize");
    add_common(report, report_args);
    std::vector<std::string> inputs;
    report->add_option("inputs", inputs, "metric CSV files")->check(CLI::ExistingFile);

    auto* keys = app.add_subcommand("keys", "list configuration keys");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*keys) {
            for (const auto& k : bvip::config_keys()) std::cout << k << "\n";
            return 0;
        }
        if (*bench) {
            auto cfg = resolve(noise ? bvip::ExperimentKind::BenchNoise : bvip::ExperimentKind::BenchRosenbrock,
                               bench_args);
            if (noise) cfg.kind = bvip::ExperimentKind::BenchNoise;
            return run_bench_cmd(cfg);
        }
        if (*adapt) return run_adapt_cmd(resolve(bvip::ExperimentKind::Adapt, adapt_args));
        if (*certify) return run_certify_cmd(resolve(bvip::ExperimentKind::Certify, certify_args));
        if (*report) {
            CommonArgs a = report_args;
            if (!inputs.empty()) {
                std::string joined;
                for (const auto& in : inputs) joined += (joined.empty() ? "" : ",") + in;
                a.overrides.push_back("report.inputs=" + joined);
            }
            if (a.run_id.empty()) a.run_id = "report";
            return run_report_cmd(resolve(bvip::ExperimentKind::Report, a));
        }
    } catch (const bvip::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
