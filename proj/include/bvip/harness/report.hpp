#pragma once

// Run records, the CSV metric schema and JSON summaries.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bvip/common.hpp"

namespace bvip {

struct RunRow {
    std::string run_id;
    std::string method;
    std::uint64_t seed = 0;
    std::uint64_t iteration = 0;
    std::uint64_t eval_count = 0;
    std::optional<double> loss;
    std::optional<double> normalized_loss;
    std::optional<std::uint64_t> queries;
    std::optional<double> cost;
    std::optional<double> accuracy;

    bool operator==(const RunRow&) const = default;
};

/// Per-iteration details kept out of the CSV (wall time would break byte-level reproducibility).
struct IterationTrace {
    std::uint64_t iteration = 0;
    double a = 0.0;
    double c = 0.0;
    double seconds = 0.0;
};

struct RunRecord {
    std::vector<RunRow> rows;
    std::vector<IterationTrace> trace;
    nlohmann::json final_metrics = nlohmann::json::object();
};

inline constexpr const char* kCsvHeader =
    "run_id,method,seed,iteration,eval_count,loss,normalized_loss,queries,cost,accuracy";

namespace detail {

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw Error("format_double failed");
    return std::string(buf, ptr);
}

template <typename T>
std::string format_optional(const std::optional<T>& v) {
    if (!v) return "";
    if constexpr (std::is_floating_point_v<T>) {
        if (!std::isfinite(*v)) return "";
        return format_double(*v);
    } else {
        return std::to_string(*v);
    }
}

template <typename T>
std::optional<T> parse_optional(const std::string& s, std::size_t line) {
    if (s.empty()) return std::nullopt;
    T v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw ParseError("csv: bad numeric field '" + s + "' on line " + std::to_string(line), line);
    return v;
}

template <typename T>
T parse_required(const std::string& s, std::size_t line) {
    auto v = parse_optional<T>(s, line);
    if (!v) throw ParseError("csv: missing required field on line " + std::to_string(line), line);
    return *v;
}

}  // namespace detail

inline std::string csv_line(const RunRow& r) {
    std::string s = r.run_id + "," + r.method + "," + std::to_string(r.seed) + "," + std::to_string(r.iteration) + "," +
                    std::to_string(r.eval_count) + ",";
    s += detail::format_optional(r.loss) + ",";
    s += detail::format_optional(r.normalized_loss) + ",";
    s += detail::format_optional(r.queries) + ",";
    s += detail::format_optional(r.cost) + ",";
    s += detail::format_optional(r.accuracy);
    return s;
}

/// Streams rows to disk, flushing each one so an interrupted run leaves a
/// valid prefix.
class CsvWriter {
public:
    explicit CsvWriter(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
        if (!out_) throw Error("csv: cannot write '" + path.string() + "'");
        out_ << kCsvHeader << '\n';
        out_.flush();
    }

    void write(const RunRow& r) {
        out_ << csv_line(r) << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

inline void write_csv(const std::filesystem::path& path, const std::vector<RunRow>& rows) {
    CsvWriter w(path);
    for (const auto& r : rows) w.write(r);
}

inline std::vector<RunRow> parse_csv(const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    if (!std::getline(ss, line) || line != kCsvHeader) throw ParseError("csv: missing or unexpected header", 0);
    std::vector<RunRow> rows;
    std::size_t lineno = 1;
    while (std::getline(ss, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (;;) {
            const auto comma = line.find(',', start);
            f.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (f.size() != 10) throw ParseError("csv: expected 10 fields on line " + std::to_string(lineno), lineno);
        RunRow r;
        r.run_id = f[0];
        r.method = f[1];
        r.seed = detail::parse_required<std::uint64_t>(f[2], lineno);
        r.iteration = detail::parse_required<std::uint64_t>(f[3], lineno);
        r.eval_count = detail::parse_required<std::uint64_t>(f[4], lineno);
        r.loss = detail::parse_optional<double>(f[5], lineno);
        r.normalized_loss = detail::parse_optional<double>(f[6], lineno);
        r.queries = detail::parse_optional<std::uint64_t>(f[7], lineno);
        r.cost = detail::parse_optional<double>(f[8], lineno);
        r.accuracy = detail::parse_optional<double>(f[9], lineno);
        rows.push_back(std::move(r));
    }
    return rows;
}

inline std::vector<RunRow> read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("csv: cannot open '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_csv(ss.str());
}

/// Median; the mean of the two middle values for even counts.
inline double median(std::vector<double> v) {
    require(!v.empty(), "median: empty input");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Last row per (run, method, seed), then medians across seeds:
/// {run_id: {method: {...}}}.
inline nlohmann::json summarize(const std::vector<RunRow>& rows) {
    std::map<std::string, std::map<std::string, std::map<std::uint64_t, const RunRow*>>> last;
    for (const auto& r : rows) {
        auto& slot = last[r.run_id][r.method][r.seed];
        if (!slot || r.iteration >= slot->iteration) slot = &r;
    }
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [run, methods] : last)
        for (const auto& [method, by_seed] : methods) {
            std::vector<double> loss, nloss, acc, queries, cost;
            nlohmann::json seeds = nlohmann::json::array();
            for (const auto& [seed, r] : by_seed) {
                seeds.push_back(seed);
                if (r->loss) loss.push_back(*r->loss);
                if (r->normalized_loss) nloss.push_back(*r->normalized_loss);
                if (r->accuracy) acc.push_back(*r->accuracy);
                if (r->queries) queries.push_back(double(*r->queries));
                if (r->cost) cost.push_back(*r->cost);
            }
            nlohmann::json m = {{"seeds", seeds}};
            auto put = [&](const char* key, const std::vector<double>& v) {
                if (!v.empty()) m[std::string("median_final_") + key] = median(v);
            };
            put("loss", loss);
            put("normalized_loss", nloss);
            put("accuracy", acc);
            put("queries", queries);
            put("cost", cost);
            out[run][method] = m;
        }
    return out;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("json: cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

/// CSV plus a JSON summary with medians across seeds.
inline void emit_report(const std::filesystem::path& dir, const std::string& stem, const std::vector<RunRow>& rows,
                        const nlohmann::json& extra = nlohmann::json::object()) {
    require(!rows.empty(), "emit_report: no rows");
    std::filesystem::create_directories(dir);
    write_csv(dir / (stem + ".csv"), rows);
    nlohmann::json summary = {{"methods", summarize(rows)}};
    for (const auto& [k, v] : extra.items()) summary[k] = v;
    write_json(dir / (stem + "_summary.json"), summary);
}

}  // namespace bvip
