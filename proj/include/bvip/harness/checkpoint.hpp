#pragma once

// Binary checkpoint container:
//   "BVIPCKPT" | u32 version | u64 metadata length | metadata JSON |
//   f64 sections in declared order | u32 CRC-32 of all preceding bytes.
// Integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "bvip/coordinator.hpp"
#include "bvip/pca.hpp"
#include "bvip/target.hpp"
#include "bvip/zoo.hpp"

namespace bvip {

inline constexpr char kCheckpointMagic[8] = {'B', 'V', 'I', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
public:
    using Error::Error;
};

struct Section {
    std::string name;
    std::vector<std::size_t> shape;
    Vec data;
};

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<Section> sections;

    const Section& section(const std::string& name) const {
        for (const auto& s : sections)
            if (s.name == name) return s;
        throw CheckpointError("checkpoint: missing section '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& s : sections)
            if (s.name == name) return true;
        return false;
    }
    void add(std::string name, std::vector<std::size_t> shape, Vec data) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        require_same_length(n, data.size(), "checkpoint section");
        sections.push_back({std::move(name), std::move(shape), std::move(data)});
    }
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

namespace detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
    for (std::size_t k = 0; k < sizeof(T); ++k) out.push_back(static_cast<std::uint8_t>((v >> (8 * k)) & 0xff));
}

template <typename T>
T get_le(const std::vector<std::uint8_t>& in, std::size_t& at) {
    if (at + sizeof(T) > in.size()) throw CheckpointError("checkpoint: truncated file");
    T v = 0;
    for (std::size_t k = 0; k < sizeof(T); ++k) v |= static_cast<T>(in[at + k]) << (8 * k);
    at += sizeof(T);
    return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck, std::uint32_t version = kCheckpointVersion) {
    nlohmann::json meta = ck.meta;
    auto secs = nlohmann::json::array();
    for (const auto& s : ck.sections) secs.push_back({{"name", s.name}, {"shape", s.shape}, {"length", s.data.size()}});
    meta["sections"] = secs;
    const std::string text = meta.dump();

    std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
    detail::put_le<std::uint32_t>(out, version);
    detail::put_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& s : ck.sections)
        for (double v : s.data) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    detail::put_le<std::uint32_t>(out, crc32_of(out.data(), out.size()));
    return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8 + 4 + 8 + 4 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw CheckpointError("checkpoint: bad magic");
    std::size_t at = 8;
    const auto version = detail::get_le<std::uint32_t>(bytes, at);
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    std::size_t tail = bytes.size() - 4;
    const auto stored = detail::get_le<std::uint32_t>(bytes, tail);
    if (stored != crc32_of(bytes.data(), bytes.size() - 4)) throw CheckpointError("checkpoint: CRC mismatch");

    const auto meta_len = detail::get_le<std::uint64_t>(bytes, at);
    if (meta_len > bytes.size() - 4 - at) throw CheckpointError("checkpoint: metadata length exceeds file");
    Checkpoint ck;
    try {
        ck.meta = nlohmann::json::parse(bytes.begin() + std::ptrdiff_t(at), bytes.begin() + std::ptrdiff_t(at + meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: metadata is not valid JSON: ") + e.what());
    }
    at += meta_len;
    const std::size_t end = bytes.size() - 4;
    for (const auto& s : ck.meta.at("sections")) {
        Section sec{s.at("name").get<std::string>(), s.at("shape").get<std::vector<std::size_t>>(), {}};
        const auto len = s.at("length").get<std::size_t>();
        if (len > (end - at) / 8) throw CheckpointError("checkpoint: section '" + sec.name + "' length exceeds file");
        sec.data.resize(len);
        for (auto& v : sec.data) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, at));
        ck.sections.push_back(std::move(sec));
    }
    if (at != end) throw CheckpointError("checkpoint: length mismatch (trailing bytes)");
    ck.meta.erase("sections");
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    const auto bytes = encode_checkpoint(ck);
    // Write to a sibling file then rename, so an interrupted save never leaves a torn checkpoint.
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("checkpoint: cannot write '" + tmp.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
        if (!out) throw CheckpointError("checkpoint: write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Payload codecs

inline void put_pca(Checkpoint& ck, const PcaProjection& p) {
    ck.add("pca.mean", {p.mean.size()}, p.mean);
    ck.add("pca.components", {p.components.rows, p.components.cols}, p.components.data);
    ck.add("pca.explained_variance", {p.explained_variance.size()}, p.explained_variance);
}

inline PcaProjection get_pca(const Checkpoint& ck) {
    PcaProjection p;
    p.mean = ck.section("pca.mean").data;
    const Section& c = ck.section("pca.components");
    if (c.shape.size() != 2) throw CheckpointError("checkpoint: pca.components must be 2-D");
    p.components = Matrix(c.shape[0], c.shape[1]);
    p.components.data = c.data;
    p.explained_variance = ck.section("pca.explained_variance").data;
    return p;
}

inline void put_target(Checkpoint& ck, const LinearSoftmaxModel& m) {
    const auto snap = m.snapshot();
    ck.add("target.weights", {snap.weights.rows, snap.weights.cols}, snap.weights.data);
    ck.add("target.bias", {snap.bias.size()}, snap.bias);
}

inline LinearSoftmaxModel get_target(const Checkpoint& ck) {
    const Section& w = ck.section("target.weights");
    if (w.shape.size() != 2) throw CheckpointError("checkpoint: target.weights must be 2-D");
    LinearSoftmaxModel::Snapshot s{Matrix(w.shape[0], w.shape[1]), ck.section("target.bias").data};
    s.weights.data = w.data;
    return LinearSoftmaxModel::restore(std::move(s));
}

/// Decoder learnables, running statistics and trigger.
inline void put_coordinator(Checkpoint& ck, const Coordinator& c) {
    const Vec phi = c.flatten();
    ck.add("coordinator.learnable", {phi.size()}, phi);
    Vec running;
    for (const auto& b : c.params().blocks) {
        running.insert(running.end(), b.running_mean.begin(), b.running_mean.end());
        running.insert(running.end(), b.running_var.begin(), b.running_var.end());
    }
    ck.add("coordinator.running", {running.size()}, running);
}

inline void get_coordinator(const Checkpoint& ck, Coordinator& c) {
    c.unflatten(ck.section("coordinator.learnable").data);
    const Vec& running = ck.section("coordinator.running").data;
    std::size_t at = 0, need = 0;
    for (const auto& b : c.params().blocks) need += b.running_mean.size() + b.running_var.size();
    require_same_length(running.size(), need, "checkpoint running statistics");
    for (auto& b : c.params().blocks) {
        for (auto& v : b.running_mean) v = running[at++];
        for (auto& v : b.running_var) v = running[at++];
    }
}

inline void put_optimizer(Checkpoint& ck, const OptimizerState& s) {
    ck.meta["optimizer"] = {{"iteration", s.iteration},
                            {"beta", s.beta},
                            {"rng_seed", s.rng_seed},
                            {"a1", s.schedule.a1},
                            {"alpha", s.schedule.alpha},
                            {"c1", s.schedule.c1},
                            {"gamma", s.schedule.gamma},
                            {"stability_offset", s.schedule.stability_offset}};
    ck.add("optimizer.params", {s.params.size()}, s.params);
    ck.add("optimizer.momentum", {s.momentum.size()}, s.momentum);
}

inline OptimizerState get_optimizer(const Checkpoint& ck) {
    const auto& m = ck.meta.at("optimizer");
    OptimizerState s;
    s.iteration = m.at("iteration").get<std::uint64_t>();
    s.beta = m.at("beta").get<double>();
    s.rng_seed = m.at("rng_seed").get<std::uint64_t>();
    s.schedule = {m.at("a1").get<double>(), m.at("alpha").get<double>(), m.at("c1").get<double>(),
                  m.at("gamma").get<double>(), m.at("stability_offset").get<double>()};
    s.params = ck.section("optimizer.params").data;
    s.momentum = ck.section("optimizer.momentum").data;
    s.validate();
    return s;
}

}  // namespace bvip
