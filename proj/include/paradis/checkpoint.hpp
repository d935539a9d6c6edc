#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "PDCK" | u32 format version | u64 manifest hash
//   manifest: u32 in_channels, in_height, in_width, num_classes | f64 wide_width
//             u32 block count, per block: u8 kind, u32 channels, u32 kernel, u32 stride
//   weights:  u32 count, per parameter: str name, tensor (u8 rank, u32 dims[], f32 data[])
//   switches: u32 count, str canonical switch string
//   stats:    u32 switch count, per switch: str id, u64 samples, u32 entry count,
//             per entry: u32 position, u32 layer, floats mean, floats var
//   metadata: u32 count, str key, str value (sorted by key)
//   optimizer: u8 present [u8 seeded, u32 count, tensor momentum buffers]
//
// str is u32 length + bytes; floats is u32 count + f32 values. Everything is
// written in a fixed order, so load followed by save reproduces the file.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "paradis/bytes.hpp"
#include "paradis/model.hpp"
#include "paradis/optimizer.hpp"

namespace paradis {

inline constexpr char kCheckpointMagic[4] = {'P', 'D', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct OptimizerState {
    std::vector<Tensor<T>> buffers;
    bool seeded = false;
};

template <typename T>
struct Checkpoint {
    ElasticModel<T> model;
    std::map<std::string, std::string> metadata;
    std::optional<OptimizerState<T>> optimizer;
};

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const ElasticModel<T>& model, const std::map<std::string, std::string>& metadata = {},
                                            const OptimizerState<T>* optimizer = nullptr) {
    ByteWriter w;
    const auto& m = model.manifest();
    w.raw(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    w.u64(m.hash());

    w.u32(std::uint32_t(m.in_channels));
    w.u32(std::uint32_t(m.in_height));
    w.u32(std::uint32_t(m.in_width));
    w.u32(std::uint32_t(m.num_classes));
    w.f64(m.wide_width);
    w.u32(std::uint32_t(m.blocks.size()));
    for (const auto& b : m.blocks) {
        w.u8(static_cast<std::uint8_t>(b.kind));
        w.u32(std::uint32_t(b.channels));
        w.u32(std::uint32_t(b.kernel));
        w.u32(std::uint32_t(b.stride));
    }

    w.u32(std::uint32_t(model.params().size()));
    for (const auto& p : model.params()) {
        w.str(p.name);
        w.tensor(p.value);
    }

    w.u32(std::uint32_t(model.switches().size()));
    for (const auto& s : model.switches()) w.str(s.str());

    const auto& stats = model.stats();
    const auto ids = stats.switches();
    w.u32(std::uint32_t(ids.size()));
    for (const auto& id : ids) {
        std::vector<std::pair<StatsKey, const StatsEntry<T>*>> rows;
        for (const auto& [k, e] : stats.entries())
            if (k.switch_id == id) rows.emplace_back(k, &e);
        w.str(id);
        w.u64(stats.sample_count(id));
        w.u32(std::uint32_t(rows.size()));
        for (const auto& [k, e] : rows) {
            w.u32(std::uint32_t(k.position));
            w.u32(std::uint32_t(k.layer));
            w.floats(e->mean);
            w.floats(e->var);
        }
    }

    w.u32(std::uint32_t(metadata.size()));
    for (const auto& [k, v] : metadata) {
        w.str(k);
        w.str(v);
    }

    w.u8(optimizer ? 1 : 0);
    if (optimizer) {
        w.u8(optimizer->seeded ? 1 : 0);
        w.u32(std::uint32_t(optimizer->buffers.size()));
        for (const auto& b : optimizer->buffers) w.tensor(b);
    }
    return w.take();
}

template <typename T>
Checkpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin = "checkpoint") {
    ByteReader r(bytes, origin);
    if (r.raw(4) != std::string(kCheckpointMagic, 4)) throw FormatError(origin + ": not a checkpoint (bad magic)");
    const auto version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    const auto hash = r.u64();

    ModelManifest m;
    m.in_channels = r.u32();
    m.in_height = r.u32();
    m.in_width = r.u32();
    m.num_classes = r.u32();
    m.wide_width = r.f64();
    m.blocks.resize(r.u32());
    for (auto& b : m.blocks) {
        b.kind = static_cast<BlockKind>(r.u8());
        b.channels = r.u32();
        b.kernel = r.u32();
        b.stride = r.u32();
    }
    if (m.hash() != hash) throw FormatError(origin + ": manifest hash mismatch");

    Checkpoint<T> ck{ElasticModel<T>(m), {}, std::nullopt};
    auto& params = ck.model.params();
    const std::size_t n_params = r.u32();
    if (n_params != params.size())
        throw FormatError(origin + ": " + std::to_string(n_params) + " weight blobs, manifest expects " + std::to_string(params.size()));
    for (auto& p : params) {
        const std::string name = r.str();
        Tensor<T> t = r.template tensor<T>();
        if (name != p.name || t.shape() != p.value.shape())
            throw FormatError(origin + ": weight blob " + name + " " + to_string(t.shape()) + " does not match manifest entry " +
                              p.name + " " + to_string(p.value.shape()));
        p.value = std::move(t);
    }

    std::vector<SwitchSpec> switches(r.u32());
    for (auto& s : switches) s = SwitchSpec::parse(r.str());
    ck.model.set_switches(std::move(switches));

    SwitchableStats<T> stats;
    const std::size_t n_sw = r.u32();
    for (std::size_t i = 0; i < n_sw; ++i) {
        const std::string id = r.str();
        stats.set_sample_count(id, r.u64());
        const std::size_t n = r.u32();
        for (std::size_t j = 0; j < n; ++j) {
            StatsKey k{id, r.u32(), r.u32()};
            StatsEntry<T> e;
            e.mean = r.template floats<T>();
            e.var = r.template floats<T>();
            stats.set(k, std::move(e));
        }
    }
    ck.model.attach_stats(std::move(stats));

    const std::size_t n_meta = r.u32();
    for (std::size_t i = 0; i < n_meta; ++i) {
        std::string k = r.str();
        ck.metadata[k] = r.str();
    }

    if (r.u8()) {
        OptimizerState<T> o;
        o.seeded = r.u8() != 0;
        o.buffers.resize(r.u32());
        for (auto& b : o.buffers) b = r.template tensor<T>();
        ck.optimizer = std::move(o);
    }
    if (!r.done()) throw FormatError(origin + ": " + std::to_string(r.remaining()) + " trailing bytes");
    return ck;
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw Error("short write to " + path.string());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ElasticModel<T>& model,
                     const std::map<std::string, std::string>& metadata = {}, const OptimizerState<T>* optimizer = nullptr) {
    write_file(path, encode_checkpoint(model, metadata, optimizer));
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ck) {
    save_checkpoint(path, ck.model, ck.metadata, ck.optimizer ? &*ck.optimizer : nullptr);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint<T>(read_file(path), path.string());
}

}  // namespace paradis
