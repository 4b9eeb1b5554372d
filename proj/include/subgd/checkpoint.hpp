#pragma once

// Parameter checkpoints.
//
// Binary file: 12-byte magic "SUBGD-CKPT\0\0", u32 LE format version,
// u64 LE parameter count, then the parameters as raw LE f64.
// A JSON sidecar (<path>.json) carries
//   {architecture: [ints], activation: string, seed: int, stage: string, created_by: string}.

#include <cstdint>
#include <string>

#include "subgd/binary_io.hpp"
#include "subgd/nn.hpp"

namespace subgd {

inline constexpr char kCheckpointMagic[13] = "SUBGD-CKPT\0\0";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMetadata {
    std::vector<std::size_t> architecture;
    std::string activation = "relu";
    std::uint64_t seed = 0;
    std::string stage;
    std::string created_by = "subgd";

    MlpConfig config() const { return {architecture, parse_activation(activation)}; }

    friend bool operator==(const CheckpointMetadata&, const CheckpointMetadata&) = default;
};

inline json to_json(const CheckpointMetadata& m) {
    return {{"architecture", m.architecture},
            {"activation", m.activation},
            {"seed", m.seed},
            {"stage", m.stage},
            {"created_by", m.created_by}};
}

inline CheckpointMetadata checkpoint_metadata_from_json(const json& j) {
    try {
        CheckpointMetadata m;
        m.architecture = j.at("architecture").get<std::vector<std::size_t>>();
        m.activation = j.at("activation").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.stage = j.at("stage").get<std::string>();
        m.created_by = j.at("created_by").get<std::string>();
        return m;
    } catch (const json::exception& e) {
        throw CorruptFileError(std::string("checkpoint sidecar: ") + e.what());
    }
}

inline fs::path checkpoint_sidecar_path(const fs::path& path) {
    fs::path p = path;
    p += ".json";
    return p;
}

inline void checkpoint_save(const fs::path& path, std::span<const double> params, const CheckpointMetadata& meta) {
    if (!meta.architecture.empty() && meta.config().param_count() != params.size())
        throw DimensionError("checkpoint_save: parameter count does not match architecture");
    std::string bytes(kCheckpointMagic, 12);
    append_u32_le(bytes, kCheckpointVersion);
    append_u64_le(bytes, params.size());
    append_f64_le(bytes, params);
    write_file_atomic(path, bytes);
    write_json_atomic(checkpoint_sidecar_path(path), to_json(meta));
}

struct Checkpoint {
    ParamVector params;
    CheckpointMetadata metadata;
};

inline Checkpoint checkpoint_load(const fs::path& path) {
    ByteReader reader(read_file(path), "checkpoint '" + path.string() + "'");
    if (reader.take(12) != std::string(kCheckpointMagic, 12)) reader.fail("bad magic");
    const auto version = reader.u32();
    if (version != kCheckpointVersion) reader.fail("unsupported version " + std::to_string(version));
    const auto count = reader.u64();
    Checkpoint ck;
    ck.params = reader.f64(static_cast<std::size_t>(count));
    if (reader.remaining() != 0) reader.fail("trailing bytes after parameter block");
    ck.metadata = checkpoint_metadata_from_json(read_json(checkpoint_sidecar_path(path)));
    if (!ck.metadata.architecture.empty() && ck.metadata.config().param_count() != ck.params.size())
        reader.fail("parameter count does not match sidecar architecture");
    return ck;
}

} // namespace subgd
