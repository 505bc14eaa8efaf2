#pragma once

// Checkpoint directory: checkpoint.json (manifest) + params.f64 (little-endian
// doubles in layout order). Parameters are always stored as f64 so that a
// checkpoint hash does not depend on the training precision.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "eeve/embed_init.hpp"
#include "eeve/error.hpp"
#include "eeve/hash.hpp"
#include "eeve/io.hpp"
#include "eeve/model.hpp"

namespace eeve {

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr const char* kCheckpointManifest = "checkpoint.json";
inline constexpr const char* kCheckpointBlob = "params.f64";

struct CheckpointInfo {
    std::string tokenizer_hash;
    int stage_id = 0;
    int step_count = 0;
    std::vector<SubwordDecomposition> decompositions;
};

template <class T>
struct Checkpoint {
    ModelParams<T> params;
    CheckpointInfo info;
};

template <class T>
std::string encode_params_f64(const ModelParams<T>& p) {
    std::string blob(p.data.size() * 8, '\0');
    for (std::size_t i = 0; i < p.data.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(static_cast<double>(p.data[i]));
        for (int b = 0; b < 8; ++b) blob[i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
    return blob;
}

inline std::vector<double> decode_params_f64(std::string_view blob) {
    require(blob.size() % 8 == 0, "checkpoint blob size is not a multiple of 8");
    std::vector<double> out(blob.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[i * 8 + b])) << (8 * b);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

/// Returns the manifest; its "blob_sha256" identifies the parameters.
template <class T>
nlohmann::json save_checkpoint(const std::filesystem::path& dir, const ModelParams<T>& p, const CheckpointInfo& info) {
    auto blob = encode_params_f64(p);
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& r : p.groups()) groups.push_back({{"group", to_string(r.group)}, {"begin", r.begin}, {"end", r.end}});
    nlohmann::json m = {
        {"format_version", kCheckpointFormatVersion},
        {"config", p.config.to_json()},
        {"base_size", p.base_size},
        {"layout", p.layout.to_json()},
        {"groups", groups},
        {"tokenizer_hash", info.tokenizer_hash},
        {"stage_id", info.stage_id},
        {"step_count", info.step_count},
        {"dtype", "f64"},
        {"blob", kCheckpointBlob},
        {"blob_sha256", sha256_hex(blob)},
        {"decompositions", decompositions_to_json(info.decompositions)},
    };
    write_file_atomic(dir / kCheckpointBlob, blob);
    write_file_atomic(dir / kCheckpointManifest, m.dump(2) + "\n");
    return m;
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
    auto path = dir / kCheckpointManifest;
    require(std::filesystem::exists(path), "no checkpoint at " + dir.string());
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("corrupt checkpoint manifest " + path.string() + ": " + e.what());
    }
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
    auto m = read_checkpoint_manifest(dir);
    try {
        require(m.at("format_version").get<int>() == kCheckpointFormatVersion, "unsupported checkpoint format");
        require(m.at("dtype").get<std::string>() == "f64", "unsupported checkpoint dtype");
        auto cfg = ModelConfig::from_json(m.at("config"));
        ModelParams<T> p(cfg, m.at("base_size").get<std::size_t>());
        require(p.layout.to_json() == m.at("layout"), "checkpoint layout does not match its config");

        auto blob = read_file(dir / m.at("blob").get<std::string>());
        require(sha256_hex(blob) == m.at("blob_sha256").get<std::string>(), "checkpoint blob hash mismatch");
        auto values = decode_params_f64(blob);
        require(values.size() == p.data.size(), "checkpoint blob has the wrong parameter count");
        for (std::size_t i = 0; i < values.size(); ++i) p.data[i] = static_cast<T>(values[i]);

        CheckpointInfo info;
        info.tokenizer_hash = m.at("tokenizer_hash").get<std::string>();
        info.stage_id = m.at("stage_id").get<int>();
        info.step_count = m.at("step_count").get<int>();
        info.decompositions = decompositions_from_json(m.at("decompositions"));
        return {std::move(p), std::move(info)};
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("corrupt checkpoint manifest in " + dir.string() + ": " + e.what());
    }
}

} // namespace eeve
