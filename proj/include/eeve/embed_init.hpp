#pragma once

// Grows a trained model's embedding matrices for newly added tokens.
//
// New input row  = mean of the input rows of the token's base subwords.
// New output row = copy of the output row of its first base subword.
//
// The output-row copy makes a new token and its first subword produce
// identical logits for every hidden state until output rows are trained.

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "eeve/error.hpp"
#include "eeve/model.hpp"
#include "eeve/tokenizer.hpp"

namespace eeve {

struct SubwordDecomposition {
    TokenId new_token = 0;
    std::vector<TokenId> parts;

    friend bool operator==(const SubwordDecomposition&, const SubwordDecomposition&) = default;
};

/// Base-tokenizer segmentation of a new token's bytes.
inline SubwordDecomposition decompose(const TokenizerModel& tok_base, std::string_view new_token_bytes,
                                      TokenId new_token = 0) {
    require(!new_token_bytes.empty(), "decompose: empty byte-string");
    return {new_token, tok_base.encode_base(new_token_bytes)};
}

/// Decompositions of every added token of an expanded tokenizer, in id order.
inline std::vector<SubwordDecomposition> decompositions(const TokenizerModel& expanded) {
    std::vector<SubwordDecomposition> out;
    for (std::size_t i = 0; i < expanded.added_tokens().size(); ++i)
        out.push_back(decompose(expanded, expanded.added_tokens()[i], expanded.base_size() + static_cast<TokenId>(i)));
    return out;
}

inline nlohmann::json decompositions_to_json(std::span<const SubwordDecomposition> decomps) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& d : decomps) j[std::to_string(d.new_token)] = d.parts;
    return j;
}

inline std::vector<SubwordDecomposition> decompositions_from_json(const nlohmann::json& j) {
    std::vector<SubwordDecomposition> out;
    for (const auto& [key, parts] : j.items())
        out.push_back({static_cast<TokenId>(std::stoul(key)), parts.get<std::vector<TokenId>>()});
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.new_token < b.new_token; });
    return out;
}

enum class InitScheme {
    Subword,
    /// Comparison baseline: new rows drawn from N(0, random_std^2).
    Random,
};

/// Copies `params` into a model with `decomps.size()` extra vocabulary rows.
/// Rows below base_size and all internal tensors are copied bit for bit.
template <class T>
ModelParams<T> expand_params(const ModelParams<T>& params, std::size_t base_size,
                             std::span<const SubwordDecomposition> decomps, InitScheme scheme = InitScheme::Subword,
                             std::uint64_t seed = 0, double random_std = 0.02) {
    require(params.config.vocab_size == base_size, "expand_params: model vocab_size must equal base_size");
    std::vector<const SubwordDecomposition*> by_id(decomps.size(), nullptr);
    for (const auto& d : decomps) {
        require(d.new_token >= base_size && d.new_token < base_size + decomps.size(),
                "expand_params: decomposition id " + std::to_string(d.new_token) + " outside the new range");
        require(!by_id[d.new_token - base_size], "expand_params: duplicate decomposition");
        require(!d.parts.empty(), "expand_params: decomposition with empty parts");
        for (auto part : d.parts) require(part < base_size, "expand_params: part id is not a base token");
        by_id[d.new_token - base_size] = &d;
    }
    for (const auto* d : by_id) require(d != nullptr, "expand_params: decompositions leave a coverage gap");

    ModelConfig cfg = params.config;
    cfg.vocab_size = base_size + decomps.size();
    ModelParams<T> out(cfg, base_size);
    for (const auto& t : params.layout.tensors()) {
        const auto& dst = out.layout.find(t.name);
        std::copy_n(params.data.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(),
                    out.data.begin() + static_cast<std::ptrdiff_t>(dst.offset));
    }

    const auto D = params.d_model();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, random_std);
    for (const auto* d : by_id) {
        auto in_row = out.tok_row(d->new_token);
        auto out_row = out.out_row(d->new_token);
        if (scheme == InitScheme::Random) {
            for (auto& v : in_row) v = static_cast<T>(noise(rng));
            for (auto& v : out_row) v = static_cast<T>(noise(rng));
            continue;
        }
        std::vector<double> mean(D, 0.0);
        for (auto part : d->parts) {
            auto src = params.tok_row(part);
            for (std::size_t i = 0; i < D; ++i) mean[i] += static_cast<double>(src[i]);
        }
        for (std::size_t i = 0; i < D; ++i) in_row[i] = static_cast<T>(mean[i] / static_cast<double>(d->parts.size()));
        auto first = params.out_row(d->parts.front());
        std::copy(first.begin(), first.end(), out_row.begin());
    }
    return out;
}

} // namespace eeve
