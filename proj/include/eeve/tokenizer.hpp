#pragma once

// Byte-fallback BPE with an appended added-token list.
//
// Ids 0..255 are the single bytes. Ids [256, base_size) are learned merges,
// in merge order. Ids >= base_size are added tokens, matched after the base
// merges by one left-to-right longest-match pass over base-token runs.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "eeve/error.hpp"
#include "eeve/hash.hpp"
#include "eeve/io.hpp"

namespace eeve {

using TokenId = std::uint32_t;
using Bytes = std::string;
using MergePair = std::pair<TokenId, TokenId>;

inline constexpr TokenId kByteTokens = 256;
inline constexpr int kTokenizerFormatVersion = 1;

struct TokenStats {
    std::size_t total_tokens = 0;
    double avg_tokens_per_doc = 0.0;
    std::size_t docs = 0;
    std::vector<std::size_t> per_doc;
};

namespace detail {

inline bool is_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

inline std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(a) << 32) | b;
}

} // namespace detail

/// Splits text into pieces. A piece starts at offset 0 and at every
/// whitespace byte that follows a non-whitespace byte, so word-initial
/// whitespace is attached to the word it precedes. Merges never cross pieces.
inline std::vector<std::string_view> pre_segment(std::string_view text) {
    std::vector<std::string_view> pieces;
    std::size_t start = 0;
    for (std::size_t i = 1; i < text.size(); ++i) {
        auto c = static_cast<unsigned char>(text[i]);
        auto prev = static_cast<unsigned char>(text[i - 1]);
        if (detail::is_space(c) && !detail::is_space(prev)) {
            pieces.push_back(text.substr(start, i - start));
            start = i;
        }
    }
    if (start < text.size()) pieces.push_back(text.substr(start));
    return pieces;
}

class TokenizerModel {
public:
    /// Byte-only model: 256 tokens, no merges.
    TokenizerModel() : TokenizerModel(std::vector<MergePair>{}, {}) {}

    TokenizerModel(std::vector<MergePair> merges, std::vector<Bytes> added_tokens)
        : merges_(std::move(merges)), added_(std::move(added_tokens)) {
        vocab_.reserve(kByteTokens + merges_.size() + added_.size());
        for (unsigned b = 0; b < kByteTokens; ++b) vocab_.emplace_back(1, static_cast<char>(b));
        for (std::size_t i = 0; i < merges_.size(); ++i) {
            auto [l, r] = merges_[i];
            auto id = static_cast<TokenId>(vocab_.size());
            require(l < id && r < id, "merge " + std::to_string(i) + " references a later token");
            merge_rank_.emplace(detail::pair_key(l, r), static_cast<TokenId>(i));
            vocab_.push_back(vocab_[l] + vocab_[r]);
        }
        base_size_ = static_cast<TokenId>(vocab_.size());
        for (const auto& tok : added_) vocab_.push_back(tok);

        for (TokenId id = 0; id < vocab_.size(); ++id) {
            require(!vocab_[id].empty(), "empty token");
            bool fresh = index_.emplace(vocab_[id], id).second;
            require(fresh, "duplicate token in vocabulary");
        }
        for (std::size_t i = 0; i < added_.size(); ++i) {
            require(encode_base(added_[i]).size() >= 2,
                    "added token already encodes as a single base token");
            insert_added(added_[i], base_size_ + static_cast<TokenId>(i));
        }
    }

    std::size_t vocab_size() const noexcept { return vocab_.size(); }
    TokenId base_size() const noexcept { return base_size_; }
    const std::vector<Bytes>& vocab() const noexcept { return vocab_; }
    const std::vector<MergePair>& merges() const noexcept { return merges_; }
    const std::vector<Bytes>& added_tokens() const noexcept { return added_; }
    const Bytes& token_bytes(TokenId id) const {
        require(id < vocab_.size(), "token id " + std::to_string(id) + " out of range");
        return vocab_[id];
    }

    bool contains(std::string_view bytes) const { return index_.count(Bytes(bytes)) > 0; }
    std::optional<TokenId> find(std::string_view bytes) const {
        auto it = index_.find(Bytes(bytes));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    /// Base merges only; added tokens are never emitted.
    std::vector<TokenId> encode_base(std::string_view text) const {
        std::vector<TokenId> out;
        std::vector<TokenId> sym;
        for (auto piece : pre_segment(text)) {
            encode_piece(piece, sym);
            out.insert(out.end(), sym.begin(), sym.end());
        }
        return out;
    }

    std::vector<TokenId> encode(std::string_view text) const {
        auto base = encode_base(text);
        if (added_.empty()) return base;
        return apply_added(base);
    }

    Bytes decode(std::span<const TokenId> ids) const {
        Bytes out;
        for (auto id : ids) out += token_bytes(id);
        return out;
    }

    /// Stable content hash of the serialized model.
    std::string hash() const { return sha256_hex(to_json().dump()); }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format_version"] = kTokenizerFormatVersion;
        j["base_size"] = base_size_;
        auto& v = j["vocab"] = nlohmann::json::array();
        for (TokenId i = 0; i < base_size_; ++i) v.push_back(base64_encode(vocab_[i]));
        auto& m = j["merges"] = nlohmann::json::array();
        for (auto [l, r] : merges_) m.push_back({l, r});
        auto& a = j["added_tokens"] = nlohmann::json::array();
        for (const auto& t : added_) a.push_back(base64_encode(t));
        return j;
    }

    static TokenizerModel from_json(const nlohmann::json& j) {
        try {
            require(j.at("format_version").get<int>() == kTokenizerFormatVersion,
                    "unsupported tokenizer format_version");
            std::vector<MergePair> merges;
            for (const auto& m : j.at("merges")) merges.emplace_back(m.at(0).get<TokenId>(), m.at(1).get<TokenId>());
            std::vector<Bytes> added;
            for (const auto& a : j.at("added_tokens")) added.push_back(base64_decode(a.get<std::string>()));
            TokenizerModel model(std::move(merges), std::move(added));
            require(j.at("base_size").get<TokenId>() == model.base_size(), "base_size disagrees with merges");
            const auto& vocab = j.at("vocab");
            require(vocab.size() == model.base_size(), "vocab length disagrees with base_size");
            for (TokenId i = 0; i < model.base_size(); ++i)
                require(base64_decode(vocab[i].get<std::string>()) == model.vocab_[i],
                        "vocab entry " + std::to_string(i) + " disagrees with merges");
            return model;
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("malformed tokenizer json: ") + e.what());
        }
    }

    void save(const std::filesystem::path& path) const {
        write_file_atomic(path, to_json().dump(1) + "\n");
    }

    static TokenizerModel load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ValidationError("cannot open tokenizer file " + path.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("malformed tokenizer json: " + std::string(e.what()));
        }
        return from_json(j);
    }

    friend bool operator==(const TokenizerModel& a, const TokenizerModel& b) {
        return a.merges_ == b.merges_ && a.added_ == b.added_;
    }

private:
    void encode_piece(std::string_view piece, std::vector<TokenId>& sym) const {
        sym.clear();
        for (char c : piece) sym.push_back(static_cast<unsigned char>(c));
        if (merges_.empty()) return;
        while (sym.size() >= 2) {
            TokenId best_rank = std::numeric_limits<TokenId>::max();
            for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
                auto it = merge_rank_.find(detail::pair_key(sym[i], sym[i + 1]));
                if (it != merge_rank_.end()) best_rank = std::min(best_rank, it->second);
            }
            if (best_rank == std::numeric_limits<TokenId>::max()) break;
            auto [l, r] = merges_[best_rank];
            TokenId merged = kByteTokens + best_rank;
            std::size_t w = 0;
            for (std::size_t i = 0; i < sym.size(); ++i) {
                if (i + 1 < sym.size() && sym[i] == l && sym[i + 1] == r) {
                    sym[w++] = merged;
                    ++i;
                } else {
                    sym[w++] = sym[i];
                }
            }
            sym.resize(w);
        }
    }

    void insert_added(const Bytes& tok, TokenId id) {
        if (terminal_.empty()) terminal_.push_back(-1);
        std::int64_t node = 0;
        for (char c : tok) {
            auto key = (static_cast<std::uint64_t>(node) << 8) | static_cast<unsigned char>(c);
            auto it = edges_.find(key);
            if (it == edges_.end()) {
                it = edges_.emplace(key, static_cast<std::int64_t>(terminal_.size())).first;
                terminal_.push_back(-1);
            }
            node = it->second;
        }
        terminal_[static_cast<std::size_t>(node)] = id;
    }

    // Walks `bytes` from trie node `node`; returns -1 when the path leaves the trie.
    std::int64_t walk(std::int64_t node, std::string_view bytes) const {
        for (char c : bytes) {
            auto key = (static_cast<std::uint64_t>(node) << 8) | static_cast<unsigned char>(c);
            auto it = edges_.find(key);
            if (it == edges_.end()) return -1;
            node = it->second;
        }
        return node;
    }

    std::vector<TokenId> apply_added(const std::vector<TokenId>& base) const {
        std::vector<TokenId> out;
        out.reserve(base.size());
        std::size_t i = 0;
        while (i < base.size()) {
            std::size_t best_len = 0;
            TokenId best_id = 0;
            std::int64_t node = 0;
            for (std::size_t j = i; j < base.size(); ++j) {
                node = walk(node, vocab_[base[j]]);
                if (node < 0) break;
                if (auto t = terminal_[static_cast<std::size_t>(node)]; t >= 0) {
                    best_len = j - i + 1;
                    best_id = static_cast<TokenId>(t);
                }
            }
            if (best_len > 0) {
                out.push_back(best_id);
                i += best_len;
            } else {
                out.push_back(base[i++]);
            }
        }
        return out;
    }

    std::vector<Bytes> vocab_;
    std::vector<MergePair> merges_;
    std::vector<Bytes> added_;
    TokenId base_size_ = kByteTokens;
    std::unordered_map<std::uint64_t, TokenId> merge_rank_;
    std::unordered_map<Bytes, TokenId> index_;
    std::unordered_map<std::uint64_t, std::int64_t> edges_;
    std::vector<std::int64_t> terminal_;
};

/// Greedy highest-frequency BPE over UTF-8 bytes. Ties go to the smallest
/// (left, right) id pair. Pairs whose concatenation already exists in the
/// vocabulary are skipped. Training stops early when no pair occurs twice,
/// so the result can hold fewer than `vocab_size` tokens.
inline TokenizerModel train_base(std::span<const std::string> corpus, std::size_t vocab_size) {
    require(!corpus.empty(), "train_base: empty corpus");
    require(vocab_size >= kByteTokens + 1, "train_base: vocab_size must be >= 257");

    std::map<std::string_view, std::size_t> piece_counts;
    for (const auto& doc : corpus)
        for (auto piece : pre_segment(doc)) ++piece_counts[piece];

    struct Word {
        std::vector<TokenId> sym;
        std::size_t count;
    };
    std::vector<Word> words;
    words.reserve(piece_counts.size());
    for (auto [piece, count] : piece_counts) {
        Word w{{}, count};
        for (char c : piece) w.sym.push_back(static_cast<unsigned char>(c));
        words.push_back(std::move(w));
    }

    std::vector<Bytes> vocab;
    std::unordered_set<Bytes> known;
    for (unsigned b = 0; b < kByteTokens; ++b) {
        vocab.emplace_back(1, static_cast<char>(b));
        known.insert(vocab.back());
    }
    std::vector<MergePair> merges;

    while (vocab.size() < vocab_size) {
        std::unordered_map<std::uint64_t, std::size_t> pair_counts;
        for (const auto& w : words)
            for (std::size_t i = 0; i + 1 < w.sym.size(); ++i)
                pair_counts[detail::pair_key(w.sym[i], w.sym[i + 1])] += w.count;

        std::uint64_t best = 0;
        std::size_t best_count = 0;
        for (auto [key, count] : pair_counts) {
            if (count < best_count || (count == best_count && key > best)) continue;
            auto l = static_cast<TokenId>(key >> 32);
            auto r = static_cast<TokenId>(key & 0xffffffffu);
            if (known.count(vocab[l] + vocab[r])) continue;
            best = key;
            best_count = count;
        }
        if (best_count < 2) break;

        auto l = static_cast<TokenId>(best >> 32);
        auto r = static_cast<TokenId>(best & 0xffffffffu);
        auto merged = static_cast<TokenId>(vocab.size());
        merges.emplace_back(l, r);
        vocab.push_back(vocab[l] + vocab[r]);
        known.insert(vocab.back());

        for (auto& w : words) {
            std::size_t out = 0;
            for (std::size_t i = 0; i < w.sym.size(); ++i) {
                if (i + 1 < w.sym.size() && w.sym[i] == l && w.sym[i + 1] == r) {
                    w.sym[out++] = merged;
                    ++i;
                } else {
                    w.sym[out++] = w.sym[i];
                }
            }
            w.sym.resize(out);
        }
    }
    return TokenizerModel(std::move(merges), {});
}

struct ExpandOptions {
    /// Merges learned by the scratch candidate tokenizer; 0 means 4 * max_new.
    std::size_t candidate_budget = 0;
    /// Curation hook. Allowlisted byte-strings are added first, in order,
    /// regardless of frequency. Blocklisted ones are never added.
    std::vector<Bytes> allowlist;
    std::vector<Bytes> blocklist;
};

struct ExpansionCandidate {
    Bytes bytes;
    std::size_t count = 0;
};

/// Candidate tokens for expansion in priority order, before truncation:
/// scratch-BPE tokens absent from `model`, decomposing into >= 2 base tokens,
/// with whole-token count >= min_freq under the scratch segmentation.
inline std::vector<ExpansionCandidate> expansion_candidates(const TokenizerModel& model,
                                                            std::span<const std::string> target_corpus,
                                                            std::size_t min_freq, std::size_t budget) {
    auto scratch = train_base(target_corpus, kByteTokens + std::max<std::size_t>(budget, 1));
    std::vector<std::size_t> counts(scratch.vocab_size(), 0);
    for (const auto& doc : target_corpus)
        for (auto id : scratch.encode_base(doc)) ++counts[id];

    std::vector<ExpansionCandidate> out;
    for (TokenId id = kByteTokens; id < scratch.vocab_size(); ++id) {
        const auto& bytes = scratch.vocab()[id];
        if (counts[id] < min_freq || model.contains(bytes)) continue;
        if (model.encode_base(bytes).size() < 2) continue;
        out.push_back({bytes, counts[id]});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.count != b.count) return a.count > b.count;
        if (a.bytes.size() != b.bytes.size()) return a.bytes.size() > b.bytes.size();
        return a.bytes < b.bytes;
    });
    return out;
}

/// Appends up to `max_new` frequent target-corpus tokens to `model`. Base
/// merges and ids below base_size are untouched.
inline TokenizerModel expand(const TokenizerModel& model, std::span<const std::string> target_corpus,
                             std::size_t min_freq, std::size_t max_new, const ExpandOptions& opts = {}) {
    require(min_freq >= 1, "expand: min_freq must be >= 1");
    if (max_new == 0) return model;
    require(!target_corpus.empty(), "expand: empty target corpus");

    std::size_t budget = opts.candidate_budget ? opts.candidate_budget : 4 * max_new;
    std::set<Bytes> blocked(opts.blocklist.begin(), opts.blocklist.end());
    std::set<Bytes> chosen;
    std::vector<Bytes> added = model.added_tokens();
    std::size_t fresh = 0;

    auto take = [&](const Bytes& bytes) {
        if (fresh >= max_new || bytes.empty() || blocked.count(bytes) || chosen.count(bytes)) return;
        if (model.contains(bytes) || model.encode_base(bytes).size() < 2) return;
        chosen.insert(bytes);
        added.push_back(bytes);
        ++fresh;
    };
    for (const auto& bytes : opts.allowlist) take(bytes);
    for (const auto& cand : expansion_candidates(model, target_corpus, min_freq, budget)) take(cand.bytes);

    return TokenizerModel(model.merges(), std::move(added));
}

inline TokenStats stats(const TokenizerModel& model, std::span<const std::string> corpus) {
    require(!corpus.empty(), "stats: empty corpus");
    TokenStats s;
    s.docs = corpus.size();
    s.per_doc.reserve(corpus.size());
    for (const auto& doc : corpus) {
        auto n = model.encode(doc).size();
        s.per_doc.push_back(n);
        s.total_tokens += n;
    }
    s.avg_tokens_per_doc = static_cast<double>(s.total_tokens) / static_cast<double>(s.docs);
    return s;
}

/// Reads a curation file: one base64 token per line; blank lines and lines
/// starting with '#' are ignored.
inline std::vector<Bytes> read_token_list(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open curation file " + path.string());
    std::vector<Bytes> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        out.push_back(base64_decode(line));
    }
    return out;
}

} // namespace eeve
