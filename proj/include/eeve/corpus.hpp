#pragma once

// Documents, JSONL ingestion, the corpus quality filters and a synthetic
// bilingual corpus generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "eeve/error.hpp"
#include "eeve/io.hpp"
#include "eeve/tokenizer.hpp"

namespace eeve {

enum class Lang { Base, Target, Unknown };

inline std::string to_string(Lang lang) {
    switch (lang) {
    case Lang::Base: return "base";
    case Lang::Target: return "target";
    case Lang::Unknown: return "unknown";
    }
    return "unknown";
}

inline Lang parse_lang(std::string_view s) {
    if (s == "base") return Lang::Base;
    if (s == "target") return Lang::Target;
    if (s == "unknown") return Lang::Unknown;
    throw ValidationError("unknown lang tag '" + std::string(s) + "'");
}

struct Document {
    std::string id;
    std::string text;
    Lang lang = Lang::Unknown;
    nlohmann::json meta = nlohmann::json::object();

    friend bool operator==(const Document& a, const Document& b) {
        return a.id == b.id && a.text == b.text && a.lang == b.lang && a.meta == b.meta;
    }
};

inline nlohmann::json to_json(const Document& d) {
    return {{"id", d.id}, {"text", d.text}, {"lang", to_string(d.lang)}, {"meta", d.meta}};
}

inline Document document_from_json(const nlohmann::json& j) {
    Document d;
    d.id = j.at("id").get<std::string>();
    d.text = j.at("text").get<std::string>();
    d.lang = j.contains("lang") ? parse_lang(j.at("lang").get<std::string>()) : Lang::Unknown;
    if (j.contains("meta")) d.meta = j.at("meta");
    return d;
}

inline std::vector<Document> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open corpus " + path.string());
    std::vector<Document> docs;
    std::unordered_set<std::string> ids;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            docs.push_back(document_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        require(ids.insert(docs.back().id).second, "duplicate document id '" + docs.back().id + "'");
    }
    return docs;
}

inline std::string to_jsonl(std::span<const Document> docs) {
    std::string out;
    for (const auto& d : docs) {
        out += to_json(d).dump();
        out += '\n';
    }
    return out;
}

inline void write_jsonl(const std::filesystem::path& path, std::span<const Document> docs) {
    write_file_atomic(path, to_jsonl(docs));
}

inline std::vector<std::string> texts_of(std::span<const Document> docs) {
    std::vector<std::string> out;
    out.reserve(docs.size());
    for (const auto& d : docs) out.push_back(d.text);
    return out;
}

inline std::vector<Document> select_lang(std::span<const Document> docs, Lang lang) {
    std::vector<Document> out;
    for (const auto& d : docs)
        if (d.lang == lang) out.push_back(d);
    return out;
}

// ---------------------------------------------------------------------------
// UTF-8 helpers

inline std::string utf8_encode(char32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
    return out;
}

/// Splits UTF-8 text into characters. Malformed bytes become one-byte units.
inline std::vector<std::string_view> utf8_chars(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < text.size()) {
        auto c = static_cast<unsigned char>(text[i]);
        std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
        if (i + len > text.size()) len = 1;
        for (std::size_t k = 1; k < len; ++k)
            if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) len = 1;
        out.push_back(text.substr(i, len));
        i += len;
    }
    return out;
}

inline std::vector<std::string_view> split_words(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && detail::is_space(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t start = i;
        while (i < text.size() && !detail::is_space(static_cast<unsigned char>(text[i]))) ++i;
        if (i > start) out.push_back(text.substr(start, i - start));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Filters

struct FilterReport {
    std::size_t input = 0;
    std::size_t kept = 0;
    std::map<std::string, std::size_t> dropped;
    nlohmann::json thresholds = nlohmann::json::object();

    std::size_t total_dropped() const {
        std::size_t n = 0;
        for (const auto& [_, c] : dropped) n += c;
        return n;
    }

    /// Folds a later filter's report into this one. The later filter ran on
    /// this filter's kept documents.
    void chain(const FilterReport& next) {
        kept = next.kept;
        for (const auto& [name, c] : next.dropped) dropped[name] += c;
        for (const auto& [k, v] : next.thresholds.items()) thresholds[k] = v;
    }

    nlohmann::json to_json() const {
        return {{"input", input}, {"kept", kept}, {"dropped", dropped}, {"thresholds", thresholds}};
    }
};

struct FilterResult {
    std::vector<Document> kept;
    FilterReport report;
};

namespace detail {
inline FilterResult run_filter(std::span<const Document> docs, const std::string& name,
                               nlohmann::json thresholds,
                               const std::function<bool(const Document&)>& keep) {
    FilterResult r;
    r.report.input = docs.size();
    r.report.thresholds = std::move(thresholds);
    r.report.dropped[name] = 0;
    for (const auto& d : docs) {
        if (keep(d))
            r.kept.push_back(d);
        else
            ++r.report.dropped[name];
    }
    r.report.kept = r.kept.size();
    return r;
}
} // namespace detail

/// Character n-gram language model over bytes with add-alpha smoothing.
/// The context of position i is the preceding min(i, order - 1) bytes.
class CharNgramModel {
public:
    explicit CharNgramModel(int order = 5, double alpha = 0.1) : order_(order), alpha_(alpha) {
        require(order >= 1, "ngram order must be >= 1");
        require(alpha > 0.0, "ngram alpha must be > 0");
    }

    void train(std::span<const std::string> texts) {
        for (const auto& t : texts) {
            for (std::size_t i = 0; i < t.size(); ++i) {
                auto ctx = context(t, i);
                ++ctx_counts_[ctx];
                ++joint_counts_[ctx + t[i]];
            }
        }
        trained_ = !ctx_counts_.empty();
    }

    bool trained() const noexcept { return trained_; }
    int order() const noexcept { return order_; }
    double alpha() const noexcept { return alpha_; }

    /// Per-byte perplexity; +inf for empty text.
    double perplexity(std::string_view text) const {
        require(trained_, "perplexity scorer is untrained");
        if (text.empty()) return std::numeric_limits<double>::infinity();
        double nll = 0.0;
        for (std::size_t i = 0; i < text.size(); ++i) {
            std::string ctx = context(text, i);
            auto c_it = ctx_counts_.find(ctx);
            double c_ctx = c_it == ctx_counts_.end() ? 0.0 : static_cast<double>(c_it->second);
            auto j_it = joint_counts_.find(ctx + text[i]);
            double c_joint = j_it == joint_counts_.end() ? 0.0 : static_cast<double>(j_it->second);
            nll -= std::log((c_joint + alpha_) / (c_ctx + alpha_ * 256.0));
        }
        return std::exp(nll / static_cast<double>(text.size()));
    }

private:
    std::string context(std::string_view t, std::size_t i) const {
        auto n = std::min<std::size_t>(i, static_cast<std::size_t>(order_ - 1));
        return std::string(t.substr(i - n, n));
    }

    int order_;
    double alpha_;
    bool trained_ = false;
    std::unordered_map<std::string, std::uint32_t> ctx_counts_;
    std::unordered_map<std::string, std::uint32_t> joint_counts_;
};

inline FilterResult filter_perplexity(std::span<const Document> docs, const CharNgramModel& scorer,
                                      double max_ppl) {
    require(scorer.trained(), "filter_perplexity: untrained scorer");
    require(max_ppl > 1.0, "filter_perplexity: max_ppl must be > 1");
    return detail::run_filter(docs, "perplexity",
                              {{"perplexity.max_ppl", max_ppl},
                               {"perplexity.order", scorer.order()},
                               {"perplexity.alpha", scorer.alpha()}},
                              [&](const Document& d) { return scorer.perplexity(d.text) <= max_ppl; });
}

/// 1 - distinct/total over character n-grams; 0 when the text has fewer
/// than n characters.
inline double duplicate_ngram_ratio(std::string_view text, std::size_t n) {
    require(n >= 1, "n-gram size must be >= 1");
    auto chars = utf8_chars(text);
    if (chars.size() < n) return 0.0;
    std::size_t total = chars.size() - n + 1;
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < total; ++i) {
        std::string gram;
        for (std::size_t k = 0; k < n; ++k) gram += chars[i + k];
        seen.insert(std::move(gram));
    }
    return 1.0 - static_cast<double>(seen.size()) / static_cast<double>(total);
}

/// Drops documents whose duplicate n-gram ratio exceeds max_dup_ratio. Docs
/// with fewer than n characters are kept unless empty.
inline FilterResult filter_repetition(std::span<const Document> docs, std::size_t n, double max_dup_ratio) {
    require(n >= 1, "filter_repetition: n must be >= 1");
    require(max_dup_ratio >= 0.0 && max_dup_ratio <= 1.0, "filter_repetition: max_dup_ratio must be in [0,1]");
    return detail::run_filter(docs, "repetition",
                              {{"repetition.n", n}, {"repetition.max_dup_ratio", max_dup_ratio}},
                              [&](const Document& d) {
                                  if (d.text.empty()) return false;
                                  return duplicate_ngram_ratio(d.text, n) <= max_dup_ratio;
                              });
}

/// Fraction of whitespace-separated words found in the stoplist; 0 for a
/// document without words.
inline double stopword_rate(std::string_view text, const std::set<std::string, std::less<>>& stoplist) {
    auto words = split_words(text);
    if (words.empty()) return 0.0;
    std::size_t hits = 0;
    for (auto w : words)
        if (stoplist.find(w) != stoplist.end()) ++hits;
    return static_cast<double>(hits) / static_cast<double>(words.size());
}

inline FilterResult filter_stopword(std::span<const Document> docs,
                                    const std::set<std::string, std::less<>>& stoplist, double min_rate,
                                    double max_rate) {
    require(!stoplist.empty(), "filter_stopword: empty stoplist");
    require(0.0 <= min_rate && min_rate <= max_rate && max_rate <= 1.0,
            "filter_stopword: need 0 <= min_rate <= max_rate <= 1");
    return detail::run_filter(docs, "stopword",
                              {{"stopword.min_rate", min_rate},
                               {"stopword.max_rate", max_rate},
                               {"stopword.stoplist_size", stoplist.size()}},
                              [&](const Document& d) {
                                  double r = stopword_rate(d.text, stoplist);
                                  return r >= min_rate && r <= max_rate;
                              });
}

/// Share of token ids >= base_size in the encoding; 0 for an empty encoding.
inline double new_token_ratio(const TokenizerModel& tok, std::string_view text) {
    auto ids = tok.encode(text);
    if (ids.empty()) return 0.0;
    auto fresh = std::count_if(ids.begin(), ids.end(), [&](TokenId id) { return id >= tok.base_size(); });
    return static_cast<double>(fresh) / static_cast<double>(ids.size());
}

inline FilterResult filter_new_token_coverage(std::span<const Document> docs, const TokenizerModel& tok,
                                              double min_new_ratio) {
    require(!tok.added_tokens().empty(), "filter_new_token_coverage: tokenizer has no added tokens");
    return detail::run_filter(docs, "new_token_coverage", {{"new_token_coverage.min_new_ratio", min_new_ratio}},
                              [&](const Document& d) { return new_token_ratio(tok, d.text) >= min_new_ratio; });
}

/// The `top_k` most frequent words of a corpus; ties by lexicographic order.
inline std::set<std::string, std::less<>> frequent_words(std::span<const Document> docs, std::size_t top_k) {
    std::map<std::string, std::size_t, std::less<>> counts;
    for (const auto& d : docs)
        for (auto w : split_words(d.text)) ++counts[std::string(w)];
    std::vector<std::pair<std::string, std::size_t>> v(counts.begin(), counts.end());
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::set<std::string, std::less<>> out;
    for (std::size_t i = 0; i < std::min(top_k, v.size()); ++i) out.insert(v[i].first);
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic bilingual corpus

/// Two disjoint-alphabet languages rendering the same latent word chain.
/// Base words are short ASCII strings; target words concatenate 2-5
/// morphemes drawn from a Zipfian inventory of multi-byte syllables, so a
/// base-trained tokenizer falls back to bytes on them.
struct SyntheticParams {
    std::size_t base_docs = 600;
    std::size_t target_docs = 600;
    /// Low-quality documents tagged "unknown": random characters, looping
    /// phrases, empty texts.
    std::size_t noise_docs = 0;

    std::size_t lexicon_size = 240;
    double word_zipf = 1.0;
    std::size_t successors = 3;
    double successor_prob = 0.75;
    std::size_t words_min = 20;
    std::size_t words_max = 40;

    std::string base_alphabet = "abcdefghijklmnopqrstuvwxyz";
    std::size_t base_word_min = 2;
    std::size_t base_word_max = 7;

    /// Target alphabet as UTF-8 characters. Empty means the default 40
    /// Hangul syllables.
    std::vector<std::string> target_alphabet;
    std::size_t morphemes = 50;
    double morpheme_zipf = 1.0;
    std::size_t morpheme_len_min = 1;
    std::size_t morpheme_len_max = 2;
    std::size_t morphemes_per_word_min = 2;
    std::size_t morphemes_per_word_max = 5;

    nlohmann::json to_json() const {
        return {{"base_docs", base_docs},
                {"target_docs", target_docs},
                {"noise_docs", noise_docs},
                {"lexicon_size", lexicon_size},
                {"word_zipf", word_zipf},
                {"successors", successors},
                {"successor_prob", successor_prob},
                {"words_min", words_min},
                {"words_max", words_max},
                {"base_alphabet", base_alphabet},
                {"base_word_min", base_word_min},
                {"base_word_max", base_word_max},
                {"target_alphabet", target_alphabet},
                {"morphemes", morphemes},
                {"morpheme_zipf", morpheme_zipf},
                {"morpheme_len_min", morpheme_len_min},
                {"morpheme_len_max", morpheme_len_max},
                {"morphemes_per_word_min", morphemes_per_word_min},
                {"morphemes_per_word_max", morphemes_per_word_max}};
    }

    static SyntheticParams from_json(const nlohmann::json& j) {
        SyntheticParams p;
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("base_docs", p.base_docs);
        get("target_docs", p.target_docs);
        get("noise_docs", p.noise_docs);
        get("lexicon_size", p.lexicon_size);
        get("word_zipf", p.word_zipf);
        get("successors", p.successors);
        get("successor_prob", p.successor_prob);
        get("words_min", p.words_min);
        get("words_max", p.words_max);
        get("base_alphabet", p.base_alphabet);
        get("base_word_min", p.base_word_min);
        get("base_word_max", p.base_word_max);
        get("target_alphabet", p.target_alphabet);
        get("morphemes", p.morphemes);
        get("morpheme_zipf", p.morpheme_zipf);
        get("morpheme_len_min", p.morpheme_len_min);
        get("morpheme_len_max", p.morpheme_len_max);
        get("morphemes_per_word_min", p.morphemes_per_word_min);
        get("morphemes_per_word_max", p.morphemes_per_word_max);
        return p;
    }
};

inline std::vector<std::string> default_target_alphabet() {
    std::vector<std::string> out;
    for (char32_t k = 0; k < 40; ++k) out.push_back(utf8_encode(0xAC00 + 97 * k));
    return out;
}

namespace detail {

inline std::discrete_distribution<std::size_t> zipf(std::size_t n, double s) {
    std::vector<double> w(n);
    for (std::size_t k = 0; k < n; ++k) w[k] = 1.0 / std::pow(static_cast<double>(k + 1), s);
    return {w.begin(), w.end()};
}

inline std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

} // namespace detail

/// Lexicons and morpheme inventory behind a synthetic corpus.
struct SyntheticLanguage {
    std::vector<std::string> base_words;
    std::vector<std::string> target_words;
    std::vector<std::string> morphemes;
    /// Morpheme indices of every target word.
    std::vector<std::vector<std::size_t>> target_parts;
    std::vector<std::vector<std::size_t>> successors;
};

inline SyntheticLanguage make_language(std::uint64_t seed, const SyntheticParams& p) {
    auto target_alpha = p.target_alphabet.empty() ? default_target_alphabet() : p.target_alphabet;
    require(!p.base_alphabet.empty() && !target_alpha.empty(), "synthetic corpus: empty alphabet");
    require(p.lexicon_size >= 1 && p.morphemes >= 1, "synthetic corpus: empty lexicon");
    require(p.words_min >= 1 && p.words_min <= p.words_max, "synthetic corpus: bad words per doc");
    require(p.base_word_min >= 1 && p.base_word_min <= p.base_word_max, "synthetic corpus: bad base word length");
    require(p.morpheme_len_min >= 1 && p.morpheme_len_min <= p.morpheme_len_max,
            "synthetic corpus: bad morpheme length");
    require(p.morphemes_per_word_min >= 1 && p.morphemes_per_word_min <= p.morphemes_per_word_max,
            "synthetic corpus: bad morphemes per word");

    std::set<std::string> base_chars;
    for (auto c : utf8_chars(p.base_alphabet)) {
        require(!detail::is_space(static_cast<unsigned char>(c[0])), "synthetic corpus: whitespace in alphabet");
        base_chars.insert(std::string(c));
    }
    for (const auto& c : target_alpha) {
        require(utf8_chars(c).size() == 1, "synthetic corpus: target alphabet entries must be single characters");
        require(!detail::is_space(static_cast<unsigned char>(c[0])), "synthetic corpus: whitespace in alphabet");
        require(!base_chars.count(c), "synthetic corpus: overlapping alphabets");
    }
    std::vector<std::string> base_alpha(base_chars.begin(), base_chars.end());

    std::mt19937_64 rng(seed);
    SyntheticLanguage lang;

    std::set<std::string> seen;
    for (std::size_t i = 0; i < p.lexicon_size; ++i) {
        std::string w;
        for (int attempt = 0; attempt < 64; ++attempt) {
            w.clear();
            auto len = detail::uniform(rng, p.base_word_min, p.base_word_max);
            for (std::size_t k = 0; k < len; ++k) w += base_alpha[detail::uniform(rng, 0, base_alpha.size() - 1)];
            if (!seen.count(w)) break;
        }
        seen.insert(w);
        lang.base_words.push_back(w);
    }

    seen.clear();
    for (std::size_t i = 0; i < p.morphemes; ++i) {
        std::string m;
        for (int attempt = 0; attempt < 64; ++attempt) {
            m.clear();
            auto len = detail::uniform(rng, p.morpheme_len_min, p.morpheme_len_max);
            for (std::size_t k = 0; k < len; ++k) m += target_alpha[detail::uniform(rng, 0, target_alpha.size() - 1)];
            if (!seen.count(m)) break;
        }
        seen.insert(m);
        lang.morphemes.push_back(m);
    }

    auto morph_dist = detail::zipf(p.morphemes, p.morpheme_zipf);
    seen.clear();
    for (std::size_t i = 0; i < p.lexicon_size; ++i) {
        std::vector<std::size_t> parts;
        std::string w;
        for (int attempt = 0; attempt < 64; ++attempt) {
            parts.clear();
            w.clear();
            auto n = detail::uniform(rng, p.morphemes_per_word_min, p.morphemes_per_word_max);
            for (std::size_t k = 0; k < n; ++k) {
                parts.push_back(morph_dist(rng));
                w += lang.morphemes[parts.back()];
            }
            if (!seen.count(w)) break;
        }
        seen.insert(w);
        lang.target_words.push_back(w);
        lang.target_parts.push_back(parts);
    }

    auto word_dist = detail::zipf(p.lexicon_size, p.word_zipf);
    lang.successors.resize(p.lexicon_size);
    for (auto& s : lang.successors)
        for (std::size_t k = 0; k < p.successors; ++k) s.push_back(word_dist(rng));
    return lang;
}

/// Latent word-index sequence shared by both languages.
inline std::vector<std::size_t> sample_word_chain(std::mt19937_64& rng, const SyntheticLanguage& lang,
                                                  const SyntheticParams& p, std::size_t length) {
    auto word_dist = detail::zipf(p.lexicon_size, p.word_zipf);
    std::bernoulli_distribution follow(p.successor_prob);
    std::vector<std::size_t> out;
    out.reserve(length);
    for (std::size_t i = 0; i < length; ++i) {
        const auto& succ = i > 0 ? lang.successors[out.back()] : std::vector<std::size_t>{};
        if (!succ.empty() && follow(rng))
            out.push_back(succ[detail::uniform(rng, 0, succ.size() - 1)]);
        else
            out.push_back(word_dist(rng));
    }
    return out;
}

inline std::string render(const std::vector<std::string>& lexicon, std::span<const std::size_t> chain) {
    std::string out;
    for (std::size_t i = 0; i < chain.size(); ++i) {
        if (i) out += ' ';
        out += lexicon[chain[i]];
    }
    return out;
}

/// Deterministic for a fixed seed. Document order: base, target, noise.
inline std::vector<Document> generate_synthetic_corpus(std::uint64_t seed, const SyntheticParams& p = {}) {
    auto lang = make_language(seed, p);
    std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ull);
    std::vector<Document> docs;
    char id[32];

    for (std::size_t i = 0; i < p.base_docs; ++i) {
        auto chain = sample_word_chain(rng, lang, p, detail::uniform(rng, p.words_min, p.words_max));
        std::snprintf(id, sizeof id, "b%06zu", i);
        docs.push_back({id, render(lang.base_words, chain), Lang::Base, nlohmann::json::object()});
    }
    for (std::size_t i = 0; i < p.target_docs; ++i) {
        auto chain = sample_word_chain(rng, lang, p, detail::uniform(rng, p.words_min, p.words_max));
        std::snprintf(id, sizeof id, "t%06zu", i);
        docs.push_back({id, render(lang.target_words, chain), Lang::Target, nlohmann::json::object()});
    }
    const std::string printable = "!#$%&()*+,-./0123456789:;<=>?@ABCDEFGHIJKLMNOPQRSTUVWXYZ[]^_`{|}~";
    for (std::size_t i = 0; i < p.noise_docs; ++i) {
        std::string text;
        std::string kind;
        switch (i % 4) {
        case 0: {
            kind = "random";
            auto n = detail::uniform(rng, 80, 200);
            for (std::size_t k = 0; k < n; ++k) text += printable[detail::uniform(rng, 0, printable.size() - 1)];
            break;
        }
        case 1: {
            kind = "loop";
            auto chain = sample_word_chain(rng, lang, p, 3);
            auto phrase = render(lang.base_words, chain);
            for (int k = 0; k < 8; ++k) text += (k ? " " : "") + phrase;
            break;
        }
        case 2: kind = "empty"; break;
        default: {
            kind = "wordsalad";
            // Rare words only: no stopwords.
            for (std::size_t k = 0; k < 20; ++k) {
                if (k) text += ' ';
                text += lang.base_words[p.lexicon_size - 1 - detail::uniform(rng, 0, std::min<std::size_t>(p.lexicon_size / 2, p.lexicon_size - 1))];
            }
            break;
        }
        }
        std::snprintf(id, sizeof id, "n%06zu", i);
        docs.push_back({id, text, Lang::Unknown, {{"noise", kind}}});
    }
    return docs;
}

} // namespace eeve
