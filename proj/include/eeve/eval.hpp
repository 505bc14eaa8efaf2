#pragma once

// Corpus perplexity, token-economy reports and a likelihood-ranked
// multiple-choice scorer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eeve/corpus.hpp"
#include "eeve/error.hpp"
#include "eeve/io.hpp"
#include "eeve/model.hpp"
#include "eeve/tokenizer.hpp"

namespace eeve {

/// Summed negative log-likelihood and the number of scored positions.
struct NllTotal {
    double nll = 0;
    std::size_t positions = 0;

    double perplexity() const { return std::exp(nll / static_cast<double>(positions)); }
};

/// Scores every next-token position of one token sequence. Sequences longer
/// than the context are cut into consecutive windows; each window starts
/// fresh, so a position sees at most max_seq_len tokens of history.
template <class T>
NllTotal sequence_nll(const ModelParams<T>& p, std::span<const TokenId> ids) {
    require(ids.size() >= 2, "perplexity: a document encodes to fewer than 2 tokens");
    const auto S = static_cast<std::size_t>(p.config.max_seq_len);
    NllTotal out;
    for (std::size_t a = 0; a + 1 < ids.size(); a += S) {
        const auto n = std::min(S, ids.size() - 1 - a);
        auto logits = forward(p, ids.subspan(a, n));
        for (std::size_t t = 0; t < n; ++t) {
            auto lp = log_softmax(logits.row(t));
            out.nll -= lp[ids[a + t + 1]];
        }
        out.positions += n;
    }
    return out;
}

template <class T>
NllTotal corpus_nll(const ModelParams<T>& p, const TokenizerModel& tok, std::span<const std::string> docs) {
    require(!docs.empty(), "perplexity: empty document set");
    NllTotal total;
    for (const auto& d : docs) {
        auto ids = tok.encode(d);
        auto part = sequence_nll(p, std::span<const TokenId>(ids));
        total.nll += part.nll;
        total.positions += part.positions;
    }
    return total;
}

/// exp of the mean next-token NLL, pooled over all positions of all docs.
template <class T>
double perplexity(const ModelParams<T>& p, const TokenizerModel& tok, std::span<const std::string> docs) {
    return corpus_nll(p, tok, docs).perplexity();
}

// ---------------------------------------------------------------------------
// Multiple choice

struct ChoiceItem {
    std::string context;
    std::vector<std::string> options;
    std::size_t answer_index = 0;

    void validate() const {
        require(options.size() >= 2, "choice item: need at least 2 options");
        require(answer_index < options.size(), "choice item: answer_index out of range");
    }

    nlohmann::json to_json() const {
        return {{"context", context}, {"options", options}, {"answer_index", answer_index}};
    }
    static ChoiceItem from_json(const nlohmann::json& j) {
        ChoiceItem c{j.at("context").get<std::string>(), j.at("options").get<std::vector<std::string>>(),
                     j.at("answer_index").get<std::size_t>()};
        c.validate();
        return c;
    }

    friend bool operator==(const ChoiceItem&, const ChoiceItem&) = default;
};

inline std::vector<ChoiceItem> read_choice_items(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::vector<ChoiceItem> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(ChoiceItem::from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline void write_choice_items(const std::filesystem::path& path, std::span<const ChoiceItem> items) {
    std::string out;
    for (const auto& it : items) out += it.to_json().dump() + "\n";
    write_file_atomic(path, out);
}

/// Sum of log p(option tokens | context tokens). The context is truncated
/// from the left when the pair does not fit in the model's context window.
/// An option longer than the window is scored in blocks of half a window,
/// each seeing the preceding tokens that still fit.
template <class T>
double option_loglik(const ModelParams<T>& p, std::span<const TokenId> ctx, std::span<const TokenId> opt) {
    require(!ctx.empty(), "score_choices: context encodes to zero tokens");
    require(!opt.empty(), "score_choices: option encodes to zero tokens");
    const auto S = static_cast<std::size_t>(p.config.max_seq_len);
    std::vector<TokenId> full(ctx.begin(), ctx.end());
    full.insert(full.end(), opt.begin(), opt.end());
    const std::size_t block = opt.size() <= S ? opt.size() : std::max<std::size_t>(1, S / 2);
    double ll = 0;
    for (std::size_t i = ctx.size(); i < full.size();) {
        const auto end = std::min(full.size(), i + block);
        const auto a = end - 1 > S ? end - 1 - S : 0;
        auto logits = forward(p, std::span<const TokenId>(full.data() + a, end - 1 - a));
        for (std::size_t t = i; t < end; ++t) ll += log_softmax(logits.row(t - 1 - a))[full[t]];
        i = end;
    }
    return ll;
}

/// Index of the winning option; ties go to the lowest index.
inline std::size_t pick_option(std::span<const double> scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[best]) best = i;
    return best;
}

struct ChoiceScores {
    /// Per item, per option: summed log-likelihood and option token count.
    std::vector<std::vector<double>> loglik;
    std::vector<std::vector<std::size_t>> lengths;

    std::vector<std::size_t> predictions(bool length_normalize) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < loglik.size(); ++i) {
            auto s = loglik[i];
            if (length_normalize)
                for (std::size_t k = 0; k < s.size(); ++k) s[k] /= static_cast<double>(lengths[i][k]);
            out.push_back(pick_option(s));
        }
        return out;
    }
};

template <class T>
ChoiceScores choice_scores(const ModelParams<T>& p, const TokenizerModel& tok, std::span<const ChoiceItem> items) {
    require(!items.empty(), "score_choices: no items");
    ChoiceScores out;
    for (const auto& it : items) {
        it.validate();
        auto ctx = tok.encode(it.context);
        std::vector<double> ll;
        std::vector<std::size_t> len;
        for (const auto& o : it.options) {
            auto opt = tok.encode(o);
            ll.push_back(option_loglik(p, std::span<const TokenId>(ctx), std::span<const TokenId>(opt)));
            len.push_back(opt.size());
        }
        out.loglik.push_back(std::move(ll));
        out.lengths.push_back(std::move(len));
    }
    return out;
}

inline double choice_accuracy(std::span<const ChoiceItem> items, std::span<const std::size_t> predictions) {
    std::size_t right = 0;
    for (std::size_t i = 0; i < items.size(); ++i) right += predictions[i] == items[i].answer_index;
    return static_cast<double>(right) / static_cast<double>(items.size());
}

/// Fraction of items whose highest-likelihood option is the answer.
template <class T>
double score_choices(const ModelParams<T>& p, const TokenizerModel& tok, std::span<const ChoiceItem> items,
                     bool length_normalize = true) {
    auto preds = choice_scores(p, tok, items).predictions(length_normalize);
    return choice_accuracy(items, preds);
}

/// Next-word items from the synthetic language: the context is a sampled
/// word chain, the answer is a likely successor of its last word and the
/// distractors are words that never follow it.
inline std::vector<ChoiceItem> make_choice_items(const SyntheticLanguage& lang, const SyntheticParams& sp, Lang which,
                                                 std::size_t count, std::uint64_t seed, std::size_t options = 4,
                                                 std::size_t context_words = 6) {
    require(which != Lang::Unknown, "choice items: language must be base or target");
    require(options >= 2, "choice items: need at least 2 options");
    const auto& lex = which == Lang::Base ? lang.base_words : lang.target_words;
    require(lex.size() > options + sp.successors, "choice items: lexicon too small for distractors");
    std::mt19937_64 rng(seed);
    std::vector<ChoiceItem> out;
    for (std::size_t i = 0; i < count; ++i) {
        auto chain = sample_word_chain(rng, lang, sp, context_words);
        const auto& succ = lang.successors[chain.back()];
        std::vector<std::string> opts{" " + lex[succ.front()]};
        std::uniform_int_distribution<std::size_t> pick(0, lex.size() - 1);
        while (opts.size() < options) {
            auto w = pick(rng);
            auto word = " " + lex[w];
            if (std::find(succ.begin(), succ.end(), w) != succ.end()) continue;
            if (std::find(opts.begin(), opts.end(), word) != opts.end()) continue;
            opts.push_back(word);
        }
        std::shuffle(opts.begin(), opts.end(), rng);
        auto answer = " " + lex[succ.front()];
        auto idx = static_cast<std::size_t>(std::find(opts.begin(), opts.end(), answer) - opts.begin());
        out.push_back({render(lex, chain), std::move(opts), idx});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Token economy

struct EconomyRow {
    std::size_t docs = 0;
    std::size_t base_tokens = 0;
    std::size_t expanded_tokens = 0;

    double avg_base() const { return docs ? static_cast<double>(base_tokens) / static_cast<double>(docs) : 0.0; }
    double avg_expanded() const {
        return docs ? static_cast<double>(expanded_tokens) / static_cast<double>(docs) : 0.0;
    }
    double ratio() const {
        return base_tokens ? static_cast<double>(expanded_tokens) / static_cast<double>(base_tokens) : 1.0;
    }

    nlohmann::json to_json() const {
        return {{"docs", docs},
                {"base_tokens", base_tokens},
                {"expanded_tokens", expanded_tokens},
                {"avg_base", avg_base()},
                {"avg_expanded", avg_expanded()},
                {"ratio", ratio()}};
    }
    static EconomyRow from_json(const nlohmann::json& j) {
        return {j.at("docs").get<std::size_t>(), j.at("base_tokens").get<std::size_t>(),
                j.at("expanded_tokens").get<std::size_t>()};
    }
    friend bool operator==(const EconomyRow&, const EconomyRow&) = default;
};

/// Per-language and overall token counts under both tokenizers.
struct EconomyReport {
    std::map<std::string, EconomyRow> by_lang;
    EconomyRow all;

    nlohmann::json to_json() const {
        nlohmann::json j = {{"all", all.to_json()}, {"by_lang", nlohmann::json::object()}};
        for (const auto& [k, v] : by_lang) j["by_lang"][k] = v.to_json();
        return j;
    }
    static EconomyReport from_json(const nlohmann::json& j) {
        EconomyReport r;
        r.all = EconomyRow::from_json(j.at("all"));
        for (const auto& [k, v] : j.at("by_lang").items()) r.by_lang[k] = EconomyRow::from_json(v);
        return r;
    }
    friend bool operator==(const EconomyReport&, const EconomyReport&) = default;
};

inline EconomyReport token_economy_report(const TokenizerModel& base, const TokenizerModel& expanded,
                                          std::span<const Document> corpus) {
    require(!corpus.empty(), "token economy: empty corpus");
    EconomyReport r;
    for (const auto& d : corpus) {
        auto b = base.encode(d.text).size();
        auto e = expanded.encode(d.text).size();
        for (auto* row : {&r.by_lang[to_string(d.lang)], &r.all}) {
            row->docs += 1;
            row->base_tokens += b;
            row->expanded_tokens += e;
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
    int stage = 0;
    std::string checkpoint;
    std::uint64_t seed = 0;
    std::map<std::string, double> perplexity;
    std::map<std::string, double> accuracy_normalized;
    std::map<std::string, double> accuracy_raw;
    EconomyReport economy;

    void validate() const {
        for (const auto& [k, v] : perplexity) require(v >= 1.0 - 1e-12, "eval report: perplexity below 1 for " + k);
        for (const auto* m : {&accuracy_normalized, &accuracy_raw})
            for (const auto& [k, v] : *m) require(v >= 0.0 && v <= 1.0, "eval report: accuracy outside [0,1]");
    }

    nlohmann::json to_json() const {
        return {{"stage", stage},
                {"checkpoint", checkpoint},
                {"seed", seed},
                {"perplexity", perplexity},
                {"accuracy_normalized", accuracy_normalized},
                {"accuracy_raw", accuracy_raw},
                {"economy", economy.to_json()}};
    }
    static EvalReport from_json(const nlohmann::json& j) {
        EvalReport r;
        r.stage = j.at("stage");
        r.checkpoint = j.at("checkpoint");
        r.seed = j.at("seed");
        r.perplexity = j.at("perplexity").get<std::map<std::string, double>>();
        r.accuracy_normalized = j.at("accuracy_normalized").get<std::map<std::string, double>>();
        r.accuracy_raw = j.at("accuracy_raw").get<std::map<std::string, double>>();
        r.economy = EconomyReport::from_json(j.at("economy"));
        r.validate();
        return r;
    }
};

struct EvalSet {
    std::map<std::string, std::vector<std::string>> docs;
    std::map<std::string, std::vector<ChoiceItem>> choices;
};

template <class T>
EvalReport evaluate(const ModelParams<T>& p, const TokenizerModel& tok, const EvalSet& set) {
    EvalReport r;
    for (const auto& [lang, docs] : set.docs) r.perplexity[lang] = perplexity(p, tok, std::span<const std::string>(docs));
    for (const auto& [lang, items] : set.choices) {
        auto sc = choice_scores(p, tok, std::span<const ChoiceItem>(items));
        r.accuracy_normalized[lang] = choice_accuracy(items, sc.predictions(true));
        r.accuracy_raw[lang] = choice_accuracy(items, sc.predictions(false));
    }
    return r;
}

} // namespace eeve
