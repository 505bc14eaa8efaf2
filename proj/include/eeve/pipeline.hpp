#pragma once

// End-to-end orchestration: corpus -> filters -> base tokenizer -> base model
// pre-training -> tokenizer expansion -> embedding expansion -> stages 1..7,
// with an evaluation after stage 0 and after every stage.
//
// Every step is keyed by a hash of the configuration it depends on and the
// keys of the steps before it. manifest.json records each step's key and the
// content hash of every file it wrote; a re-run skips any step whose key is
// unchanged and whose files still match.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eeve/checkpoint.hpp"
#include "eeve/corpus.hpp"
#include "eeve/embed_init.hpp"
#include "eeve/error.hpp"
#include "eeve/eval.hpp"
#include "eeve/hash.hpp"
#include "eeve/io.hpp"
#include "eeve/model.hpp"
#include "eeve/stages.hpp"
#include "eeve/tokenizer.hpp"
#include "eeve/trainer.hpp"

namespace eeve {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kManifestFormatVersion = 1;

/// Precision used for every training run inside the pipeline.
using Real = float;

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct FilterConfig {
    bool enabled = true;
    std::size_t seed_docs_per_lang = 100;
    int ngram_order = 5;
    double ngram_alpha = 0.1;
    double max_perplexity = 40.0;
    std::size_t repetition_n = 3;
    double max_dup_ratio = 0.6;
    std::size_t stopword_top_k = 40;
    double stopword_min_rate = 1e-9;
    double stopword_max_rate = 1.0;
    double min_new_token_ratio = 0.05;

    nlohmann::json to_json() const {
        return {{"enabled", enabled},
                {"seed_docs_per_lang", seed_docs_per_lang},
                {"ngram_order", ngram_order},
                {"ngram_alpha", ngram_alpha},
                {"max_perplexity", max_perplexity},
                {"repetition_n", repetition_n},
                {"max_dup_ratio", max_dup_ratio},
                {"stopword_top_k", stopword_top_k},
                {"stopword_min_rate", stopword_min_rate},
                {"stopword_max_rate", stopword_max_rate},
                {"min_new_token_ratio", min_new_token_ratio}};
    }
};

struct TokenizerConfig {
    std::size_t base_vocab_size = 512;
    std::size_t min_freq = 8;
    std::size_t max_new = 256;
    std::size_t candidate_budget = 0;
    std::string allowlist_file;
    std::string blocklist_file;

    nlohmann::json to_json() const {
        return {{"base_vocab_size", base_vocab_size}, {"min_freq", min_freq},
                {"max_new", max_new},                 {"candidate_budget", candidate_budget},
                {"allowlist_file", allowlist_file},   {"blocklist_file", blocklist_file}};
    }
};

struct PretrainConfig {
    int steps = 600;
    double learning_rate = 3e-3;
    int warmup_steps = 20;
    int gradient_accumulation_steps = 1;
    int micro_batch_size = 16;

    nlohmann::json to_json() const {
        return {{"steps", steps},
                {"learning_rate", learning_rate},
                {"warmup_steps", warmup_steps},
                {"gradient_accumulation_steps", gradient_accumulation_steps},
                {"micro_batch_size", micro_batch_size}};
    }
};

/// Adaptation-stage hyperparameters, named after the recipe they scale.
struct TrainingConfig {
    int gradient_accumulation_steps = 4;
    int micro_batch_size = 8;
    double learning_rate = 4e-5;
    /// Multiplier applied to learning_rate for desk-sized models.
    double lr_scale = 1.0;
    int warmup_steps = 10;
    int max_global_steps = 400;
    /// Budget shared by stages 1..7 in `run all`; 0 disables it. Stages
    /// after the budget is spent keep their input weights unchanged.
    int max_total_steps = 0;
    double min_lr = 0.0;
    AdamWSettings adamw;
    ConvergenceRule convergence;
    /// Base-language documents mixed into stage data, as a fraction of the
    /// number of target documents.
    double base_mix = 0.5;
    bool use_low_rank_adapters = false;
    AdapterSettings adapters;

    double stage_lr() const { return learning_rate * lr_scale; }

    TrainSettings settings() const {
        TrainSettings s;
        s.accumulation = gradient_accumulation_steps;
        s.micro_batch = micro_batch_size;
        s.warmup_steps = warmup_steps;
        s.floor_lr = min_lr;
        s.adamw = adamw;
        return s;
    }

    nlohmann::json to_json() const {
        return {{"gradient_accumulation_steps", gradient_accumulation_steps},
                {"micro_batch_size", micro_batch_size},
                {"learning_rate", learning_rate},
                {"lr_scale", lr_scale},
                {"warmup_steps", warmup_steps},
                {"max_global_steps", max_global_steps},
                {"max_total_steps", max_total_steps},
                {"min_lr", min_lr},
                {"adamw", adamw.to_json()},
                {"convergence", convergence.to_json()},
                {"base_mix", base_mix},
                {"use_low_rank_adapters", use_low_rank_adapters},
                {"adapters", adapters.to_json()}};
    }
};

struct EvalConfig {
    std::size_t docs_per_lang = 60;
    std::size_t choice_items = 100;
    std::size_t choice_options = 4;
    /// Optional JSONL item files per language for ingested corpora.
    std::map<std::string, std::string> choice_files;
    double target_ppl_reduction_min = 0.30;
    double base_ppl_increase_max = 0.05;

    nlohmann::json to_json() const {
        return {{"docs_per_lang", docs_per_lang},
                {"choice_items", choice_items},
                {"choice_options", choice_options},
                {"choice_files", choice_files},
                {"target_ppl_reduction_min", target_ppl_reduction_min},
                {"base_ppl_increase_max", base_ppl_increase_max}};
    }
};

struct PipelineConfig {
    std::uint64_t seed = 1234;
    std::string work_dir = "work";
    /// Ingested JSONL corpus; empty means generate a synthetic one.
    std::string corpus_path;
    SyntheticParams synthetic;
    FilterConfig filters;
    TokenizerConfig tokenizer;
    ModelConfig model;
    PretrainConfig pretrain;
    TrainingConfig training;
    std::vector<StagePlan> stages;
    EvalConfig eval;
    /// Directory relative paths in the config are resolved against.
    fs::path base_dir;

    fs::path resolve(const std::string& p) const {
        fs::path path(p);
        return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
    }

    /// The default schedule: stages 1..7 at the scaled learning rate.
    std::vector<StagePlan> default_stages() const {
        std::vector<StagePlan> out;
        for (int s = 1; s <= kFinalStage; ++s) {
            auto p = StagePlan::for_stage(s, training.max_global_steps, training.stage_lr());
            p.convergence = training.convergence;
            p.convergence.max_steps = training.max_global_steps;
            p.use_low_rank_adapters = s == 6 && training.use_low_rank_adapters;
            p.adapters = training.adapters;
            out.push_back(p);
        }
        return out;
    }

    void validate() const {
        if (!corpus_path.empty())
            require(fs::exists(resolve(corpus_path)), "config: corpus path " + corpus_path + " does not exist");
        for (const auto& f : {tokenizer.allowlist_file, tokenizer.blocklist_file})
            if (!f.empty()) require(fs::exists(resolve(f)), "config: curation file " + f + " does not exist");
        for (const auto& [lang, f] : eval.choice_files)
            require(fs::exists(resolve(f)), "config: choice file " + f + " does not exist");
        require(tokenizer.base_vocab_size > kByteTokens, "config: tokenizer.base_vocab_size must exceed 256");
        require(tokenizer.min_freq >= 1, "config: tokenizer.min_freq must be >= 1");
        ModelConfig m = model;
        m.vocab_size = tokenizer.base_vocab_size;
        m.validate();
        require(pretrain.steps >= 1 && pretrain.learning_rate > 0, "config: pretrain needs steps >= 1 and lr > 0");
        require(pretrain.gradient_accumulation_steps >= 1 && pretrain.micro_batch_size >= 1,
                "config: pretrain batch settings must be >= 1");
        training.settings().validate();
        require(training.base_mix >= 0.0, "config: training.base_mix must be >= 0");
        require(training.max_total_steps >= 0, "config: training.max_total_steps must be >= 0");
        require(!stages.empty(), "config: no stages");
        for (std::size_t i = 0; i < stages.size(); ++i)
            require(stages[i].stage_id == static_cast<int>(i) + 1,
                    "config: stage plans must cover a contiguous prefix of 1..7");
        validate_plans(stages);
        require(eval.docs_per_lang >= 1, "config: eval.docs_per_lang must be >= 1");
        require(eval.choice_options >= 2, "config: eval.choice_options must be >= 2");
    }

    nlohmann::json to_json() const {
        nlohmann::json st = nlohmann::json::array();
        for (const auto& p : stages) st.push_back(p.to_json());
        return {{"seed", seed},
                {"work_dir", work_dir},
                {"corpus_path", corpus_path},
                {"synthetic", synthetic.to_json()},
                {"filters", filters.to_json()},
                {"tokenizer", tokenizer.to_json()},
                {"model", model.to_json()},
                {"pretrain", pretrain.to_json()},
                {"training", training.to_json()},
                {"stages", st},
                {"eval", eval.to_json()}};
    }

    std::string hash() const { return sha256_hex(to_json().dump()); }

    static PipelineConfig from_json(const nlohmann::json& j, fs::path base_dir = {});
    static PipelineConfig load(const fs::path& path);
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    require(j.is_object(), "config: " + where + " must be an object");
    for (const auto& [k, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok |= k == a;
        require(ok, "config: unknown key '" + k + "' in " + (where.empty() ? "top level" : where));
    }
}

template <class V>
void read(const nlohmann::json& j, const char* key, V& out) {
    if (j.contains(key)) out = j.at(key).get<V>();
}

} // namespace detail

inline PipelineConfig PipelineConfig::from_json(const nlohmann::json& j, fs::path base) {
    using detail::read;
    PipelineConfig c;
    c.base_dir = std::move(base);
    try {
        detail::check_keys(j,
                           {"seed", "work_dir", "corpus_path", "synthetic", "filters", "tokenizer", "model", "pretrain",
                            "training", "stages", "eval"},
                           "");
        read(j, "seed", c.seed);
        read(j, "work_dir", c.work_dir);
        read(j, "corpus_path", c.corpus_path);
        if (j.contains("synthetic")) c.synthetic = SyntheticParams::from_json(j.at("synthetic"));
        if (j.contains("filters")) {
            const auto& f = j.at("filters");
            detail::check_keys(f,
                               {"enabled", "seed_docs_per_lang", "ngram_order", "ngram_alpha", "max_perplexity",
                                "repetition_n", "max_dup_ratio", "stopword_top_k", "stopword_min_rate",
                                "stopword_max_rate", "min_new_token_ratio"},
                               "filters");
            auto& o = c.filters;
            read(f, "enabled", o.enabled);
            read(f, "seed_docs_per_lang", o.seed_docs_per_lang);
            read(f, "ngram_order", o.ngram_order);
            read(f, "ngram_alpha", o.ngram_alpha);
            read(f, "max_perplexity", o.max_perplexity);
            read(f, "repetition_n", o.repetition_n);
            read(f, "max_dup_ratio", o.max_dup_ratio);
            read(f, "stopword_top_k", o.stopword_top_k);
            read(f, "stopword_min_rate", o.stopword_min_rate);
            read(f, "stopword_max_rate", o.stopword_max_rate);
            read(f, "min_new_token_ratio", o.min_new_token_ratio);
        }
        if (j.contains("tokenizer")) {
            const auto& t = j.at("tokenizer");
            detail::check_keys(t,
                               {"base_vocab_size", "min_freq", "max_new", "candidate_budget", "allowlist_file",
                                "blocklist_file"},
                               "tokenizer");
            read(t, "base_vocab_size", c.tokenizer.base_vocab_size);
            read(t, "min_freq", c.tokenizer.min_freq);
            read(t, "max_new", c.tokenizer.max_new);
            read(t, "candidate_budget", c.tokenizer.candidate_budget);
            read(t, "allowlist_file", c.tokenizer.allowlist_file);
            read(t, "blocklist_file", c.tokenizer.blocklist_file);
        }
        if (j.contains("model")) {
            auto m = j.at("model");
            if (!m.contains("vocab_size")) m["vocab_size"] = c.tokenizer.base_vocab_size;
            c.model = ModelConfig::from_json(m);
        }
        if (j.contains("pretrain")) {
            const auto& p = j.at("pretrain");
            detail::check_keys(p,
                               {"steps", "learning_rate", "warmup_steps", "gradient_accumulation_steps",
                                "micro_batch_size"},
                               "pretrain");
            read(p, "steps", c.pretrain.steps);
            read(p, "learning_rate", c.pretrain.learning_rate);
            read(p, "warmup_steps", c.pretrain.warmup_steps);
            read(p, "gradient_accumulation_steps", c.pretrain.gradient_accumulation_steps);
            read(p, "micro_batch_size", c.pretrain.micro_batch_size);
        }
        if (j.contains("training")) {
            const auto& t = j.at("training");
            detail::check_keys(t,
                               {"gradient_accumulation_steps", "micro_batch_size", "learning_rate", "lr_scale",
                                "warmup_steps", "max_global_steps", "max_total_steps", "min_lr", "adamw", "convergence", "base_mix",
                                "use_low_rank_adapters", "adapters"},
                               "training");
            auto& o = c.training;
            read(t, "gradient_accumulation_steps", o.gradient_accumulation_steps);
            read(t, "micro_batch_size", o.micro_batch_size);
            read(t, "learning_rate", o.learning_rate);
            read(t, "lr_scale", o.lr_scale);
            read(t, "warmup_steps", o.warmup_steps);
            read(t, "max_global_steps", o.max_global_steps);
            read(t, "max_total_steps", o.max_total_steps);
            read(t, "min_lr", o.min_lr);
            if (t.contains("adamw")) o.adamw = AdamWSettings::from_json(t.at("adamw"));
            if (t.contains("convergence")) o.convergence = ConvergenceRule::from_json(t.at("convergence"));
            read(t, "base_mix", o.base_mix);
            read(t, "use_low_rank_adapters", o.use_low_rank_adapters);
            if (t.contains("adapters")) o.adapters = AdapterSettings::from_json(t.at("adapters"));
        }
        if (j.contains("stages")) {
            for (const auto& s : j.at("stages")) {
                detail::check_keys(s, {"stage_id", "max_steps", "lr", "convergence", "use_low_rank_adapters", "adapters"},
                                   "stages[]");
                auto merged = c.default_stages().at(static_cast<std::size_t>(
                                                        std::clamp(s.at("stage_id").get<int>(), 1, kFinalStage) - 1))
                                  .to_json();
                merged.update(s);
                c.stages.push_back(StagePlan::from_json(merged));
            }
        } else {
            c.stages = c.default_stages();
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            detail::check_keys(e,
                               {"docs_per_lang", "choice_items", "choice_options", "choice_files",
                                "target_ppl_reduction_min", "base_ppl_increase_max"},
                               "eval");
            read(e, "docs_per_lang", c.eval.docs_per_lang);
            read(e, "choice_items", c.eval.choice_items);
            read(e, "choice_options", c.eval.choice_options);
            read(e, "choice_files", c.eval.choice_files);
            read(e, "target_ppl_reduction_min", c.eval.target_ppl_reduction_min);
            read(e, "base_ppl_increase_max", c.eval.base_ppl_increase_max);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline PipelineConfig PipelineConfig::load(const fs::path& path) {
    require(fs::exists(path), "config file " + path.string() + " does not exist");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config " + path.string() + ": " + e.what());
    }
    return from_json(j, path.parent_path());
}

/// Stable 64-bit seed for a named sub-step.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
    auto h = sha256_hex(std::to_string(seed) + ":" + std::string(name));
    return std::stoull(h.substr(0, 16), nullptr, 16);
}

// ---------------------------------------------------------------------------
// Manifest

inline std::string utc_timestamp() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

class RunManifest {
public:
    explicit RunManifest(fs::path root) : root_(std::move(root)) {
        auto path = root_ / "manifest.json";
        if (fs::exists(path)) {
            try {
                data_ = nlohmann::json::parse(read_file(path));
            } catch (const nlohmann::json::exception& e) {
                throw ValidationError("corrupt manifest " + path.string() + ": " + e.what());
            }
        }
        if (!data_.contains("steps")) data_["steps"] = nlohmann::json::object();
        data_["format_version"] = kManifestFormatVersion;
        data_["versions"] = {{"eeve", kVersion},
                             {"tokenizer_format", kTokenizerFormatVersion},
                             {"checkpoint_format", kCheckpointFormatVersion}};
    }

    const fs::path& root() const { return root_; }
    const nlohmann::json& json() const { return data_; }
    void set_config_hash(const std::string& h) { data_["config_hash"] = h; }

    /// True when the step ran with this key and its files are unchanged.
    bool fresh(const std::string& step, const std::string& key) const {
        const auto& steps = data_.at("steps");
        if (!steps.contains(step)) return false;
        const auto& e = steps.at(step);
        if (e.value("key", "") != key) return false;
        for (const auto& [rel, h] : e.at("artifacts").items()) {
            auto p = root_ / rel;
            if (!fs::exists(p) || sha256_file(p) != h.get<std::string>()) return false;
        }
        return true;
    }

    void record(const std::string& step, const std::string& key, const std::vector<std::string>& artifacts,
                nlohmann::json extra = nlohmann::json::object()) {
        nlohmann::json a = nlohmann::json::object();
        for (const auto& rel : artifacts) a[rel] = sha256_file(root_ / rel);
        nlohmann::json entry = {{"key", key}, {"artifacts", a}, {"completed_at", utc_timestamp()}};
        for (const auto& [k, v] : extra.items()) entry[k] = v;
        data_["steps"][step] = entry;
        save();
    }

    const nlohmann::json& step(const std::string& name) const { return data_.at("steps").at(name); }

    /// Every recorded artifact with its content hash, without timestamps.
    std::map<std::string, std::string> artifact_hashes() const {
        std::map<std::string, std::string> out;
        for (const auto& [_, e] : data_.at("steps").items())
            for (const auto& [rel, h] : e.at("artifacts").items()) out[rel] = h.get<std::string>();
        return out;
    }

    void save() const { write_file_atomic(root_ / "manifest.json", data_.dump(2) + "\n"); }

private:
    fs::path root_;
    nlohmann::json data_ = nlohmann::json::object();
};

// ---------------------------------------------------------------------------
// Work-directory layout

struct WorkPaths {
    static std::string raw_corpus() { return "corpus/raw.jsonl"; }
    static std::string filtered_corpus() { return "corpus/filtered.jsonl"; }
    static std::string filter_report() { return "corpus/filter_report.json"; }
    static std::string train_split() { return "corpus/train.jsonl"; }
    static std::string eval_split() { return "corpus/eval.jsonl"; }
    static std::string base_tokenizer() { return "tokenizer/base.json"; }
    static std::string expanded_tokenizer() { return "tokenizer/expanded.json"; }
    static std::string base_checkpoint() { return "checkpoints/base"; }
    static std::string stage_checkpoint(int s) { return "checkpoints/stage" + std::to_string(s); }
    static std::string pretrain_log() { return "logs/pretrain_loss.csv"; }
    static std::string stage_log(int s) { return "logs/stage" + std::to_string(s) + "_loss.csv"; }
    static std::string choices(const std::string& lang) { return "eval/choices_" + lang + ".jsonl"; }
    static std::string eval_report(int s) { return "eval/stage" + std::to_string(s) + ".json"; }
    static std::string economy() { return "eval/economy.json"; }
    static std::string report_csv() { return "report/report.csv"; }
    static std::string report_txt() { return "report/report.txt"; }
};

// ---------------------------------------------------------------------------
// Steps. Each is usable on its own by the CLI.

inline std::vector<Document> make_corpus(const PipelineConfig& cfg) {
    if (!cfg.corpus_path.empty()) return read_jsonl(cfg.resolve(cfg.corpus_path));
    return generate_synthetic_corpus(cfg.seed, cfg.synthetic);
}

/// Perplexity -> repetition -> stopword. The scorer and the stoplist come
/// from a seed slice: the first seed_docs_per_lang documents of each
/// language.
inline FilterResult run_quality_filters(std::span<const Document> docs, const FilterConfig& f) {
    if (!f.enabled) {
        FilterResult r;
        r.kept.assign(docs.begin(), docs.end());
        r.report.input = r.report.kept = docs.size();
        return r;
    }
    std::vector<Document> seed;
    for (auto lang : {Lang::Base, Lang::Target}) {
        auto part = select_lang(docs, lang);
        part.resize(std::min(part.size(), f.seed_docs_per_lang));
        seed.insert(seed.end(), part.begin(), part.end());
    }
    require(!seed.empty(), "filters: no language-tagged documents for the seed slice");
    CharNgramModel scorer(f.ngram_order, f.ngram_alpha);
    scorer.train(texts_of(seed));
    auto stoplist = frequent_words(seed, f.stopword_top_k);

    auto r = filter_perplexity(docs, scorer, f.max_perplexity);
    auto rep = filter_repetition(r.kept, f.repetition_n, f.max_dup_ratio);
    r.report.chain(rep.report);
    auto stop = filter_stopword(rep.kept, stoplist, f.stopword_min_rate, f.stopword_max_rate);
    r.report.chain(stop.report);
    r.kept = std::move(stop.kept);
    return r;
}

struct CorpusSplit {
    std::vector<Document> train;
    std::vector<Document> eval;
};

/// Holds out the last docs_per_lang documents of each language; documents
/// without a language tag are not used for training or evaluation.
inline CorpusSplit split_corpus(std::span<const Document> docs, std::size_t docs_per_lang) {
    CorpusSplit s;
    for (auto lang : {Lang::Base, Lang::Target}) {
        auto part = select_lang(docs, lang);
        require(part.size() > docs_per_lang,
                "split: only " + std::to_string(part.size()) + " " + to_string(lang) + " documents for " +
                    std::to_string(docs_per_lang) + " held out");
        auto cut = part.begin() + static_cast<std::ptrdiff_t>(part.size() - docs_per_lang);
        s.train.insert(s.train.end(), part.begin(), cut);
        s.eval.insert(s.eval.end(), cut, part.end());
    }
    return s;
}

inline TokenizerModel train_base_tokenizer(std::span<const Document> train, const TokenizerConfig& t) {
    auto base = texts_of(select_lang(train, Lang::Base));
    require(!base.empty(), "tokenizer: no base-language documents");
    return train_base(base, t.base_vocab_size);
}

inline TokenizerModel expand_tokenizer(const TokenizerModel& base, std::span<const Document> train,
                                       const TokenizerConfig& t, const PipelineConfig& cfg) {
    auto target = texts_of(select_lang(train, Lang::Target));
    ExpandOptions opts;
    opts.candidate_budget = t.candidate_budget;
    if (!t.allowlist_file.empty()) opts.allowlist = read_token_list(cfg.resolve(t.allowlist_file));
    if (!t.blocklist_file.empty()) opts.blocklist = read_token_list(cfg.resolve(t.blocklist_file));
    return expand(base, target, t.min_freq, t.max_new, opts);
}

inline StageResult<Real> pretrain_base_model(const TokenizerModel& base_tok, std::span<const Document> train,
                                             const PipelineConfig& cfg, const StepCallback& on_step = {}) {
    ModelConfig m = cfg.model;
    m.vocab_size = base_tok.vocab_size();
    auto params = init_params<Real>(m, derive_seed(cfg.seed, "init"));
    auto texts = texts_of(select_lang(train, Lang::Base));
    BatchStream stream(make_examples(base_tok, texts, static_cast<std::size_t>(m.max_seq_len)),
                       derive_seed(cfg.seed, "pretrain-data"));
    TrainSettings ts;
    ts.accumulation = cfg.pretrain.gradient_accumulation_steps;
    ts.micro_batch = cfg.pretrain.micro_batch_size;
    ts.warmup_steps = cfg.pretrain.warmup_steps;
    ts.adamw = cfg.training.adamw;
    ConvergenceRule fixed{1, -std::numeric_limits<double>::infinity(), cfg.pretrain.steps};
    return train_loop(std::move(params), stream, -1, FreezeMask::all(), cfg.pretrain.learning_rate, fixed, ts, nullptr,
                      0, on_step);
}

/// Stage training data: target documents that pass the new-token coverage
/// filter plus a base_mix share of base documents.
inline std::vector<std::string> stage_texts(const TokenizerModel& expanded, std::span<const Document> train,
                                            const PipelineConfig& cfg, FilterReport* coverage = nullptr) {
    auto target = select_lang(train, Lang::Target);
    auto covered = filter_new_token_coverage(target, expanded, cfg.filters.min_new_token_ratio);
    require(!covered.kept.empty(), "stage data: no target documents pass the new-token coverage filter");
    if (coverage) *coverage = covered.report;
    auto texts = texts_of(covered.kept);
    auto base = select_lang(train, Lang::Base);
    auto n_base = std::min(base.size(), static_cast<std::size_t>(cfg.training.base_mix *
                                                                 static_cast<double>(covered.kept.size()) + 0.5));
    for (std::size_t i = 0; i < n_base; ++i) texts.push_back(base[i].text);
    return texts;
}

inline StageResult<Real> train_one_stage(ModelParams<Real> params, const TokenizerModel& expanded,
                                         std::span<const std::string> texts, const StagePlan& plan,
                                         const PipelineConfig& cfg, const StepCallback& on_step = {}) {
    const auto tag = "stage" + std::to_string(plan.stage_id);
    BatchStream stream(make_examples(expanded, texts, static_cast<std::size_t>(params.config.max_seq_len)),
                       derive_seed(cfg.seed, tag + "-data"));
    return run_stage(std::move(params), stream, plan, cfg.training.settings(), derive_seed(cfg.seed, tag + "-adapters"),
                     on_step);
}

inline EvalSet build_eval_set(const PipelineConfig& cfg, std::span<const Document> eval_docs) {
    EvalSet set;
    for (auto lang : {Lang::Base, Lang::Target}) set.docs[to_string(lang)] = texts_of(select_lang(eval_docs, lang));
    if (!cfg.eval.choice_files.empty()) {
        for (const auto& [lang, f] : cfg.eval.choice_files) set.choices[lang] = read_choice_items(cfg.resolve(f));
    } else if (cfg.corpus_path.empty() && cfg.eval.choice_items > 0) {
        auto language = make_language(cfg.seed, cfg.synthetic);
        for (auto lang : {Lang::Base, Lang::Target})
            set.choices[to_string(lang)] =
                make_choice_items(language, cfg.synthetic, lang, cfg.eval.choice_items,
                                  derive_seed(cfg.seed, "choices-" + to_string(lang)), cfg.eval.choice_options);
    }
    return set;
}

// ---------------------------------------------------------------------------
// Report

struct ReportRow {
    int stage = 0;
    double ppl_base = 0;
    double ppl_target = 0;
    double economy_ratio_target = 1;
    double acc_base = 0;
    double acc_target = 0;
    double acc_raw_base = 0;
    double acc_raw_target = 0;
};

struct ComparativeReport {
    std::vector<ReportRow> rows;
    double target_ppl_reduction = 0;
    double base_ppl_increase = 0;
    double target_ppl_reduction_min = 0.30;
    double base_ppl_increase_max = 0.05;

    bool efficacy_met() const {
        return target_ppl_reduction >= target_ppl_reduction_min && base_ppl_increase <= base_ppl_increase_max;
    }

    std::string csv() const {
        std::ostringstream out;
        out.precision(10);
        out << "stage,ppl_base,ppl_target,delta_ppl_base,delta_ppl_target,economy_ratio_target,acc_base,acc_target,"
               "acc_raw_base,acc_raw_target\n";
        const auto& r0 = rows.front();
        for (const auto& r : rows)
            out << r.stage << ',' << r.ppl_base << ',' << r.ppl_target << ',' << (r.ppl_base / r0.ppl_base - 1.0) << ','
                << (r.ppl_target / r0.ppl_target - 1.0) << ',' << r.economy_ratio_target << ',' << r.acc_base << ','
                << r.acc_target << ',' << r.acc_raw_base << ',' << r.acc_raw_target << '\n';
        return out.str();
    }

    std::string text() const {
        std::ostringstream out;
        out << std::fixed;
        out << "stage  ppl(base)  ppl(target)  d_base    d_target  acc(base)  acc(target)\n";
        const auto& r0 = rows.front();
        for (const auto& r : rows) {
            out << std::setw(5) << r.stage << "  " << std::setw(9) << std::setprecision(3) << r.ppl_base << "  "
                << std::setw(11) << r.ppl_target << "  " << std::showpos << std::setw(7) << std::setprecision(2)
                << 100.0 * (r.ppl_base / r0.ppl_base - 1.0) << "%  " << std::setw(7)
                << 100.0 * (r.ppl_target / r0.ppl_target - 1.0) << "%" << std::noshowpos << "  " << std::setw(9)
                << std::setprecision(3) << r.acc_base << "  " << std::setw(11) << r.acc_target << '\n';
        }
        out << std::setprecision(4);
        out << "\ntoken economy ratio (target, expanded/base): " << r0.economy_ratio_target << '\n';
        out << "target perplexity reduction, stage " << r0.stage << " -> " << rows.back().stage << ": "
            << 100.0 * target_ppl_reduction << "% (threshold >= " << 100.0 * target_ppl_reduction_min << "%)\n";
        out << "base perplexity change, stage " << r0.stage << " -> " << rows.back().stage << ": "
            << 100.0 * base_ppl_increase << "% (threshold <= " << 100.0 * base_ppl_increase_max << "%)\n";
        out << "efficacy: " << (efficacy_met() ? "met" : "not met") << '\n';
        return out.str();
    }
};

inline ComparativeReport make_report(std::span<const EvalReport> evals, const EvalConfig& ec) {
    require(evals.size() >= 2, "report: need at least 2 evaluated checkpoints, found " + std::to_string(evals.size()));
    ComparativeReport rep;
    rep.target_ppl_reduction_min = ec.target_ppl_reduction_min;
    rep.base_ppl_increase_max = ec.base_ppl_increase_max;
    auto get = [](const std::map<std::string, double>& m, const char* k) {
        auto it = m.find(k);
        return it == m.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
    };
    for (const auto& e : evals) {
        ReportRow r;
        r.stage = e.stage;
        r.ppl_base = get(e.perplexity, "base");
        r.ppl_target = get(e.perplexity, "target");
        auto it = e.economy.by_lang.find("target");
        r.economy_ratio_target = it == e.economy.by_lang.end() ? 1.0 : it->second.ratio();
        r.acc_base = get(e.accuracy_normalized, "base");
        r.acc_target = get(e.accuracy_normalized, "target");
        r.acc_raw_base = get(e.accuracy_raw, "base");
        r.acc_raw_target = get(e.accuracy_raw, "target");
        rep.rows.push_back(r);
    }
    const auto& a = rep.rows.front();
    const auto& b = rep.rows.back();
    rep.target_ppl_reduction = 1.0 - b.ppl_target / a.ppl_target;
    rep.base_ppl_increase = b.ppl_base / a.ppl_base - 1.0;
    return rep;
}

inline std::vector<EvalReport> load_eval_reports(const fs::path& work_dir) {
    std::vector<EvalReport> out;
    for (int s = 0; s <= kFinalStage; ++s) {
        auto p = work_dir / WorkPaths::eval_report(s);
        if (fs::exists(p)) out.push_back(EvalReport::from_json(nlohmann::json::parse(read_file(p))));
    }
    return out;
}

/// Report thresholds recorded by the run that produced work_dir.
inline EvalConfig eval_config_of(const fs::path& work_dir) {
    EvalConfig ec;
    auto p = work_dir / "config.json";
    if (!fs::exists(p)) return ec;
    auto j = nlohmann::json::parse(read_file(p));
    if (j.contains("eval")) {
        detail::read(j.at("eval"), "target_ppl_reduction_min", ec.target_ppl_reduction_min);
        detail::read(j.at("eval"), "base_ppl_increase_max", ec.base_ppl_increase_max);
    }
    return ec;
}

/// Builds the comparative report from the evaluations stored in work_dir.
inline ComparativeReport cmd_report(const fs::path& work_dir) {
    require(fs::exists(work_dir), "report: work dir " + work_dir.string() + " does not exist");
    auto evals = load_eval_reports(work_dir);
    require(!evals.empty(), "report: no evaluations found in " + work_dir.string());
    auto rep = make_report(evals, eval_config_of(work_dir));
    write_file_atomic(work_dir / WorkPaths::report_csv(), rep.csv());
    write_file_atomic(work_dir / WorkPaths::report_txt(), rep.text());
    return rep;
}

// ---------------------------------------------------------------------------
// Orchestration

class Logger {
public:
    explicit Logger(std::ostream* out = nullptr) : out_(out) {}
    template <class... A>
    void operator()(const A&... parts) const {
        if (!out_) return;
        ((*out_) << ... << parts) << std::endl;
    }
    bool enabled() const { return out_ != nullptr; }

private:
    std::ostream* out_;
};

namespace detail {

inline std::string key_of(const std::string& step, const nlohmann::json& inputs) {
    return sha256_hex(step + "\n" + inputs.dump());
}

template <class F>
auto run_step(const std::string& name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ValidationError& e) {
        throw ValidationError(name + ": " + e.what());
    } catch (const StepError&) {
        throw;
    } catch (const std::exception& e) {
        throw StepError(name, e.what());
    }
}

inline std::vector<std::string> checkpoint_files(const std::string& dir) {
    return {dir + "/" + kCheckpointManifest, dir + "/" + kCheckpointBlob};
}

} // namespace detail

struct RunOutcome {
    nlohmann::json manifest;
    ComparativeReport report;
    /// Steps that were executed rather than reused.
    std::vector<std::string> executed;
};

inline RunOutcome cmd_run_all(const PipelineConfig& cfg, std::ostream* log_stream = nullptr) {
    cfg.validate();
    Logger log(log_stream);
    const fs::path root(cfg.work_dir);
    fs::create_directories(root);
    RunManifest man(root);
    man.set_config_hash(cfg.hash());
    write_file_atomic(root / "config.json", cfg.to_json().dump(2) + "\n");
    RunOutcome outcome;

    auto progress = [&](const std::string& what) -> StepCallback {
        if (!log.enabled()) return {};
        return [&log, what](const LossRecord& r) {
            if (r.step % 25 == 0 || r.stop != StopReason::None)
                log("  ", what, " step ", r.step, " loss ", r.loss, r.stop != StopReason::None ? " " : "",
                    to_string(r.stop));
        };
    };
    auto execute = [&](const std::string& name, const std::string& key, auto&& body) {
        if (man.fresh(name, key)) {
            log("[", name, "] reused");
            return;
        }
        log("[", name, "] running");
        outcome.executed.push_back(name);
        detail::run_step(name, body);
    };

    // corpus
    nlohmann::json corpus_in = {{"seed", cfg.seed}, {"synthetic", cfg.synthetic.to_json()}};
    if (!cfg.corpus_path.empty()) corpus_in = {{"corpus_sha256", sha256_file(cfg.resolve(cfg.corpus_path))}};
    const auto k_corpus = detail::key_of("corpus", corpus_in);
    execute("corpus", k_corpus, [&] {
        auto docs = make_corpus(cfg);
        write_jsonl(root / WorkPaths::raw_corpus(), docs);
        man.record("corpus", k_corpus, {WorkPaths::raw_corpus()}, {{"documents", docs.size()}});
    });

    // filters + split
    const auto k_filter = detail::key_of("filter", {k_corpus, cfg.filters.to_json(), cfg.eval.docs_per_lang});
    execute("filter", k_filter, [&] {
        auto docs = read_jsonl(root / WorkPaths::raw_corpus());
        auto r = run_quality_filters(docs, cfg.filters);
        auto split = split_corpus(r.kept, cfg.eval.docs_per_lang);
        write_jsonl(root / WorkPaths::filtered_corpus(), r.kept);
        write_file_atomic(root / WorkPaths::filter_report(), r.report.to_json().dump(2) + "\n");
        write_jsonl(root / WorkPaths::train_split(), split.train);
        write_jsonl(root / WorkPaths::eval_split(), split.eval);
        man.record("filter", k_filter,
                   {WorkPaths::filtered_corpus(), WorkPaths::filter_report(), WorkPaths::train_split(),
                    WorkPaths::eval_split()});
    });
    const auto train = read_jsonl(root / WorkPaths::train_split());
    const auto eval_docs = read_jsonl(root / WorkPaths::eval_split());

    // base tokenizer
    nlohmann::json tok_cfg = cfg.tokenizer.to_json();
    const auto k_tok = detail::key_of("tokenizer_base", {k_filter, tok_cfg.at("base_vocab_size")});
    execute("tokenizer_base", k_tok, [&] {
        auto tok = train_base_tokenizer(train, cfg.tokenizer);
        tok.save(root / WorkPaths::base_tokenizer());
        man.record("tokenizer_base", k_tok, {WorkPaths::base_tokenizer()}, {{"tokenizer_hash", tok.hash()}});
    });
    const auto base_tok = TokenizerModel::load(root / WorkPaths::base_tokenizer());

    // base model
    const auto k_pre = detail::key_of(
        "pretrain", {k_tok, cfg.model.to_json(), cfg.pretrain.to_json(), cfg.training.adamw.to_json()});
    execute("pretrain", k_pre, [&] {
        auto res = pretrain_base_model(base_tok, train, cfg, progress("pretrain"));
        save_checkpoint(root / WorkPaths::base_checkpoint(), res.params, CheckpointInfo{base_tok.hash(), -1, res.steps, {}});
        write_file_atomic(root / WorkPaths::pretrain_log(), loss_log_csv(res.log));
        auto files = detail::checkpoint_files(WorkPaths::base_checkpoint());
        files.push_back(WorkPaths::pretrain_log());
        man.record("pretrain", k_pre, files, {{"steps", res.steps}, {"final_loss", res.log.back().loss}});
    });

    // expanded tokenizer
    nlohmann::json curation = nlohmann::json::object();
    for (const auto& f : {cfg.tokenizer.allowlist_file, cfg.tokenizer.blocklist_file})
        if (!f.empty()) curation[f] = sha256_file(cfg.resolve(f));
    const auto k_exp = detail::key_of("tokenizer_expand", {k_tok, tok_cfg, curation});
    execute("tokenizer_expand", k_exp, [&] {
        auto tok = expand_tokenizer(base_tok, train, cfg.tokenizer, cfg);
        tok.save(root / WorkPaths::expanded_tokenizer());
        man.record("tokenizer_expand", k_exp, {WorkPaths::expanded_tokenizer()},
                   {{"tokenizer_hash", tok.hash()}, {"added_tokens", tok.added_tokens().size()}});
    });
    const auto tok = TokenizerModel::load(root / WorkPaths::expanded_tokenizer());

    // stage 0: embedding expansion
    std::vector<std::string> stage_keys(kFinalStage + 1);
    stage_keys[0] = detail::key_of("stage0", {k_pre, k_exp});
    execute("stage0", stage_keys[0], [&] {
        auto base = load_checkpoint<Real>(root / WorkPaths::base_checkpoint());
        auto decomps = decompositions(tok);
        auto params = expand_params(base.params, base_tok.vocab_size(), decomps);
        save_checkpoint(root / WorkPaths::stage_checkpoint(0), params, CheckpointInfo{tok.hash(), 0, 0, decomps});
        man.record("stage0", stage_keys[0], detail::checkpoint_files(WorkPaths::stage_checkpoint(0)));
    });

    // stages
    std::vector<std::string> texts;
    auto stage_data = [&]() -> const std::vector<std::string>& {
        if (texts.empty()) texts = stage_texts(tok, train, cfg);
        return texts;
    };
    const auto data_cfg =
        nlohmann::json{cfg.filters.min_new_token_ratio, cfg.training.base_mix, cfg.training.max_total_steps};
    int used_steps = 0;
    for (StagePlan plan : cfg.stages) {
        const int s = plan.stage_id;
        const auto name = "stage" + std::to_string(s);
        stage_keys[static_cast<std::size_t>(s)] =
            detail::key_of(name, {stage_keys[static_cast<std::size_t>(s - 1)], plan.to_json(),
                                  cfg.training.settings().to_json(), data_cfg});
        const auto& key = stage_keys[static_cast<std::size_t>(s)];
        const int remaining = cfg.training.max_total_steps - used_steps;
        if (cfg.training.max_total_steps > 0 && remaining < plan.max_steps) plan.max_steps = std::max(remaining, 0);
        execute(name, key, [&] {
            auto prev = load_checkpoint<Real>(root / WorkPaths::stage_checkpoint(s - 1));
            StageResult<Real> res;
            if (plan.max_steps > 0) {
                res = train_one_stage(std::move(prev.params), tok, stage_data(), plan, cfg, progress(name));
            } else {
                res.params = std::move(prev.params);
                res.stop = StopReason::Cap;
            }
            save_checkpoint(root / WorkPaths::stage_checkpoint(s), res.params,
                            CheckpointInfo{tok.hash(), s, res.steps, prev.info.decompositions});
            write_file_atomic(root / WorkPaths::stage_log(s), loss_log_csv(res.log));
            auto files = detail::checkpoint_files(WorkPaths::stage_checkpoint(s));
            files.push_back(WorkPaths::stage_log(s));
            nlohmann::json extra{{"steps", res.steps}, {"stop_reason", to_string(res.stop)}};
            if (!res.log.empty()) extra["final_loss"] = res.log.back().loss;
            man.record(name, key, files, extra);
        });
        used_steps += man.step(name).at("steps").get<int>();
    }

    // evaluation
    std::optional<EvalSet> eval_set;
    std::optional<EconomyReport> economy;
    auto ensure_eval_inputs = [&] {
        if (eval_set) return;
        eval_set = build_eval_set(cfg, eval_docs);
        for (const auto& [lang, items] : eval_set->choices) write_choice_items(root / WorkPaths::choices(lang), items);
        economy = token_economy_report(base_tok, tok, eval_docs);
        write_file_atomic(root / WorkPaths::economy(), economy->to_json().dump(2) + "\n");
    };
    const int last_stage = cfg.stages.back().stage_id;
    for (int s = 0; s <= last_stage; ++s) {
        const auto name = "eval" + std::to_string(s);
        const auto key = detail::key_of(name, {stage_keys[static_cast<std::size_t>(s)], cfg.eval.to_json()});
        execute(name, key, [&] {
            ensure_eval_inputs();
            auto ck = load_checkpoint<double>(root / WorkPaths::stage_checkpoint(s));
            auto rep = evaluate(ck.params, tok, *eval_set);
            rep.stage = s;
            rep.checkpoint = man.step("stage" + std::to_string(s))
                                 .at("artifacts")
                                 .at(WorkPaths::stage_checkpoint(s) + "/" + kCheckpointBlob);
            rep.seed = cfg.seed;
            rep.economy = *economy;
            rep.validate();
            write_file_atomic(root / WorkPaths::eval_report(s), rep.to_json().dump(2) + "\n");
            std::vector<std::string> files{WorkPaths::eval_report(s), WorkPaths::economy()};
            for (const auto& [lang, _] : eval_set->choices) files.push_back(WorkPaths::choices(lang));
            man.record(name, key, files, {{"perplexity", rep.perplexity}});
        });
    }

    // report
    outcome.report = detail::run_step("report", [&] { return cmd_report(root); });
    man.record("report", detail::key_of("report", {stage_keys[static_cast<std::size_t>(last_stage)]}),
               {WorkPaths::report_csv(), WorkPaths::report_txt()});
    outcome.manifest = man.json();
    return outcome;
}

/// Runs exactly one stage on a checkpoint from the previous stage.
inline nlohmann::json cmd_stage(const PipelineConfig& cfg, int stage_id, const fs::path& from_checkpoint,
                                const fs::path& out_dir, std::ostream* log_stream = nullptr) {
    require(stage_id >= 1 && stage_id <= kFinalStage, "stage id must be in 1..7");
    const fs::path root(cfg.work_dir);
    auto info = read_checkpoint_manifest(from_checkpoint);
    const int have = info.at("stage_id").get<int>();
    if (have != stage_id - 1)
        throw ValidationError("stage order: stage " + std::to_string(stage_id) + " needs a stage " +
                              std::to_string(stage_id - 1) + " checkpoint, got stage " + std::to_string(have));
    auto tok_path = root / WorkPaths::expanded_tokenizer();
    require(fs::exists(tok_path), "no expanded tokenizer at " + tok_path.string());
    auto tok = TokenizerModel::load(tok_path);
    if (info.at("tokenizer_hash").get<std::string>() != tok.hash())
        throw ValidationError("tokenizer hash mismatch: checkpoint was built with a different tokenizer than " +
                              tok_path.string());
    auto ck = load_checkpoint<Real>(from_checkpoint);

    StagePlan plan = StagePlan::for_stage(stage_id, cfg.training.max_global_steps, cfg.training.stage_lr());
    for (const auto& p : cfg.stages)
        if (p.stage_id == stage_id) plan = p;
    auto train = read_jsonl(root / WorkPaths::train_split());
    Logger log(log_stream);
    StepCallback cb;
    if (log.enabled())
        cb = [&log](const LossRecord& r) {
            if (r.step % 25 == 0 || r.stop != StopReason::None) log("  step ", r.step, " loss ", r.loss);
        };
    auto res = detail::run_step("stage" + std::to_string(stage_id), [&] {
        return train_one_stage(std::move(ck.params), tok, stage_texts(tok, train, cfg), plan, cfg, cb);
    });
    auto m = save_checkpoint(out_dir, res.params, CheckpointInfo{tok.hash(), stage_id, res.steps, ck.info.decompositions});
    write_file_atomic(out_dir / "loss.csv", loss_log_csv(res.log));
    return {{"stage", stage_id},
            {"checkpoint", out_dir.string()},
            {"blob_sha256", m.at("blob_sha256")},
            {"steps", res.steps},
            {"stop_reason", to_string(res.stop)}};
}

} // namespace eeve
