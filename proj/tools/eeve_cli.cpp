#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "eeve/eeve.hpp"

namespace fs = std::filesystem;
using namespace eeve;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string work_dir;
    bool verbose = false;
};

PipelineConfig load_config(const Globals& g) {
    PipelineConfig cfg = g.config.empty() ? PipelineConfig::from_json(nlohmann::json::object())
                                          : PipelineConfig::load(g.config);
    if (g.seed) cfg.seed = *g.seed;
    if (!g.work_dir.empty()) cfg.work_dir = g.work_dir;
    return cfg;
}

std::string or_default(const std::string& value, const fs::path& fallback) {
    return value.empty() ? fallback.string() : value;
}

std::ostream* log_of(const Globals& g) { return g.verbose ? &std::cerr : nullptr; }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Vocabulary expansion and staged adaptation of a small causal language model"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Pipeline config (JSON)");
    app.add_option("--seed", g.seed, "Override the config seed");
    app.add_option("--work-dir", g.work_dir, "Override the config work directory");
    app.add_flag("-v,--verbose", g.verbose, "Progress on stderr");

    // corpus
    auto* corpus = app.add_subcommand("corpus", "Generate or filter a corpus")->require_subcommand(1);
    std::string gen_out;
    auto* gen = corpus->add_subcommand("gen", "Write the synthetic bilingual corpus as JSONL");
    gen->add_option("--out", gen_out, "Output JSONL");
    std::string filt_in, filt_out, filt_report;
    auto* filt = corpus->add_subcommand("filter", "Apply the perplexity, repetition and stopword filters");
    filt->add_option("--in", filt_in, "Input JSONL")->required();
    filt->add_option("--out", filt_out, "Kept documents");
    filt->add_option("--report", filt_report, "Filter report JSON");

    // tok
    auto* tokc = app.add_subcommand("tok", "Tokenizer training, expansion and statistics")->require_subcommand(1);
    std::string tt_in, tt_out;
    std::optional<std::size_t> tt_vocab;
    auto* tt = tokc->add_subcommand("train", "Train the base BPE tokenizer on base-language documents");
    tt->add_option("--in", tt_in, "Corpus JSONL")->required();
    tt->add_option("--out", tt_out, "Tokenizer file");
    tt->add_option("--vocab-size", tt_vocab, "Base vocabulary size");
    std::string te_base, te_in, te_out, te_allow, te_block;
    std::optional<std::size_t> te_min_freq, te_max_new;
    auto* te = tokc->add_subcommand("expand", "Append frequent target-language tokens");
    te->add_option("--base", te_base, "Base tokenizer file")->required();
    te->add_option("--in", te_in, "Corpus JSONL")->required();
    te->add_option("--out", te_out, "Expanded tokenizer file");
    te->add_option("--min-freq", te_min_freq, "Minimum whole-token count");
    te->add_option("--max-new", te_max_new, "Maximum number of added tokens");
    te->add_option("--allowlist", te_allow, "Tokens to force in (base64, one per line)");
    te->add_option("--blocklist", te_block, "Tokens to exclude (base64, one per line)");
    std::vector<std::string> ts_toks;
    std::string ts_in, ts_out;
    auto* tstats = tokc->add_subcommand("stats", "Per-document token counts as CSV");
    tstats->add_option("--tokenizer", ts_toks, "Tokenizer file (repeatable)")->required();
    tstats->add_option("--in", ts_in, "Corpus JSONL")->required();
    tstats->add_option("--out", ts_out, "CSV output (default stdout)");

    // train
    auto* trainc = app.add_subcommand("train", "Base-model pre-training and single stages")->require_subcommand(1);
    std::string tb_tok, tb_in, tb_out;
    auto* tb = trainc->add_subcommand("base", "Pre-train the base model on base-language documents");
    tb->add_option("--tokenizer", tb_tok, "Base tokenizer file")->required();
    tb->add_option("--in", tb_in, "Corpus JSONL")->required();
    tb->add_option("--out", tb_out, "Checkpoint directory");
    int st_id = 0;
    std::string st_from, st_out;
    auto* tsg = trainc->add_subcommand("stage", "Run one adaptation stage on the previous stage's checkpoint");
    tsg->add_option("--stage", st_id, "Stage id (1..7)")->required();
    tsg->add_option("--from", st_from, "Checkpoint of stage - 1")->required();
    tsg->add_option("--out", st_out, "Output checkpoint directory");

    // eval
    auto* evalc = app.add_subcommand("eval", "Perplexity, multiple choice and token economy")->require_subcommand(1);
    std::string ep_ck, ep_tok, ep_in, ep_lang;
    auto* ep = evalc->add_subcommand("ppl", "Corpus perplexity");
    ep->add_option("--checkpoint", ep_ck, "Checkpoint directory")->required();
    ep->add_option("--tokenizer", ep_tok, "Tokenizer file")->required();
    ep->add_option("--in", ep_in, "Corpus JSONL")->required();
    ep->add_option("--lang", ep_lang, "Only documents of this language (base|target)");
    std::string ec_ck, ec_tok, ec_items;
    bool ec_raw = false;
    auto* ecs = evalc->add_subcommand("choices", "Likelihood-ranked multiple-choice accuracy");
    ecs->add_option("--checkpoint", ec_ck, "Checkpoint directory")->required();
    ecs->add_option("--tokenizer", ec_tok, "Tokenizer file")->required();
    ecs->add_option("--items", ec_items, "Choice items JSONL")->required();
    ecs->add_flag("--raw", ec_raw, "Rank by summed log-likelihood instead of per-token mean");
    std::string ee_base, ee_exp, ee_in;
    auto* ee = evalc->add_subcommand("economy", "Token counts under the base and expanded tokenizers");
    ee->add_option("--base", ee_base, "Base tokenizer file")->required();
    ee->add_option("--expanded", ee_exp, "Expanded tokenizer file")->required();
    ee->add_option("--in", ee_in, "Corpus JSONL")->required();

    // run / report
    auto* runc = app.add_subcommand("run", "Run the pipeline")->require_subcommand(1);
    auto* run_all = runc->add_subcommand("all", "Every step from corpus to report; completed steps are reused");
    auto* report = app.add_subcommand("report", "Comparative report from the evaluations in the work directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const fs::path work = g.work_dir.empty() ? fs::path(load_config(g).work_dir) : fs::path(g.work_dir);

        if (*gen) {
            auto cfg = load_config(g);
            auto docs = make_corpus(cfg);
            auto out = or_default(gen_out, work / WorkPaths::raw_corpus());
            write_jsonl(out, docs);
            std::cout << "wrote " << docs.size() << " documents to " << out << "\n";
        } else if (*filt) {
            auto cfg = load_config(g);
            auto docs = read_jsonl(filt_in);
            auto r = run_quality_filters(docs, cfg.filters);
            write_jsonl(or_default(filt_out, work / WorkPaths::filtered_corpus()), r.kept);
            auto rep = r.report.to_json().dump(2);
            write_file_atomic(or_default(filt_report, work / WorkPaths::filter_report()), rep + "\n");
            std::cout << rep << "\n";
        } else if (*tt) {
            auto cfg = load_config(g);
            if (tt_vocab) cfg.tokenizer.base_vocab_size = *tt_vocab;
            auto tok = train_base_tokenizer(read_jsonl(tt_in), cfg.tokenizer);
            auto out = or_default(tt_out, work / WorkPaths::base_tokenizer());
            tok.save(out);
            std::cout << out << " vocab_size=" << tok.vocab_size() << " sha256=" << tok.hash() << "\n";
        } else if (*te) {
            auto cfg = load_config(g);
            if (te_min_freq) cfg.tokenizer.min_freq = *te_min_freq;
            if (te_max_new) cfg.tokenizer.max_new = *te_max_new;
            if (!te_allow.empty()) cfg.tokenizer.allowlist_file = fs::absolute(te_allow).string();
            if (!te_block.empty()) cfg.tokenizer.blocklist_file = fs::absolute(te_block).string();
            auto base = TokenizerModel::load(te_base);
            auto tok = expand_tokenizer(base, read_jsonl(te_in), cfg.tokenizer, cfg);
            auto out = or_default(te_out, work / WorkPaths::expanded_tokenizer());
            tok.save(out);
            std::cout << out << " added=" << tok.added_tokens().size() << " vocab_size=" << tok.vocab_size()
                      << " sha256=" << tok.hash() << "\n";
        } else if (*tstats) {
            auto docs = read_jsonl(ts_in);
            std::ostringstream csv;
            csv << "tokenizer,doc_id,tokens\n";
            for (const auto& path : ts_toks) {
                auto tok = TokenizerModel::load(path);
                auto name = fs::path(path).stem().string();
                for (const auto& d : docs) csv << name << ',' << d.id << ',' << tok.encode(d.text).size() << '\n';
            }
            if (ts_out.empty())
                std::cout << csv.str();
            else
                write_file_atomic(ts_out, csv.str());
        } else if (*tb) {
            auto cfg = load_config(g);
            auto tok = TokenizerModel::load(tb_tok);
            auto docs = read_jsonl(tb_in);
            StepCallback cb;
            if (g.verbose)
                cb = [](const LossRecord& r) {
                    if (r.step % 25 == 0) std::cerr << "  step " << r.step << " loss " << r.loss << "\n";
                };
            auto res = pretrain_base_model(tok, docs, cfg, cb);
            auto out = fs::path(or_default(tb_out, work / WorkPaths::base_checkpoint()));
            auto m = save_checkpoint(out, res.params, CheckpointInfo{tok.hash(), -1, res.steps, {}});
            write_file_atomic(out / "loss.csv", loss_log_csv(res.log));
            std::cout << out.string() << " steps=" << res.steps << " loss=" << res.log.back().loss
                      << " sha256=" << m.at("blob_sha256").get<std::string>() << "\n";
        } else if (*tsg) {
            auto cfg = load_config(g);
            auto out = or_default(st_out, work / WorkPaths::stage_checkpoint(st_id));
            auto delta = cmd_stage(cfg, st_id, st_from, out, log_of(g));
            std::cout << delta.dump(2) << "\n";
        } else if (*ep) {
            auto ck = load_checkpoint<double>(ep_ck);
            auto tok = TokenizerModel::load(ep_tok);
            auto docs = read_jsonl(ep_in);
            if (!ep_lang.empty()) docs = select_lang(docs, parse_lang(ep_lang));
            auto texts = texts_of(docs);
            std::cout.precision(10);
            std::cout << perplexity(ck.params, tok, std::span<const std::string>(texts)) << "\n";
        } else if (*ecs) {
            auto ck = load_checkpoint<double>(ec_ck);
            auto tok = TokenizerModel::load(ec_tok);
            auto items = read_choice_items(ec_items);
            std::cout << score_choices(ck.params, tok, std::span<const ChoiceItem>(items), !ec_raw) << "\n";
        } else if (*ee) {
            auto base = TokenizerModel::load(ee_base);
            auto exp = TokenizerModel::load(ee_exp);
            auto docs = read_jsonl(ee_in);
            std::cout << token_economy_report(base, exp, docs).to_json().dump(2) << "\n";
        } else if (*run_all) {
            auto cfg = load_config(g);
            auto out = cmd_run_all(cfg, log_of(g));
            std::cout << out.report.text();
            std::cout << "manifest: " << (fs::path(cfg.work_dir) / "manifest.json").string() << " (executed "
                      << out.executed.size() << " steps)\n";
        } else if (*report) {
            auto rep = cmd_report(work);
            std::cout << rep.text();
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const StepError& e) {
        std::cerr << "step failed: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "step failed: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
