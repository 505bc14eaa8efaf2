#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <random>

#include "eeve/eval.hpp"
#include "oracles.hpp"

using namespace eeve;
using namespace eeve::testing;

namespace {

ModelParams<double> uniform_model(std::size_t vocab) {
    auto p = random_params(tiny_config(vocab), 1);
    auto out = p.tensor("out_emb");
    std::fill(out.begin(), out.end(), 0.0);
    return p;
}

// Residual stream carries only e_0, so every position's final hidden state
// points along dimension 0 and logits are out_emb[:, 0] scaled.
ModelParams<double> preferring_model(std::size_t vocab, std::initializer_list<TokenId> liked) {
    auto p = uniform_model(vocab);
    for (const auto& name : {"tok_emb", "pos_emb"}) {
        auto t = p.tensor(name);
        std::fill(t.begin(), t.end(), 0.0);
    }
    for (std::size_t id = 0; id < vocab; ++id) p.tok_row(id)[0] = 1.0;
    for (const auto& lo : p.layout.layers()) {
        std::fill_n(p.data.begin() + static_cast<std::ptrdiff_t>(lo.wo), p.d_model() * p.d_model(), 0.0);
        std::fill_n(p.data.begin() + static_cast<std::ptrdiff_t>(lo.w2),
                    p.d_model() * static_cast<std::size_t>(p.config.d_ff), 0.0);
    }
    auto g = p.tensor("final_norm");
    std::fill(g.begin(), g.end(), 1.0);
    for (auto id : liked) p.out_row(id)[0] = 5.0;
    return p;
}

TokenizerModel byte_tokenizer() { return TokenizerModel({}, {}); }

} // namespace

TEST_CASE("uniform logits give perplexity V") {
    auto p = uniform_model(300);
    auto tok = byte_tokenizer();
    std::vector<std::string> docs{"hello world", "a much longer document that spans several context windows!!"};
    CHECK(std::abs(perplexity(p, tok, std::span<const std::string>(docs)) - 300.0) < 1e-9);
}

TEST_CASE("perplexity matches per-position log-prob summation") {
    auto p = random_params(tiny_config(300), 4);
    auto tok = byte_tokenizer();
    std::vector<std::string> docs{"short", "this one is longer than sixteen bytes for sure", "xy"};
    double nll = 0;
    std::size_t n = 0;
    const std::size_t S = 16;
    for (const auto& d : docs) {
        auto ids = tok.encode(d);
        for (std::size_t j = 0; j + 1 < ids.size(); ++j) {
            std::size_t a = j / S * S;
            auto window = std::span<const TokenId>(ids).subspan(a);
            nll -= prefix_logprob(p, window, j - a);
            ++n;
        }
    }
    double expect = std::exp(nll / static_cast<double>(n));
    double got = perplexity(p, tok, std::span<const std::string>(docs));
    CHECK(std::abs(got - expect) <= 1e-10 * expect);

    auto shuffled = docs;
    std::swap(shuffled[0], shuffled[2]);
    CHECK(std::abs(perplexity(p, tok, std::span<const std::string>(shuffled)) - got) <= 1e-12 * got);
}

TEST_CASE("sharpened model on its own greedy continuation approaches perplexity 1") {
    auto p = random_params(tiny_config(300), 6);
    auto ids = greedy_decode(p, {72}, 12);
    auto sharp = p;
    for (auto& v : sharp.tensor("out_emb")) v *= 200.0;
    auto nll = sequence_nll(sharp, std::span<const TokenId>(ids));
    CHECK(nll.perplexity() < 1.01);
}

TEST_CASE("perplexity errors") {
    auto p = uniform_model(300);
    auto tok = byte_tokenizer();
    std::vector<std::string> none;
    CHECK_THROWS_AS(perplexity(p, tok, std::span<const std::string>(none)), ValidationError);
    std::vector<std::string> one{"x"};
    CHECK_THROWS_AS(perplexity(p, tok, std::span<const std::string>(one)), ValidationError);
}

TEST_CASE("hard-wired model always picks the answer") {
    auto p = preferring_model(300, {' ', 'z'});
    auto tok = byte_tokenizer();
    std::vector<ChoiceItem> items;
    for (std::size_t k = 0; k < 4; ++k) {
        std::vector<std::string> opts{" a", " b", " c"};
        opts.insert(opts.begin() + static_cast<std::ptrdiff_t>(k), " z");
        items.push_back({"context", opts, k});
    }
    CHECK(score_choices(p, tok, std::span<const ChoiceItem>(items), true) == 1.0);
    CHECK(score_choices(p, tok, std::span<const ChoiceItem>(items), false) == 1.0);
}

TEST_CASE("uniform model scores near chance and ties go to the lowest index") {
    auto p = uniform_model(300);
    auto tok = byte_tokenizer();
    std::mt19937_64 rng(12);
    std::uniform_int_distribution<std::size_t> ans(0, 3);
    std::vector<ChoiceItem> items;
    for (int i = 0; i < 400; ++i) items.push_back({"ctx", {" a", " b", " c", " d"}, ans(rng)});
    auto sc = choice_scores(p, tok, std::span<const ChoiceItem>(items));
    for (auto pred : sc.predictions(true)) CHECK(pred == 0);
    double acc = score_choices(p, tok, std::span<const ChoiceItem>(items));
    double sd = std::sqrt(0.25 * 0.75 / 400.0);
    CHECK(std::abs(acc - 0.25) < 4 * sd);

    auto rp = random_params(tiny_config(300), 2);
    std::vector<ChoiceItem> twins{{"ctx", {" same", " same"}, 1}};
    CHECK(score_choices(rp, tok, std::span<const ChoiceItem>(twins)) == 0.0);
}

TEST_CASE("option choice is invariant to monotone rescaling") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> d(-10, 3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> s(5);
        for (auto& v : s) v = d(rng);
        auto t = s;
        for (auto& v : t) v = 3.0 * v + 7.0;
        auto e = s;
        for (auto& v : e) v = std::exp(v / 10.0);
        CHECK(pick_option(s) == pick_option(t));
        CHECK(pick_option(s) == pick_option(e));
    }
}

TEST_CASE("choice scoring errors and truncation") {
    auto p = random_params(tiny_config(300), 8);
    auto tok = byte_tokenizer();
    std::vector<ChoiceItem> empty_opt{{"ctx", {"", " b"}, 0}};
    CHECK_THROWS_AS(score_choices(p, tok, std::span<const ChoiceItem>(empty_opt)), ValidationError);
    std::vector<ChoiceItem> none;
    CHECK_THROWS_AS(score_choices(p, tok, std::span<const ChoiceItem>(none)), ValidationError);
    std::vector<ChoiceItem> bad{{"ctx", {" a", " b"}, 2}};
    CHECK_THROWS_AS(score_choices(p, tok, std::span<const ChoiceItem>(bad)), ValidationError);

    // A long context is cut from the left: only the last tokens matter.
    std::string tail(20, 'q');
    auto ids_long = tok.encode("zzzzzzzzzzzz" + tail);
    auto ids_short = tok.encode(tail);
    auto opt = tok.encode(" a");
    CHECK(option_loglik(p, std::span<const TokenId>(ids_long), std::span<const TokenId>(opt)) ==
          option_loglik(p, std::span<const TokenId>(ids_short), std::span<const TokenId>(opt)));
}

TEST_CASE("choice items file round trip") {
    std::vector<ChoiceItem> items{{"a b", {" c", " d"}, 1}, {"x", {" y", " z", " w"}, 0}};
    auto path = std::filesystem::temp_directory_path() / "eeve_test_choices.jsonl";
    write_choice_items(path, items);
    CHECK(read_choice_items(path) == items);
    std::filesystem::remove(path);
}

TEST_CASE("synthetic choice items use a true successor") {
    SyntheticParams sp;
    auto lang = make_language(5, sp);
    auto items = make_choice_items(lang, sp, Lang::Target, 50, 9);
    REQUIRE(items.size() == 50);
    for (const auto& it : items) {
        CHECK(it.options.size() == 4);
        auto words = split_words(it.context);
        auto last = std::find(lang.target_words.begin(), lang.target_words.end(), words.back()) - lang.target_words.begin();
        CHECK(it.options[it.answer_index] == " " + lang.target_words[lang.successors[last].front()]);
    }
}

TEST_CASE("token economy report") {
    SyntheticParams sp;
    sp.base_docs = 120;
    sp.target_docs = 120;
    auto docs = generate_synthetic_corpus(4, sp);
    auto base_texts = texts_of(select_lang(docs, Lang::Base));
    auto target_docs = select_lang(docs, Lang::Target);
    auto base = train_base(base_texts, 400);
    auto expanded = expand(base, texts_of(target_docs), 2, 150);

    auto rep = token_economy_report(base, expanded, std::span<const Document>(docs));
    CHECK(rep.by_lang.at("base").ratio() == 1.0);
    CHECK(rep.by_lang.at("target").ratio() <= 1.0);
    CHECK(rep.all.docs == docs.size());

    std::size_t b = 0, e = 0;
    for (const auto& d : target_docs) {
        b += base.encode(d.text).size();
        e += expanded.encode(d.text).size();
    }
    CHECK(rep.by_lang.at("target").base_tokens == b);
    CHECK(rep.by_lang.at("target").expanded_tokens == e);
    CHECK(rep.by_lang.at("target").ratio() == static_cast<double>(e) / static_cast<double>(b));
    CHECK(EconomyReport::from_json(rep.to_json()) == rep);

    std::vector<Document> none;
    CHECK_THROWS_AS(token_economy_report(base, expanded, std::span<const Document>(none)), ValidationError);
}

TEST_CASE("eval report JSON") {
    EvalReport r;
    r.stage = 3;
    r.checkpoint = "abc";
    r.seed = 7;
    r.perplexity = {{"base", 12.5}, {"target", 40.0}};
    r.accuracy_normalized = {{"target", 0.5}};
    r.accuracy_raw = {{"target", 0.25}};
    auto back = EvalReport::from_json(r.to_json());
    CHECK(back.to_json() == r.to_json());
    r.perplexity["base"] = 0.5;
    CHECK_THROWS_AS(EvalReport::from_json(r.to_json()), ValidationError);
}

TEST_CASE("options longer than the window are scored blockwise") {
    auto p = random_params(tiny_config(300, 8), 9);
    auto tok = byte_tokenizer();
    auto ctx = tok.encode("abc");
    auto opt = tok.encode(" a rather long option");
    std::vector<TokenId> full(ctx);
    full.insert(full.end(), opt.begin(), opt.end());
    double expect = 0;
    const std::size_t S = 8, half = 4;
    for (std::size_t i = ctx.size(); i < full.size(); i += half) {
        auto end = std::min(full.size(), i + half);
        auto a = end - 1 > S ? end - 1 - S : 0;
        for (std::size_t t = i; t < end; ++t)
            expect += prefix_logprob(p, std::span<const TokenId>(full).subspan(a), t - 1 - a);
    }
    double got = option_loglik(p, std::span<const TokenId>(ctx), std::span<const TokenId>(opt));
    CHECK(std::abs(got - expect) < 1e-10);
}
