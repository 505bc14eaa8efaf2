#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "eeve/corpus.hpp"
#include "eeve/embed_init.hpp"
#include "eeve/tokenizer.hpp"
#include "oracles.hpp"

using namespace eeve;
using namespace eeve::testing;

namespace {

ModelParams<double> unit_rows_model() {
    auto cfg = tiny_config(257);
    auto p = random_params(cfg, 3);
    for (std::size_t id = 0; id < 2; ++id) {
        auto row = p.tok_row(id);
        std::fill(row.begin(), row.end(), 0.0);
        row[id] = 1.0;
    }
    return p;
}

} // namespace

TEST_CASE("new input row is the mean of its subword rows") {
    auto p = unit_rows_model();
    std::vector<SubwordDecomposition> d{{257, {0, 1}}};
    auto q = expand_params(p, 257, std::span<const SubwordDecomposition>(d));
    REQUIRE(q.config.vocab_size == 258);
    CHECK(q.base_size == 257);
    auto row = q.tok_row(257);
    CHECK(row[0] == 0.5);
    CHECK(row[1] == 0.5);
    for (std::size_t i = 2; i < row.size(); ++i) CHECK(row[i] == 0.0);

    auto out_new = q.out_row(257);
    auto out_first = p.out_row(0);
    CHECK(std::equal(out_new.begin(), out_new.end(), out_first.begin()));
}

TEST_CASE("single-part decomposition copies the row") {
    auto p = random_params(tiny_config(257), 4);
    std::vector<SubwordDecomposition> d{{257, {42}}};
    auto q = expand_params(p, 257, std::span<const SubwordDecomposition>(d));
    auto a = q.tok_row(257);
    auto b = p.tok_row(42);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
}

TEST_CASE("old rows and internal tensors are copied bit for bit") {
    auto p = random_params(tiny_config(260), 5);
    std::vector<SubwordDecomposition> d{{260, {1, 2, 3}}, {261, {7, 259}}};
    auto q = expand_params(p, 260, std::span<const SubwordDecomposition>(d));
    for (const auto& t : p.layout.tensors()) {
        auto src = p.tensor(t.name);
        auto dst = q.tensor(t.name);
        if (t.name == "tok_emb" || t.name == "out_emb") {
            CHECK(std::equal(src.begin(), src.end(), dst.begin()));
            CHECK(dst.size() == src.size() + 2 * p.d_model());
        } else {
            CHECK(std::equal(src.begin(), src.end(), dst.begin(), dst.end()));
        }
    }
}

TEST_CASE("expand_params rejects bad decompositions") {
    auto p = random_params(tiny_config(257), 6);
    auto run = [&](std::vector<SubwordDecomposition> d, std::size_t base = 257) {
        return expand_params(p, base, std::span<const SubwordDecomposition>(d));
    };
    CHECK_THROWS_AS(run({{257, {}}}), ValidationError);
    CHECK_THROWS_AS(run({{257, {1}}, {257, {2}}}), ValidationError);
    CHECK_THROWS_AS(run({{258, {1}}}), ValidationError);
    CHECK_THROWS_AS(run({{257, {300}}}), ValidationError);
    CHECK_THROWS_AS(run({{257, {1}}}, 256), ValidationError);
    auto empty = run({});
    CHECK(empty == p);
}

TEST_CASE("decompose uses the base segmentation") {
    std::vector<std::string> texts{"ab ab ab abab", "ab ba ab"};
    auto tok = train_base(texts, 258);
    auto d = decompose(tok, "abab", 999);
    CHECK(d.new_token == 999);
    CHECK(d.parts == tok.encode_base("abab"));
    CHECK_THROWS_AS(decompose(tok, ""), ValidationError);
}

TEST_CASE("decomposition JSON round trip") {
    std::vector<SubwordDecomposition> d{{300, {1, 2}}, {301, {5}}};
    auto back = decompositions_from_json(decompositions_to_json(std::span<const SubwordDecomposition>(d)));
    CHECK(back == d);
}

TEST_CASE("new tokens twin their first subword's logits") {
    SyntheticParams sp;
    sp.base_docs = 40;
    sp.target_docs = 40;
    auto docs = generate_synthetic_corpus(11, sp);
    auto base_texts = texts_of(select_lang(docs, Lang::Base));
    auto target_texts = texts_of(select_lang(docs, Lang::Target));
    auto tok = train_base(base_texts, 300);
    auto expanded = expand(tok, target_texts, 2, 20);
    REQUIRE(expanded.added_tokens().size() > 0);
    auto decomps = decompositions(expanded);

    auto cfg = tiny_config(tok.vocab_size());
    auto p = random_params(cfg, 9);
    auto q = expand_params(p, tok.vocab_size(), std::span<const SubwordDecomposition>(decomps));

    std::mt19937_64 rng(1);
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
        auto ids = random_ids(rng, 8, q.config.vocab_size);
        auto logits = forward(q, ids);
        for (std::size_t t = 0; t < logits.rows; ++t)
            for (const auto& d : decomps)
                worst = std::max(worst, std::abs(logits(t, d.new_token) - logits(t, d.parts.front())));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("random scheme leaves base rows intact") {
    auto p = random_params(tiny_config(257), 7);
    std::vector<SubwordDecomposition> d{{257, {0, 1}}};
    auto q = expand_params(p, 257, std::span<const SubwordDecomposition>(d), InitScheme::Random, 1, 0.02);
    auto a = q.tok_row(0);
    auto b = p.tok_row(0);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
    auto n = q.tok_row(257);
    double norm = 0;
    for (auto v : n) norm += v * v;
    CHECK(norm > 0);
}
