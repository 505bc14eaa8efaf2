#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "eeve/model.hpp"
#include "oracles.hpp"

using namespace eeve;
using namespace eeve::testing;

TEST_CASE("config validation") {
    ModelConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    c.d_model = 9;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = tiny_config();
    c.vocab_size = 256;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = tiny_config();
    c.tie_embeddings = true;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    CHECK(ModelConfig::from_json(tiny_config().to_json()) == tiny_config());
}

TEST_CASE("group ranges tile the parameter vector") {
    auto c = tiny_config();
    auto ranges = group_ranges(c, 280);
    ParamLayout layout(c);
    std::vector<int> owner(layout.total(), 0);
    for (const auto& r : ranges)
        for (auto i = r.begin; i < r.end; ++i) ++owner[i];
    for (int o : owner) CHECK(o == 1);
    CHECK(ranges[1].end - ranges[1].begin == 20 * 8);
    CHECK_THROWS_AS(group_ranges(c, 301), ValidationError);
}

TEST_CASE("forward shapes and errors") {
    auto c = tiny_config();
    auto p = random_params(c, 1);
    std::vector<TokenId> one = {5};
    auto logits = forward(p, std::span<const TokenId>(one));
    CHECK(logits.rows == 1);
    CHECK(logits.cols == 300);
    std::vector<TokenId> bad = {300};
    CHECK_THROWS_AS(forward(p, std::span<const TokenId>(bad)), ValidationError);
    std::vector<TokenId> too_long(17, 1);
    CHECK_THROWS_AS(forward(p, std::span<const TokenId>(too_long)), ValidationError);
}

TEST_CASE("causal masking: later tokens never affect earlier logits") {
    auto c = tiny_config();
    auto p = random_params(c, 2);
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        auto ids = random_ids(rng, 16, c.vocab_size);
        auto base = forward(p, std::span<const TokenId>(ids));
        for (std::size_t t = 0; t + 1 < ids.size(); t += 3) {
            auto changed = ids;
            changed[t + 1] = (changed[t + 1] + 17) % 300;
            auto other = forward(p, std::span<const TokenId>(changed));
            for (std::size_t s = 0; s <= t; ++s)
                for (std::size_t j = 0; j < 300; ++j) REQUIRE(other(s, j) == base(s, j));
        }
    }
}

TEST_CASE("degenerate forward with zero internal weights") {
    auto c = tiny_config();
    auto p = random_params(c, 4);
    // Zero all projections and position encodings; keep unit gains.
    for (const auto& lo : p.layout.layers()) {
        for (auto off : {lo.wq, lo.wk, lo.wv, lo.wo}) std::fill_n(p.data.begin() + off, 64, 0.0);
        std::fill_n(p.data.begin() + lo.w1, 16 * 8, 0.0);
        std::fill_n(p.data.begin() + lo.w2, 8 * 16, 0.0);
        std::fill_n(p.data.begin() + lo.attn_norm, 8, 1.0);
        std::fill_n(p.data.begin() + lo.ffn_norm, 8, 1.0);
    }
    auto pos = p.tensor("pos_emb");
    std::fill(pos.begin(), pos.end(), 0.0);

    std::vector<TokenId> ids = {7, 9, 7, 7};
    auto logits = forward(p, std::span<const TokenId>(ids));
    for (std::size_t t = 0; t < ids.size(); ++t) {
        // Hand computation: logits = out_emb . rmsnorm(tok_emb[id]).
        auto x = p.tok_row(ids[t]);
        double ss = 0;
        for (double v : x) ss += v * v;
        double r = std::sqrt(ss / 8 + 1e-5);
        for (std::size_t j = 0; j < 300; ++j) {
            double expect = 0;
            auto w = p.out_row(j);
            for (std::size_t i = 0; i < 8; ++i) expect += w[i] * x[i] / r;
            CHECK(logits(t, j) == Catch::Approx(expect).margin(1e-12));
        }
    }
    for (std::size_t j = 0; j < 300; ++j) {
        CHECK(logits(0, j) == logits(2, j));
        CHECK(logits(2, j) == logits(3, j));
    }
}

TEST_CASE("loss values") {
    Matrix<double> uniform(3, 300);
    std::vector<TokenId> targets = {0, 5, 299};
    CHECK(loss(uniform, std::span<const TokenId>(targets)) == Catch::Approx(std::log(300.0)).epsilon(1e-14));

    Matrix<double> peaked(3, 300);
    for (std::size_t t = 0; t < 3; ++t) peaked(t, targets[t]) = 1000.0;
    CHECK(loss(peaked, std::span<const TokenId>(targets)) < 1e-12);

    std::vector<TokenId> short_targets = {1};
    CHECK_THROWS_AS(loss(uniform, std::span<const TokenId>(short_targets)), ValidationError);

    auto c = tiny_config();
    auto p = random_params(c, 5);
    std::mt19937_64 rng(6);
    auto ids = random_ids(rng, 10, 300);
    auto tg = random_ids(rng, 10, 300);
    auto logits = forward(p, std::span<const TokenId>(ids));
    CHECK(std::abs(loss(logits, std::span<const TokenId>(tg)) - direct_nll(p, std::span<const TokenId>(ids),
                                                                               std::span<const TokenId>(tg))) < 1e-12);
}

TEST_CASE("softmax normalizes at every position") {
    auto c = tiny_config();
    auto p = random_params(c, 8);
    std::mt19937_64 rng(9);
    auto ids = random_ids(rng, 16, 300);
    auto logits = forward(p, std::span<const TokenId>(ids));
    for (std::size_t t = 0; t < logits.rows; ++t) {
        auto lp = log_softmax(logits.row(t));
        double s = 0;
        for (double v : lp) s += std::exp(v);
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("gradients match central finite differences") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto c = tiny_config();
        auto p = random_params(c, 100 + seed);
        std::mt19937_64 rng(seed);
        auto ids = random_ids(rng, 16, 300);
        auto tg = random_ids(rng, 16, 300);
        auto [l, g] = backward(p, std::span<const TokenId>(ids), std::span<const TokenId>(tg));
        auto numeric = central_differences(p.data, [&] {
            return loss(forward(p, std::span<const TokenId>(ids)), std::span<const TokenId>(tg));
        });
        double err = max_relative_error(g.data, numeric);
        INFO("seed " << seed << " max rel err " << err);
        CHECK(err < 1e-4);
        CHECK(l == loss(forward(p, std::span<const TokenId>(ids)), std::span<const TokenId>(tg)));
    }
}

TEST_CASE("unused input rows get exactly zero gradient") {
    auto c = tiny_config();
    auto p = random_params(c, 11);
    std::vector<TokenId> ids = {1, 2, 3, 2};
    std::vector<TokenId> tg = {2, 3, 2, 1};
    auto [l, g] = backward(p, std::span<const TokenId>(ids), std::span<const TokenId>(tg));
    auto D = 8u;
    for (TokenId id = 0; id < 300; ++id) {
        bool used = id >= 1 && id <= 3;
        double norm = 0;
        for (std::size_t i = 0; i < D; ++i) norm += std::abs(g.data[p.layout.tok_emb() + id * D + i]);
        if (used)
            CHECK(norm > 0);
        else
            CHECK(norm == 0);
    }
}

TEST_CASE("head-only backward equals the output-embedding slice of a full backward") {
    auto c = tiny_config();
    auto p = random_params(c, 12);
    std::mt19937_64 rng(13);
    auto ids = random_ids(rng, 12, 300);
    auto tg = random_ids(rng, 12, 300);
    auto full = Gradients<double>::zeros_like(p);
    auto head = Gradients<double>::zeros_like(p);
    double l1 = backward_into(p, std::span<const TokenId>(ids), std::span<const TokenId>(tg), full);
    double l2 = backward_into(p, std::span<const TokenId>(ids), std::span<const TokenId>(tg), head, 1.0,
                              BackwardScope::HeadOnly);
    CHECK(l1 == l2);
    auto out = p.layout.find("out_emb");
    for (std::size_t i = 0; i < p.data.size(); ++i) {
        bool in_head = i >= out.offset && i < out.offset + out.size();
        CHECK(head.data[i] == (in_head ? full.data[i] : 0.0));
    }
}

TEST_CASE("output rows affect logits only, never hidden states") {
    auto c = tiny_config();
    auto p = random_params(c, 14);
    std::vector<TokenId> ids = {4, 8, 15, 16, 23, 42};
    ForwardCache<double> before, after;
    forward(p, std::span<const TokenId>(ids), before);
    for (auto& v : p.out_row(42)) v += 1.0;
    forward(p, std::span<const TokenId>(ids), after);
    CHECK(before.c == after.c);
    CHECK(before.x == after.x);
    bool changed = false;
    for (std::size_t t = 0; t < ids.size(); ++t) changed |= before.logits(t, 42) != after.logits(t, 42);
    CHECK(changed);
}

TEST_CASE("greedy decoding breaks ties toward lower ids") {
    std::vector<double> row = {0.5, 2.0, 2.0, 1.0};
    CHECK(argmax_token(std::span<const double>(row)) == 1);
    auto c = tiny_config();
    auto p = random_params(c, 15);
    auto out = greedy_decode(p, {1, 2}, 5);
    CHECK(out.size() == 7);
    CHECK(greedy_decode(p, {1, 2}, 5) == out);
}

TEST_CASE("float and double agree closely") {
    auto c = tiny_config();
    auto pd = random_params(c, 16);
    auto pf = pd.cast<float>();
    std::vector<TokenId> ids = {3, 1, 4, 1, 5, 9, 2, 6};
    auto ld = forward(pd, std::span<const TokenId>(ids));
    auto lf = forward(pf, std::span<const TokenId>(ids));
    for (std::size_t i = 0; i < ld.data.size(); ++i) CHECK(std::abs(ld.data[i] - lf.data[i]) < 1e-4);
}
