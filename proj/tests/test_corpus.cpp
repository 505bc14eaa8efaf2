#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "eeve/corpus.hpp"

using namespace eeve;

namespace {

Document doc(std::string id, std::string text, Lang lang = Lang::Base) {
    return {std::move(id), std::move(text), lang, nlohmann::json::object()};
}

std::set<std::string> ids_of(const std::vector<Document>& docs) {
    std::set<std::string> out;
    for (const auto& d : docs) out.insert(d.id);
    return out;
}

std::set<std::string> intersect(const std::set<std::string>& a, const std::set<std::string>& b) {
    std::set<std::string> out;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::inserter(out, out.end()));
    return out;
}

} // namespace

TEST_CASE("synthetic corpus is deterministic and tagged") {
    SyntheticParams p;
    p.base_docs = 20;
    p.target_docs = 20;
    p.noise_docs = 8;
    auto a = generate_synthetic_corpus(5, p);
    auto b = generate_synthetic_corpus(5, p);
    CHECK(a == b);
    CHECK(a != generate_synthetic_corpus(6, p));
    CHECK(a.size() == 48);
    CHECK(select_lang(a, Lang::Target).size() == 20);
    std::set<std::string> ids;
    for (const auto& d : a) CHECK(ids.insert(d.id).second);
}

TEST_CASE("synthetic corpus rejects overlapping alphabets") {
    SyntheticParams p;
    p.target_alphabet = {"x", "\xea\xb0\x80"};
    CHECK_THROWS_AS(generate_synthetic_corpus(1, p), ValidationError);
}

TEST_CASE("single-morpheme inventory gives repetitive target words") {
    SyntheticParams p;
    p.base_docs = 0;
    p.target_docs = 30;
    p.morphemes = 1;
    auto docs = generate_synthetic_corpus(2, p);
    auto lang = make_language(2, p);
    REQUIRE(lang.morphemes.size() == 1);
    for (const auto& w : lang.target_words) {
        CHECK(w.size() % lang.morphemes[0].size() == 0);
        for (std::size_t i = 0; i < w.size(); i += lang.morphemes[0].size())
            CHECK(w.substr(i, lang.morphemes[0].size()) == lang.morphemes[0]);
    }
    auto expanded = expand(TokenizerModel{}, texts_of(docs), 2, 64);
    // At most one token per word length (2..5 morphemes) plus partial runs.
    CHECK(expanded.added_tokens().size() <= 12);
}

TEST_CASE("Zipfian morphemes: top-ranked morphemes dominate the counts") {
    SyntheticParams p;
    p.base_docs = 0;
    p.target_docs = 300;
    p.morphemes = 50;
    p.morpheme_zipf = 1.0;
    auto lang = make_language(9, p);
    auto docs = generate_synthetic_corpus(9, p);
    // Frequency of morphemes in the generated corpus via the latent parts.
    std::vector<std::size_t> counts(p.morphemes, 0);
    std::map<std::string, std::size_t> word_index;
    for (std::size_t i = 0; i < lang.target_words.size(); ++i) word_index.emplace(lang.target_words[i], i);
    for (const auto& d : docs)
        for (auto w : split_words(d.text))
            for (auto m : lang.target_parts.at(word_index.at(std::string(w)))) ++counts[m];
    std::size_t head = counts[0] + counts[1] + counts[2] + counts[3] + counts[4];
    std::size_t tail = 0;
    for (std::size_t k = 45; k < 50; ++k) tail += counts[k];
    CHECK(head > 5 * tail);
}

TEST_CASE("character n-gram perplexity scorer") {
    std::vector<std::string> seed = {"the cat sat on the mat and the dog sat on the log"};
    CharNgramModel lm(5, 0.1);
    CHECK_THROWS_AS(lm.perplexity("x"), ValidationError);
    lm.train(seed);
    double in_dist = lm.perplexity(seed[0]);

    std::mt19937_64 rng(1);
    std::string noise(400, '\0');
    for (auto& c : noise) c = static_cast<char>(std::uniform_int_distribution<int>(0, 255)(rng));
    double random_ppl = lm.perplexity(noise);
    // Unseen contexts fall back to the uniform 1/256.
    CHECK(random_ppl > 200.0);
    CHECK(random_ppl < 300.0);
    CHECK(in_dist < 0.1 * random_ppl);
    CHECK(std::isinf(lm.perplexity("")));
}

TEST_CASE("filter_perplexity") {
    CharNgramModel lm;
    std::vector<std::string> seed = {"the cat sat on the mat"};
    lm.train(seed);
    std::vector<Document> docs = {doc("a", "the cat sat on the mat"), doc("b", "QZ#@!x%%^&"), doc("c", "")};
    auto r = filter_perplexity(docs, lm, 50.0);
    CHECK(ids_of(r.kept) == std::set<std::string>{"a"});
    CHECK(r.report.kept + r.report.total_dropped() == 3);
    CHECK(r.report.thresholds["perplexity.max_ppl"] == 50.0);
    CHECK_THROWS_AS(filter_perplexity(docs, CharNgramModel{}, 10.0), ValidationError);
    CHECK_THROWS_AS(filter_perplexity(docs, lm, 1.0), ValidationError);
}

TEST_CASE("duplicate n-gram ratio matches enumeration") {
    // "abc abc abc abc": 13 character 3-grams, 4 distinct.
    std::string text = "abc abc abc abc";
    std::set<std::string> distinct;
    for (std::size_t i = 0; i + 3 <= text.size(); ++i) distinct.insert(text.substr(i, 3));
    double oracle = 1.0 - static_cast<double>(distinct.size()) / 13.0;
    CHECK(distinct.size() == 4);
    CHECK(duplicate_ngram_ratio(text, 3) == Catch::Approx(oracle).epsilon(1e-15));
    CHECK(duplicate_ngram_ratio("abcdefg", 3) == 0.0);
    // Multi-byte characters count once.
    CHECK(duplicate_ngram_ratio("\xea\xb0\x80\xea\xb0\x80", 2) == 0.0);
}

TEST_CASE("filter_repetition degenerate rules") {
    std::vector<Document> docs = {doc("rep", "abc abc abc abc"), doc("ok", "abcdefghij"), doc("short", "a"),
                                  doc("empty", "")};
    auto r = filter_repetition(docs, 3, 0.3);
    CHECK(ids_of(r.kept) == std::set<std::string>{"ok", "short"});
    CHECK(r.report.dropped.at("repetition") == 2);
    CHECK_THROWS_AS(filter_repetition(docs, 0, 0.3), ValidationError);
}

TEST_CASE("filter_stopword band") {
    std::set<std::string, std::less<>> stop = {"the", "a", "on"};
    std::vector<Document> docs = {doc("all", "the a on the"), doc("none", "cat dog mat"),
                                  doc("mixed", "the cat sat on a mat"), doc("empty", "")};
    CHECK(stopword_rate("the a on the", stop) == 1.0);
    CHECK(stopword_rate("cat dog mat", stop) == 0.0);
    CHECK(stopword_rate("the cat sat on a mat", stop) == 0.5);

    auto high = filter_stopword(docs, stop, 0.0, 0.8);
    CHECK(!ids_of(high.kept).count("all"));
    auto low = filter_stopword(docs, stop, 0.05, 1.0);
    CHECK(!ids_of(low.kept).count("none"));
    CHECK(!ids_of(low.kept).count("empty"));
    auto identity = filter_stopword(docs, stop, 0.0, 1.0);
    CHECK(identity.kept == docs);

    CHECK_THROWS_AS(filter_stopword(docs, {}, 0.0, 1.0), ValidationError);
    CHECK_THROWS_AS(filter_stopword(docs, stop, 0.6, 0.5), ValidationError);
}

TEST_CASE("filter_new_token_coverage") {
    TokenizerModel tok({}, {"nal", "kor"});
    std::vector<Document> docs = {doc("none", "abc"), doc("all", "nalnalnal"), doc("mixed", "nal x"),
                                  doc("empty", "")};
    // Oracle for "nal x": ids = [nal, ' ', 'x'] -> 1 of 3 new.
    auto ids = tok.encode("nal x");
    REQUIRE(ids.size() == 3);
    std::size_t fresh = 0;
    for (auto id : ids) fresh += id >= tok.base_size();
    CHECK(new_token_ratio(tok, "nal x") == Catch::Approx(static_cast<double>(fresh) / 3.0));
    CHECK(new_token_ratio(tok, "nalnalnal") == 1.0);

    auto r = filter_new_token_coverage(docs, tok, 0.3);
    CHECK(ids_of(r.kept) == std::set<std::string>{"all", "mixed"});
    CHECK(filter_new_token_coverage(docs, tok, 0.5).kept.size() == 1);
    CHECK_THROWS_AS(filter_new_token_coverage(docs, TokenizerModel{}, 0.1), ValidationError);
}

TEST_CASE("filters compose as an intersection and reports reconcile") {
    SyntheticParams p;
    p.base_docs = 80;
    p.target_docs = 80;
    p.noise_docs = 40;
    auto docs = generate_synthetic_corpus(21, p);
    CharNgramModel lm;
    auto seed_docs = std::vector<Document>(docs.begin(), docs.begin() + 20);
    auto seed_targets = select_lang(docs, Lang::Target);
    seed_targets.resize(20);
    seed_docs.insert(seed_docs.end(), seed_targets.begin(), seed_targets.end());
    lm.train(texts_of(seed_docs));
    auto stop = frequent_words(select_lang(docs, Lang::Base), 8);
    auto tstop = frequent_words(select_lang(docs, Lang::Target), 8);
    stop.insert(tstop.begin(), tstop.end());

    auto f_ppl = [&](std::span<const Document> d) { return filter_perplexity(d, lm, 12.0); };
    auto f_rep = [&](std::span<const Document> d) { return filter_repetition(d, 4, 0.5); };
    auto f_stop = [&](std::span<const Document> d) { return filter_stopword(d, stop, 1e-9, 1.0); };

    auto a = f_ppl(docs), b = f_rep(docs), c = f_stop(docs);
    for (const auto* r : {&a, &b, &c}) CHECK(r->report.kept + r->report.total_dropped() == docs.size());
    auto expected = intersect(intersect(ids_of(a.kept), ids_of(b.kept)), ids_of(c.kept));

    auto abc = f_stop(f_rep(f_ppl(docs).kept).kept);
    auto cba = f_ppl(f_rep(f_stop(docs).kept).kept);
    CHECK(ids_of(abc.kept) == expected);
    CHECK(ids_of(cba.kept) == expected);
    // Every noise kind is dropped by at least one filter.
    for (const auto& d : docs)
        if (d.lang == Lang::Unknown) CHECK(!expected.count(d.id));

    FilterReport chained = a.report;
    auto b2 = f_rep(a.kept);
    chained.chain(b2.report);
    CHECK(chained.kept + chained.total_dropped() == docs.size());
}

TEST_CASE("jsonl round trip and duplicate ids") {
    auto dir = std::filesystem::temp_directory_path() / "eeve_corpus_test";
    std::filesystem::create_directories(dir);
    std::vector<Document> docs = {doc("x", "hello", Lang::Base), doc("y", "\xea\xb0\x80", Lang::Target)};
    docs[1].meta["source"] = "gen";
    write_jsonl(dir / "c.jsonl", docs);
    CHECK(read_jsonl(dir / "c.jsonl") == docs);

    std::ofstream(dir / "dup.jsonl") << R"({"id":"a","text":"1","lang":"base","meta":{}})" << "\n"
                                     << R"({"id":"a","text":"2","lang":"base","meta":{}})" << "\n";
    CHECK_THROWS_AS(read_jsonl(dir / "dup.jsonl"), ValidationError);
    CHECK_THROWS_AS(read_jsonl(dir / "missing.jsonl"), ValidationError);
}
