#include <catch_amalgamated.hpp>

#include <random>
#include <set>

#include "eeve/stages.hpp"
#include "oracles.hpp"

using namespace eeve;
using namespace eeve::testing;
using G = ParamGroup;

namespace {

std::set<G> groups_of(const FreezeMask& m) {
    std::set<G> out;
    for (auto g : kAllGroups)
        if (m.is_trainable(g)) out.insert(g);
    return out;
}

} // namespace

TEST_CASE("stage masks") {
    CHECK(groups_of(mask_for(0)).empty());
    CHECK(groups_of(mask_for(1)) == std::set<G>{G::InputEmbedNew});
    CHECK(groups_of(mask_for(2)) == std::set<G>{G::OutputEmbedNew});
    CHECK(groups_of(mask_for(3)) == std::set<G>{G::InputEmbedNew, G::OutputEmbedNew});
    CHECK(groups_of(mask_for(4)) == std::set<G>{G::OutputEmbedOld, G::OutputEmbedNew});
    CHECK(groups_of(mask_for(5)) == std::set<G>{G::InputEmbedNew, G::OutputEmbedOld, G::OutputEmbedNew});
    CHECK(groups_of(mask_for(6)).size() == 5);
    CHECK(groups_of(mask_for(7)) == std::set<G>{G::Internal});
    CHECK_THROWS_AS(mask_for(-1), ValidationError);
    CHECK_THROWS_AS(mask_for(8), ValidationError);
}

TEST_CASE("stage index sets compose as unions") {
    ModelParams<float> p(tiny_config(300), 280);
    auto indices = [&](int stage) {
        std::set<std::size_t> out;
        for (auto r : trainable_ranges(p, mask_for(stage)))
            for (auto i = r.begin; i < r.end; ++i) out.insert(i);
        return out;
    };
    auto united = [](std::set<std::size_t> a, const std::set<std::size_t>& b) {
        a.insert(b.begin(), b.end());
        return a;
    };
    CHECK(indices(3) == united(indices(1), indices(2)));
    CHECK(indices(5) == united(indices(3), indices(4)));
    CHECK(indices(6).size() == p.data.size());
    CHECK(indices(0).empty());
    auto last = indices(7);
    for (int s = 1; s <= 5; ++s)
        for (auto i : indices(s)) REQUIRE(last.count(i) == 0);

    CHECK(mask_for(2).output_only());
    CHECK(mask_for(4).output_only());
    CHECK_FALSE(mask_for(3).output_only());
    CHECK_FALSE(mask_for(0).output_only());
}

TEST_CASE("apply_mask zeroes exactly the frozen ranges") {
    auto cfg = tiny_config(300);
    ModelParams<double> p(cfg, 280);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> dist;
    for (int s = 0; s <= 7; ++s) {
        auto mask = mask_for(s);
        Gradients<double> g(p.data.size());
        for (auto& v : g.data) v = dist(rng);
        auto before = g.data;
        apply_mask(g, p, mask);
        for (const auto& r : p.groups()) {
            bool on = mask.is_trainable(r.group);
            for (auto i = r.begin; i < r.end; ++i) REQUIRE(g.data[i] == (on ? before[i] : 0.0));
        }
        std::size_t n = 0;
        for (auto r : trainable_ranges(p, mask)) n += r.size();
        std::size_t expect = 0;
        for (const auto& r : p.groups())
            if (mask.is_trainable(r.group)) expect += r.end - r.begin;
        CHECK(n == expect);
    }
}

TEST_CASE("stage plan validation") {
    auto plan = StagePlan::for_stage(3, 50, 1e-3);
    CHECK_NOTHROW(plan.validate());
    plan.mask = mask_for(4);
    CHECK_THROWS_AS(plan.validate(), ValidationError);

    plan = StagePlan::for_stage(2, 0);
    CHECK_THROWS_AS(plan.validate(), ValidationError);
    CHECK_NOTHROW(StagePlan::for_stage(0, 0).validate());

    plan = StagePlan::for_stage(5);
    plan.use_low_rank_adapters = true;
    CHECK_THROWS_AS(plan.validate(), ValidationError);
    plan = StagePlan::for_stage(6);
    plan.use_low_rank_adapters = true;
    CHECK_NOTHROW(plan.validate());

    std::vector<StagePlan> ok{StagePlan::for_stage(1), StagePlan::for_stage(2), StagePlan::for_stage(7)};
    CHECK_NOTHROW(validate_plans(ok));
    std::vector<StagePlan> bad{StagePlan::for_stage(2), StagePlan::for_stage(1)};
    CHECK_THROWS_AS(validate_plans(bad), ValidationError);
    std::vector<StagePlan> dup{StagePlan::for_stage(2), StagePlan::for_stage(2)};
    CHECK_THROWS_AS(validate_plans(dup), ValidationError);
}

TEST_CASE("stage plan JSON round trip") {
    auto plan = StagePlan::for_stage(6, 123, 2e-4);
    plan.use_low_rank_adapters = true;
    plan.adapters.rank = 2;
    auto back = StagePlan::from_json(plan.to_json());
    CHECK(back.stage_id == 6);
    CHECK(back.max_steps == 123);
    CHECK(back.lr == 2e-4);
    CHECK(back.use_low_rank_adapters);
    CHECK(back.adapters.rank == 2);
    CHECK(back.mask == plan.mask);
    CHECK(back.convergence.max_steps == 123);
    CHECK(plan.to_json().at("trainable").size() == 5);
}
