#pragma once

// The stage schedule: which parameter groups train in which stage.

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "eeve/error.hpp"
#include "eeve/model.hpp"
#include "eeve/optim.hpp"

namespace eeve {

inline constexpr int kFinalStage = 7;

struct FreezeMask {
    std::array<bool, kAllGroups.size()> trainable{};

    bool is_trainable(ParamGroup g) const { return trainable[static_cast<std::size_t>(g)]; }
    FreezeMask& set(ParamGroup g, bool on = true) {
        trainable[static_cast<std::size_t>(g)] = on;
        return *this;
    }
    bool any() const {
        for (bool t : trainable)
            if (t) return true;
        return false;
    }
    bool output_only() const {
        return any() && !is_trainable(ParamGroup::InputEmbedOld) && !is_trainable(ParamGroup::InputEmbedNew) &&
               !is_trainable(ParamGroup::Internal);
    }

    static FreezeMask none() { return {}; }
    static FreezeMask all() {
        FreezeMask m;
        m.trainable.fill(true);
        return m;
    }

    nlohmann::json to_json() const {
        auto arr = nlohmann::json::array();
        for (auto g : kAllGroups)
            if (is_trainable(g)) arr.push_back(to_string(g));
        return arr;
    }

    friend bool operator==(const FreezeMask&, const FreezeMask&) = default;
};

/// 0: nothing (evaluation baseline); 1: new input rows; 2: new output rows;
/// 3: new input + new output; 4: all output rows; 5: new input + all output;
/// 6: everything; 7: internal layers only.
inline FreezeMask mask_for(int stage_id) {
    using G = ParamGroup;
    FreezeMask m;
    switch (stage_id) {
    case 0: break;
    case 1: m.set(G::InputEmbedNew); break;
    case 2: m.set(G::OutputEmbedNew); break;
    case 3: m.set(G::InputEmbedNew).set(G::OutputEmbedNew); break;
    case 4: m.set(G::OutputEmbedOld).set(G::OutputEmbedNew); break;
    case 5: m.set(G::InputEmbedNew).set(G::OutputEmbedOld).set(G::OutputEmbedNew); break;
    case 6: m = FreezeMask::all(); break;
    case 7: m.set(G::Internal); break;
    default: throw ValidationError("stage id " + std::to_string(stage_id) + " out of range 0..7");
    }
    return m;
}

/// Flat index ranges trainable under `mask`, in layout order.
inline std::vector<IndexRange> trainable_ranges(const ModelConfig& cfg, std::size_t base_size, const FreezeMask& mask) {
    std::vector<IndexRange> out;
    for (const auto& r : group_ranges(cfg, base_size))
        if (mask.is_trainable(r.group) && r.end > r.begin) out.push_back({r.begin, r.end});
    return out;
}

template <class T>
std::vector<IndexRange> trainable_ranges(const ModelParams<T>& p, const FreezeMask& mask) {
    return trainable_ranges(p.config, p.base_size, mask);
}

/// Zeroes the gradients of frozen groups; trainable entries are untouched.
template <class T>
void apply_mask(Gradients<T>& grads, const ModelParams<T>& p, const FreezeMask& mask) {
    require(grads.data.size() == p.data.size(), "apply_mask: gradient shape mismatch");
    for (const auto& r : p.groups())
        if (!mask.is_trainable(r.group))
            std::fill(grads.data.begin() + static_cast<std::ptrdiff_t>(r.begin),
                      grads.data.begin() + static_cast<std::ptrdiff_t>(r.end), T(0));
}

/// Low-rank adapter settings for attention projections.
struct AdapterSettings {
    int rank = 4;
    double alpha = 8.0;

    double scale() const { return alpha / rank; }
    nlohmann::json to_json() const { return {{"rank", rank}, {"alpha", alpha}}; }
    static AdapterSettings from_json(const nlohmann::json& j) {
        AdapterSettings s;
        if (j.contains("rank")) s.rank = j.at("rank");
        if (j.contains("alpha")) s.alpha = j.at("alpha");
        return s;
    }
};

struct StagePlan {
    int stage_id = 1;
    FreezeMask mask = mask_for(1);
    int max_steps = 400;
    double lr = 4e-5;
    ConvergenceRule convergence;
    bool use_low_rank_adapters = false;
    AdapterSettings adapters;

    /// Plan with the stage's canonical mask.
    static StagePlan for_stage(int stage_id, int max_steps = 400, double lr = 4e-5) {
        StagePlan p;
        p.stage_id = stage_id;
        p.mask = mask_for(stage_id);
        p.max_steps = max_steps;
        p.lr = lr;
        p.convergence.max_steps = max_steps;
        return p;
    }

    void validate() const {
        require(stage_id >= 0 && stage_id <= kFinalStage, "stage plan: stage_id out of range");
        require(mask == mask_for(stage_id), "stage plan: mask differs from stage " + std::to_string(stage_id));
        if (stage_id >= 1) {
            require(max_steps >= 1, "stage plan: max_steps must be >= 1");
            require(lr >= 0.0, "stage plan: negative lr");
            ConvergenceRule r = convergence;
            r.max_steps = max_steps;
            r.validate();
        }
        require(!use_low_rank_adapters || stage_id == 6, "stage plan: adapters are only used in stage 6");
        require(adapters.rank >= 1, "stage plan: adapter rank must be >= 1");
    }

    nlohmann::json to_json() const {
        return {{"stage_id", stage_id},
                {"trainable", mask.to_json()},
                {"max_steps", max_steps},
                {"lr", lr},
                {"convergence", convergence.to_json()},
                {"use_low_rank_adapters", use_low_rank_adapters},
                {"adapters", adapters.to_json()}};
    }

    static StagePlan from_json(const nlohmann::json& j) {
        StagePlan p = for_stage(j.at("stage_id").get<int>());
        if (j.contains("max_steps")) p.max_steps = j.at("max_steps");
        if (j.contains("lr")) p.lr = j.at("lr");
        if (j.contains("convergence")) p.convergence = ConvergenceRule::from_json(j.at("convergence"));
        p.convergence.max_steps = p.max_steps;
        if (j.contains("use_low_rank_adapters")) p.use_low_rank_adapters = j.at("use_low_rank_adapters");
        if (j.contains("adapters")) p.adapters = AdapterSettings::from_json(j.at("adapters"));
        return p;
    }
};

/// Stage ids strictly increasing and each plan valid.
inline void validate_plans(std::span<const StagePlan> plans) {
    for (std::size_t i = 0; i < plans.size(); ++i) {
        plans[i].validate();
        if (i) require(plans[i].stage_id > plans[i - 1].stage_id, "stage plans: ids must be strictly increasing");
    }
}

} // namespace eeve
