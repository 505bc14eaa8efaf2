#pragma once

// Training loop: fixed-shape example streams, gradient accumulation, masked
// AdamW steps and per-stage stopping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eeve/error.hpp"
#include "eeve/lora.hpp"
#include "eeve/model.hpp"
#include "eeve/optim.hpp"
#include "eeve/stages.hpp"
#include "eeve/tokenizer.hpp"

namespace eeve {

inline constexpr TokenId kDocSeparator = '\n';

/// Packs documents into one token stream (newline-separated) and cuts it into
/// windows of seq_len + 1 tokens with stride seq_len.
inline std::vector<Example> make_examples(const TokenizerModel& tok, std::span<const std::string> texts,
                                          std::size_t seq_len) {
    require(seq_len >= 1, "make_examples: seq_len must be >= 1");
    std::vector<TokenId> stream;
    for (const auto& t : texts) {
        auto ids = tok.encode(t);
        stream.insert(stream.end(), ids.begin(), ids.end());
        stream.push_back(kDocSeparator);
    }
    std::vector<Example> out;
    for (std::size_t start = 0; start + seq_len + 1 <= stream.size(); start += seq_len) {
        Example ex;
        ex.inputs.assign(stream.begin() + static_cast<std::ptrdiff_t>(start),
                         stream.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
        ex.targets.assign(stream.begin() + static_cast<std::ptrdiff_t>(start + 1),
                          stream.begin() + static_cast<std::ptrdiff_t>(start + seq_len + 1));
        out.push_back(std::move(ex));
    }
    require(!out.empty(), "make_examples: corpus too short for one training window");
    return out;
}

/// Endless deterministic stream over a fixed example set, reshuffled every
/// epoch. take(a) then take(b) yields the same examples as take(a + b).
class BatchStream {
public:
    BatchStream(std::vector<Example> examples, std::uint64_t seed, bool shuffle = true)
        : examples_(std::move(examples)), rng_(seed), shuffle_(shuffle) {
        require(!examples_.empty(), "BatchStream: empty data stream");
        order_.resize(examples_.size());
        reshuffle();
    }

    const Example& next() {
        if (pos_ == order_.size()) reshuffle();
        return examples_[order_[pos_++]];
    }

    std::vector<Example> take(std::size_t n) {
        std::vector<Example> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) out.push_back(next());
        return out;
    }

    std::size_t size() const { return examples_.size(); }

private:
    void reshuffle() {
        for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        if (shuffle_) std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
    }

    std::vector<Example> examples_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    std::mt19937_64 rng_;
    bool shuffle_;
};

struct TrainSettings {
    int accumulation = 4;
    int micro_batch = 8;
    int warmup_steps = 10;
    double floor_lr = 0.0;
    AdamWSettings adamw;

    void validate() const {
        require(accumulation >= 1 && micro_batch >= 1, "train settings: accumulation and micro_batch must be >= 1");
        require(warmup_steps >= 0, "train settings: negative warmup");
    }

    nlohmann::json to_json() const {
        return {{"accumulation", accumulation}, {"micro_batch", micro_batch}, {"warmup_steps", warmup_steps},
                {"floor_lr", floor_lr},         {"adamw", adamw.to_json()}};
    }
    static TrainSettings from_json(const nlohmann::json& j) {
        TrainSettings s;
        if (j.contains("accumulation")) s.accumulation = j.at("accumulation");
        if (j.contains("micro_batch")) s.micro_batch = j.at("micro_batch");
        if (j.contains("warmup_steps")) s.warmup_steps = j.at("warmup_steps");
        if (j.contains("floor_lr")) s.floor_lr = j.at("floor_lr");
        if (j.contains("adamw")) s.adamw = AdamWSettings::from_json(j.at("adamw"));
        return s;
    }
};

struct LossRecord {
    int stage = 0;
    int step = 0;
    double lr = 0;
    double loss = 0;
    StopReason stop = StopReason::None;

    friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

inline std::string loss_log_csv(std::span<const LossRecord> log) {
    std::ostringstream out;
    out.precision(17);
    out << "stage,step,lr,loss,stop_reason\n";
    for (const auto& r : log) out << r.stage << ',' << r.step << ',' << r.lr << ',' << r.loss << ',' << to_string(r.stop) << '\n';
    return out.str();
}

template <class T>
struct StageResult {
    ModelParams<T> params;
    std::vector<LossRecord> log;
    StopReason stop = StopReason::None;
    int steps = 0;
};

using StepCallback = std::function<void(const LossRecord&)>;

/// Core loop shared by pre-training and the adaptation stages. One global
/// step = `accumulation` micro-batches whose gradients are averaged, then
/// masked, then one AdamW update at the scheduled learning rate.
template <class T>
StageResult<T> train_loop(ModelParams<T> params, BatchStream& stream, int stage_id, const FreezeMask& mask,
                          double peak_lr, ConvergenceRule rule, const TrainSettings& ts,
                          const AdapterSettings* adapter_settings = nullptr, std::uint64_t seed = 0,
                          const StepCallback& on_step = {}) {
    StageResult<T> result;
    if (!mask.any()) {
        result.params = std::move(params);
        return result;
    }
    ts.validate();
    rule.validate();

    const LrSchedule schedule{peak_lr, ts.warmup_steps, rule.max_steps, ts.floor_lr};
    std::optional<LowRankAdapters<T>> adapters;
    std::optional<OptimizerState<T>> adapter_state;
    if (adapter_settings) {
        adapters.emplace(params.config, *adapter_settings, seed);
        adapter_state.emplace(adapters->data().size(), std::vector<IndexRange>{{0, adapters->data().size()}},
                              ts.adamw);
    }

    // With adapters the base attention matrices stay frozen; they change only
    // through the adapters.
    auto ranges = trainable_ranges(params, mask);
    if (adapters) {
        std::vector<IndexRange> pruned;
        auto frozen = adapters->target_ranges();
        for (auto r : ranges) {
            std::size_t cur = r.begin;
            for (const auto& f : frozen) {
                if (f.end <= cur || f.begin >= r.end) continue;
                if (f.begin > cur) pruned.push_back({cur, f.begin});
                cur = std::max(cur, f.end);
            }
            if (cur < r.end) pruned.push_back({cur, r.end});
        }
        ranges = std::move(pruned);
    }
    OptimizerState<T> state(params.data.size(), ranges, ts.adamw);
    const auto scope = (mask.output_only() && !adapters) ? BackwardScope::HeadOnly : BackwardScope::Full;

    auto grads = Gradients<T>::zeros_like(params);
    std::vector<double> losses;
    for (int step = 1;; ++step) {
        grads.zero();
        const ModelParams<T>* eval_params = &params;
        ModelParams<T> eff;
        if (adapters) {
            eff = adapters->effective(params);
            eval_params = &eff;
        }
        double total = 0;
        const T w = T(1) / static_cast<T>(ts.accumulation);
        for (int a = 0; a < ts.accumulation; ++a) {
            auto batch = stream.take(static_cast<std::size_t>(ts.micro_batch));
            total += batch_backward(*eval_params, std::span<const Example>(batch), grads, w, scope);
        }
        const double mean_loss = total / ts.accumulation;
        if (!std::isfinite(mean_loss))
            throw StepError("stage " + std::to_string(stage_id), "non-finite loss at step " + std::to_string(step));

        const double lr = schedule.lr_at(step);
        if (adapters) {
            auto ag = adapters->gradients(grads);
            adamw_step(std::span<T>(adapters->data()), std::span<const T>(ag), *adapter_state, lr);
        }
        apply_mask(grads, params, mask);
        adamw_step(std::span<T>(params.data), std::span<const T>(grads.data), state, lr);

        losses.push_back(mean_loss);
        LossRecord rec{stage_id, step, lr, mean_loss, rule.check(losses)};
        result.log.push_back(rec);
        if (on_step) on_step(rec);
        if (rec.stop != StopReason::None) {
            result.stop = rec.stop;
            result.steps = step;
            break;
        }
    }
    if (adapters) adapters->merge_into(params);
    result.params = std::move(params);
    return result;
}

/// Runs one adaptation stage. Stage 0 performs no training.
template <class T>
StageResult<T> run_stage(ModelParams<T> params, BatchStream& stream, const StagePlan& plan, const TrainSettings& ts,
                         std::uint64_t seed = 0, const StepCallback& on_step = {}) {
    plan.validate();
    ConvergenceRule rule = plan.convergence;
    rule.max_steps = plan.max_steps;
    return train_loop(std::move(params), stream, plan.stage_id, plan.mask, plan.lr, rule, ts,
                      plan.use_low_rank_adapters ? &plan.adapters : nullptr, seed, on_step);
}

} // namespace eeve
