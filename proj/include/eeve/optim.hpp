#pragma once

// AdamW with decoupled weight decay, warmup + cosine learning rate, and the
// windowed-mean convergence rule.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "eeve/error.hpp"

namespace eeve {

/// Half-open flat index range.
struct IndexRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }

    friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

struct AdamWSettings {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;

    nlohmann::json to_json() const {
        return {{"beta1", beta1}, {"beta2", beta2}, {"eps", eps}, {"weight_decay", weight_decay}};
    }
    static AdamWSettings from_json(const nlohmann::json& j) {
        AdamWSettings s;
        if (j.contains("beta1")) s.beta1 = j.at("beta1");
        if (j.contains("beta2")) s.beta2 = j.at("beta2");
        if (j.contains("eps")) s.eps = j.at("eps");
        if (j.contains("weight_decay")) s.weight_decay = j.at("weight_decay");
        return s;
    }
};

/// Moments exist only for the trainable ranges given at construction.
template <class T>
struct OptimizerState {
    AdamWSettings settings;
    std::size_t param_count = 0;
    std::vector<IndexRange> ranges;
    std::vector<T> m;
    std::vector<T> v;
    std::int64_t step = 0;

    OptimizerState() = default;
    OptimizerState(std::size_t params, std::vector<IndexRange> trainable, AdamWSettings s = {})
        : settings(s), param_count(params), ranges(std::move(trainable)) {
        std::size_t n = 0;
        for (const auto& r : ranges) {
            require(r.begin <= r.end && r.end <= param_count, "optimizer range out of bounds");
            n += r.size();
        }
        m.assign(n, T(0));
        v.assign(n, T(0));
    }

    std::size_t moment_count() const { return m.size(); }
};

/// One AdamW update over the state's trainable ranges. Decay is applied to
/// the parameter before the adaptive step: theta *= 1 - lr * wd. Parameters
/// outside the ranges are neither read nor written.
template <class T>
void adamw_step(std::span<T> params, std::span<const T> grads, OptimizerState<T>& st, double lr) {
    require(params.size() == st.param_count && grads.size() == st.param_count, "adamw_step: shape mismatch");
    require(lr >= 0.0, "adamw_step: negative learning rate");
    for (const auto& r : st.ranges)
        for (auto i = r.begin; i < r.end; ++i)
            if (!std::isfinite(grads[i]))
                throw StepError("adamw_step", "non-finite gradient at parameter index " + std::to_string(i));

    ++st.step;
    const auto& s = st.settings;
    const T b1 = static_cast<T>(s.beta1), b2 = static_cast<T>(s.beta2);
    const T bc1 = static_cast<T>(1.0 - std::pow(s.beta1, static_cast<double>(st.step)));
    const T bc2 = static_cast<T>(1.0 - std::pow(s.beta2, static_cast<double>(st.step)));
    const T step_size = static_cast<T>(lr);
    const T decay = static_cast<T>(1.0 - lr * s.weight_decay);
    const T eps = static_cast<T>(s.eps);

    std::size_t k = 0;
    for (const auto& r : st.ranges) {
        for (auto i = r.begin; i < r.end; ++i, ++k) {
            const T g = grads[i];
            st.m[k] = b1 * st.m[k] + (1 - b1) * g;
            st.v[k] = b2 * st.v[k] + (1 - b2) * g * g;
            const T mhat = st.m[k] / bc1;
            const T vhat = st.v[k] / bc2;
            params[i] *= decay;
            params[i] -= step_size * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

struct LrSchedule {
    double peak_lr = 4e-5;
    int warmup_steps = 10;
    int total_steps = 400;
    double floor_lr = 0.0;

    /// Linear ramp to peak over warmup_steps (never below floor), then cosine
    /// from peak to floor at total_steps; floor afterwards.
    double lr_at(int step) const {
        require(step >= 0, "lr_at: negative step");
        if (warmup_steps > 0 && step < warmup_steps)
            return std::max(floor_lr, peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps));
        if (step >= total_steps) return total_steps <= warmup_steps ? peak_lr : floor_lr;
        double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
        return floor_lr + 0.5 * (peak_lr - floor_lr) * (1.0 + std::cos(std::numbers::pi * progress));
    }
};

enum class StopReason { None, Converged, Cap };

inline std::string to_string(StopReason r) {
    switch (r) {
    case StopReason::None: return "";
    case StopReason::Converged: return "converged";
    case StopReason::Cap: return "cap";
    }
    return "";
}

/// Stops when the relative improvement of the mean loss over the last
/// `window` steps, against the mean of the window before it, drops below
/// min_rel_improvement. While fewer than 2 * window losses exist the
/// reference is the mean of everything before the current window (the first
/// loss when only one window exists). Always stops at max_steps.
struct ConvergenceRule {
    int window = 20;
    double min_rel_improvement = 1e-3;
    int max_steps = 400;

    void validate() const {
        require(window >= 1 && max_steps >= 1, "convergence rule: window and max_steps must be >= 1");
    }

    double relative_improvement(std::span<const double> losses) const {
        const auto n = losses.size();
        const auto w = static_cast<std::size_t>(window);
        double cur = 0;
        for (auto i = n - w; i < n; ++i) cur += losses[i];
        cur /= static_cast<double>(w);
        double ref = 0;
        if (n == w) {
            ref = losses[0];
        } else {
            auto lo = n >= 2 * w ? n - 2 * w : 0;
            for (auto i = lo; i < n - w; ++i) ref += losses[i];
            ref /= static_cast<double>(n - w - lo);
        }
        return (ref - cur) / std::max(std::abs(ref), 1e-300);
    }

    StopReason check(std::span<const double> losses) const {
        if (losses.size() >= static_cast<std::size_t>(window) &&
            relative_improvement(losses) < min_rel_improvement)
            return StopReason::Converged;
        if (losses.size() >= static_cast<std::size_t>(max_steps)) return StopReason::Cap;
        return StopReason::None;
    }

    nlohmann::json to_json() const {
        return {{"window", window}, {"min_rel_improvement", min_rel_improvement}, {"max_steps", max_steps}};
    }
    static ConvergenceRule from_json(const nlohmann::json& j) {
        ConvergenceRule r;
        if (j.contains("window")) r.window = j.at("window");
        if (j.contains("min_rel_improvement")) r.min_rel_improvement = j.at("min_rel_improvement");
        if (j.contains("max_steps")) r.max_steps = j.at("max_steps");
        return r;
    }
};

} // namespace eeve
