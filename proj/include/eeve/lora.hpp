#pragma once

// Low-rank adapters on the attention projections (wq, wk, wv, wo):
// W_eff = W + scale * B A, with A [rank x D] and B [D x rank]. No
// quantization. B starts at zero so the adapted model initially equals the
// base model.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "eeve/model.hpp"
#include "eeve/optim.hpp"
#include "eeve/stages.hpp"

namespace eeve {

template <class T>
class LowRankAdapters {
public:
    LowRankAdapters(const ModelConfig& cfg, AdapterSettings s, std::uint64_t seed)
        : settings_(s), d_(static_cast<std::size_t>(cfg.d_model)), rank_(static_cast<std::size_t>(s.rank)) {
        require(s.rank >= 1, "adapter rank must be >= 1");
        ParamLayout layout(cfg);
        for (const auto& lo : layout.layers())
            for (auto off : {lo.wq, lo.wk, lo.wv, lo.wo}) targets_.push_back(off);
        data_.assign(targets_.size() * 2 * rank_ * d_, T(0));
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(d_)));
        for (std::size_t k = 0; k < targets_.size(); ++k)
            for (std::size_t i = 0; i < rank_ * d_; ++i) data_[a_off(k) + i] = static_cast<T>(dist(rng));
    }

    const AdapterSettings& settings() const { return settings_; }
    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    /// Flat ranges of the adapted base matrices.
    std::vector<IndexRange> target_ranges() const {
        std::vector<IndexRange> out;
        for (auto off : targets_) out.push_back({off, off + d_ * d_});
        return out;
    }

    /// Base parameters with every adapted matrix replaced by W + scale * B A.
    ModelParams<T> effective(const ModelParams<T>& base) const {
        ModelParams<T> out = base;
        const T s = static_cast<T>(settings_.scale());
        for (std::size_t k = 0; k < targets_.size(); ++k) {
            const T* A = data_.data() + a_off(k);
            const T* B = data_.data() + b_off(k);
            T* W = out.data.data() + targets_[k];
            for (std::size_t r = 0; r < d_; ++r)
                for (std::size_t j = 0; j < rank_; ++j) {
                    const T bj = s * B[r * rank_ + j];
                    for (std::size_t c = 0; c < d_; ++c) W[r * d_ + c] += bj * A[j * d_ + c];
                }
        }
        return out;
    }

    /// Chain rule from gradients w.r.t. the effective matrices:
    /// dA = scale * B^T dW,  dB = scale * dW A^T.
    std::vector<T> gradients(const Gradients<T>& full) const {
        std::vector<T> g(data_.size(), T(0));
        const T s = static_cast<T>(settings_.scale());
        for (std::size_t k = 0; k < targets_.size(); ++k) {
            const T* A = data_.data() + a_off(k);
            const T* B = data_.data() + b_off(k);
            const T* dW = full.data.data() + targets_[k];
            T* dA = g.data() + a_off(k);
            T* dB = g.data() + b_off(k);
            for (std::size_t r = 0; r < d_; ++r)
                for (std::size_t j = 0; j < rank_; ++j) {
                    T acc = 0;
                    for (std::size_t c = 0; c < d_; ++c) {
                        acc += dW[r * d_ + c] * A[j * d_ + c];
                        dA[j * d_ + c] += s * B[r * rank_ + j] * dW[r * d_ + c];
                    }
                    dB[r * rank_ + j] += s * acc;
                }
        }
        return g;
    }

    /// Folds the adapters into the base weights.
    void merge_into(ModelParams<T>& base) const { base = effective(base); }

private:
    std::size_t a_off(std::size_t k) const { return k * 2 * rank_ * d_; }
    std::size_t b_off(std::size_t k) const { return a_off(k) + rank_ * d_; }

    AdapterSettings settings_;
    std::size_t d_;
    std::size_t rank_;
    std::vector<std::size_t> targets_;
    std::vector<T> data_;
};

} // namespace eeve
