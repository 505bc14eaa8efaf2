#pragma once

// Minimal pre-norm decoder-only transformer with hand-written reverse-mode
// gradients. Templated on the scalar type: double for gradient checks,
// float for training runs.
//
// Block:  x += Wo * attn(rmsnorm(x) * g1);  x += W2 * gelu(W1 * rmsnorm(x) * g2)
// Head:   logits = out_emb * (rmsnorm(x) * gf)
// Input:  x0[t] = tok_emb[id_t] + pos_emb[t]
//
// Input and output embeddings are separate matrices.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "eeve/error.hpp"
#include "eeve/tokenizer.hpp"

namespace eeve {

enum class ParamGroup : std::uint8_t { InputEmbedOld, InputEmbedNew, OutputEmbedOld, OutputEmbedNew, Internal };

inline constexpr std::array<ParamGroup, 5> kAllGroups = {ParamGroup::InputEmbedOld, ParamGroup::InputEmbedNew,
                                                         ParamGroup::OutputEmbedOld, ParamGroup::OutputEmbedNew,
                                                         ParamGroup::Internal};

inline std::string to_string(ParamGroup g) {
    switch (g) {
    case ParamGroup::InputEmbedOld: return "InputEmbedOld";
    case ParamGroup::InputEmbedNew: return "InputEmbedNew";
    case ParamGroup::OutputEmbedOld: return "OutputEmbedOld";
    case ParamGroup::OutputEmbedNew: return "OutputEmbedNew";
    case ParamGroup::Internal: return "Internal";
    }
    return "?";
}

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 2;
    int d_model = 16;
    int d_ff = 64;
    int max_seq_len = 32;
    std::size_t vocab_size = 257;
    bool tie_embeddings = false;

    void validate() const {
        require(n_layers >= 1 && n_heads >= 1 && d_model >= 1 && d_ff >= 1 && max_seq_len >= 1,
                "model config: dimensions must be positive");
        require(d_model % n_heads == 0, "model config: d_model must be divisible by n_heads");
        require(vocab_size >= kByteTokens + 1, "model config: vocab_size must be >= 257");
        require(!tie_embeddings, "model config: tied embeddings are not supported");
    }

    int head_dim() const { return d_model / n_heads; }

    nlohmann::json to_json() const {
        return {{"n_layers", n_layers}, {"n_heads", n_heads},       {"d_model", d_model},
                {"d_ff", d_ff},         {"max_seq_len", max_seq_len}, {"vocab_size", vocab_size},
                {"tie_embeddings", tie_embeddings}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("n_layers", c.n_layers);
        get("n_heads", c.n_heads);
        get("d_model", c.d_model);
        get("d_ff", c.d_ff);
        get("max_seq_len", c.max_seq_len);
        get("vocab_size", c.vocab_size);
        get("tie_embeddings", c.tie_embeddings);
        return c;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorInfo {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t size() const { return rows * cols; }
};

struct LayerOffsets {
    std::size_t attn_norm, wq, wk, wv, wo, ffn_norm, w1, w2;
};

/// Flat parameter layout. Embedding matrices come first so that each
/// (matrix, old/new) part is one contiguous range.
class ParamLayout {
public:
    ParamLayout() = default;

    explicit ParamLayout(const ModelConfig& c) {
        c.validate();
        auto D = static_cast<std::size_t>(c.d_model);
        auto F = static_cast<std::size_t>(c.d_ff);
        tok_emb_ = add("tok_emb", c.vocab_size, D);
        out_emb_ = add("out_emb", c.vocab_size, D);
        pos_emb_ = add("pos_emb", static_cast<std::size_t>(c.max_seq_len), D);
        for (int l = 0; l < c.n_layers; ++l) {
            auto p = "layers." + std::to_string(l) + ".";
            LayerOffsets lo{};
            lo.attn_norm = add(p + "attn_norm", 1, D);
            lo.wq = add(p + "wq", D, D);
            lo.wk = add(p + "wk", D, D);
            lo.wv = add(p + "wv", D, D);
            lo.wo = add(p + "wo", D, D);
            lo.ffn_norm = add(p + "ffn_norm", 1, D);
            lo.w1 = add(p + "w1", F, D);
            lo.w2 = add(p + "w2", D, F);
            layers_.push_back(lo);
        }
        final_norm_ = add("final_norm", 1, D);
    }

    const std::vector<TensorInfo>& tensors() const { return tensors_; }
    std::size_t total() const { return total_; }
    std::size_t tok_emb() const { return tok_emb_; }
    std::size_t out_emb() const { return out_emb_; }
    std::size_t pos_emb() const { return pos_emb_; }
    std::size_t final_norm() const { return final_norm_; }
    const std::vector<LayerOffsets>& layers() const { return layers_; }

    const TensorInfo& find(std::string_view name) const {
        for (const auto& t : tensors_)
            if (t.name == name) return t;
        throw ValidationError("no tensor named " + std::string(name));
    }

    nlohmann::json to_json() const {
        auto arr = nlohmann::json::array();
        for (const auto& t : tensors_)
            arr.push_back({{"name", t.name}, {"offset", t.offset}, {"rows", t.rows}, {"cols", t.cols}});
        return arr;
    }

private:
    std::size_t add(std::string name, std::size_t rows, std::size_t cols) {
        tensors_.push_back({std::move(name), total_, rows, cols});
        auto off = total_;
        total_ += rows * cols;
        return off;
    }

    std::vector<TensorInfo> tensors_;
    std::vector<LayerOffsets> layers_;
    std::size_t total_ = 0;
    std::size_t tok_emb_ = 0, out_emb_ = 0, pos_emb_ = 0, final_norm_ = 0;
};

struct GroupRange {
    ParamGroup group;
    std::size_t begin;
    std::size_t end;
};

/// Contiguous flat-index ranges of every parameter group. Row membership in
/// the embedding matrices depends only on row index versus base_size.
inline std::vector<GroupRange> group_ranges(const ModelConfig& c, std::size_t base_size) {
    require(base_size <= c.vocab_size, "base_size exceeds vocab_size");
    ParamLayout layout(c);
    auto D = static_cast<std::size_t>(c.d_model);
    auto V = c.vocab_size;
    std::vector<GroupRange> out = {
        {ParamGroup::InputEmbedOld, layout.tok_emb(), layout.tok_emb() + base_size * D},
        {ParamGroup::InputEmbedNew, layout.tok_emb() + base_size * D, layout.tok_emb() + V * D},
        {ParamGroup::OutputEmbedOld, layout.out_emb(), layout.out_emb() + base_size * D},
        {ParamGroup::OutputEmbedNew, layout.out_emb() + base_size * D, layout.out_emb() + V * D},
        {ParamGroup::Internal, layout.out_emb() + V * D, layout.total()},
    };
    return out;
}

template <class T>
struct ModelParams {
    ModelConfig config;
    /// Old/new vocabulary boundary; equals vocab_size before expansion.
    std::size_t base_size = 0;
    ParamLayout layout;
    std::vector<T> data;

    ModelParams() = default;
    ModelParams(ModelConfig c, std::size_t base) : config(c), base_size(base), layout(c), data(layout.total(), T(0)) {
        require(base_size <= config.vocab_size, "base_size exceeds vocab_size");
    }

    std::size_t d_model() const { return static_cast<std::size_t>(config.d_model); }
    std::span<T> tok_row(std::size_t id) { return {data.data() + layout.tok_emb() + id * d_model(), d_model()}; }
    std::span<const T> tok_row(std::size_t id) const {
        return {data.data() + layout.tok_emb() + id * d_model(), d_model()};
    }
    std::span<T> out_row(std::size_t id) { return {data.data() + layout.out_emb() + id * d_model(), d_model()}; }
    std::span<const T> out_row(std::size_t id) const {
        return {data.data() + layout.out_emb() + id * d_model(), d_model()};
    }
    std::span<T> tensor(std::string_view name) {
        const auto& t = layout.find(name);
        return {data.data() + t.offset, t.size()};
    }
    std::span<const T> tensor(std::string_view name) const {
        const auto& t = layout.find(name);
        return {data.data() + t.offset, t.size()};
    }
    std::vector<GroupRange> groups() const { return group_ranges(config, base_size); }

    template <class U>
    ModelParams<U> cast() const {
        ModelParams<U> out(config, base_size);
        std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    friend bool operator==(const ModelParams& a, const ModelParams& b) {
        return a.config == b.config && a.base_size == b.base_size && a.data == b.data;
    }
};

/// Gaussian init: embeddings N(0, embed_std^2); projections N(0, 1/fan_in),
/// with residual output projections further scaled by 1/sqrt(2 * n_layers);
/// norm gains 1.
template <class T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed, double embed_std = 0.02) {
    config.validate();
    ModelParams<T> p(config, config.vocab_size);
    std::mt19937_64 rng(seed);
    auto fill = [&](std::size_t off, std::size_t n, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        for (std::size_t i = 0; i < n; ++i) p.data[off + i] = static_cast<T>(dist(rng));
    };
    auto D = static_cast<std::size_t>(config.d_model);
    auto F = static_cast<std::size_t>(config.d_ff);
    double resid = 1.0 / std::sqrt(2.0 * config.n_layers);
    fill(p.layout.tok_emb(), config.vocab_size * D, embed_std);
    fill(p.layout.out_emb(), config.vocab_size * D, embed_std);
    fill(p.layout.pos_emb(), static_cast<std::size_t>(config.max_seq_len) * D, embed_std);
    for (const auto& lo : p.layout.layers()) {
        std::fill_n(p.data.begin() + static_cast<std::ptrdiff_t>(lo.attn_norm), D, T(1));
        std::fill_n(p.data.begin() + static_cast<std::ptrdiff_t>(lo.ffn_norm), D, T(1));
        fill(lo.wq, D * D, 1.0 / std::sqrt(double(D)));
        fill(lo.wk, D * D, 1.0 / std::sqrt(double(D)));
        fill(lo.wv, D * D, 1.0 / std::sqrt(double(D)));
        fill(lo.wo, D * D, resid / std::sqrt(double(D)));
        fill(lo.w1, F * D, 1.0 / std::sqrt(double(D)));
        fill(lo.w2, D * F, resid / std::sqrt(double(F)));
    }
    std::fill_n(p.data.begin() + static_cast<std::ptrdiff_t>(p.layout.final_norm()), D, T(1));
    return p;
}

template <class T>
struct Gradients {
    std::vector<T> data;

    Gradients() = default;
    explicit Gradients(std::size_t n) : data(n, T(0)) {}
    template <class P>
    static Gradients zeros_like(const ModelParams<P>& p) {
        return Gradients(p.data.size());
    }
    void zero() { std::fill(data.begin(), data.end(), T(0)); }
    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](T v) { return std::isfinite(v); });
    }
};

/// Row-major matrix.
template <class T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T(0)) {}
    std::span<T> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const T> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
    T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    T operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

/// How far backward propagates. HeadOnly computes output-embedding gradients
/// only; every other entry stays zero. Equivalent to a full backward
/// followed by masking when only output embeddings are trainable.
enum class BackwardScope { Full, HeadOnly };

namespace detail {

inline constexpr double kRmsEps = 1e-5;

// y[r] = sum_c W[r, c] x[c]
template <class T>
void matvec(const T* W, std::size_t rows, std::size_t cols, const T* x, T* y) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* w = W + r * cols;
        T acc = 0;
        for (std::size_t c = 0; c < cols; ++c) acc += w[c] * x[c];
        y[r] = acc;
    }
}

// dx[c] += sum_r W[r, c] dy[r];  dW[r, c] += dy[r] x[c]
template <class T>
void matvec_backward(const T* W, std::size_t rows, std::size_t cols, const T* x, const T* dy, T* dx, T* dW) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T g = dy[r];
        const T* w = W + r * cols;
        if (dx)
            for (std::size_t c = 0; c < cols; ++c) dx[c] += w[c] * g;
        if (dW) {
            T* dw = dW + r * cols;
            for (std::size_t c = 0; c < cols; ++c) dw[c] += g * x[c];
        }
    }
}

template <class T>
T rmsnorm(const T* x, const T* g, std::size_t n, T* y) {
    T ss = 0;
    for (std::size_t i = 0; i < n; ++i) ss += x[i] * x[i];
    T r = std::sqrt(ss / static_cast<T>(n) + static_cast<T>(kRmsEps));
    for (std::size_t i = 0; i < n; ++i) y[i] = g[i] * x[i] / r;
    return r;
}

template <class T>
void rmsnorm_backward(const T* x, const T* g, T r, std::size_t n, const T* dy, T* dx, T* dg) {
    T dot = 0;
    for (std::size_t i = 0; i < n; ++i) dot += g[i] * dy[i] * x[i];
    T k = dot / (static_cast<T>(n) * r * r * r);
    for (std::size_t i = 0; i < n; ++i) {
        if (dg) dg[i] += dy[i] * x[i] / r;
        dx[i] += g[i] * dy[i] / r - x[i] * k;
    }
}

inline constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

template <class T>
T gelu(T x) {
    T t = std::tanh(static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x));
    return static_cast<T>(0.5) * x * (1 + t);
}

template <class T>
T gelu_grad(T x) {
    T u = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
    T t = std::tanh(u);
    T du = static_cast<T>(kGeluC) * (1 + 3 * static_cast<T>(kGeluA) * x * x);
    return static_cast<T>(0.5) * (1 + t) + static_cast<T>(0.5) * x * (1 - t * t) * du;
}

} // namespace detail

/// Activations of one sequence, kept for the backward pass.
template <class T>
struct ForwardCache {
    std::size_t len = 0;
    std::vector<TokenId> ids;
    // Residual stream entering each layer, plus the final one: (L+1) x T x D.
    std::vector<std::vector<T>> x;
    // Per layer.
    std::vector<std::vector<T>> x_mid, a, q, k, v, o, b, f_pre, f_act, probs;
    std::vector<std::vector<T>> rms1, rms2;
    std::vector<T> c, rmsf;
    Matrix<T> logits;
};

template <class T>
void check_ids(const ModelConfig& cfg, std::span<const TokenId> ids) {
    require(!ids.empty(), "forward: empty sequence");
    require(ids.size() <= static_cast<std::size_t>(cfg.max_seq_len),
            "forward: sequence of length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                std::to_string(cfg.max_seq_len));
    for (auto id : ids)
        require(id < cfg.vocab_size, "forward: token id " + std::to_string(id) + " out of range");
}

/// Runs the model and fills `cache`. Position t's logits depend on ids[0..t] only.
template <class T>
void forward(const ModelParams<T>& p, std::span<const TokenId> ids, ForwardCache<T>& cache) {
    const auto& cfg = p.config;
    check_ids<T>(cfg, ids);
    const std::size_t n = ids.size();
    const auto D = static_cast<std::size_t>(cfg.d_model);
    const auto F = static_cast<std::size_t>(cfg.d_ff);
    const auto H = static_cast<std::size_t>(cfg.n_heads);
    const auto hd = static_cast<std::size_t>(cfg.head_dim());
    const auto V = cfg.vocab_size;
    const auto L = static_cast<std::size_t>(cfg.n_layers);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    const T* W = p.data.data();
    const auto& lay = p.layout;

    cache.len = n;
    cache.ids.assign(ids.begin(), ids.end());
    cache.x.assign(L + 1, std::vector<T>(n * D));
    auto per_layer = [&](std::vector<std::vector<T>>& v, std::size_t sz) { v.assign(L, std::vector<T>(sz)); };
    per_layer(cache.x_mid, n * D);
    per_layer(cache.a, n * D);
    per_layer(cache.q, n * D);
    per_layer(cache.k, n * D);
    per_layer(cache.v, n * D);
    per_layer(cache.o, n * D);
    per_layer(cache.b, n * D);
    per_layer(cache.f_pre, n * F);
    per_layer(cache.f_act, n * F);
    per_layer(cache.probs, H * n * n);
    per_layer(cache.rms1, n);
    per_layer(cache.rms2, n);
    cache.c.assign(n * D, T(0));
    cache.rmsf.assign(n, T(0));

    for (std::size_t t = 0; t < n; ++t) {
        const T* te = W + lay.tok_emb() + ids[t] * D;
        const T* pe = W + lay.pos_emb() + t * D;
        T* x0 = cache.x[0].data() + t * D;
        for (std::size_t i = 0; i < D; ++i) x0[i] = te[i] + pe[i];
    }

    std::vector<T> tmp(D), hidden(F);
    for (std::size_t l = 0; l < L; ++l) {
        const auto& lo = lay.layers()[l];
        const auto& xin = cache.x[l];
        auto& a = cache.a[l];
        auto& q = cache.q[l];
        auto& k = cache.k[l];
        auto& v = cache.v[l];
        auto& o = cache.o[l];
        auto& pr = cache.probs[l];
        for (std::size_t t = 0; t < n; ++t) {
            cache.rms1[l][t] = detail::rmsnorm(xin.data() + t * D, W + lo.attn_norm, D, a.data() + t * D);
            detail::matvec(W + lo.wq, D, D, a.data() + t * D, q.data() + t * D);
            detail::matvec(W + lo.wk, D, D, a.data() + t * D, k.data() + t * D);
            detail::matvec(W + lo.wv, D, D, a.data() + t * D, v.data() + t * D);
        }
        std::fill(o.begin(), o.end(), T(0));
        std::fill(pr.begin(), pr.end(), T(0));
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < n; ++t) {
                T* prow = pr.data() + (h * n + t) * n;
                const T* qt = q.data() + t * D + h * hd;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t u = 0; u <= t; ++u) {
                    const T* ku = k.data() + u * D + h * hd;
                    T s = 0;
                    for (std::size_t i = 0; i < hd; ++i) s += qt[i] * ku[i];
                    prow[u] = s * scale;
                    mx = std::max(mx, prow[u]);
                }
                T z = 0;
                for (std::size_t u = 0; u <= t; ++u) {
                    prow[u] = std::exp(prow[u] - mx);
                    z += prow[u];
                }
                T* ot = o.data() + t * D + h * hd;
                for (std::size_t u = 0; u <= t; ++u) {
                    prow[u] /= z;
                    const T* vu = v.data() + u * D + h * hd;
                    for (std::size_t i = 0; i < hd; ++i) ot[i] += prow[u] * vu[i];
                }
            }
        }
        auto& xm = cache.x_mid[l];
        auto& b = cache.b[l];
        auto& fp = cache.f_pre[l];
        auto& fa = cache.f_act[l];
        auto& xout = cache.x[l + 1];
        for (std::size_t t = 0; t < n; ++t) {
            detail::matvec(W + lo.wo, D, D, o.data() + t * D, tmp.data());
            for (std::size_t i = 0; i < D; ++i) xm[t * D + i] = xin[t * D + i] + tmp[i];
            cache.rms2[l][t] = detail::rmsnorm(xm.data() + t * D, W + lo.ffn_norm, D, b.data() + t * D);
            detail::matvec(W + lo.w1, F, D, b.data() + t * D, fp.data() + t * F);
            for (std::size_t j = 0; j < F; ++j) fa[t * F + j] = detail::gelu(fp[t * F + j]);
            detail::matvec(W + lo.w2, D, F, fa.data() + t * F, tmp.data());
            for (std::size_t i = 0; i < D; ++i) xout[t * D + i] = xm[t * D + i] + tmp[i];
        }
    }

    cache.logits = Matrix<T>(n, V);
    for (std::size_t t = 0; t < n; ++t) {
        cache.rmsf[t] = detail::rmsnorm(cache.x[L].data() + t * D, W + lay.final_norm(), D, cache.c.data() + t * D);
        detail::matvec(W + lay.out_emb(), V, D, cache.c.data() + t * D, cache.logits.data.data() + t * V);
    }
}

template <class T>
Matrix<T> forward(const ModelParams<T>& p, std::span<const TokenId> ids) {
    ForwardCache<T> cache;
    forward(p, ids, cache);
    return std::move(cache.logits);
}

/// log softmax of one logits row.
template <class T>
std::vector<double> log_softmax(std::span<T> row) {
    double mx = -std::numeric_limits<double>::infinity();
    for (auto v : row) mx = std::max(mx, static_cast<double>(v));
    double z = 0;
    for (auto v : row) z += std::exp(static_cast<double>(v) - mx);
    double lz = mx + std::log(z);
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(row[i]) - lz;
    return out;
}

/// Mean next-token cross-entropy over positions.
template <class T>
double loss(const Matrix<T>& logits, std::span<const TokenId> targets) {
    require(targets.size() == logits.rows, "loss: targets length must equal logits rows");
    require(!targets.empty(), "loss: empty targets");
    double total = 0;
    for (std::size_t t = 0; t < logits.rows; ++t) {
        require(targets[t] < logits.cols, "loss: target id out of range");
        auto row = logits.row(t);
        double mx = -std::numeric_limits<double>::infinity();
        for (auto v : row) mx = std::max(mx, static_cast<double>(v));
        double z = 0;
        for (auto v : row) z += std::exp(static_cast<double>(v) - mx);
        total += mx + std::log(z) - static_cast<double>(row[targets[t]]);
    }
    return total / static_cast<double>(logits.rows);
}

/// Reverse pass. Adds `weight * dLoss/dparams` into `grads` and returns the
/// loss of this sequence.
template <class T>
double backward_into(const ModelParams<T>& p, std::span<const TokenId> ids, std::span<const TokenId> targets,
                     Gradients<T>& grads, T weight = T(1), BackwardScope scope = BackwardScope::Full) {
    require(targets.size() == ids.size(), "backward: targets length must equal ids length");
    require(grads.data.size() == p.data.size(), "backward: gradient shape mismatch");
    ForwardCache<T> cache;
    forward(p, ids, cache);

    const auto& cfg = p.config;
    const std::size_t n = ids.size();
    const auto D = static_cast<std::size_t>(cfg.d_model);
    const auto F = static_cast<std::size_t>(cfg.d_ff);
    const auto H = static_cast<std::size_t>(cfg.n_heads);
    const auto hd = static_cast<std::size_t>(cfg.head_dim());
    const auto V = cfg.vocab_size;
    const auto L = static_cast<std::size_t>(cfg.n_layers);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    const T* W = p.data.data();
    T* G = grads.data.data();
    const auto& lay = p.layout;

    // Loss and dlogits = (softmax - onehot) * weight / n.
    double total = 0;
    std::vector<T> dlogits(V);
    std::vector<T> dx(n * D, T(0));
    for (std::size_t t = 0; t < n; ++t) {
        require(targets[t] < V, "backward: target id out of range");
        auto row = cache.logits.row(t);
        double mx = -std::numeric_limits<double>::infinity();
        for (auto v : row) mx = std::max(mx, static_cast<double>(v));
        double z = 0;
        for (auto v : row) z += std::exp(static_cast<double>(v) - mx);
        double lz = mx + std::log(z);
        total += lz - static_cast<double>(row[targets[t]]);
        const double coef = static_cast<double>(weight) / static_cast<double>(n);
        for (std::size_t j = 0; j < V; ++j)
            dlogits[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lz) * coef);
        dlogits[targets[t]] -= static_cast<T>(coef);

        std::vector<T> dc(D, T(0));
        detail::matvec_backward(W + lay.out_emb(), V, D, cache.c.data() + t * D, dlogits.data(),
                                scope == BackwardScope::Full ? dc.data() : nullptr, G + lay.out_emb());
        if (scope == BackwardScope::Full)
            detail::rmsnorm_backward(cache.x[L].data() + t * D, W + lay.final_norm(), cache.rmsf[t], D, dc.data(),
                                     dx.data() + t * D, G + lay.final_norm());
    }
    if (scope == BackwardScope::HeadOnly) return total / static_cast<double>(n);

    std::vector<T> dtmp(D), dhidden(F), da(n * D), dq(n * D), dk(n * D), dv(n * D), dout(n * D), dxm(n * D);
    std::vector<T> dp(n);
    for (std::size_t li = L; li-- > 0;) {
        const auto& lo = lay.layers()[li];
        const auto& xm = cache.x_mid[li];
        const auto& b = cache.b[li];
        const auto& fp = cache.f_pre[li];
        const auto& fa = cache.f_act[li];

        // Feed-forward sublayer: x_out = x_mid + W2 gelu(W1 b).
        dxm = dx;
        for (std::size_t t = 0; t < n; ++t) {
            std::fill(dhidden.begin(), dhidden.end(), T(0));
            detail::matvec_backward(W + lo.w2, D, F, fa.data() + t * F, dx.data() + t * D, dhidden.data(), G + lo.w2);
            for (std::size_t j = 0; j < F; ++j) dhidden[j] *= detail::gelu_grad(fp[t * F + j]);
            std::fill(dtmp.begin(), dtmp.end(), T(0));
            detail::matvec_backward(W + lo.w1, F, D, b.data() + t * D, dhidden.data(), dtmp.data(), G + lo.w1);
            detail::rmsnorm_backward(xm.data() + t * D, W + lo.ffn_norm, cache.rms2[li][t], D, dtmp.data(),
                                     dxm.data() + t * D, G + lo.ffn_norm);
        }

        // Attention sublayer: x_mid = x_in + Wo attn(a).
        const auto& xin = cache.x[li];
        const auto& a = cache.a[li];
        const auto& q = cache.q[li];
        const auto& k = cache.k[li];
        const auto& v = cache.v[li];
        const auto& o = cache.o[li];
        const auto& pr = cache.probs[li];
        std::fill(dout.begin(), dout.end(), T(0));
        for (std::size_t t = 0; t < n; ++t)
            detail::matvec_backward(W + lo.wo, D, D, o.data() + t * D, dxm.data() + t * D, dout.data() + t * D,
                                    G + lo.wo);
        std::fill(dq.begin(), dq.end(), T(0));
        std::fill(dk.begin(), dk.end(), T(0));
        std::fill(dv.begin(), dv.end(), T(0));
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < n; ++t) {
                const T* prow = pr.data() + (h * n + t) * n;
                const T* dot = dout.data() + t * D + h * hd;
                T sum = 0;
                for (std::size_t u = 0; u <= t; ++u) {
                    const T* vu = v.data() + u * D + h * hd;
                    T* dvu = dv.data() + u * D + h * hd;
                    T s = 0;
                    for (std::size_t i = 0; i < hd; ++i) {
                        s += dot[i] * vu[i];
                        dvu[i] += prow[u] * dot[i];
                    }
                    dp[u] = s;
                    sum += prow[u] * s;
                }
                const T* qt = q.data() + t * D + h * hd;
                T* dqt = dq.data() + t * D + h * hd;
                for (std::size_t u = 0; u <= t; ++u) {
                    T ds = prow[u] * (dp[u] - sum) * scale;
                    const T* ku = k.data() + u * D + h * hd;
                    T* dku = dk.data() + u * D + h * hd;
                    for (std::size_t i = 0; i < hd; ++i) {
                        dqt[i] += ds * ku[i];
                        dku[i] += ds * qt[i];
                    }
                }
            }
        }
        dx = dxm;
        for (std::size_t t = 0; t < n; ++t) {
            std::fill(dtmp.begin(), dtmp.end(), T(0));
            detail::matvec_backward(W + lo.wq, D, D, a.data() + t * D, dq.data() + t * D, dtmp.data(), G + lo.wq);
            detail::matvec_backward(W + lo.wk, D, D, a.data() + t * D, dk.data() + t * D, dtmp.data(), G + lo.wk);
            detail::matvec_backward(W + lo.wv, D, D, a.data() + t * D, dv.data() + t * D, dtmp.data(), G + lo.wv);
            detail::rmsnorm_backward(xin.data() + t * D, W + lo.attn_norm, cache.rms1[li][t], D, dtmp.data(),
                                     dx.data() + t * D, G + lo.attn_norm);
        }
    }

    for (std::size_t t = 0; t < n; ++t) {
        T* gte = G + lay.tok_emb() + ids[t] * D;
        T* gpe = G + lay.pos_emb() + t * D;
        for (std::size_t i = 0; i < D; ++i) {
            gte[i] += dx[t * D + i];
            gpe[i] += dx[t * D + i];
        }
    }
    return total / static_cast<double>(n);
}

template <class T>
std::pair<double, Gradients<T>> backward(const ModelParams<T>& p, std::span<const TokenId> ids,
                                         std::span<const TokenId> targets) {
    auto g = Gradients<T>::zeros_like(p);
    double l = backward_into(p, ids, targets, g);
    return {l, std::move(g)};
}

/// One training sequence: inputs and their next-token targets.
struct Example {
    std::vector<TokenId> inputs;
    std::vector<TokenId> targets;

    friend bool operator==(const Example&, const Example&) = default;
};

/// Mean loss over a batch; adds the mean gradient times `weight` into grads.
template <class T>
double batch_backward(const ModelParams<T>& p, std::span<const Example> batch, Gradients<T>& grads, T weight = T(1),
                      BackwardScope scope = BackwardScope::Full) {
    require(!batch.empty(), "batch_backward: empty batch");
    double total = 0;
    const T w = weight / static_cast<T>(batch.size());
    for (const auto& ex : batch) total += backward_into(p, ex.inputs, ex.targets, grads, w, scope);
    return total / static_cast<double>(batch.size());
}

/// Greedy next-token choice; ties go to the lower id.
template <class T>
TokenId argmax_token(std::span<T> row) {
    TokenId best = 0;
    for (TokenId j = 1; j < row.size(); ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

/// Greedy continuation for smoke tests.
template <class T>
std::vector<TokenId> greedy_decode(const ModelParams<T>& p, std::vector<TokenId> prompt, std::size_t new_tokens) {
    for (std::size_t i = 0; i < new_tokens && prompt.size() < static_cast<std::size_t>(p.config.max_seq_len); ++i) {
        auto logits = forward(p, std::span<const TokenId>(prompt));
        prompt.push_back(argmax_token(logits.row(logits.rows - 1)));
    }
    return prompt;
}

} // namespace eeve
