#pragma once

// Causal softmax attention with a growing key/value cache, the analytic
// memory accountants for both architectures, and a minimal decoder block
// used as the quadratic baseline in the benchmarks.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "longvid/common.hpp"

namespace longvid::attn {

template <typename S>
struct KvCache {
    std::vector<std::vector<S>> keys;
    std::vector<std::vector<S>> values;

    size_t tokens() const { return keys.size(); }
};

// softmax(q K^T / sqrt(d)) V over the cached positions plus (k, v), which
// is appended to the cache
template <typename S>
std::vector<S> causal_attention_step(KvCache<S>& cache, const std::vector<S>& q,
                                     const std::vector<S>& k, const std::vector<S>& v) {
    size_t d = q.size();
    if (k.size() != d || v.size() != d) {
        throw ConfigError("causal_attention_step: q/k/v dimensions differ");
    }
    if (cache.keys.size() != cache.values.size()) {
        throw ConfigError("causal_attention_step: cache keys/values out of sync");
    }
    for (const auto& row : cache.keys) {
        if (row.size() != d) throw ConfigError("causal_attention_step: cache width mismatch");
    }
    cache.keys.push_back(k);
    cache.values.push_back(v);

    size_t n = cache.keys.size();
    S scale = S(1) / std::sqrt(S(d));
    std::vector<S> scores(n);
    S mx = -std::numeric_limits<S>::infinity();
    for (size_t t = 0; t < n; ++t) {
        S acc = S(0);
        for (size_t c = 0; c < d; ++c) acc += q[c] * cache.keys[t][c];
        scores[t] = acc * scale;
        mx = std::max(mx, scores[t]);
    }
    S z = S(0);
    for (size_t t = 0; t < n; ++t) {
        scores[t] = std::exp(scores[t] - mx);
        z += scores[t];
    }
    std::vector<S> out(d, S(0));
    for (size_t t = 0; t < n; ++t) {
        S wgt = scores[t] / z;
        for (size_t c = 0; c < d; ++c) out[c] += wgt * cache.values[t][c];
    }
    return out;
}

enum class StateVariant { kv_cache, rwkv4_state, rwkv5_state };

struct MemoryModel {
    size_t d_model = 0;
    size_t n_layers = 0;
    size_t bytes_per_scalar = 4;  // 2 or 4 in reports
    StateVariant variant = StateVariant::kv_cache;
    size_t heads = 0;     // rwkv5 only
    size_t head_dim = 0;  // rwkv5 only
};

size_t kv_cache_floats(const MemoryModel& m, size_t tokens);
size_t recurrent_state_floats(const MemoryModel& m);

// smallest T with kv_cache_floats(baseline, T) > ratio * state floats
size_t crossover_t0(const MemoryModel& baseline, const MemoryModel& recurrent, double ratio);

// ---------------------------------------------------------------------------
// Minimal decoder block: pre-norm multi-head causal attention plus a GELU
// feed-forward, each head stepping through causal_attention_step with its
// own cache slice.

template <typename S>
struct BaselineBlockParams {
    size_t d = 0;
    size_t heads = 0;
    size_t hidden = 0;
    std::vector<S> ln1_g, ln1_b, ln2_g, ln2_b;
    std::vector<S> wq, wk, wv, wo;    // d x d
    std::vector<S> mlp_w1, mlp_b1;    // hidden x d
    std::vector<S> mlp_w2, mlp_b2;    // d x hidden
};

template <typename S>
struct BaselineBlockState {
    std::vector<KvCache<S>> head_caches;

    static BaselineBlockState zero(size_t heads) {
        BaselineBlockState s;
        s.head_caches.resize(heads);
        return s;
    }

    size_t cached_floats() const {
        size_t n = 0;
        for (const auto& c : head_caches) {
            for (const auto& row : c.keys) n += row.size();
            for (const auto& row : c.values) n += row.size();
        }
        return n;
    }
};

namespace detail {

template <typename S>
void ln_vec(std::vector<S>& x, const std::vector<S>& g, const std::vector<S>& b) {
    S mean = S(0), var = S(0);
    for (S v : x) mean += v;
    mean /= S(x.size());
    for (S v : x) var += (v - mean) * (v - mean);
    var /= S(x.size());
    S inv = S(1) / std::sqrt(var + S(1e-5));
    for (size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean) * inv * g[i] + b[i];
}

template <typename S>
std::vector<S> mv(const std::vector<S>& m, const std::vector<S>& x, size_t rows, size_t cols) {
    std::vector<S> y(rows);
    for (size_t i = 0; i < rows; ++i) {
        S acc = S(0);
        const S* row = &m[i * cols];
        for (size_t j = 0; j < cols; ++j) acc += row[j] * x[j];
        y[i] = acc;
    }
    return y;
}

}  // namespace detail

template <typename S>
std::vector<S> baseline_block_step(const std::vector<S>& x_t, BaselineBlockState<S>& state,
                                   const BaselineBlockParams<S>& p) {
    size_t d = p.d;
    if (x_t.size() != d) throw ConfigError("baseline block: input dimension mismatch");
    if (state.head_caches.size() != p.heads) {
        throw ConfigError("baseline block: cache/head count mismatch");
    }
    size_t dh = d / p.heads;

    std::vector<S> xn = x_t;
    detail::ln_vec(xn, p.ln1_g, p.ln1_b);
    auto q = detail::mv(p.wq, xn, d, d);
    auto k = detail::mv(p.wk, xn, d, d);
    auto v = detail::mv(p.wv, xn, d, d);
    std::vector<S> mixed(d);
    for (size_t h = 0; h < p.heads; ++h) {
        size_t base = h * dh;
        std::vector<S> qh(q.begin() + base, q.begin() + base + dh);
        std::vector<S> kh(k.begin() + base, k.begin() + base + dh);
        std::vector<S> vh(v.begin() + base, v.begin() + base + dh);
        auto oh = causal_attention_step(state.head_caches[h], qh, kh, vh);
        std::copy(oh.begin(), oh.end(), mixed.begin() + base);
    }
    auto att = detail::mv(p.wo, mixed, d, d);
    std::vector<S> x = x_t;
    for (size_t c = 0; c < d; ++c) x[c] += att[c];

    std::vector<S> xn2 = x;
    detail::ln_vec(xn2, p.ln2_g, p.ln2_b);
    auto h1 = detail::mv(p.mlp_w1, xn2, p.hidden, d);
    for (size_t i = 0; i < p.hidden; ++i) {
        S u = h1[i] + p.mlp_b1[i];
        h1[i] = S(0.5) * u * (S(1) + std::erf(u / std::sqrt(S(2))));
    }
    auto h2 = detail::mv(p.mlp_w2, h1, d, p.hidden);
    for (size_t c = 0; c < d; ++c) x[c] += h2[c] + p.mlp_b2[c];
    return x;
}

}  // namespace longvid::attn
