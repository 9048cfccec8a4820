#pragma once

// Full RWKV block: token-shifted projections around the wkv core
// (time-mix), then a squared-ReLU feed-forward with its own shift and
// receptance gate (channel-mix). Both sublayers are pre-normalized
// residual branches, following the reference RWKV design.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "longvid/common.hpp"
#include "longvid/wkv.hpp"

namespace longvid::rwkv {

template <typename S>
void layernorm_inplace(std::vector<S>& x, const std::vector<S>& gain,
                       const std::vector<S>& bias) {
    size_t d = x.size();
    S mean = S(0);
    for (S v : x) mean += v;
    mean /= S(d);
    S var = S(0);
    for (S v : x) var += (v - mean) * (v - mean);
    var /= S(d);
    S inv = S(1) / std::sqrt(var + S(1e-5));
    for (size_t i = 0; i < d; ++i) {
        x[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
}

template <typename S>
std::vector<S> matvec(const std::vector<S>& m, const std::vector<S>& x, size_t rows,
                      size_t cols) {
    std::vector<S> y(rows, S(0));
    for (size_t i = 0; i < rows; ++i) {
        const S* row = &m[i * cols];
        S acc = S(0);
        for (size_t j = 0; j < cols; ++j) acc += row[j] * x[j];
        y[i] = acc;
    }
    return y;
}

template <typename S>
struct BlockParams {
    size_t d = 0;
    size_t hidden = 0;  // channel-mix inner width

    ShiftMixParams<S> shift;            // time-mix token shift (r, k, v)
    std::vector<S> mu_cm_k, mu_cm_r;    // channel-mix token shift
    DecayParams<S> decay;

    // row-major projections
    std::vector<S> w_r, w_k, w_v, w_o;        // d x d
    std::vector<S> w_cm_k;                    // hidden x d
    std::vector<S> w_cm_v;                    // d x hidden
    std::vector<S> w_cm_r;                    // d x d

    std::vector<S> ln1_g, ln1_b, ln2_g, ln2_b;

    void validate() const {
        if (d == 0 || hidden == 0) throw ConfigError("block params: zero dimension");
        decay.validate();
        shift.validate();
        if (decay.dim() != d || shift.dim() != d) {
            throw ConfigError("block params: decay/shift dimension mismatch");
        }
        if (mu_cm_k.size() != d || mu_cm_r.size() != d) {
            throw ConfigError("block params: channel-mix mu dimension mismatch");
        }
        for (const auto* m : {&w_r, &w_k, &w_v, &w_o, &w_cm_r}) {
            if (m->size() != d * d) throw ConfigError("block params: projection size mismatch");
        }
        if (w_cm_k.size() != hidden * d || w_cm_v.size() != d * hidden) {
            throw ConfigError("block params: channel-mix matrix size mismatch");
        }
        for (const auto* v : {&ln1_g, &ln1_b, &ln2_g, &ln2_b}) {
            if (v->size() != d) throw ConfigError("block params: layernorm size mismatch");
        }
    }
};

namespace detail {

template <typename S>
inline std::vector<S> lerp_vec(const std::vector<S>& x_t, const std::vector<S>& x_prev,
                               const std::vector<S>& mu) {
    std::vector<S> out(x_t.size());
    for (size_t i = 0; i < x_t.size(); ++i) out[i] = x_t[i] + mu[i] * (x_prev[i] - x_t[i]);
    return out;
}

}  // namespace detail

// One token through one block; state carries (a, b, p) and both shift
// buffers and is updated in place.
template <typename S>
std::vector<S> rwkv_block_step(const std::vector<S>& x_t, WkvState<S>& state,
                               const BlockParams<S>& params) {
    size_t d = params.d;
    if (x_t.size() != d) {
        throw ConfigError("rwkv block: input dimension " + std::to_string(x_t.size()) +
                          " does not match block dimension " + std::to_string(d));
    }
    if (state.dim() != d) throw ConfigError("rwkv block: state dimension mismatch");

    // time-mix branch
    std::vector<S> xn = x_t;
    layernorm_inplace(xn, params.ln1_g, params.ln1_b);
    ShiftedInputs<S> sh = token_shift(xn, state.shift_tm, params.shift);
    std::vector<S> r = matvec(params.w_r, sh.r, d, d);
    std::vector<S> k = matvec(params.w_k, sh.k, d, d);
    std::vector<S> v = matvec(params.w_v, sh.v, d, d);
    std::vector<S> gated(d);
    for (size_t c = 0; c < d; ++c) {
        S wkv = wkv_channel_step(state.a[c], state.b[c], state.p[c], params.decay.w[c],
                                 params.decay.u[c], k[c], v[c]);
        gated[c] = detail::sigmoid(r[c]) * wkv;
    }
    std::vector<S> att = matvec(params.w_o, gated, d, d);
    state.shift_tm = xn;

    std::vector<S> x = x_t;
    for (size_t c = 0; c < d; ++c) x[c] += att[c];

    // channel-mix branch
    std::vector<S> xn2 = x;
    layernorm_inplace(xn2, params.ln2_g, params.ln2_b);
    std::vector<S> xk = detail::lerp_vec(xn2, state.shift_cm, params.mu_cm_k);
    std::vector<S> xr = detail::lerp_vec(xn2, state.shift_cm, params.mu_cm_r);
    std::vector<S> kk = matvec(params.w_cm_k, xk, params.hidden, d);
    for (auto& h : kk) {
        S rel = h > S(0) ? h : S(0);
        h = rel * rel;
    }
    std::vector<S> kv = matvec(params.w_cm_v, kk, d, params.hidden);
    std::vector<S> rr = matvec(params.w_cm_r, xr, d, d);
    state.shift_cm = xn2;
    for (size_t c = 0; c < d; ++c) {
        x[c] += detail::sigmoid(rr[c]) * kv[c];
    }
    ensure_finite<S>(x, "rwkv block output");
    return x;
}

template <typename S>
struct BlockForwardResult {
    std::vector<std::vector<S>> y;
    WkvState<S> state;
};

template <typename S>
BlockForwardResult<S> rwkv_block_forward(const std::vector<std::vector<S>>& x,
                                         const WkvState<S>& state,
                                         const BlockParams<S>& params) {
    params.validate();
    if (x.empty()) throw ConfigError("rwkv block: empty input sequence");
    BlockForwardResult<S> res;
    res.state = state;
    res.state.validate();
    res.y.reserve(x.size());
    for (const auto& x_t : x) {
        res.y.push_back(rwkv_block_step(x_t, res.state, params));
    }
    return res;
}

}  // namespace longvid::rwkv
