#pragma once

// RWKV-style time-mix recurrence kernels.
//
// The recurrence
//     alpha_i = e^{-w} alpha_{i-1} + e^{k_i} v_i
//     beta_i  = e^{-w} beta_{i-1}  + e^{k_i}
//     wkv_i   = (e^{u+k_i} v_i + alpha_{i-1}) / (e^{u+k_i} + beta_{i-1})
// overflows in floating point as soon as k grows, so the state is stored
// in exponent-shifted form: a = alpha * e^{-p}, b = beta * e^{-p} with p a
// running max exponent. Every exponential evaluated below is of a
// non-positive argument, which keeps all intermediates bounded. In exact
// arithmetic the shifted recurrence is identical to the naive one.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "longvid/common.hpp"

namespace longvid::rwkv {

template <typename S>
struct DecayParams {
    std::vector<S> w;  // per-channel decay rate, >= 0
    std::vector<S> u;  // per-channel bonus for the current token

    size_t dim() const { return w.size(); }

    void validate() const {
        if (w.size() != u.size()) {
            throw ConfigError("decay params: w and u dimensions differ");
        }
        ensure_finite<S>(w, "decay w");
        ensure_finite<S>(u, "decay u");
        for (size_t i = 0; i < w.size(); ++i) {
            if (w[i] < S(0)) {
                throw ConfigError("decay w[" + std::to_string(i) + "] is negative");
            }
        }
    }
};

// Shifted recurrent state plus the token-shift buffers of a block.
// Naive state is recoverable as alpha = a*e^p, beta = b*e^p. p starts at
// -inf (empty history), which makes the first token bypass the decay.
template <typename S>
struct WkvState {
    std::vector<S> a;
    std::vector<S> b;
    std::vector<S> p;
    std::vector<S> shift_tm;
    std::vector<S> shift_cm;

    static WkvState zero(size_t d) {
        WkvState s;
        s.a.assign(d, S(0));
        s.b.assign(d, S(0));
        s.p.assign(d, -std::numeric_limits<S>::infinity());
        s.shift_tm.assign(d, S(0));
        s.shift_cm.assign(d, S(0));
        return s;
    }

    size_t dim() const { return a.size(); }

    void validate() const {
        size_t d = a.size();
        if (b.size() != d || p.size() != d || shift_tm.size() != d || shift_cm.size() != d) {
            throw ConfigError("wkv state: field dimensions differ");
        }
        ensure_finite<S>(a, "state a");
        ensure_finite<S>(b, "state b");
        ensure_finite<S>(shift_tm, "state shift_tm");
        ensure_finite<S>(shift_cm, "state shift_cm");
        for (size_t i = 0; i < d; ++i) {
            if (b[i] < S(0)) throw NumericError("state b[" + std::to_string(i) + "] is negative");
            if (std::isnan(static_cast<double>(p[i])) || p[i] == std::numeric_limits<S>::infinity()) {
                throw NumericError("state p[" + std::to_string(i) + "] is invalid");
            }
        }
    }
};

template <typename S>
struct TimeMixInputs {
    std::vector<S> r;
    std::vector<S> k;
    std::vector<S> v;

    void validate(size_t d) const {
        if (r.size() != d || k.size() != d || v.size() != d) {
            throw ConfigError("time-mix inputs: dimension mismatch");
        }
        ensure_finite<S>(r, "time-mix input r");
        ensure_finite<S>(k, "time-mix input k");
        ensure_finite<S>(v, "time-mix input v");
    }
};

// One recurrence step for a single channel, state (a, b, p) updated in
// place. Shared by the step, sequence and block paths so they stay
// bitwise identical.
template <typename S>
inline S wkv_channel_step(S& a, S& b, S& p, S w, S u, S k, S v) {
    S q = std::max(p, u + k);
    S e_state = std::exp(p - q);
    S e_cur = std::exp(u + k - q);
    S y = (e_state * a + e_cur * v) / (e_state * b + e_cur);
    S p2 = std::max(p - w, k);
    S e_decay = std::exp(p - w - p2);
    S e_in = std::exp(k - p2);
    a = e_decay * a + e_in * v;
    b = e_decay * b + e_in;
    p = p2;
    return y;
}

template <typename S>
struct StepResult {
    std::vector<S> wkv;
    WkvState<S> state;
};

template <typename S>
StepResult<S> wkv_step(const WkvState<S>& state, const TimeMixInputs<S>& inp,
                       const DecayParams<S>& params) {
    params.validate();
    size_t d = params.dim();
    state.validate();
    if (state.dim() != d) throw ConfigError("wkv_step: state dimension mismatch");
    inp.validate(d);

    StepResult<S> out;
    out.state = state;
    out.wkv.resize(d);
    for (size_t c = 0; c < d; ++c) {
        out.wkv[c] = wkv_channel_step(out.state.a[c], out.state.b[c], out.state.p[c],
                                      params.w[c], params.u[c], inp.k[c], inp.v[c]);
    }
    return out;
}

template <typename S>
struct SequenceResult {
    std::vector<std::vector<S>> outputs;
    WkvState<S> final_state;
};

// Left-to-right fold of wkv_step. State stays O(d) regardless of length.
template <typename S>
SequenceResult<S> wkv_sequence(std::span<const TimeMixInputs<S>> seq,
                               const DecayParams<S>& params, const WkvState<S>& init) {
    if (seq.empty()) throw ConfigError("wkv_sequence: empty sequence");
    params.validate();
    size_t d = params.dim();
    init.validate();
    if (init.dim() != d) throw ConfigError("wkv_sequence: state dimension mismatch");

    SequenceResult<S> res;
    res.final_state = init;
    res.outputs.reserve(seq.size());
    for (size_t t = 0; t < seq.size(); ++t) {
        seq[t].validate(d);
        std::vector<S> y(d);
        for (size_t c = 0; c < d; ++c) {
            y[c] = wkv_channel_step(res.final_state.a[c], res.final_state.b[c],
                                    res.final_state.p[c], params.w[c], params.u[c],
                                    seq[t].k[c], seq[t].v[c]);
            if (!std::isfinite(static_cast<double>(y[c]))) {
                throw NumericError("wkv_sequence: non-finite output at step " +
                                   std::to_string(t) + ", channel " + std::to_string(c));
            }
        }
        res.outputs.push_back(std::move(y));
    }
    return res;
}

// Chunked evaluation. Inside a chunk the decay exponents are accumulated
// in closed form (c_i = k_i + i*w), so every output is a three-way
// combination of carried state, in-chunk prefix sums and the current
// token; the carry between chunks goes through the shifted state. Chunk
// boundaries are invisible in the results, and a chunk of one token
// performs exactly the sequential step's operations.
template <typename S>
SequenceResult<S> wkv_chunked(std::span<const TimeMixInputs<S>> seq,
                              const DecayParams<S>& params, const WkvState<S>& init,
                              size_t chunk_size) {
    if (chunk_size == 0) throw ConfigError("wkv_chunked: chunk_size must be >= 1");
    if (seq.empty()) throw ConfigError("wkv_chunked: empty sequence");
    params.validate();
    size_t d = params.dim();
    init.validate();
    if (init.dim() != d) throw ConfigError("wkv_chunked: state dimension mismatch");

    SequenceResult<S> res;
    res.final_state = init;
    res.outputs.assign(seq.size(), std::vector<S>(d));

    const S neg_inf = -std::numeric_limits<S>::infinity();
    std::vector<S> pm(d), ps(d), pt(d);  // in-chunk prefix: max exponent, scaled sums

    for (size_t begin = 0; begin < seq.size(); begin += chunk_size) {
        size_t len = std::min(chunk_size, seq.size() - begin);
        pm.assign(d, neg_inf);
        ps.assign(d, S(0));
        pt.assign(d, S(0));

        for (size_t j = 0; j < len; ++j) {
            const TimeMixInputs<S>& inp = seq[begin + j];
            inp.validate(d);
            for (size_t c = 0; c < d; ++c) {
                S w = params.w[c], u = params.u[c];
                S k = inp.k[c], v = inp.v[c];
                S a = res.final_state.a[c], b = res.final_state.b[c];
                S p = res.final_state.p[c];
                S y;
                if (j == 0) {
                    S q = std::max(p, u + k);
                    S e_state = std::exp(p - q);
                    S e_cur = std::exp(u + k - q);
                    y = (e_state * a + e_cur * v) / (e_state * b + e_cur);
                } else {
                    S carry_e = p - S(j) * w;
                    S pre_e = pm[c] - S(j - 1) * w;
                    S cur_e = u + k;
                    S q = std::max(std::max(carry_e, pre_e), cur_e);
                    S e_carry = std::exp(carry_e - q);
                    S e_pre = std::exp(pre_e - q);
                    S e_cur = std::exp(cur_e - q);
                    y = (e_carry * a + e_pre * ps[c] + e_cur * v) /
                        (e_carry * b + e_pre * pt[c] + e_cur);
                }
                res.outputs[begin + j][c] = y;
                if (!std::isfinite(static_cast<double>(y))) {
                    throw NumericError("wkv_chunked: non-finite output at step " +
                                       std::to_string(begin + j) + ", channel " +
                                       std::to_string(c));
                }
                // fold token j into the prefix sums
                S cexp = k + S(j) * w;
                S mnew = std::max(pm[c], cexp);
                S e_old = std::exp(pm[c] - mnew);
                S e_new = std::exp(cexp - mnew);
                ps[c] = e_old * ps[c] + e_new * v;
                pt[c] = e_old * pt[c] + e_new;
                pm[c] = mnew;
            }
        }

        for (size_t c = 0; c < d; ++c) {
            S w = params.w[c];
            S carry_e = res.final_state.p[c] - S(len) * w;
            S pre_e = pm[c] - S(len - 1) * w;
            S p2 = std::max(carry_e, pre_e);
            S e_carry = std::exp(carry_e - p2);
            S e_pre = std::exp(pre_e - p2);
            res.final_state.a[c] = e_carry * res.final_state.a[c] + e_pre * ps[c];
            res.final_state.b[c] = e_carry * res.final_state.b[c] + e_pre * pt[c];
            res.final_state.p[c] = p2;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Matrix-state variant: per head a square accumulator S[i][j] over
// (key index i, value index j), decayed per key channel, read through the
// receptance. The current token enters with an e^u bonus, mirroring the
// e^{u+k} bonus of the scalar recurrence.

template <typename S>
struct MatrixState {
    size_t heads = 0;
    size_t head_dim = 0;
    std::vector<S> s;  // heads * head_dim * head_dim, row = key index

    static MatrixState zero(size_t heads, size_t head_dim) {
        MatrixState m;
        m.heads = heads;
        m.head_dim = head_dim;
        m.s.assign(heads * head_dim * head_dim, S(0));
        return m;
    }

    void validate(size_t d) const {
        if (heads == 0 || head_dim == 0 || heads * head_dim != d) {
            throw ConfigError("matrix state: head geometry does not split dimension " +
                              std::to_string(d));
        }
        if (s.size() != heads * head_dim * head_dim) {
            throw ConfigError("matrix state: buffer size mismatch");
        }
        ensure_finite<S>(s, "matrix state");
    }
};

template <typename S>
std::pair<std::vector<S>, MatrixState<S>> wkv_matrix_step(const MatrixState<S>& state,
                                                          const TimeMixInputs<S>& inp,
                                                          const DecayParams<S>& params) {
    params.validate();
    size_t d = params.dim();
    state.validate(d);
    inp.validate(d);

    std::vector<S> out(d, S(0));
    MatrixState<S> next = state;
    size_t dh = state.head_dim;
    for (size_t h = 0; h < state.heads; ++h) {
        size_t base = h * dh;
        for (size_t i = 0; i < dh; ++i) {
            S r_i = inp.r[base + i];
            S k_i = inp.k[base + i];
            S bonus = std::exp(params.u[base + i]) * k_i;
            S decay = std::exp(-params.w[base + i]);
            S* row = &next.s[(base + i) * dh];
            for (size_t j = 0; j < dh; ++j) {
                S v_j = inp.v[base + j];
                out[base + j] += r_i * (bonus * v_j + row[j]);
                row[j] = decay * row[j] + k_i * v_j;
            }
        }
    }
    return {std::move(out), std::move(next)};
}

// ---------------------------------------------------------------------------
// Token shift: linear interpolation between the current and previous
// token's input. Static mode uses fixed per-channel weights in [0,1];
// data-dependent mode derives them from the current token through a
// sigmoid, so they stay in (0,1).

template <typename S>
struct ShiftMixParams {
    std::vector<S> mu_r, mu_k, mu_v;
    bool data_dependent = false;
    // learned map for data-dependent mode: mu = sigmoid(dd_b + dd_w * x_t),
    // row-major d x d per projection. Projections can opt out via the mask.
    std::vector<S> dd_w_r, dd_w_k, dd_w_v;
    std::vector<S> dd_b_r, dd_b_k, dd_b_v;
    bool dd_on_r = true, dd_on_k = true, dd_on_v = true;

    size_t dim() const { return mu_r.size(); }

    void validate() const {
        size_t d = mu_r.size();
        if (mu_k.size() != d || mu_v.size() != d) {
            throw ConfigError("shift params: mu dimensions differ");
        }
        for (const auto* mu : {&mu_r, &mu_k, &mu_v}) {
            ensure_finite<S>(*mu, "shift mu");
            for (size_t i = 0; i < d; ++i) {
                if ((*mu)[i] < S(0) || (*mu)[i] > S(1)) {
                    throw ConfigError("shift mu[" + std::to_string(i) + "] outside [0,1]");
                }
            }
        }
        if (data_dependent) {
            for (const auto* m : {&dd_w_r, &dd_w_k, &dd_w_v}) {
                if (m->size() != d * d) throw ConfigError("shift params: dd matrix size mismatch");
            }
            for (const auto* b : {&dd_b_r, &dd_b_k, &dd_b_v}) {
                if (b->size() != d) throw ConfigError("shift params: dd bias size mismatch");
            }
        }
    }
};

template <typename S>
struct ShiftedInputs {
    std::vector<S> r, k, v;
};

namespace detail {

template <typename S>
inline S sigmoid(S x) {
    if (x >= S(0)) {
        S e = std::exp(-x);
        return S(1) / (S(1) + e);
    }
    S e = std::exp(x);
    return e / (S(1) + e);
}

template <typename S>
std::vector<S> lerp_static(const std::vector<S>& x_t, const std::vector<S>& x_prev,
                           const std::vector<S>& mu) {
    std::vector<S> out(x_t.size());
    for (size_t i = 0; i < x_t.size(); ++i) {
        out[i] = x_t[i] + mu[i] * (x_prev[i] - x_t[i]);
    }
    return out;
}

template <typename S>
std::vector<S> lerp_data_dependent(const std::vector<S>& x_t, const std::vector<S>& x_prev,
                                   const std::vector<S>& w, const std::vector<S>& b) {
    size_t d = x_t.size();
    std::vector<S> out(d);
    for (size_t i = 0; i < d; ++i) {
        S acc = b[i];
        const S* row = &w[i * d];
        for (size_t j = 0; j < d; ++j) acc += row[j] * x_t[j];
        S mu = sigmoid(acc);
        out[i] = x_t[i] + mu * (x_prev[i] - x_t[i]);
    }
    return out;
}

}  // namespace detail

template <typename S>
ShiftedInputs<S> token_shift(const std::vector<S>& x_t, const std::vector<S>& x_prev,
                             const ShiftMixParams<S>& params) {
    params.validate();
    size_t d = params.dim();
    if (x_t.size() != d || x_prev.size() != d) {
        throw ConfigError("token_shift: input dimension mismatch");
    }
    ensure_finite<S>(x_t, "shift input x_t");
    ensure_finite<S>(x_prev, "shift input x_prev");

    ShiftedInputs<S> out;
    if (params.data_dependent && params.dd_on_r) {
        out.r = detail::lerp_data_dependent(x_t, x_prev, params.dd_w_r, params.dd_b_r);
    } else {
        out.r = detail::lerp_static(x_t, x_prev, params.mu_r);
    }
    if (params.data_dependent && params.dd_on_k) {
        out.k = detail::lerp_data_dependent(x_t, x_prev, params.dd_w_k, params.dd_b_k);
    } else {
        out.k = detail::lerp_static(x_t, x_prev, params.mu_k);
    }
    if (params.data_dependent && params.dd_on_v) {
        out.v = detail::lerp_data_dependent(x_t, x_prev, params.dd_w_v, params.dd_b_v);
    } else {
        out.v = detail::lerp_static(x_t, x_prev, params.mu_v);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reverse-mode gradient of wkv_sequence with respect to k, v, w, u.
// The backward recurrence carries the state adjoints in the same
// exponent-shifted form as the forward state, so exponentials are always
// evaluated on summed exponents and never as over/underflowing products.

template <typename S>
struct WkvSeqGrads {
    std::vector<std::vector<S>> k, v;
    std::vector<S> w, u;
};

template <typename S>
WkvSeqGrads<S> wkv_sequence_grad(const std::vector<std::vector<S>>& ks,
                                 const std::vector<std::vector<S>>& vs,
                                 const DecayParams<S>& params, const WkvState<S>& init,
                                 const std::vector<std::vector<S>>& grad_out) {
    params.validate();
    size_t d = params.dim();
    size_t T = ks.size();
    if (T == 0) throw ConfigError("wkv_sequence_grad: empty sequence");
    if (vs.size() != T || grad_out.size() != T) {
        throw ConfigError("wkv_sequence_grad: sequence length mismatch");
    }

    WkvSeqGrads<S> g;
    g.k.assign(T, std::vector<S>(d, S(0)));
    g.v.assign(T, std::vector<S>(d, S(0)));
    g.w.assign(d, S(0));
    g.u.assign(d, S(0));

    const S neg_inf = -std::numeric_limits<S>::infinity();
    std::vector<S> at(T), bt(T), pt(T), qt(T), dent(T), yt(T);

    for (size_t c = 0; c < d; ++c) {
        S w = params.w[c], u = params.u[c];
        // forward pass, storing the state entering each step
        S a = init.a[c], b = init.b[c], p = init.p[c];
        for (size_t t = 0; t < T; ++t) {
            S k = ks[t][c], v = vs[t][c];
            at[t] = a;
            bt[t] = b;
            pt[t] = p;
            S q = std::max(p, u + k);
            S e_state = std::exp(p - q);
            S e_cur = std::exp(u + k - q);
            S den = e_state * b + e_cur;
            qt[t] = q;
            dent[t] = den;
            yt[t] = (e_state * a + e_cur * v) / den;
            S p2 = std::max(p - w, k);
            S e_decay = std::exp(p - w - p2);
            S e_in = std::exp(k - p2);
            a = e_decay * a + e_in * v;
            b = e_decay * b + e_in;
            p = p2;
        }
        // backward pass; (ga, gb) * e^m are the adjoints of (alpha, beta)
        // after the current step
        S ga = S(0), gb = S(0), m = neg_inf;
        for (size_t t = T; t-- > 0;) {
            S k = ks[t][c], v = vs[t][c];
            S gy = grad_out[t][c];
            // gradients through the state update alpha_{t+1} = e^{-w} alpha_t + e^k v
            S e_k = std::exp(m + k);
            g.v[t][c] += ga * e_k;
            g.k[t][c] += (ga * v + gb) * e_k;
            g.w[c] -= (ga * at[t] + gb * bt[t]) * std::exp(m + pt[t] - w);
            // gradients through the read y_t
            S ratio = std::exp(u + k - qt[t]) / dent[t];  // e^{u+k} / (e^q * den)
            g.k[t][c] += gy * ratio * (v - yt[t]);
            g.u[c] += gy * ratio * (v - yt[t]);
            g.v[t][c] += gy * ratio;
            // fold the read adjoint into the state adjoint:
            // g_alpha_t = e^{-w} g_alpha_{t+1} + gy / (e^q * den)
            S m2 = std::max(m - w, -qt[t]);
            S e_old = std::exp(m - w - m2);
            S e_new = std::exp(-qt[t] - m2) / dent[t];
            ga = ga * e_old + gy * e_new;
            gb = gb * e_old - gy * yt[t] * e_new;
            m = m2;
        }
    }
    return g;
}

}  // namespace longvid::rwkv
