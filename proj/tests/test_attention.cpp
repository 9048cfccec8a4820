#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "longvid/attention.hpp"
#include "longvid/common.hpp"

using namespace longvid;
using namespace longvid::attn;

namespace {

double rel_err(double a, double b) {
    return std::abs(a - b) / (1.0 + std::max(std::abs(a), std::abs(b)));
}

// quadratic reference: full score matrix with causal mask, row softmax
std::vector<std::vector<double>> full_causal_attention(
    const std::vector<std::vector<double>>& q, const std::vector<std::vector<double>>& k,
    const std::vector<std::vector<double>>& v) {
    size_t T = q.size(), d = q[0].size();
    double scale = 1.0 / std::sqrt(double(d));
    std::vector<std::vector<double>> out(T, std::vector<double>(d, 0.0));
    for (size_t t = 0; t < T; ++t) {
        std::vector<double> s(t + 1);
        double mx = -1e300;
        for (size_t j = 0; j <= t; ++j) {
            double acc = 0.0;
            for (size_t c = 0; c < d; ++c) acc += q[t][c] * k[j][c];
            s[j] = acc * scale;
            mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (size_t j = 0; j <= t; ++j) {
            s[j] = std::exp(s[j] - mx);
            z += s[j];
        }
        for (size_t j = 0; j <= t; ++j) {
            for (size_t c = 0; c < d; ++c) out[t][c] += s[j] / z * v[j][c];
        }
    }
    return out;
}

}  // namespace

TEST_CASE("causal_attention_step base cases") {
    KvCache<double> cache;
    std::vector<double> q = {1.0, 2.0}, k = {0.3, -0.1}, v = {5.0, -7.0};
    auto out = causal_attention_step(cache, q, k, v);
    CHECK(out[0] == doctest::Approx(5.0));
    CHECK(out[1] == doctest::Approx(-7.0));
    CHECK(cache.tokens() == 1);

    // orthogonal keys score equally (zero), so the mix is the mean
    KvCache<double> c2;
    causal_attention_step(c2, {1.0, 0.0}, {0.0, 1.0}, {2.0, 0.0});
    auto mix = causal_attention_step(c2, {1.0, 0.0}, {0.0, -1.0}, {4.0, 2.0});
    CHECK(mix[0] == doctest::Approx(3.0));
    CHECK(mix[1] == doctest::Approx(1.0));

    CHECK_THROWS_AS(causal_attention_step(c2, {1.0}, {1.0, 0.0}, {1.0, 0.0}), ConfigError);
}

TEST_CASE("stepped attention equals the full-matrix oracle") {
    Rng g(99);
    size_t T = 8, d = 4;
    std::vector<std::vector<double>> q(T, std::vector<double>(d)), k = q, v = q;
    for (size_t t = 0; t < T; ++t) {
        for (size_t c = 0; c < d; ++c) {
            q[t][c] = uniform(g, -2.0, 2.0);
            k[t][c] = uniform(g, -2.0, 2.0);
            v[t][c] = uniform(g, -2.0, 2.0);
        }
    }
    auto want = full_causal_attention(q, k, v);
    KvCache<double> cache;
    for (size_t t = 0; t < T; ++t) {
        auto got = causal_attention_step(cache, q[t], k[t], v[t]);
        for (size_t c = 0; c < d; ++c) CHECK(rel_err(got[c], want[t][c]) <= 1e-12);
    }
    CHECK(cache.tokens() == T);
}

TEST_CASE("future tokens cannot influence past outputs") {
    Rng g(7);
    size_t T = 6, d = 3;
    auto mk = [&](Rng& gen) {
        std::vector<std::vector<double>> m(T, std::vector<double>(d));
        for (auto& row : m) {
            for (auto& x : row) x = uniform(gen, -1.0, 1.0);
        }
        return m;
    };
    auto q = mk(g), k = mk(g), v = mk(g);
    auto q2 = q, k2 = k, v2 = v;
    // rewrite everything from position 3 on
    for (size_t t = 3; t < T; ++t) {
        for (size_t c = 0; c < d; ++c) {
            q2[t][c] += 10.0;
            k2[t][c] -= 5.0;
            v2[t][c] *= -2.0;
        }
    }
    KvCache<double> ca, cb;
    for (size_t t = 0; t < 3; ++t) {
        auto a = causal_attention_step(ca, q[t], k[t], v[t]);
        auto b = causal_attention_step(cb, q2[t], k2[t], v2[t]);
        CHECK(a == b);
    }
}

TEST_CASE("kv cache accounting") {
    MemoryModel m;
    m.d_model = 1024;
    m.n_layers = 24;
    CHECK(kv_cache_floats(m, 0) == 0);
    CHECK(kv_cache_floats(m, 61440) == 3019898880ull);
    CHECK(kv_cache_floats(m, 2000) == 2 * kv_cache_floats(m, 1000));
}

TEST_CASE("recurrent state accounting") {
    MemoryModel r4;
    r4.d_model = 1024;
    r4.n_layers = 24;
    r4.variant = StateVariant::rwkv4_state;
    CHECK(recurrent_state_floats(r4) == 122880);

    MemoryModel r5 = r4;
    r5.variant = StateVariant::rwkv5_state;
    r5.heads = 16;
    r5.head_dim = 64;
    CHECK(recurrent_state_floats(r5) == 1622016);

    MemoryModel kv = r4;
    kv.variant = StateVariant::kv_cache;
    CHECK_THROWS_AS(recurrent_state_floats(kv), ConfigError);

    r5.head_dim = 32;  // 16 * 32 != 1024
    CHECK_THROWS_AS(recurrent_state_floats(r5), ConfigError);
}

TEST_CASE("crossover point") {
    MemoryModel base;
    base.d_model = 1024;
    base.n_layers = 24;
    MemoryModel rec = base;
    rec.variant = StateVariant::rwkv4_state;
    size_t t0 = crossover_t0(base, rec, 34.0);
    CHECK(t0 == 86);
    CHECK(double(kv_cache_floats(base, t0)) > 34.0 * double(recurrent_state_floats(rec)));
    CHECK(double(kv_cache_floats(base, t0 - 1)) <= 34.0 * double(recurrent_state_floats(rec)));
}

TEST_CASE("baseline block steps grow the cache by one per token") {
    Rng g(17);
    BaselineBlockParams<double> p;
    p.d = 8;
    p.heads = 2;
    p.hidden = 16;
    auto fill = [&](std::vector<double>& m, size_t n, double s) {
        m.resize(n);
        for (auto& x : m) x = uniform(g, -s, s);
    };
    fill(p.wq, 64, 0.4);
    fill(p.wk, 64, 0.4);
    fill(p.wv, 64, 0.4);
    fill(p.wo, 64, 0.4);
    fill(p.mlp_w1, p.hidden * p.d, 0.4);
    fill(p.mlp_w2, p.d * p.hidden, 0.4);
    p.mlp_b1.assign(p.hidden, 0.0);
    p.mlp_b2.assign(p.d, 0.0);
    p.ln1_g.assign(p.d, 1.0);
    p.ln1_b.assign(p.d, 0.0);
    p.ln2_g.assign(p.d, 1.0);
    p.ln2_b.assign(p.d, 0.0);

    auto state = BaselineBlockState<double>::zero(p.heads);
    auto state2 = BaselineBlockState<double>::zero(p.heads);
    for (size_t t = 1; t <= 5; ++t) {
        std::vector<double> x(p.d);
        for (auto& c : x) c = uniform(g, -1.0, 1.0);
        auto y = baseline_block_step(x, state, p);
        auto y2 = baseline_block_step(x, state2, p);
        CHECK(y == y2);  // deterministic
        CHECK(y.size() == p.d);
        for (const auto& c : state.head_caches) CHECK(c.tokens() == t);
        // 2 floats per cached scalar pair: heads * dh * 2 per token
        CHECK(state.cached_floats() == 2 * t * p.d);
    }
}
