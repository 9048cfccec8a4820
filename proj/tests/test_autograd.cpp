#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "longvid/autograd.hpp"
#include "longvid/common.hpp"

using longvid::ConfigError;
using longvid::Rng;
namespace ad = longvid::ad;

namespace {

ad::Tensor random_tensor(Rng& rng, size_t rows, size_t cols, double lo = -1.0,
                         double hi = 1.0) {
    ad::Tensor t(rows, cols);
    for (double& x : t.data) x = longvid::uniform(rng, lo, hi);
    return t;
}

// Builds the graph from leaf variables, returns the loss node id.
using Builder = std::function<int(ad::Tape&, const std::vector<int>&)>;

double eval_loss(const Builder& build, const std::vector<ad::Tensor>& inputs) {
    ad::Tape tape;
    tape.grad_enabled = false;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& t : inputs) ids.push_back(tape.variable(t));
    return tape.value(build(tape, ids)).data[0];
}

// Central-difference check of every element of every input against the
// tape's reverse-mode gradient.
void gradcheck(const Builder& build, std::vector<ad::Tensor> inputs, double tol = 1e-6,
               double h = 1e-6) {
    ad::Tape tape;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& t : inputs) ids.push_back(tape.variable(t));
    int loss = build(tape, ids);
    tape.backward(loss);

    for (size_t i = 0; i < inputs.size(); ++i) {
        ad::Tensor analytic = tape.grad(ids[i]);
        for (size_t e = 0; e < inputs[i].numel(); ++e) {
            double saved = inputs[i].data[e];
            inputs[i].data[e] = saved + h;
            double up = eval_loss(build, inputs);
            inputs[i].data[e] = saved - h;
            double down = eval_loss(build, inputs);
            inputs[i].data[e] = saved;
            double fd = (up - down) / (2.0 * h);
            double an = analytic.data[e];
            double rel = std::abs(fd - an) / (1.0 + std::max(std::abs(fd), std::abs(an)));
            INFO("input ", i, " element ", e, " fd=", fd, " analytic=", an);
            CHECK(rel <= tol);
        }
    }
}

// Reduces an arbitrary op output to a scalar with fixed pseudo-random
// weights so every output element contributes a distinct gradient. The
// weights are seeded from the node id, which is stable across the repeated
// graph rebuilds of the finite-difference loop.
int weighted_sum(ad::Tape& tape, int node) {
    const ad::Tensor& v = tape.value(node);
    Rng wr(0x5eed0000ull + uint64_t(node) * 1315423911ull);
    ad::Tensor w(v.rows, v.cols);
    for (double& x : w.data) x = longvid::uniform(wr, -1.0, 1.0);
    return tape.sum_all(tape.mul(node, tape.constant(w)));
}

}  // namespace

TEST_CASE("tape values match hand-computed results") {
    ad::Tape tape;

    ad::Tensor a(2, 3);
    a.data = {1, 2, 3, 4, 5, 6};
    ad::Tensor b(3, 2);
    b.data = {7, 8, 9, 10, 11, 12};
    int c = tape.matmul(tape.constant(a), tape.constant(b));
    CHECK(tape.value(c).at(0, 0) == doctest::Approx(58));
    CHECK(tape.value(c).at(0, 1) == doctest::Approx(64));
    CHECK(tape.value(c).at(1, 0) == doctest::Approx(139));
    CHECK(tape.value(c).at(1, 1) == doctest::Approx(154));

    ad::Tensor bt(2, 3);
    bt.data = {7, 9, 11, 8, 10, 12};  // b transposed
    int cnt = tape.matmul_nt(tape.constant(a), tape.constant(bt));
    for (size_t i = 0; i < 2; ++i)
        for (size_t j = 0; j < 2; ++j) CHECK(tape.value(cnt).at(i, j) == tape.value(c).at(i, j));

    ad::Tensor logits(1, 3);
    logits.data = {1.0, 2.0, 3.0};
    int ce = tape.cross_entropy_logits(tape.constant(logits), {2});
    double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
    CHECK(tape.value(ce).data[0] == doctest::Approx(lse - 3.0).epsilon(1e-12));

    ad::Tensor sm(2, 3);
    sm.data = {0.0, 1.0, 2.0, -5.0, 0.0, 5.0};
    int soft = tape.softmax_rows(tape.constant(sm));
    for (size_t i = 0; i < 2; ++i) {
        double sum = 0.0;
        for (size_t j = 0; j < 3; ++j) sum += tape.value(soft).at(i, j);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(tape.value(soft).at(0, 1) / tape.value(soft).at(0, 0) ==
          doctest::Approx(std::exp(1.0)).epsilon(1e-12));
}

TEST_CASE("structural ops rearrange rows and columns exactly") {
    ad::Tape tape;
    ad::Tensor a(4, 3);
    for (size_t i = 0; i < a.numel(); ++i) a.data[i] = double(i);
    int id = tape.constant(a);

    int rows = tape.slice_rows(id, 1, 3);
    CHECK(tape.value(rows).rows == 2);
    CHECK(tape.value(rows).at(0, 0) == 3.0);

    int cols = tape.slice_cols(id, 2, 3);
    CHECK(tape.value(cols).cols == 1);
    CHECK(tape.value(cols).at(3, 0) == 11.0);

    int gathered = tape.gather_rows(id, {3, 0, 3});
    CHECK(tape.value(gathered).rows == 3);
    CHECK(tape.value(gathered).at(0, 1) == 10.0);
    CHECK(tape.value(gathered).at(1, 1) == 1.0);
    CHECK(tape.value(gathered).at(2, 1) == 10.0);

    int stacked = tape.concat_rows({rows, rows});
    CHECK(tape.value(stacked).rows == 4);

    int wide = tape.concat_cols({id, id});
    CHECK(tape.value(wide).cols == 6);
    CHECK(tape.value(wide).at(2, 5) == tape.value(wide).at(2, 2));

    // out[0] = a[1] + 0.5 a[2], out[1] = 2 a[0]
    int combined = tape.linear_rows(id, {{{1, 1.0}, {2, 0.5}}, {{0, 2.0}}});
    CHECK(tape.value(combined).at(0, 0) == doctest::Approx(3.0 + 0.5 * 6.0));
    CHECK(tape.value(combined).at(1, 2) == doctest::Approx(4.0));

    int shifted = tape.shift_rows_down(id);
    CHECK(tape.value(shifted).at(0, 0) == 0.0);
    CHECK(tape.value(shifted).at(0, 2) == 0.0);
    CHECK(tape.value(shifted).at(1, 0) == 0.0 + a.at(0, 0));
    CHECK(tape.value(shifted).at(3, 2) == a.at(2, 2));
}

TEST_CASE("gradcheck: linear algebra ops") {
    Rng rng(11);

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.matmul(in[0], in[1]));
    }, {random_tensor(rng, 3, 4), random_tensor(rng, 4, 2)});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.matmul_nt(in[0], in[1]));
    }, {random_tensor(rng, 3, 4), random_tensor(rng, 2, 4)});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.add(in[0], in[1]));
    }, {random_tensor(rng, 3, 4), random_tensor(rng, 3, 4)});

    // row-broadcast variants
    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.add(in[0], in[1]));
    }, {random_tensor(rng, 3, 4), random_tensor(rng, 1, 4)});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.sub(in[0], in[1]));
    }, {random_tensor(rng, 3, 4), random_tensor(rng, 1, 4)});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.mul(in[0], in[1]));
    }, {random_tensor(rng, 3, 4), random_tensor(rng, 1, 4)});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.scale(in[0], -1.7));
    }, {random_tensor(rng, 2, 5)});
}

TEST_CASE("gradcheck: nonlinearities") {
    Rng rng(12);

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.sigmoid(in[0]));
    }, {random_tensor(rng, 3, 4, -3.0, 3.0)});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.gelu(in[0]));
    }, {random_tensor(rng, 3, 4, -3.0, 3.0)});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.exp(in[0]));
    }, {random_tensor(rng, 3, 4, -2.0, 2.0)});

    // keep inputs away from the kink at zero
    ad::Tensor away(3, 4);
    for (double& x : away.data) {
        x = longvid::uniform(rng, 0.2, 2.0) * (longvid::uniform01(rng) < 0.5 ? -1.0 : 1.0);
    }
    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.relu_sq(in[0]));
    }, {away});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.softmax_rows(in[0]));
    }, {random_tensor(rng, 3, 5, -2.0, 2.0)});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.layernorm(in[0], in[1], in[2]));
    }, {random_tensor(rng, 4, 6), random_tensor(rng, 1, 6, 0.5, 1.5),
        random_tensor(rng, 1, 6)});
}

TEST_CASE("gradcheck: structural ops") {
    Rng rng(13);

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        int top = t.slice_rows(in[0], 0, 2);
        int bottom = t.slice_rows(in[0], 2, 5);
        int left = t.slice_cols(in[1], 0, 2);
        int right = t.slice_cols(in[1], 2, 4);
        int rows = t.concat_rows({bottom, top});
        int cols = t.concat_cols({right, left});
        return t.add(weighted_sum(t, rows), weighted_sum(t, cols));
    }, {random_tensor(rng, 5, 4), random_tensor(rng, 5, 4)});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        // gather with a repeated row exercises scatter-add accumulation
        return weighted_sum(t, t.gather_rows(in[0], {2, 0, 2, 1}));
    }, {random_tensor(rng, 3, 4)});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.linear_rows(in[0], {{{0, 0.25}, {2, 0.75}}, {{1, 1.0}},
                                             {{0, 0.5}, {1, 0.5}, {2, 0.5}}}));
    }, {random_tensor(rng, 3, 4)});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.shift_rows_down(in[0]));
    }, {random_tensor(rng, 4, 3)});

    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return t.cross_entropy_logits(in[0], {2, 0, 1});
    }, {random_tensor(rng, 3, 4, -2.0, 2.0)});
}

TEST_CASE("gradcheck: wkv node") {
    Rng rng(14);

    for (int rep = 0; rep < 3; ++rep) {
        ad::Tensor k = random_tensor(rng, 6, 3, -1.5, 1.5);
        ad::Tensor v = random_tensor(rng, 6, 3, -2.0, 2.0);
        ad::Tensor w = random_tensor(rng, 1, 3, 0.05, 1.5);
        ad::Tensor u = random_tensor(rng, 1, 3, -1.0, 1.0);
        gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.wkv(in[0], in[1], in[2], in[3]));
        }, {k, v, w, u}, 1e-5);
    }

    // positivity of the decay is parameterised through exp upstream
    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        return weighted_sum(t, t.wkv(in[0], in[1], t.exp(in[2]), in[3]));
    }, {random_tensor(rng, 5, 2), random_tensor(rng, 5, 2),
        random_tensor(rng, 1, 2, -2.0, 0.5), random_tensor(rng, 1, 2)}, 1e-5);
}

TEST_CASE("gradcheck: composite network with a shared parameter") {
    Rng rng(15);
    // W is used twice; its gradient must accumulate across both uses
    gradcheck([&](ad::Tape& t, const std::vector<int>& in) {
        int h = t.gelu(t.matmul_nt(in[0], in[1]));
        int y = t.matmul_nt(h, in[1]);
        int n = t.layernorm(y, in[2], in[3]);
        return t.cross_entropy_logits(n, {1, 3, 0});
    }, {random_tensor(rng, 3, 4), random_tensor(rng, 4, 4),
        random_tensor(rng, 1, 4, 0.5, 1.5), random_tensor(rng, 1, 4)}, 1e-5);
}

TEST_CASE("inference mode skips gradient bookkeeping but not values") {
    Rng rng(16);
    ad::Tensor x = random_tensor(rng, 3, 4);
    ad::Tensor w = random_tensor(rng, 4, 4);

    ad::Tape with_grad;
    int loss_g = with_grad.cross_entropy_logits(
        with_grad.gelu(with_grad.matmul_nt(with_grad.variable(x), with_grad.variable(w))),
        {0, 1, 2});

    ad::Tape no_grad;
    no_grad.grad_enabled = false;
    int xv = no_grad.variable(x);
    int loss_n = no_grad.cross_entropy_logits(
        no_grad.gelu(no_grad.matmul_nt(xv, no_grad.variable(w))), {0, 1, 2});

    CHECK(with_grad.value(loss_g).data[0] == no_grad.value(loss_n).data[0]);
    CHECK_THROWS_AS(no_grad.backward(loss_n), ConfigError);
}

TEST_CASE("tape rejects malformed graphs") {
    ad::Tape tape;
    int a = tape.constant(ad::Tensor(2, 3, 1.0));
    int b = tape.constant(ad::Tensor(2, 2, 1.0));
    CHECK_THROWS_AS(tape.matmul(a, b), ConfigError);
    CHECK_THROWS_AS(tape.add(a, b), ConfigError);
    CHECK_THROWS_AS(tape.slice_rows(a, 1, 5), ConfigError);
    CHECK_THROWS_AS(tape.gather_rows(a, {7}), ConfigError);
    CHECK_THROWS_AS(tape.cross_entropy_logits(a, {0}), ConfigError);
    CHECK_THROWS_AS(tape.cross_entropy_logits(a, {0, 9}), ConfigError);
    CHECK_THROWS_AS(tape.backward(a), ConfigError);

    ad::Tensor neg_w(1, 3, -0.5);
    int k = tape.constant(ad::Tensor(4, 3, 0.0));
    CHECK_THROWS_AS(tape.wkv(k, k, tape.constant(neg_w), tape.constant(ad::Tensor(1, 3))),
                    ConfigError);
}
