#pragma once

// Small define-by-run reverse-mode tape over 2D double tensors. Ops
// execute eagerly and push a backward closure; backward() walks the tape
// in reverse. The wkv op wraps the recurrent kernel with its hand-derived
// gradient so whole sequences are one node.

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "longvid/common.hpp"

namespace longvid::ad {

struct Tensor {
    size_t rows = 0, cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(size_t r, size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& at(size_t r, size_t c) { return data[r * cols + c]; }
    double at(size_t r, size_t c) const { return data[r * cols + c]; }
    size_t numel() const { return data.size(); }
};

class Tape {
public:
    bool grad_enabled = true;

    int variable(Tensor v);  // leaf that accumulates gradient
    int constant(Tensor v);  // leaf without gradient

    int matmul(int a, int b);     // [m,k] x [k,n]
    int matmul_nt(int a, int b);  // [m,k] x [n,k]^T -> [m,n]
    int add(int a, int b);        // same shape, or b a broadcast row
    int sub(int a, int b);
    int mul(int a, int b);
    int scale(int a, double s);
    int sigmoid(int a);
    int gelu(int a);
    int relu_sq(int a);
    int exp(int a);
    int layernorm(int a, int gain, int bias);  // per row, gain/bias [1,cols]
    int softmax_rows(int a);
    int slice_rows(int a, size_t r0, size_t r1);
    int slice_cols(int a, size_t c0, size_t c1);
    int concat_rows(const std::vector<int>& parts);
    int concat_cols(const std::vector<int>& parts);
    int gather_rows(int a, std::vector<size_t> idx);
    // out[r] = sum over (src,coeff) in combos[r] of coeff * a[src]
    int linear_rows(int a, std::vector<std::vector<std::pair<size_t, double>>> combos);
    int shift_rows_down(int a);  // out[0] = 0, out[t] = a[t-1]
    // k, v are [T,d]; w, u are [1,d]; runs the wkv recurrence from zero state
    int wkv(int k, int v, int w, int u);
    int sum_all(int a);  // [1,1]
    // mean over rows of (logsumexp(row) - row[target])
    int cross_entropy_logits(int logits, std::vector<int> targets);

    void backward(int loss);

    const Tensor& value(int id) const { return nodes_[size_t(id)].value; }
    const Tensor& grad(int id);  // zeros if the node never received gradient
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;

    int push(Tensor v, bool needs_grad, std::function<void()> back);
    Tensor& grad_buf(int id);
    void check(int id) const;
    friend struct TapeTestPeek;
};

}  // namespace longvid::ad
