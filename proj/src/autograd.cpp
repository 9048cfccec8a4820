#include "longvid/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "longvid/wkv.hpp"

namespace longvid::ad {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows != b.rows || a.cols != b.cols) {
        throw ConfigError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows) +
                          "x" + std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                          std::to_string(b.cols) + ")");
    }
}

// b may either match a or be a single row broadcast over a's rows
bool broadcast_row(const Tensor& a, const Tensor& b, const char* op) {
    if (b.rows == a.rows && b.cols == a.cols) return false;
    if (b.rows == 1 && b.cols == a.cols) return true;
    require_same_shape(a, b, op);
    return false;
}

}  // namespace

void Tape::check(int id) const {
    if (id < 0 || size_t(id) >= nodes_.size()) {
        throw ConfigError("tape: node id " + std::to_string(id) + " out of range");
    }
}

int Tape::push(Tensor v, bool needs_grad, std::function<void()> back) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = grad_enabled && needs_grad;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
}

Tensor& Tape::grad_buf(int id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.numel() == 0) n.grad = Tensor(n.value.rows, n.value.cols);
    return n.grad;
}

const Tensor& Tape::grad(int id) {
    check(id);
    return grad_buf(id);
}

int Tape::variable(Tensor v) {
    if (v.data.size() != v.rows * v.cols) throw ConfigError("tape: tensor buffer size mismatch");
    return push(std::move(v), true, nullptr);
}

int Tape::constant(Tensor v) {
    if (v.data.size() != v.rows * v.cols) throw ConfigError("tape: tensor buffer size mismatch");
    return push(std::move(v), false, nullptr);
}

int Tape::matmul(int a, int b) {
    check(a);
    check(b);
    const Tensor& A = nodes_[size_t(a)].value;
    const Tensor& B = nodes_[size_t(b)].value;
    if (A.cols != B.rows) throw ConfigError("matmul: inner dimensions differ");
    Tensor C(A.rows, B.cols);
    for (size_t i = 0; i < A.rows; ++i) {
        for (size_t k = 0; k < A.cols; ++k) {
            double aik = A.at(i, k);
            if (aik == 0.0) continue;
            for (size_t j = 0; j < B.cols; ++j) C.at(i, j) += aik * B.at(k, j);
        }
    }
    bool ng = nodes_[size_t(a)].needs_grad || nodes_[size_t(b)].needs_grad;
    int out = push(std::move(C), ng, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, b, out] {
            const Tensor& g = grad_buf(out);
            const Tensor& A2 = nodes_[size_t(a)].value;
            const Tensor& B2 = nodes_[size_t(b)].value;
            if (nodes_[size_t(a)].needs_grad) {
                Tensor& ga = grad_buf(a);
                for (size_t i = 0; i < A2.rows; ++i)
                    for (size_t j = 0; j < B2.cols; ++j) {
                        double gij = g.at(i, j);
                        if (gij == 0.0) continue;
                        for (size_t k = 0; k < A2.cols; ++k) ga.at(i, k) += gij * B2.at(k, j);
                    }
            }
            if (nodes_[size_t(b)].needs_grad) {
                Tensor& gb = grad_buf(b);
                for (size_t i = 0; i < A2.rows; ++i)
                    for (size_t k = 0; k < A2.cols; ++k) {
                        double aik = A2.at(i, k);
                        if (aik == 0.0) continue;
                        for (size_t j = 0; j < B2.cols; ++j) gb.at(k, j) += aik * g.at(i, j);
                    }
            }
        };
    }
    return out;
}

int Tape::matmul_nt(int a, int b) {
    check(a);
    check(b);
    const Tensor& A = nodes_[size_t(a)].value;
    const Tensor& B = nodes_[size_t(b)].value;
    if (A.cols != B.cols) throw ConfigError("matmul_nt: inner dimensions differ");
    Tensor C(A.rows, B.rows);
    for (size_t i = 0; i < A.rows; ++i)
        for (size_t j = 0; j < B.rows; ++j) {
            double acc = 0.0;
            for (size_t k = 0; k < A.cols; ++k) acc += A.at(i, k) * B.at(j, k);
            C.at(i, j) = acc;
        }
    bool ng = nodes_[size_t(a)].needs_grad || nodes_[size_t(b)].needs_grad;
    int out = push(std::move(C), ng, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, b, out] {
            const Tensor& g = grad_buf(out);
            const Tensor& A2 = nodes_[size_t(a)].value;
            const Tensor& B2 = nodes_[size_t(b)].value;
            if (nodes_[size_t(a)].needs_grad) {
                Tensor& ga = grad_buf(a);
                for (size_t i = 0; i < A2.rows; ++i)
                    for (size_t j = 0; j < B2.rows; ++j) {
                        double gij = g.at(i, j);
                        if (gij == 0.0) continue;
                        for (size_t k = 0; k < A2.cols; ++k) ga.at(i, k) += gij * B2.at(j, k);
                    }
            }
            if (nodes_[size_t(b)].needs_grad) {
                Tensor& gb = grad_buf(b);
                for (size_t i = 0; i < A2.rows; ++i)
                    for (size_t j = 0; j < B2.rows; ++j) {
                        double gij = g.at(i, j);
                        if (gij == 0.0) continue;
                        for (size_t k = 0; k < A2.cols; ++k) gb.at(j, k) += gij * A2.at(i, k);
                    }
            }
        };
    }
    return out;
}

int Tape::add(int a, int b) {
    check(a);
    check(b);
    const Tensor& A = nodes_[size_t(a)].value;
    const Tensor& B = nodes_[size_t(b)].value;
    bool bcast = broadcast_row(A, B, "add");
    Tensor C(A.rows, A.cols);
    for (size_t i = 0; i < A.rows; ++i)
        for (size_t j = 0; j < A.cols; ++j) C.at(i, j) = A.at(i, j) + B.at(bcast ? 0 : i, j);
    bool ng = nodes_[size_t(a)].needs_grad || nodes_[size_t(b)].needs_grad;
    int out = push(std::move(C), ng, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, b, bcast, out] {
            const Tensor& g = grad_buf(out);
            if (nodes_[size_t(a)].needs_grad) {
                Tensor& ga = grad_buf(a);
                for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
            }
            if (nodes_[size_t(b)].needs_grad) {
                Tensor& gb = grad_buf(b);
                for (size_t i = 0; i < g.rows; ++i)
                    for (size_t j = 0; j < g.cols; ++j) gb.at(bcast ? 0 : i, j) += g.at(i, j);
            }
        };
    }
    return out;
}

int Tape::sub(int a, int b) {
    check(a);
    check(b);
    const Tensor& A = nodes_[size_t(a)].value;
    const Tensor& B = nodes_[size_t(b)].value;
    bool bcast = broadcast_row(A, B, "sub");
    Tensor C(A.rows, A.cols);
    for (size_t i = 0; i < A.rows; ++i)
        for (size_t j = 0; j < A.cols; ++j) C.at(i, j) = A.at(i, j) - B.at(bcast ? 0 : i, j);
    bool ng = nodes_[size_t(a)].needs_grad || nodes_[size_t(b)].needs_grad;
    int out = push(std::move(C), ng, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, b, bcast, out] {
            const Tensor& g = grad_buf(out);
            if (nodes_[size_t(a)].needs_grad) {
                Tensor& ga = grad_buf(a);
                for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
            }
            if (nodes_[size_t(b)].needs_grad) {
                Tensor& gb = grad_buf(b);
                for (size_t i = 0; i < g.rows; ++i)
                    for (size_t j = 0; j < g.cols; ++j) gb.at(bcast ? 0 : i, j) -= g.at(i, j);
            }
        };
    }
    return out;
}

int Tape::mul(int a, int b) {
    check(a);
    check(b);
    const Tensor& A = nodes_[size_t(a)].value;
    const Tensor& B = nodes_[size_t(b)].value;
    bool bcast = broadcast_row(A, B, "mul");
    Tensor C(A.rows, A.cols);
    for (size_t i = 0; i < A.rows; ++i)
        for (size_t j = 0; j < A.cols; ++j) C.at(i, j) = A.at(i, j) * B.at(bcast ? 0 : i, j);
    bool ng = nodes_[size_t(a)].needs_grad || nodes_[size_t(b)].needs_grad;
    int out = push(std::move(C), ng, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, b, bcast, out] {
            const Tensor& g = grad_buf(out);
            const Tensor& A2 = nodes_[size_t(a)].value;
            const Tensor& B2 = nodes_[size_t(b)].value;
            if (nodes_[size_t(a)].needs_grad) {
                Tensor& ga = grad_buf(a);
                for (size_t i = 0; i < g.rows; ++i)
                    for (size_t j = 0; j < g.cols; ++j)
                        ga.at(i, j) += g.at(i, j) * B2.at(bcast ? 0 : i, j);
            }
            if (nodes_[size_t(b)].needs_grad) {
                Tensor& gb = grad_buf(b);
                for (size_t i = 0; i < g.rows; ++i)
                    for (size_t j = 0; j < g.cols; ++j)
                        gb.at(bcast ? 0 : i, j) += g.at(i, j) * A2.at(i, j);
            }
        };
    }
    return out;
}

int Tape::scale(int a, double s) {
    check(a);
    const Tensor& A = nodes_[size_t(a)].value;
    Tensor C(A.rows, A.cols);
    for (size_t i = 0; i < A.numel(); ++i) C.data[i] = s * A.data[i];
    int out = push(std::move(C), nodes_[size_t(a)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, s, out] {
            const Tensor& g = grad_buf(out);
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += s * g.data[i];
        };
    }
    return out;
}

int Tape::sigmoid(int a) {
    check(a);
    const Tensor& A = nodes_[size_t(a)].value;
    Tensor C(A.rows, A.cols);
    for (size_t i = 0; i < A.numel(); ++i) C.data[i] = rwkv::detail::sigmoid(A.data[i]);
    int out = push(std::move(C), nodes_[size_t(a)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, out] {
            const Tensor& g = grad_buf(out);
            const Tensor& y = nodes_[size_t(out)].value;
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < g.numel(); ++i)
                ga.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
        };
    }
    return out;
}

int Tape::gelu(int a) {
    check(a);
    const Tensor& A = nodes_[size_t(a)].value;
    Tensor C(A.rows, A.cols);
    for (size_t i = 0; i < A.numel(); ++i) {
        double x = A.data[i];
        C.data[i] = 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
    }
    int out = push(std::move(C), nodes_[size_t(a)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, out] {
            const Tensor& g = grad_buf(out);
            const Tensor& A2 = nodes_[size_t(a)].value;
            Tensor& ga = grad_buf(a);
            const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
            for (size_t i = 0; i < g.numel(); ++i) {
                double x = A2.data[i];
                double phi = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
                double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                ga.data[i] += g.data[i] * (phi + x * pdf);
            }
        };
    }
    return out;
}

int Tape::relu_sq(int a) {
    check(a);
    const Tensor& A = nodes_[size_t(a)].value;
    Tensor C(A.rows, A.cols);
    for (size_t i = 0; i < A.numel(); ++i) {
        double r = std::max(A.data[i], 0.0);
        C.data[i] = r * r;
    }
    int out = push(std::move(C), nodes_[size_t(a)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, out] {
            const Tensor& g = grad_buf(out);
            const Tensor& A2 = nodes_[size_t(a)].value;
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < g.numel(); ++i)
                ga.data[i] += g.data[i] * 2.0 * std::max(A2.data[i], 0.0);
        };
    }
    return out;
}

int Tape::exp(int a) {
    check(a);
    const Tensor& A = nodes_[size_t(a)].value;
    Tensor C(A.rows, A.cols);
    for (size_t i = 0; i < A.numel(); ++i) C.data[i] = std::exp(A.data[i]);
    int out = push(std::move(C), nodes_[size_t(a)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, out] {
            const Tensor& g = grad_buf(out);
            const Tensor& y = nodes_[size_t(out)].value;
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * y.data[i];
        };
    }
    return out;
}

int Tape::layernorm(int a, int gain, int bias) {
    check(a);
    check(gain);
    check(bias);
    const Tensor& A = nodes_[size_t(a)].value;
    const Tensor& G = nodes_[size_t(gain)].value;
    const Tensor& B = nodes_[size_t(bias)].value;
    if (G.rows != 1 || G.cols != A.cols || B.rows != 1 || B.cols != A.cols) {
        throw ConfigError("layernorm: gain/bias must be 1 x cols");
    }
    constexpr double eps = 1e-5;
    Tensor C(A.rows, A.cols);
    Tensor xhat(A.rows, A.cols);
    std::vector<double> inv_sd(A.rows);
    for (size_t i = 0; i < A.rows; ++i) {
        double mean = 0.0;
        for (size_t j = 0; j < A.cols; ++j) mean += A.at(i, j);
        mean /= double(A.cols);
        double var = 0.0;
        for (size_t j = 0; j < A.cols; ++j) {
            double d = A.at(i, j) - mean;
            var += d * d;
        }
        var /= double(A.cols);
        double inv = 1.0 / std::sqrt(var + eps);
        inv_sd[i] = inv;
        for (size_t j = 0; j < A.cols; ++j) {
            double xh = (A.at(i, j) - mean) * inv;
            xhat.at(i, j) = xh;
            C.at(i, j) = xh * G.at(0, j) + B.at(0, j);
        }
    }
    bool ng = nodes_[size_t(a)].needs_grad || nodes_[size_t(gain)].needs_grad ||
              nodes_[size_t(bias)].needs_grad;
    int out = push(std::move(C), ng, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, gain, bias, out, xhat = std::move(xhat),
                                    inv_sd = std::move(inv_sd)] {
            const Tensor& g = grad_buf(out);
            const Tensor& G2 = nodes_[size_t(gain)].value;
            size_t cols = g.cols;
            if (nodes_[size_t(gain)].needs_grad) {
                Tensor& gg = grad_buf(gain);
                for (size_t i = 0; i < g.rows; ++i)
                    for (size_t j = 0; j < cols; ++j) gg.at(0, j) += g.at(i, j) * xhat.at(i, j);
            }
            if (nodes_[size_t(bias)].needs_grad) {
                Tensor& gb = grad_buf(bias);
                for (size_t i = 0; i < g.rows; ++i)
                    for (size_t j = 0; j < cols; ++j) gb.at(0, j) += g.at(i, j);
            }
            if (nodes_[size_t(a)].needs_grad) {
                Tensor& ga = grad_buf(a);
                for (size_t i = 0; i < g.rows; ++i) {
                    double mean_h = 0.0, mean_hx = 0.0;
                    for (size_t j = 0; j < cols; ++j) {
                        double h = g.at(i, j) * G2.at(0, j);
                        mean_h += h;
                        mean_hx += h * xhat.at(i, j);
                    }
                    mean_h /= double(cols);
                    mean_hx /= double(cols);
                    for (size_t j = 0; j < cols; ++j) {
                        double h = g.at(i, j) * G2.at(0, j);
                        ga.at(i, j) += inv_sd[i] * (h - mean_h - xhat.at(i, j) * mean_hx);
                    }
                }
            }
        };
    }
    return out;
}

int Tape::softmax_rows(int a) {
    check(a);
    const Tensor& A = nodes_[size_t(a)].value;
    if (A.cols == 0) throw ConfigError("softmax_rows: empty rows");
    Tensor C(A.rows, A.cols);
    for (size_t i = 0; i < A.rows; ++i) {
        double m = A.at(i, 0);
        for (size_t j = 1; j < A.cols; ++j) m = std::max(m, A.at(i, j));
        double denom = 0.0;
        for (size_t j = 0; j < A.cols; ++j) {
            double e = std::exp(A.at(i, j) - m);
            C.at(i, j) = e;
            denom += e;
        }
        for (size_t j = 0; j < A.cols; ++j) C.at(i, j) /= denom;
    }
    int out = push(std::move(C), nodes_[size_t(a)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, out] {
            const Tensor& g = grad_buf(out);
            const Tensor& y = nodes_[size_t(out)].value;
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < g.rows; ++i) {
                double dot = 0.0;
                for (size_t j = 0; j < g.cols; ++j) dot += g.at(i, j) * y.at(i, j);
                for (size_t j = 0; j < g.cols; ++j)
                    ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
            }
        };
    }
    return out;
}

int Tape::slice_rows(int a, size_t r0, size_t r1) {
    check(a);
    const Tensor& A = nodes_[size_t(a)].value;
    if (r0 > r1 || r1 > A.rows) throw ConfigError("slice_rows: range out of bounds");
    Tensor C(r1 - r0, A.cols);
    std::copy(A.data.begin() + long(r0 * A.cols), A.data.begin() + long(r1 * A.cols),
              C.data.begin());
    int out = push(std::move(C), nodes_[size_t(a)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, r0, out] {
            const Tensor& g = grad_buf(out);
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < g.rows; ++i)
                for (size_t j = 0; j < g.cols; ++j) ga.at(r0 + i, j) += g.at(i, j);
        };
    }
    return out;
}

int Tape::slice_cols(int a, size_t c0, size_t c1) {
    check(a);
    const Tensor& A = nodes_[size_t(a)].value;
    if (c0 > c1 || c1 > A.cols) throw ConfigError("slice_cols: range out of bounds");
    Tensor C(A.rows, c1 - c0);
    for (size_t i = 0; i < A.rows; ++i)
        for (size_t j = c0; j < c1; ++j) C.at(i, j - c0) = A.at(i, j);
    int out = push(std::move(C), nodes_[size_t(a)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, c0, out] {
            const Tensor& g = grad_buf(out);
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < g.rows; ++i)
                for (size_t j = 0; j < g.cols; ++j) ga.at(i, c0 + j) += g.at(i, j);
        };
    }
    return out;
}

int Tape::concat_rows(const std::vector<int>& parts) {
    if (parts.empty()) throw ConfigError("concat_rows: no inputs");
    size_t rows = 0, cols = 0;
    bool ng = false;
    for (int id : parts) {
        check(id);
        const Tensor& t = nodes_[size_t(id)].value;
        if (cols == 0) cols = t.cols;
        if (t.cols != cols) throw ConfigError("concat_rows: column mismatch");
        rows += t.rows;
        ng = ng || nodes_[size_t(id)].needs_grad;
    }
    Tensor C(rows, cols);
    size_t r = 0;
    for (int id : parts) {
        const Tensor& t = nodes_[size_t(id)].value;
        std::copy(t.data.begin(), t.data.end(), C.data.begin() + long(r * cols));
        r += t.rows;
    }
    int out = push(std::move(C), ng, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, parts, out] {
            const Tensor& g = grad_buf(out);
            size_t r2 = 0;
            for (int id : parts) {
                const Tensor& t = nodes_[size_t(id)].value;
                if (nodes_[size_t(id)].needs_grad) {
                    Tensor& gp = grad_buf(id);
                    for (size_t i = 0; i < t.rows; ++i)
                        for (size_t j = 0; j < t.cols; ++j) gp.at(i, j) += g.at(r2 + i, j);
                }
                r2 += t.rows;
            }
        };
    }
    return out;
}

int Tape::concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw ConfigError("concat_cols: no inputs");
    size_t rows = 0, cols = 0;
    bool ng = false;
    for (int id : parts) {
        check(id);
        const Tensor& t = nodes_[size_t(id)].value;
        if (rows == 0) rows = t.rows;
        if (t.rows != rows) throw ConfigError("concat_cols: row mismatch");
        cols += t.cols;
        ng = ng || nodes_[size_t(id)].needs_grad;
    }
    Tensor C(rows, cols);
    size_t c = 0;
    for (int id : parts) {
        const Tensor& t = nodes_[size_t(id)].value;
        for (size_t i = 0; i < rows; ++i)
            for (size_t j = 0; j < t.cols; ++j) C.at(i, c + j) = t.at(i, j);
        c += t.cols;
    }
    int out = push(std::move(C), ng, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, parts, out] {
            const Tensor& g = grad_buf(out);
            size_t c2 = 0;
            for (int id : parts) {
                const Tensor& t = nodes_[size_t(id)].value;
                if (nodes_[size_t(id)].needs_grad) {
                    Tensor& gp = grad_buf(id);
                    for (size_t i = 0; i < t.rows; ++i)
                        for (size_t j = 0; j < t.cols; ++j) gp.at(i, j) += g.at(i, c2 + j);
                }
                c2 += t.cols;
            }
        };
    }
    return out;
}

int Tape::gather_rows(int a, std::vector<size_t> idx) {
    check(a);
    const Tensor& A = nodes_[size_t(a)].value;
    for (size_t r : idx) {
        if (r >= A.rows) throw ConfigError("gather_rows: index " + std::to_string(r) +
                                           " out of range");
    }
    Tensor C(idx.size(), A.cols);
    for (size_t i = 0; i < idx.size(); ++i)
        for (size_t j = 0; j < A.cols; ++j) C.at(i, j) = A.at(idx[i], j);
    int out = push(std::move(C), nodes_[size_t(a)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, idx = std::move(idx), out] {
            const Tensor& g = grad_buf(out);
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < idx.size(); ++i)
                for (size_t j = 0; j < g.cols; ++j) ga.at(idx[i], j) += g.at(i, j);
        };
    }
    return out;
}

int Tape::linear_rows(int a, std::vector<std::vector<std::pair<size_t, double>>> combos) {
    check(a);
    const Tensor& A = nodes_[size_t(a)].value;
    for (const auto& combo : combos)
        for (const auto& [src, coeff] : combo) {
            (void)coeff;
            if (src >= A.rows) {
                throw ConfigError("linear_rows: source row " + std::to_string(src) +
                                  " out of range");
            }
        }
    Tensor C(combos.size(), A.cols);
    for (size_t i = 0; i < combos.size(); ++i)
        for (const auto& [src, coeff] : combos[i])
            for (size_t j = 0; j < A.cols; ++j) C.at(i, j) += coeff * A.at(src, j);
    int out = push(std::move(C), nodes_[size_t(a)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, combos = std::move(combos), out] {
            const Tensor& g = grad_buf(out);
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < combos.size(); ++i)
                for (const auto& [src, coeff] : combos[i])
                    for (size_t j = 0; j < g.cols; ++j) ga.at(src, j) += coeff * g.at(i, j);
        };
    }
    return out;
}

int Tape::shift_rows_down(int a) {
    check(a);
    const Tensor& A = nodes_[size_t(a)].value;
    Tensor C(A.rows, A.cols);
    for (size_t i = 1; i < A.rows; ++i)
        for (size_t j = 0; j < A.cols; ++j) C.at(i, j) = A.at(i - 1, j);
    int out = push(std::move(C), nodes_[size_t(a)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, out] {
            const Tensor& g = grad_buf(out);
            Tensor& ga = grad_buf(a);
            for (size_t i = 1; i < g.rows; ++i)
                for (size_t j = 0; j < g.cols; ++j) ga.at(i - 1, j) += g.at(i, j);
        };
    }
    return out;
}

int Tape::wkv(int k, int v, int w, int u) {
    check(k);
    check(v);
    check(w);
    check(u);
    const Tensor& K = nodes_[size_t(k)].value;
    const Tensor& V = nodes_[size_t(v)].value;
    const Tensor& W = nodes_[size_t(w)].value;
    const Tensor& U = nodes_[size_t(u)].value;
    require_same_shape(K, V, "wkv");
    if (W.rows != 1 || W.cols != K.cols || U.rows != 1 || U.cols != K.cols) {
        throw ConfigError("wkv: decay parameters must be 1 x cols");
    }
    if (K.rows == 0) throw ConfigError("wkv: empty sequence");
    for (size_t c = 0; c < W.cols; ++c) {
        if (W.at(0, c) < 0.0) {
            throw ConfigError("wkv: decay w[" + std::to_string(c) + "] is negative");
        }
    }
    size_t T = K.rows, d = K.cols;
    Tensor C(T, d);
    for (size_t c = 0; c < d; ++c) {
        double a = 0.0, b = 0.0, p = kNegInf;
        for (size_t t = 0; t < T; ++t) {
            double y = rwkv::wkv_channel_step(a, b, p, W.at(0, c), U.at(0, c), K.at(t, c),
                                              V.at(t, c));
            if (!std::isfinite(y)) {
                throw NumericError("wkv: non-finite output at step " + std::to_string(t) +
                                   ", channel " + std::to_string(c));
            }
            C.at(t, c) = y;
        }
    }
    bool ng = nodes_[size_t(k)].needs_grad || nodes_[size_t(v)].needs_grad ||
              nodes_[size_t(w)].needs_grad || nodes_[size_t(u)].needs_grad;
    int out = push(std::move(C), ng, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, k, v, w, u, out, T, d] {
            const Tensor& g = grad_buf(out);
            const Tensor& K2 = nodes_[size_t(k)].value;
            const Tensor& V2 = nodes_[size_t(v)].value;
            const Tensor& W2 = nodes_[size_t(w)].value;
            const Tensor& U2 = nodes_[size_t(u)].value;
            std::vector<std::vector<double>> ks(T, std::vector<double>(d));
            std::vector<std::vector<double>> vs(T, std::vector<double>(d));
            std::vector<std::vector<double>> go(T, std::vector<double>(d));
            for (size_t t = 0; t < T; ++t)
                for (size_t c = 0; c < d; ++c) {
                    ks[t][c] = K2.at(t, c);
                    vs[t][c] = V2.at(t, c);
                    go[t][c] = g.at(t, c);
                }
            rwkv::DecayParams<double> dp;
            dp.w.assign(W2.data.begin(), W2.data.end());
            dp.u.assign(U2.data.begin(), U2.data.end());
            auto gr = rwkv::wkv_sequence_grad(ks, vs, dp, rwkv::WkvState<double>::zero(d), go);
            if (nodes_[size_t(k)].needs_grad) {
                Tensor& gk = grad_buf(k);
                for (size_t t = 0; t < T; ++t)
                    for (size_t c = 0; c < d; ++c) gk.at(t, c) += gr.k[t][c];
            }
            if (nodes_[size_t(v)].needs_grad) {
                Tensor& gv = grad_buf(v);
                for (size_t t = 0; t < T; ++t)
                    for (size_t c = 0; c < d; ++c) gv.at(t, c) += gr.v[t][c];
            }
            if (nodes_[size_t(w)].needs_grad) {
                Tensor& gw = grad_buf(w);
                for (size_t c = 0; c < d; ++c) gw.at(0, c) += gr.w[c];
            }
            if (nodes_[size_t(u)].needs_grad) {
                Tensor& gu = grad_buf(u);
                for (size_t c = 0; c < d; ++c) gu.at(0, c) += gr.u[c];
            }
        };
    }
    return out;
}

int Tape::sum_all(int a) {
    check(a);
    const Tensor& A = nodes_[size_t(a)].value;
    Tensor C(1, 1);
    for (double x : A.data) C.data[0] += x;
    int out = push(std::move(C), nodes_[size_t(a)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, a, out] {
            double g = grad_buf(out).data[0];
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < ga.numel(); ++i) ga.data[i] += g;
        };
    }
    return out;
}

int Tape::cross_entropy_logits(int logits, std::vector<int> targets) {
    check(logits);
    const Tensor& L = nodes_[size_t(logits)].value;
    if (targets.size() != L.rows) {
        throw ConfigError("cross_entropy_logits: one target per row required");
    }
    for (int t : targets) {
        if (t < 0 || size_t(t) >= L.cols) {
            throw ConfigError("cross_entropy_logits: target " + std::to_string(t) +
                              " outside class range");
        }
    }
    Tensor C(1, 1);
    double total = 0.0;
    for (size_t i = 0; i < L.rows; ++i) {
        double m = L.at(i, 0);
        for (size_t j = 1; j < L.cols; ++j) m = std::max(m, L.at(i, j));
        double denom = 0.0;
        for (size_t j = 0; j < L.cols; ++j) denom += std::exp(L.at(i, j) - m);
        total += m + std::log(denom) - L.at(i, size_t(targets[i]));
    }
    C.data[0] = total / double(L.rows);
    int out = push(std::move(C), nodes_[size_t(logits)].needs_grad, nullptr);
    if (nodes_[size_t(out)].needs_grad) {
        nodes_[size_t(out)].back = [this, logits, targets = std::move(targets), out] {
            double g = grad_buf(out).data[0];
            const Tensor& L2 = nodes_[size_t(logits)].value;
            Tensor& gl = grad_buf(logits);
            double inv_n = 1.0 / double(L2.rows);
            for (size_t i = 0; i < L2.rows; ++i) {
                double m = L2.at(i, 0);
                for (size_t j = 1; j < L2.cols; ++j) m = std::max(m, L2.at(i, j));
                double denom = 0.0;
                for (size_t j = 0; j < L2.cols; ++j) denom += std::exp(L2.at(i, j) - m);
                for (size_t j = 0; j < L2.cols; ++j) {
                    double soft = std::exp(L2.at(i, j) - m) / denom;
                    double onehot = (j == size_t(targets[i])) ? 1.0 : 0.0;
                    gl.at(i, j) += g * inv_n * (soft - onehot);
                }
            }
        };
    }
    return out;
}

void Tape::backward(int loss) {
    check(loss);
    Node& ln = nodes_[size_t(loss)];
    if (ln.value.numel() != 1) throw ConfigError("backward: loss must be a scalar");
    if (!ln.needs_grad) {
        throw ConfigError("backward: loss does not depend on any variable");
    }
    grad_buf(loss).data[0] += 1.0;
    for (size_t i = size_t(loss) + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.back && n.grad.numel() != 0) n.back();
    }
}

}  // namespace longvid::ad
