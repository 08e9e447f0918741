#ifndef CYTRANS_OPS_HPP
#define CYTRANS_OPS_HPP

#include <cmath>
#include <cstring>
#include <initializer_list>
#include <string>
#include <vector>

#include "kernels.hpp"
#include "tensor.hpp"

// Autodiff primitives. Each op runs its forward kernel eagerly, appends the
// output to the tape and installs a backward closure. Gradients accumulate
// additively, so fan-out needs no special casing.

namespace cytrans {

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
}

template <typename T>
void accumulate(Node<T>* n, const T* src) {
    n->ensure_grad();
    T* g = n->grad.data();
    const int64_t sz = (int64_t)n->value.size();
    for (int64_t i = 0; i < sz; ++i) g[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T, typename FwdF, typename BwdF>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, FwdF fwd, BwdF dfd) {
    auto out = make_op_output(name, x.shape(), {x});
    auto* on = out.node().get();
    const T* px = x.value().data();
    T* py = on->value.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) py[i] = fwd(px[i]);
    check_finite(out);
    if (out.requires_grad()) {
        auto xn = x.node();
        on->backward_fn = [on, xn, dfd] {
            xn->ensure_grad();
            const int64_t sz = (int64_t)on->value.size();
            const T* g = on->grad.data();
            const T* xv = xn->value.data();
            const T* yv = on->value.data();
            T* xg = xn->grad.data();
            for (int64_t i = 0; i < sz; ++i) xg[i] += g[i] * dfd(xv[i], yv[i]);
        };
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary_op<T>(
        "relu", x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha = T(0.2)) {
    return unary_op<T>(
        "leaky_relu", x, [alpha](T v) { return v > T(0) ? v : alpha * v; },
        [alpha](T v, T) { return v > T(0) ? T(1) : alpha; });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    return unary_op<T>(
        "silu", x,
        [](T v) {
            const T s = T(1) / (T(1) + std::exp(-v));
            return v * s;
        },
        [](T v, T) {
            const T s = T(1) / (T(1) + std::exp(-v));
            return s * (T(1) + v * (T(1) - s));
        });
}

template <typename T>
Tensor<T> tanh_act(const Tensor<T>& x) {
    return unary_op<T>(
        "tanh", x, [](T v) { return std::tanh(v); },
        [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> abs_val(const Tensor<T>& x) {
    return unary_op<T>(
        "abs", x, [](T v) { return std::fabs(v); },
        [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& x) {
    return unary_op<T>(
        "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& x) {
    return unary_op<T>(
        "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return unary_op<T>(
        "scale", x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return unary_op<T>(
        "add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("add", a, b);
    auto out = make_op_output("add", a.shape(), {a, b});
    auto* on = out.node().get();
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* py = on->value.data();
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
    check_finite(out);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        on->backward_fn = [on, an, bn] {
            if (an->requires_grad) detail::accumulate(an.get(), on->grad.data());
            if (bn->requires_grad) detail::accumulate(bn.get(), on->grad.data());
        };
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("sub", a, b);
    auto out = make_op_output("sub", a.shape(), {a, b});
    auto* on = out.node().get();
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* py = on->value.data();
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i];
    check_finite(out);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        on->backward_fn = [on, an, bn] {
            if (an->requires_grad) detail::accumulate(an.get(), on->grad.data());
            if (bn->requires_grad) {
                bn->ensure_grad();
                const int64_t sz = (int64_t)on->value.size();
                for (int64_t i = 0; i < sz; ++i) bn->grad[i] -= on->grad[i];
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("mul", a, b);
    auto out = make_op_output("mul", a.shape(), {a, b});
    auto* on = out.node().get();
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* py = on->value.data();
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
    check_finite(out);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        on->backward_fn = [on, an, bn] {
            const int64_t sz = (int64_t)on->value.size();
            const T* g = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                const T* bv = bn->value.data();
                for (int64_t i = 0; i < sz; ++i) an->grad[i] += g[i] * bv[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                const T* av = an->value.data();
                for (int64_t i = 0; i < sz; ++i) bn->grad[i] += g[i] * av[i];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& s) {
    if (numel(s) != x.size())
        throw TensorError("reshape: element count mismatch " + shape_str(x.shape()) +
                          " -> " + shape_str(s));
    auto out = make_op_output("reshape", s, {x});
    auto* on = out.node().get();
    on->value = std::vector<T>(x.value().begin(), x.value().end());
    if (out.requires_grad()) {
        auto xn = x.node();
        on->backward_fn = [on, xn] { detail::accumulate(xn.get(), on->grad.data()); };
    }
    return out;
}

// [A,B,C] -> [A,C,B]
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
    if (x.ndim() != 3) throw TensorError("transpose_last2 expects a 3-d tensor");
    const int A = x.dim(0), B = x.dim(1), C = x.dim(2);
    auto out = make_op_output("transpose_last2", {A, C, B}, {x});
    auto* on = out.node().get();
    const T* px = x.value().data();
    T* py = on->value.data();
    for (int a = 0; a < A; ++a)
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                py[((int64_t)a * C + c) * B + b] = px[((int64_t)a * B + b) * C + c];
    if (out.requires_grad()) {
        auto xn = x.node();
        on->backward_fn = [on, xn, A, B, C] {
            xn->ensure_grad();
            const T* g = on->grad.data();
            T* xg = xn->grad.data();
            for (int a = 0; a < A; ++a)
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < C; ++c)
                        xg[((int64_t)a * B + b) * C + c] += g[((int64_t)a * C + c) * B + b];
        };
    }
    return out;
}

// [A,B,C,D] -> [A,C,B,D]; self-inverse.
template <typename T>
Tensor<T> perm_0213(const Tensor<T>& x) {
    if (x.ndim() != 4) throw TensorError("perm_0213 expects a 4-d tensor");
    const int A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
    auto out = make_op_output("perm_0213", {A, C, B, D}, {x});
    auto* on = out.node().get();
    const T* px = x.value().data();
    T* py = on->value.data();
    for (int a = 0; a < A; ++a)
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const T* src = px + (((int64_t)a * B + b) * C + c) * D;
                T* dst = py + (((int64_t)a * C + c) * B + b) * D;
                std::memcpy(dst, src, sizeof(T) * D);
            }
    if (out.requires_grad()) {
        auto xn = x.node();
        on->backward_fn = [on, xn, A, B, C, D] {
            xn->ensure_grad();
            const T* g = on->grad.data();
            T* xg = xn->grad.data();
            for (int a = 0; a < A; ++a)
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < C; ++c) {
                        const T* src = g + (((int64_t)a * C + c) * B + b) * D;
                        T* dst = xg + (((int64_t)a * B + b) * C + c) * D;
                        for (int d = 0; d < D; ++d) dst[d] += src[d];
                    }
        };
    }
    return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw TensorError("concat_channels: no inputs");
    const int N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
    int C = 0;
    for (const auto& x : xs) {
        if (x.ndim() != 4 || x.dim(0) != N || x.dim(2) != H || x.dim(3) != W)
            throw TensorError("concat_channels: incompatible shapes");
        C += x.dim(1);
    }
    auto out = Tensor<T>(nullptr);
    {
        auto n = std::make_shared<Node<T>>();
        n->shape = {N, C, H, W};
        n->value.assign((int64_t)N * C * H * W, T(0));
        n->op = "concat_channels";
        n->seq = detail::next_seq();
        for (const auto& x : xs) {
            n->parents.push_back(x.node());
            n->requires_grad = n->requires_grad || x.requires_grad();
        }
        out = Tensor<T>(std::move(n));
    }
    auto* on = out.node().get();
    const int64_t plane = (int64_t)H * W;
    T* py = on->value.data();
    for (int n = 0; n < N; ++n) {
        int co = 0;
        for (const auto& x : xs) {
            const int ci = x.dim(1);
            std::memcpy(py + ((int64_t)n * C + co) * plane,
                        x.value().data() + (int64_t)n * ci * plane, sizeof(T) * ci * plane);
            co += ci;
        }
    }
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<Node<T>>> parents;
        for (const auto& x : xs) parents.push_back(x.node());
        on->backward_fn = [on, parents, N, C, plane] {
            const T* g = on->grad.data();
            for (int n = 0; n < N; ++n) {
                int co = 0;
                for (auto& p : parents) {
                    const int ci = p->shape[1];
                    if (p->requires_grad) {
                        p->ensure_grad();
                        T* pg = p->grad.data() + (int64_t)n * ci * plane;
                        const T* src = g + ((int64_t)n * C + co) * plane;
                        for (int64_t i = 0; i < ci * plane; ++i) pg[i] += src[i];
                    }
                    co += ci;
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    auto out = make_op_output("sum", Shape{1}, {x});
    auto* on = out.node().get();
    const T* px = x.value().data();
    T acc = T(0);
    for (int64_t i = 0; i < x.size(); ++i) acc += px[i];
    on->value[0] = acc;
    check_finite(out);
    if (out.requires_grad()) {
        auto xn = x.node();
        on->backward_fn = [on, xn] {
            xn->ensure_grad();
            const T g = on->grad[0];
            for (auto& v : xn->grad) v += g;
        };
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    auto out = make_op_output("mean", Shape{1}, {x});
    auto* on = out.node().get();
    const T* px = x.value().data();
    T acc = T(0);
    for (int64_t i = 0; i < x.size(); ++i) acc += px[i];
    const T inv = T(1) / T(x.size());
    on->value[0] = acc * inv;
    check_finite(out);
    if (out.requires_grad()) {
        auto xn = x.node();
        on->backward_fn = [on, xn, inv] {
            xn->ensure_grad();
            const T g = on->grad[0] * inv;
            for (auto& v : xn->grad) v += g;
        };
    }
    return out;
}

// [M,N] -> [M]
template <typename T>
Tensor<T> row_sum(const Tensor<T>& x) {
    if (x.ndim() != 2) throw TensorError("row_sum expects a 2-d tensor");
    const int M = x.dim(0), N = x.dim(1);
    auto out = make_op_output("row_sum", Shape{M}, {x});
    auto* on = out.node().get();
    const T* px = x.value().data();
    for (int i = 0; i < M; ++i) {
        T acc = T(0);
        for (int j = 0; j < N; ++j) acc += px[(int64_t)i * N + j];
        on->value[i] = acc;
    }
    check_finite(out);
    if (out.requires_grad()) {
        auto xn = x.node();
        on->backward_fn = [on, xn, M, N] {
            xn->ensure_grad();
            for (int i = 0; i < M; ++i) {
                const T g = on->grad[i];
                T* xg = xn->grad.data() + (int64_t)i * N;
                for (int j = 0; j < N; ++j) xg[j] += g;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------- matmul

// [M,K] x [K,N] -> [M,N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw TensorError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
    auto out = make_op_output("matmul", {M, N}, {a, b});
    auto* on = out.node().get();
    kern::gemm_nn(a.value().data(), b.value().data(), on->value.data(), M, K, N);
    check_finite(out);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        on->backward_fn = [on, an, bn, M, K, N] {
            const T* g = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                kern::gemm_nt(g, bn->value.data(), an->grad.data(), M, N, K);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                kern::gemm_tn(an->value.data(), g, bn->grad.data(), M, K, N);
            }
        };
    }
    return out;
}

// [M,K] x [N,K]^T -> [M,N]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
        throw TensorError("matmul_nt: incompatible shapes");
    const int M = a.dim(0), K = a.dim(1), N = b.dim(0);
    auto out = make_op_output("matmul_nt", {M, N}, {a, b});
    auto* on = out.node().get();
    kern::gemm_nt(a.value().data(), b.value().data(), on->value.data(), M, K, N);
    check_finite(out);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        on->backward_fn = [on, an, bn, M, K, N] {
            const T* g = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                kern::gemm_nn(g, bn->value.data(), an->grad.data(), M, N, K);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                kern::gemm_tn(g, an->value.data(), bn->grad.data(), M, N, K);
            }
        };
    }
    return out;
}

// x: [M,N], b: [N]
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
    if (x.ndim() != 2 || b.ndim() != 1 || b.dim(0) != x.dim(1))
        throw TensorError("add_rowvec: incompatible shapes");
    const int M = x.dim(0), N = x.dim(1);
    auto out = make_op_output("add_rowvec", x.shape(), {x, b});
    auto* on = out.node().get();
    const T* px = x.value().data();
    const T* pb = b.value().data();
    T* py = on->value.data();
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) py[(int64_t)i * N + j] = px[(int64_t)i * N + j] + pb[j];
    check_finite(out);
    if (out.requires_grad()) {
        auto xn = x.node(), bn = b.node();
        on->backward_fn = [on, xn, bn, M, N] {
            const T* g = on->grad.data();
            if (xn->requires_grad) detail::accumulate(xn.get(), g);
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < N; ++j) bn->grad[j] += g[(int64_t)i * N + j];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------- softmax

// softmax over the last dimension, any leading shape.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.ndim() < 1) throw TensorError("softmax_rows: scalar input");
    const int N = x.dim(x.ndim() - 1);
    const int64_t rows = x.size() / N;
    auto out = make_op_output("softmax", x.shape(), {x});
    auto* on = out.node().get();
    const T* px = x.value().data();
    T* py = on->value.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xi = px + r * N;
        T* yi = py + r * N;
        T mx = xi[0];
        for (int j = 1; j < N; ++j) mx = std::max(mx, xi[j]);
        if (!(std::fabs(mx) <= std::numeric_limits<T>::max()))
            throw TensorError("non-finite value produced by 'softmax'");
        T sum = T(0);
        for (int j = 0; j < N; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            sum += yi[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < N; ++j) yi[j] *= inv;
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        on->backward_fn = [on, xn, rows, N] {
            xn->ensure_grad();
            const T* g = on->grad.data();
            const T* y = on->value.data();
            T* xg = xn->grad.data();
            for (int64_t r = 0; r < rows; ++r) {
                const T* gi = g + r * N;
                const T* yi = y + r * N;
                T dot = T(0);
                for (int j = 0; j < N; ++j) dot += gi[j] * yi[j];
                T* xi = xg + r * N;
                for (int j = 0; j < N; ++j) xi[j] += yi[j] * (gi[j] - dot);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------- conv / pool

// x: [N,Cin,H,W]; w: [Cout,Cin,kh,kw]; optional bias [Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                 int pad) {
    if (x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(1))
        throw TensorError("conv2d: incompatible shapes " + shape_str(x.shape()) + " and " +
                          shape_str(w.shape()));
    kern::Conv2dSpec s{};
    s.in_c = x.dim(1);
    s.out_c = w.dim(0);
    s.kh = w.dim(2);
    s.kw = w.dim(3);
    s.stride = stride;
    s.pad = pad;
    s.in_h = x.dim(2);
    s.in_w = x.dim(3);
    s.out_h = kern::conv_out_dim(s.in_h, s.kh, stride, pad);
    s.out_w = kern::conv_out_dim(s.in_w, s.kw, stride, pad);
    if (s.out_h <= 0 || s.out_w <= 0) throw TensorError("conv2d: input smaller than kernel");
    const int batch = x.dim(0);
    const bool has_bias = b.defined();
    auto out = has_bias
                   ? make_op_output("conv2d", Shape{batch, s.out_c, s.out_h, s.out_w}, {x, w, b})
                   : make_op_output("conv2d", Shape{batch, s.out_c, s.out_h, s.out_w}, {x, w});
    auto* on = out.node().get();
    kern::conv2d_fwd(x.value().data(), w.value().data(),
                     has_bias ? b.value().data() : nullptr, on->value.data(), batch, s);
    check_finite(out);
    if (out.requires_grad()) {
        auto xn = x.node(), wn = w.node();
        auto bn = has_bias ? b.node() : nullptr;
        on->backward_fn = [on, xn, wn, bn, batch, s] {
            const T* g = on->grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                kern::conv2d_bwd_input(g, wn->value.data(), xn->grad.data(), batch, s);
            }
            if (wn->requires_grad || (bn && bn->requires_grad)) {
                wn->ensure_grad();
                T* db = nullptr;
                if (bn && bn->requires_grad) {
                    bn->ensure_grad();
                    db = bn->grad.data();
                }
                kern::conv2d_bwd_weight(xn->value.data(), g, wn->grad.data(), db, batch, s);
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
    return conv2d(x, w, Tensor<T>(nullptr), stride, pad);
}

// Transposed convolution. x: [N,Cin,H,W]; w: [Cin,Cout,kh,kw]; out spatial
// (H-1)*stride + kh - 2*pad. Kernels are shared with conv2d by swapping the
// roles of input and output.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(0))
        throw TensorError("conv_transpose2d: incompatible shapes");
    const int batch = x.dim(0), in_c = x.dim(1), out_c = w.dim(1);
    const int kh = w.dim(2), kw = w.dim(3);
    const int H = x.dim(2), W = x.dim(3);
    const int Ho = (H - 1) * stride + kh - 2 * pad;
    const int Wo = (W - 1) * stride + kw - 2 * pad;
    if (Ho <= 0 || Wo <= 0) throw TensorError("conv_transpose2d: empty output");
    kern::Conv2dSpec s{};  // spec of the matching forward conv: out -> in
    s.in_c = out_c;
    s.out_c = in_c;
    s.kh = kh;
    s.kw = kw;
    s.stride = stride;
    s.pad = pad;
    s.in_h = Ho;
    s.in_w = Wo;
    s.out_h = H;
    s.out_w = W;
    const bool has_bias = b.defined();
    auto out = has_bias ? make_op_output("conv_transpose2d", Shape{batch, out_c, Ho, Wo}, {x, w, b})
                        : make_op_output("conv_transpose2d", Shape{batch, out_c, Ho, Wo}, {x, w});
    auto* on = out.node().get();
    kern::conv2d_bwd_input(x.value().data(), w.value().data(), on->value.data(), batch, s);
    if (has_bias) {
        const T* pb = b.value().data();
        const int64_t plane = (int64_t)Ho * Wo;
        for (int n = 0; n < batch; ++n)
            for (int c = 0; c < out_c; ++c) {
                T* yp = on->value.data() + ((int64_t)n * out_c + c) * plane;
                for (int64_t i = 0; i < plane; ++i) yp[i] += pb[c];
            }
    }
    check_finite(out);
    if (out.requires_grad()) {
        auto xn = x.node(), wn = w.node();
        auto bn = has_bias ? b.node() : nullptr;
        on->backward_fn = [on, xn, wn, bn, batch, s, out_c] {
            const T* g = on->grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                kern::conv2d_fwd(g, wn->value.data(), (const T*)nullptr, xn->grad.data(), batch, s,
                                 /*accumulate=*/true);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                kern::conv2d_bwd_weight(g, xn->value.data(), wn->grad.data(), (T*)nullptr, batch, s);
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                const int64_t plane = (int64_t)s.in_h * s.in_w;
                for (int n = 0; n < batch; ++n)
                    for (int c = 0; c < out_c; ++c) {
                        const T* gp = g + ((int64_t)n * out_c + c) * plane;
                        T acc = T(0);
                        for (int64_t i = 0; i < plane; ++i) acc += gp[i];
                        bn->grad[c] += acc;
                    }
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int k) {
    if (x.ndim() != 4 || x.dim(2) % k != 0 || x.dim(3) % k != 0)
        throw TensorError("avg_pool2d: spatial dims must divide the window");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = H / k, Wo = W / k;
    auto out = make_op_output("avg_pool2d", {N, C, Ho, Wo}, {x});
    auto* on = out.node().get();
    const T* px = x.value().data();
    T* py = on->value.data();
    const T inv = T(1) / T(k * k);
    for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
        const T* xp = px + nc * H * W;
        T* yp = py + nc * Ho * Wo;
        for (int ho = 0; ho < Ho; ++ho)
            for (int wo = 0; wo < Wo; ++wo) {
                T acc = T(0);
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j)
                        acc += xp[(int64_t)(ho * k + i) * W + wo * k + j];
                yp[(int64_t)ho * Wo + wo] = acc * inv;
            }
    }
    check_finite(out);
    if (out.requires_grad()) {
        auto xn = x.node();
        on->backward_fn = [on, xn, N, C, H, W, Ho, Wo, k, inv] {
            xn->ensure_grad();
            const T* g = on->grad.data();
            T* xg = xn->grad.data();
            for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
                const T* gp = g + nc * Ho * Wo;
                T* xp = xg + nc * H * W;
                for (int ho = 0; ho < Ho; ++ho)
                    for (int wo = 0; wo < Wo; ++wo) {
                        const T gv = gp[(int64_t)ho * Wo + wo] * inv;
                        for (int i = 0; i < k; ++i)
                            for (int j = 0; j < k; ++j)
                                xp[(int64_t)(ho * k + i) * W + wo * k + j] += gv;
                    }
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    if (x.ndim() != 4) throw TensorError("upsample_nearest2x expects [N,C,H,W]");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto out = make_op_output("upsample_nearest2x", {N, C, 2 * H, 2 * W}, {x});
    auto* on = out.node().get();
    const T* px = x.value().data();
    T* py = on->value.data();
    for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
        const T* xp = px + nc * H * W;
        T* yp = py + nc * 4 * H * W;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                const T v = xp[(int64_t)i * W + j];
                T* d = yp + (int64_t)(2 * i) * 2 * W + 2 * j;
                d[0] = v;
                d[1] = v;
                d[2 * W] = v;
                d[2 * W + 1] = v;
            }
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        on->backward_fn = [on, xn, N, C, H, W] {
            xn->ensure_grad();
            const T* g = on->grad.data();
            T* xg = xn->grad.data();
            for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
                const T* gp = g + nc * 4 * H * W;
                T* xp = xg + nc * H * W;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        const T* s = gp + (int64_t)(2 * i) * 2 * W + 2 * j;
                        xp[(int64_t)i * W + j] += s[0] + s[1] + s[2 * W] + s[2 * W + 1];
                    }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------- group norm

inline int norm_groups_for(int channels, int preferred = 8) {
    if (channels < preferred) return channels;  // instance-norm fallback
    for (int g = preferred; g >= 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

// x: [N,C,H,W]; gamma, beta: [C].
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     int groups, T eps = T(1e-5)) {
    if (x.ndim() != 4 || x.dim(1) % groups != 0)
        throw TensorError("group_norm: channels must divide groups");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int cpg = C / groups;
    const int64_t gsz = (int64_t)cpg * H * W;
    auto out = make_op_output("group_norm", x.shape(), {x, gamma, beta});
    auto* on = out.node().get();
    std::vector<T> mean((int64_t)N * groups), rstd((int64_t)N * groups);
    const T* px = x.value().data();
    const T* pg = gamma.value().data();
    const T* pb = beta.value().data();
    T* py = on->value.data();
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const T* xp = px + ((int64_t)n * C + (int64_t)g * cpg) * H * W;
            T mu = T(0);
            for (int64_t i = 0; i < gsz; ++i) mu += xp[i];
            mu /= T(gsz);
            T var = T(0);
            for (int64_t i = 0; i < gsz; ++i) {
                const T d = xp[i] - mu;
                var += d * d;
            }
            var /= T(gsz);
            const T rs = T(1) / std::sqrt(var + eps);
            mean[(int64_t)n * groups + g] = mu;
            rstd[(int64_t)n * groups + g] = rs;
            T* yp = py + ((int64_t)n * C + (int64_t)g * cpg) * H * W;
            for (int c = 0; c < cpg; ++c) {
                const T gm = pg[g * cpg + c], bt = pb[g * cpg + c];
                const T* xc = xp + (int64_t)c * H * W;
                T* yc = yp + (int64_t)c * H * W;
                for (int64_t i = 0; i < (int64_t)H * W; ++i)
                    yc[i] = gm * (xc[i] - mu) * rs + bt;
            }
        }
    check_finite(out);
    if (out.requires_grad()) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node();
        on->backward_fn = [on, xn, gn, bn, N, C, H, W, groups, cpg, gsz,
                           mean = std::move(mean), rstd = std::move(rstd)] {
            const T* g = on->grad.data();
            const T* xv = xn->value.data();
            const T* gam = gn->value.data();
            const bool need_dx = xn->requires_grad;
            if (need_dx) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            const int64_t plane = (int64_t)H * W;
            for (int n = 0; n < N; ++n)
                for (int grp = 0; grp < groups; ++grp) {
                    const int64_t base = ((int64_t)n * C + (int64_t)grp * cpg) * plane;
                    const T mu = mean[(int64_t)n * groups + grp];
                    const T rs = rstd[(int64_t)n * groups + grp];
                    T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                    for (int c = 0; c < cpg; ++c) {
                        const T gm = gam[grp * cpg + c];
                        const T* gp = g + base + (int64_t)c * plane;
                        const T* xp = xv + base + (int64_t)c * plane;
                        T dg = T(0), db = T(0);
                        for (int64_t i = 0; i < plane; ++i) {
                            const T xhat = (xp[i] - mu) * rs;
                            const T dxh = gp[i] * gm;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat;
                            dg += gp[i] * xhat;
                            db += gp[i];
                        }
                        if (gn->requires_grad) gn->grad[grp * cpg + c] += dg;
                        if (bn->requires_grad) bn->grad[grp * cpg + c] += db;
                    }
                    if (!need_dx) continue;
                    const T m1 = sum_dxhat / T(gsz);
                    const T m2 = sum_dxhat_xhat / T(gsz);
                    for (int c = 0; c < cpg; ++c) {
                        const T gm = gam[grp * cpg + c];
                        const T* gp = g + base + (int64_t)c * plane;
                        const T* xp = xv + base + (int64_t)c * plane;
                        T* dxp = xn->grad.data() + base + (int64_t)c * plane;
                        for (int64_t i = 0; i < plane; ++i) {
                            const T xhat = (xp[i] - mu) * rs;
                            dxp[i] += rs * (gp[i] * gm - m1 - xhat * m2);
                        }
                    }
                }
        };
    }
    return out;
}

// ---------------------------------------------------------------- FiLM

// Per-channel affine modulation: y = x * (1 + s_c) + b_c. x: [N,C,H,W];
// scale, shift: [C].
template <typename T>
Tensor<T> film(const Tensor<T>& x, const Tensor<T>& scale_c, const Tensor<T>& shift_c) {
    if (x.ndim() != 4 || scale_c.size() != x.dim(1) || shift_c.size() != x.dim(1))
        throw TensorError("film: incompatible shapes");
    const int N = x.dim(0), C = x.dim(1);
    const int64_t plane = (int64_t)x.dim(2) * x.dim(3);
    auto out = make_op_output("film", x.shape(), {x, scale_c, shift_c});
    auto* on = out.node().get();
    const T* px = x.value().data();
    const T* ps = scale_c.value().data();
    const T* pf = shift_c.value().data();
    T* py = on->value.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T s = T(1) + ps[c], f = pf[c];
            const T* xp = px + ((int64_t)n * C + c) * plane;
            T* yp = py + ((int64_t)n * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) yp[i] = xp[i] * s + f;
        }
    check_finite(out);
    if (out.requires_grad()) {
        auto xn = x.node(), sn = scale_c.node(), fn = shift_c.node();
        on->backward_fn = [on, xn, sn, fn, N, C, plane] {
            const T* g = on->grad.data();
            const T* xv = xn->value.data();
            const T* sv = sn->value.data();
            if (xn->requires_grad) xn->ensure_grad();
            if (sn->requires_grad) sn->ensure_grad();
            if (fn->requires_grad) fn->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const int64_t base = ((int64_t)n * C + c) * plane;
                    const T s = T(1) + sv[c];
                    T ds = T(0), df = T(0);
                    for (int64_t i = 0; i < plane; ++i) {
                        const T gv = g[base + i];
                        if (xn->requires_grad) xn->grad[base + i] += gv * s;
                        ds += gv * xv[base + i];
                        df += gv;
                    }
                    if (sn->requires_grad) sn->grad[c] += ds;
                    if (fn->requires_grad) fn->grad[c] += df;
                }
        };
    }
    return out;
}

// ---------------------------------------------------------------- attention

// Fused scaled dot-product attention. q,k,v: [B,T,D] with B = batch*heads.
// The softmax matrix lives only inside the closure, never on the tape, which
// keeps the per-call footprint at one [B,T,T] buffer.
template <typename T>
Tensor<T> scaled_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
        throw TensorError("scaled_attention: q,k,v must share [B,T,D]");
    const int B = q.dim(0), Tk = q.dim(1), D = q.dim(2);
    const T scale = T(1) / std::sqrt(T(D));
    auto out = make_op_output("scaled_attention", q.shape(), {q, k, v});
    auto* on = out.node().get();
    const bool needs_grad = out.requires_grad();
    // Without grad only one row of the softmax matrix is ever live.
    std::vector<T> probs(needs_grad ? (int64_t)B * Tk * Tk : (int64_t)Tk);
    {
        const T* pq = q.value().data();
        const T* pk = k.value().data();
        const T* pv = v.value().data();
        T* py = on->value.data();
        std::vector<T> srow(Tk);
        for (int b = 0; b < B; ++b) {
            const T* qb = pq + (int64_t)b * Tk * D;
            const T* kb = pk + (int64_t)b * Tk * D;
            const T* vb = pv + (int64_t)b * Tk * D;
            T* pb = needs_grad ? probs.data() + (int64_t)b * Tk * Tk : probs.data();
            T* yb = py + (int64_t)b * Tk * D;
            for (int i = 0; i < Tk; ++i) {
                const T* qi = qb + (int64_t)i * D;
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < Tk; ++j) {
                    T acc = T(0);
                    const T* kj = kb + (int64_t)j * D;
                    for (int d = 0; d < D; ++d) acc += qi[d] * kj[d];
                    acc *= scale;
                    srow[j] = acc;
                    mx = std::max(mx, acc);
                }
                if (!(std::fabs(mx) <= std::numeric_limits<T>::max()))
                    throw TensorError("non-finite value produced by 'scaled_attention'");
                T sum = T(0);
                T* pr = needs_grad ? pb + (int64_t)i * Tk : pb;
                for (int j = 0; j < Tk; ++j) {
                    pr[j] = std::exp(srow[j] - mx);
                    sum += pr[j];
                }
                const T inv = T(1) / sum;
                T* yi = yb + (int64_t)i * D;
                for (int d = 0; d < D; ++d) yi[d] = T(0);
                for (int j = 0; j < Tk; ++j) {
                    const T p = pr[j] * inv;
                    pr[j] = p;
                    const T* vj = vb + (int64_t)j * D;
                    for (int d = 0; d < D; ++d) yi[d] += p * vj[d];
                }
            }
        }
    }
    if (out.requires_grad()) {
        auto qn = q.node(), kn = k.node(), vn = v.node();
        on->backward_fn = [on, qn, kn, vn, B, Tk, D, scale, probs = std::move(probs)] {
            const T* g = on->grad.data();
            if (qn->requires_grad) qn->ensure_grad();
            if (kn->requires_grad) kn->ensure_grad();
            if (vn->requires_grad) vn->ensure_grad();
            std::vector<T> ds((int64_t)Tk * Tk);
            for (int b = 0; b < B; ++b) {
                const T* pb = probs.data() + (int64_t)b * Tk * Tk;
                const T* gb = g + (int64_t)b * Tk * D;
                const T* qb = qn->value.data() + (int64_t)b * Tk * D;
                const T* kb = kn->value.data() + (int64_t)b * Tk * D;
                const T* vb = vn->value.data() + (int64_t)b * Tk * D;
                if (vn->requires_grad) {
                    T* dv = vn->grad.data() + (int64_t)b * Tk * D;
                    kern::gemm_tn(pb, gb, dv, Tk, Tk, D);
                }
                // dP then dS in place
                std::fill(ds.begin(), ds.end(), T(0));
                kern::gemm_nt(gb, vb, ds.data(), Tk, D, Tk);
                for (int i = 0; i < Tk; ++i) {
                    T* dsi = ds.data() + (int64_t)i * Tk;
                    const T* pi = pb + (int64_t)i * Tk;
                    T dot = T(0);
                    for (int j = 0; j < Tk; ++j) dot += dsi[j] * pi[j];
                    for (int j = 0; j < Tk; ++j) dsi[j] = pi[j] * (dsi[j] - dot) * scale;
                }
                if (qn->requires_grad) {
                    T* dq = qn->grad.data() + (int64_t)b * Tk * D;
                    kern::gemm_nn(ds.data(), kb, dq, Tk, Tk, D);
                }
                if (kn->requires_grad) {
                    T* dk = kn->grad.data() + (int64_t)b * Tk * D;
                    kern::gemm_tn(ds.data(), qb, dk, Tk, Tk, D);
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------- row normalize

// L2-normalizes each row of [M,N]; rows shorter than the floor keep a stable
// gradient through max(norm, 1e-12).
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
    if (x.ndim() != 2) throw TensorError("l2_normalize_rows expects [M,N]");
    const int M = x.dim(0), N = x.dim(1);
    auto out = make_op_output("l2_normalize_rows", x.shape(), {x});
    auto* on = out.node().get();
    std::vector<T> norms(M);
    const T* px = x.value().data();
    T* py = on->value.data();
    for (int i = 0; i < M; ++i) {
        const T* xi = px + (int64_t)i * N;
        T acc = T(0);
        for (int j = 0; j < N; ++j) acc += xi[j] * xi[j];
        const T nrm = std::max(std::sqrt(acc), T(1e-12));
        norms[i] = nrm;
        T* yi = py + (int64_t)i * N;
        for (int j = 0; j < N; ++j) yi[j] = xi[j] / nrm;
    }
    check_finite(out);
    if (out.requires_grad()) {
        auto xn = x.node();
        on->backward_fn = [on, xn, M, N, norms = std::move(norms)] {
            xn->ensure_grad();
            const T* g = on->grad.data();
            const T* y = on->value.data();
            for (int i = 0; i < M; ++i) {
                const T* gi = g + (int64_t)i * N;
                const T* yi = y + (int64_t)i * N;
                T dot = T(0);
                for (int j = 0; j < N; ++j) dot += gi[j] * yi[j];
                T* xg = xn->grad.data() + (int64_t)i * N;
                const T inv = T(1) / norms[i];
                for (int j = 0; j < N; ++j) xg[j] += (gi[j] - yi[j] * dot) * inv;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------- composites

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rowvec(matmul(x, w), b);
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    auto d = sub(a, b);
    return mean_all(mul(d, d));
}

template <typename T>
Tensor<T> mean_abs_err(const Tensor<T>& a, const Tensor<T>& b) {
    return mean_all(abs_val(sub(a, b)));
}

}  // namespace cytrans

#endif
