#pragma once

// Differentiable operations. Each op computes its forward value eagerly,
// then (when a Graph is recording and some input is tracked) pushes one
// backward step onto the tape. Backward steps accumulate with += so fan-out
// sums gradients naturally.
//
// Reduction loops run in ascending index order on purpose: the conv oracle
// comparison and the zero-query pooling reduction rely on a fixed
// accumulation order, not just on mathematical equality.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace castream {

namespace detail {

// Catches NaN and +-Inf in one predicate; NaN fails any comparison.
template <typename T>
inline bool finite_v(T v) {
    return std::fabs(v) <= std::numeric_limits<T>::max();
}

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
    if (!finite_checks()) return;
    for (T v : t.vec())
        if (!finite_v(v))
            throw NumericError(std::string(op) +
                               ": non-finite value in output");
}

template <typename T>
inline bool tracked(const Tensor<T>& t) {
    return t.wants_grad();
}

// The GEMM kernels take non-overlapping buffers; __restrict lets the inner
// saxpy rows vectorize. Per-output accumulation stays in ascending p order,
// so results are bit-identical to the unannotated loops.

// c(m x n) += a(m x k) * b(k x n)
template <typename T>
inline void mm_acc_nn(const T* __restrict a, const T* __restrict b,
                      T* __restrict c, std::int64_t m, std::int64_t k,
                      std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        T* __restrict crow = c + i * n;
        const T* arow = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            T av = arow[p];
            const T* __restrict brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c(k x n) += a(m x k)^T * b(m x n)
template <typename T>
inline void mm_acc_tn(const T* __restrict a, const T* __restrict b,
                      T* __restrict c, std::int64_t m, std::int64_t k,
                      std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* __restrict brow = b + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            T av = arow[p];
            T* __restrict crow = c + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c(m x k) += a(m x n) * b(k x n)^T
template <typename T>
inline void mm_acc_nt(const T* __restrict a, const T* __restrict b,
                      T* __restrict c, std::int64_t m, std::int64_t k,
                      std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* __restrict arow = a + i * n;
        T* __restrict crow = c + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const T* __restrict brow = b + p * n;
            T s = T(0);
            for (std::int64_t j = 0; j < n; ++j) s += arow[j] * brow[j];
            crow[p] += s;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* xv = x.data();
    T* ov = out.data();
    std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
    detail::check_finite(out, "relu");
    Graph<T>* g = Graph<T>::current();
    if (g && detail::tracked(x)) {
        out.ptr()->wants_grad = true;
        auto X = x.ptr(), O = out.ptr();
        g->record([X, O] {
            if (O->grad.empty()) return;
            auto& gx = grad_buffer(X);
            for (std::size_t i = 0; i < gx.size(); ++i)
                if (X->value[i] > T(0)) gx[i] += O->grad[i];
        });
    }
    return out;
}

// Exact GELU: x * Phi(x) with the Gaussian CDF.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    static const T inv_sqrt2 = T(0.7071067811865475244008444);
    static const T inv_sqrt2pi = T(0.3989422804014326779399461);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* xv = x.data();
    T* ov = out.data();
    std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        T phi = T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
        ov[i] = xv[i] * phi;
    }
    detail::check_finite(out, "gelu");
    Graph<T>* g = Graph<T>::current();
    if (g && detail::tracked(x)) {
        out.ptr()->wants_grad = true;
        auto X = x.ptr(), O = out.ptr();
        g->record([X, O] {
            if (O->grad.empty()) return;
            auto& gx = grad_buffer(X);
            for (std::size_t i = 0; i < gx.size(); ++i) {
                T v = X->value[i];
                T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                gx[i] += O->grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

namespace detail {

// add/mul share shape policy: exact match, or one side scalar (numel == 1).
// No other broadcasting exists in this engine.
enum class EwMode { exact, a_scalar, b_scalar };

template <typename T>
inline EwMode ew_mode(const Tensor<T>& a, const Tensor<T>& b,
                      const char* op) {
    if (a.shape() == b.shape()) return EwMode::exact;
    if (a.numel() == 1) return EwMode::a_scalar;
    if (b.numel() == 1) return EwMode::b_scalar;
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) +
                     " are neither equal nor scalar-broadcastable");
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    auto mode = detail::ew_mode(a, b, "add");
    const Tensor<T>& big = (mode == detail::EwMode::a_scalar) ? b : a;
    Tensor<T> out = Tensor<T>::zeros(big.shape());
    const T* av = a.data();
    const T* bv = b.data();
    T* ov = out.data();
    std::int64_t n = out.numel();
    switch (mode) {
        case detail::EwMode::exact:
            for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
            break;
        case detail::EwMode::a_scalar:
            for (std::int64_t i = 0; i < n; ++i) ov[i] = av[0] + bv[i];
            break;
        case detail::EwMode::b_scalar:
            for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[0];
            break;
    }
    detail::check_finite(out, "add");
    Graph<T>* g = Graph<T>::current();
    if (g && (detail::tracked(a) || detail::tracked(b))) {
        out.ptr()->wants_grad = true;
        auto A = a.ptr(), B = b.ptr(), O = out.ptr();
        g->record([A, B, O] {
            if (O->grad.empty()) return;
            const auto& go = O->grad;
            if (A->wants_grad) {
                auto& ga = grad_buffer(A);
                if (ga.size() == go.size())
                    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                else
                    for (std::size_t i = 0; i < go.size(); ++i) ga[0] += go[i];
            }
            if (B->wants_grad) {
                auto& gb = grad_buffer(B);
                if (gb.size() == go.size())
                    for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
                else
                    for (std::size_t i = 0; i < go.size(); ++i) gb[0] += go[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    auto mode = detail::ew_mode(a, b, "mul");
    const Tensor<T>& big = (mode == detail::EwMode::a_scalar) ? b : a;
    Tensor<T> out = Tensor<T>::zeros(big.shape());
    const T* av = a.data();
    const T* bv = b.data();
    T* ov = out.data();
    std::int64_t n = out.numel();
    switch (mode) {
        case detail::EwMode::exact:
            for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
            break;
        case detail::EwMode::a_scalar:
            for (std::int64_t i = 0; i < n; ++i) ov[i] = av[0] * bv[i];
            break;
        case detail::EwMode::b_scalar:
            for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[0];
            break;
    }
    detail::check_finite(out, "mul");
    Graph<T>* g = Graph<T>::current();
    if (g && (detail::tracked(a) || detail::tracked(b))) {
        out.ptr()->wants_grad = true;
        auto A = a.ptr(), B = b.ptr(), O = out.ptr();
        g->record([A, B, O] {
            if (O->grad.empty()) return;
            const auto& go = O->grad;
            bool a_scalar = A->value.size() == 1 && go.size() > 1;
            bool b_scalar = B->value.size() == 1 && go.size() > 1;
            if (A->wants_grad) {
                auto& ga = grad_buffer(A);
                if (a_scalar)
                    for (std::size_t i = 0; i < go.size(); ++i)
                        ga[0] += go[i] * B->value[i];
                else if (b_scalar)
                    for (std::size_t i = 0; i < go.size(); ++i)
                        ga[i] += go[i] * B->value[0];
                else
                    for (std::size_t i = 0; i < go.size(); ++i)
                        ga[i] += go[i] * B->value[i];
            }
            if (B->wants_grad) {
                auto& gb = grad_buffer(B);
                if (b_scalar)
                    for (std::size_t i = 0; i < go.size(); ++i)
                        gb[0] += go[i] * A->value[i];
                else if (a_scalar)
                    for (std::size_t i = 0; i < go.size(); ++i)
                        gb[i] += go[i] * A->value[0];
                else
                    for (std::size_t i = 0; i < go.size(); ++i)
                        gb[i] += go[i] * A->value[i];
            }
        });
    }
    return out;
}

// Multiply by a compile-side constant (not a tensor).
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* xv = x.data();
    T* ov = out.data();
    std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) ov[i] = xv[i] * c;
    detail::check_finite(out, "scale");
    Graph<T>* g = Graph<T>::current();
    if (g && detail::tracked(x)) {
        out.ptr()->wants_grad = true;
        auto X = x.ptr(), O = out.ptr();
        g->record([X, O, c] {
            if (O->grad.empty()) return;
            auto& gx = grad_buffer(X);
            for (std::size_t i = 0; i < gx.size(); ++i)
                gx[i] += O->grad[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> shift(const Tensor<T>& x, T c) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* xv = x.data();
    T* ov = out.data();
    std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) ov[i] = xv[i] + c;
    detail::check_finite(out, "shift");
    Graph<T>* g = Graph<T>::current();
    if (g && detail::tracked(x)) {
        out.ptr()->wants_grad = true;
        auto X = x.ptr(), O = out.ptr();
        g->record([X, O] {
            if (O->grad.empty()) return;
            auto& gx = grad_buffer(X);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += O->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape movement

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape s) {
    if (shape_numel(s) != x.numel())
        throw ShapeError("reshape: element count mismatch " +
                         shape_str(x.shape()) + " -> " + shape_str(s));
    Tensor<T> out = Tensor<T>::from(std::move(s), x.vec());
    Graph<T>* g = Graph<T>::current();
    if (g && detail::tracked(x)) {
        out.ptr()->wants_grad = true;
        auto X = x.ptr(), O = out.ptr();
        g->record([X, O] {
            if (O->grad.empty()) return;
            auto& gx = grad_buffer(X);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += O->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expects a rank-2 tensor");
    std::int64_t m = x.dim(0), n = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros({n, m});
    const T* xv = x.data();
    T* ov = out.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) ov[j * m + i] = xv[i * n + j];
    Graph<T>* g = Graph<T>::current();
    if (g && detail::tracked(x)) {
        out.ptr()->wants_grad = true;
        auto X = x.ptr(), O = out.ptr();
        g->record([X, O, m, n] {
            if (O->grad.empty()) return;
            auto& gx = grad_buffer(X);
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j)
                    gx[i * n + j] += O->grad[j * m + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expects rank-2 tensors");
    std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul: inner dims disagree " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros({m, n});
    detail::mm_acc_nn(a.data(), b.data(), out.data(), m, k, n);
    detail::check_finite(out, "matmul");
    Graph<T>* g = Graph<T>::current();
    if (g && (detail::tracked(a) || detail::tracked(b))) {
        out.ptr()->wants_grad = true;
        auto A = a.ptr(), B = b.ptr(), O = out.ptr();
        g->record([A, B, O, m, k, n] {
            if (O->grad.empty()) return;
            if (A->wants_grad)
                detail::mm_acc_nt(O->grad.data(), B->value.data(),
                                  grad_buffer(A).data(), m, k, n);
            if (B->wants_grad)
                detail::mm_acc_tn(A->value.data(), O->grad.data(),
                                  grad_buffer(B).data(), m, k, n);
        });
    }
    return out;
}

template <typename T>
Tensor<T> matvec(const Tensor<T>& a, const Tensor<T>& x) {
    if (a.rank() != 2 || x.rank() != 1)
        throw ShapeError("matvec: expects rank-2 and rank-1 tensors");
    std::int64_t m = a.dim(0), k = a.dim(1);
    if (x.dim(0) != k)
        throw ShapeError("matvec: inner dims disagree " +
                         shape_str(a.shape()) + " x " + shape_str(x.shape()));
    Tensor<T> out = Tensor<T>::zeros({m});
    const T* av = a.data();
    const T* xv = x.data();
    T* ov = out.data();
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = av + i * k;
        T s = T(0);
        for (std::int64_t j = 0; j < k; ++j) s += arow[j] * xv[j];
        ov[i] = s;
    }
    detail::check_finite(out, "matvec");
    Graph<T>* g = Graph<T>::current();
    if (g && (detail::tracked(a) || detail::tracked(x))) {
        out.ptr()->wants_grad = true;
        auto A = a.ptr(), X = x.ptr(), O = out.ptr();
        g->record([A, X, O, m, k] {
            if (O->grad.empty()) return;
            const auto& go = O->grad;
            if (A->wants_grad) {
                auto& ga = grad_buffer(A);
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < k; ++j)
                        ga[i * k + j] += go[i] * X->value[j];
            }
            if (X->wants_grad) {
                auto& gx = grad_buffer(X);
                for (std::int64_t i = 0; i < m; ++i) {
                    T gi = go[i];
                    const T* arow = A->value.data() + i * k;
                    for (std::int64_t j = 0; j < k; ++j)
                        gx[j] += arow[j] * gi;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution (stride/zero-padding, no dilation). Accepts (C,H,W) or
// (N,C,H,W); the rank-3 form is treated as a single sample. Uses im2col plus
// the matmul kernel; the reduction order per output element is (c, kh, kw)
// ascending, identical to the textbook nested loop.

namespace detail {

template <typename T>
inline void im2col(const T* x, std::int64_t C, std::int64_t H, std::int64_t W,
                   std::int64_t kh, std::int64_t kw, std::int64_t stride,
                   std::int64_t pad, std::int64_t Ho, std::int64_t Wo,
                   T* col) {
    // col is (C*kh*kw) x (Ho*Wo), zero-initialized by the caller.
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                T* crow = col + ((c * kh + ki) * kw + kj) * (Ho * Wo);
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    std::int64_t iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= H) continue;
                    const T* xrow = x + (c * H + iy) * W;
                    T* corow = crow + oy * Wo;
                    for (std::int64_t ox = 0; ox < Wo; ++ox) {
                        std::int64_t ix = ox * stride + kj - pad;
                        if (ix >= 0 && ix < W) corow[ox] = xrow[ix];
                    }
                }
            }
        }
    }
}

// One sample's tensors sliced out of batched (N,C,H,W) maps. A plain copy:
// the batched and per-sample forms carry identical bytes.
template <typename T>
inline std::vector<Tensor<T>> slice_features(
    const std::vector<Tensor<T>>& batched, std::int64_t n) {
    std::vector<Tensor<T>> out;
    out.reserve(batched.size());
    for (const auto& f : batched) {
        std::int64_t c = f.dim(1), h = f.dim(2), w = f.dim(3);
        Tensor<T> s = Tensor<T>::zeros({c, h, w});
        const T* src = f.data() + n * c * h * w;
        for (std::int64_t i = 0; i < c * h * w; ++i) s.data()[i] = src[i];
        out.push_back(s);
    }
    return out;
}

template <typename T>
inline void col2im_acc(const T* col, std::int64_t C, std::int64_t H,
                       std::int64_t W, std::int64_t kh, std::int64_t kw,
                       std::int64_t stride, std::int64_t pad, std::int64_t Ho,
                       std::int64_t Wo, T* x) {
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                const T* crow = col + ((c * kh + ki) * kw + kj) * (Ho * Wo);
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    std::int64_t iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= H) continue;
                    T* xrow = x + (c * H + iy) * W;
                    const T* corow = crow + oy * Wo;
                    for (std::int64_t ox = 0; ox < Wo; ++ox) {
                        std::int64_t ix = ox * stride + kj - pad;
                        if (ix >= 0 && ix < W) xrow[ix] += corow[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 std::int64_t stride, std::int64_t pad) {
    bool batched = x.rank() == 4;
    if (!batched && x.rank() != 3)
        throw ShapeError("conv2d: input must be (C,H,W) or (N,C,H,W)");
    if (kernel.rank() != 4)
        throw ShapeError("conv2d: kernel must be (K,C,kh,kw)");
    if (stride < 1) throw DomainError("conv2d: stride must be >= 1");
    if (pad < 0) throw DomainError("conv2d: padding must be >= 0");
    std::int64_t N = batched ? x.dim(0) : 1;
    std::int64_t C = x.dim(batched ? 1 : 0);
    std::int64_t H = x.dim(batched ? 2 : 1);
    std::int64_t W = x.dim(batched ? 3 : 2);
    std::int64_t K = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != C)
        throw ShapeError("conv2d: kernel expects " +
                         std::to_string(kernel.dim(1)) + " input channels, got " +
                         std::to_string(C));
    if (kh > H + 2 * pad || kw > W + 2 * pad)
        throw ShapeError("conv2d: kernel larger than padded input");
    std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;

    Shape oshape = batched ? Shape{N, K, Ho, Wo} : Shape{K, Ho, Wo};
    Tensor<T> out = Tensor<T>::zeros(oshape);
    std::int64_t ck = C * kh * kw, hw = Ho * Wo;
    // Samples are independent, so the batch splits across workers; each
    // writes only its own output slice.
    parallel_chunks(N, compute_threads(), [&](std::int64_t n0,
                                              std::int64_t n1) {
        std::vector<T> col(static_cast<std::size_t>(ck * hw));
        for (std::int64_t n = n0; n < n1; ++n) {
            std::fill(col.begin(), col.end(), T(0));
            detail::im2col(x.data() + n * C * H * W, C, H, W, kh, kw, stride,
                           pad, Ho, Wo, col.data());
            detail::mm_acc_nn(kernel.data(), col.data(),
                              out.data() + n * K * hw, K, ck, hw);
        }
    });
    detail::check_finite(out, "conv2d");

    Graph<T>* g = Graph<T>::current();
    if (g && (detail::tracked(x) || detail::tracked(kernel))) {
        out.ptr()->wants_grad = true;
        auto X = x.ptr(), Kn = kernel.ptr(), O = out.ptr();
        g->record([X, Kn, O, N, C, H, W, K, kh, kw, stride, pad, Ho, Wo, ck,
                   hw] {
            if (O->grad.empty()) return;
            if (X->wants_grad) grad_buffer(X);
            if (Kn->wants_grad) grad_buffer(Kn);
            // Input gradients are per-sample slices; kernel gradients go to
            // per-sample partial buffers that the calling thread folds in
            // ascending sample order, matching a plain sequential loop.
            std::vector<std::vector<T>> dk_partial(
                Kn->wants_grad ? static_cast<std::size_t>(N) : 0);
            parallel_chunks(N, compute_threads(), [&](std::int64_t n0,
                                                      std::int64_t n1) {
                std::vector<T> col(static_cast<std::size_t>(ck * hw));
                std::vector<T> dcol;
                for (std::int64_t n = n0; n < n1; ++n) {
                    const T* dout = O->grad.data() + n * K * hw;
                    std::fill(col.begin(), col.end(), T(0));
                    detail::im2col(X->value.data() + n * C * H * W, C, H, W,
                                   kh, kw, stride, pad, Ho, Wo, col.data());
                    if (Kn->wants_grad) {
                        auto& part = dk_partial[static_cast<std::size_t>(n)];
                        part.assign(static_cast<std::size_t>(K * ck), T(0));
                        detail::mm_acc_nt(dout, col.data(), part.data(), K,
                                          ck, hw);
                    }
                    if (X->wants_grad) {
                        dcol.assign(static_cast<std::size_t>(ck * hw), T(0));
                        detail::mm_acc_tn(Kn->value.data(), dout, dcol.data(),
                                          K, ck, hw);
                        detail::col2im_acc(dcol.data(), C, H, W, kh, kw,
                                           stride, pad, Ho, Wo,
                                           X->grad.data() + n * C * H * W);
                    }
                }
            });
            if (Kn->wants_grad)
                for (std::int64_t n = 0; n < N; ++n) {
                    const auto& part = dk_partial[static_cast<std::size_t>(n)];
                    for (std::int64_t i = 0; i < K * ck; ++i)
                        Kn->grad[static_cast<std::size_t>(i)] +=
                            part[static_cast<std::size_t>(i)];
                }
        });
    }
    return out;
}

// Per-channel bias for conv outputs: b has one entry per channel.
template <typename T>
Tensor<T> bias_channels(const Tensor<T>& x, const Tensor<T>& b) {
    bool batched = x.rank() == 4;
    if (!batched && x.rank() != 3)
        throw ShapeError("bias_channels: input must be (C,H,W) or (N,C,H,W)");
    if (b.rank() != 1)
        throw ShapeError("bias_channels: bias must be rank-1");
    std::int64_t N = batched ? x.dim(0) : 1;
    std::int64_t C = x.dim(batched ? 1 : 0);
    std::int64_t hw = x.dim(batched ? 2 : 1) * x.dim(batched ? 3 : 2);
    if (b.dim(0) != C)
        throw ShapeError("bias_channels: bias entries != channels");
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* xv = x.data();
    const T* bv = b.data();
    T* ov = out.data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            T bb = bv[c];
            const T* xs = xv + (n * C + c) * hw;
            T* os = ov + (n * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) os[i] = xs[i] + bb;
        }
    detail::check_finite(out, "bias_channels");
    Graph<T>* g = Graph<T>::current();
    if (g && (detail::tracked(x) || detail::tracked(b))) {
        out.ptr()->wants_grad = true;
        auto X = x.ptr(), B = b.ptr(), O = out.ptr();
        g->record([X, B, O, N, C, hw] {
            if (O->grad.empty()) return;
            const auto& go = O->grad;
            if (X->wants_grad) {
                auto& gx = grad_buffer(X);
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
            }
            if (B->wants_grad) {
                auto& gb = grad_buffer(B);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T* gs = go.data() + (n * C + c) * hw;
                        T s = T(0);
                        for (std::int64_t i = 0; i < hw; ++i) s += gs[i];
                        gb[c] += s;
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling and reductions

// Global average pool. (C,H,W) -> (C) or (N,C,H,W) -> (N,C). Each output is
// sum(value * 1/(H*W)) in ascending spatial order; the zero-query attention
// reduction reproduces exactly this arithmetic.
template <typename T>
Tensor<T> gap(const Tensor<T>& x) {
    bool batched = x.rank() == 4;
    if (!batched && x.rank() != 3)
        throw ShapeError("gap: input must be (C,H,W) or (N,C,H,W)");
    std::int64_t N = batched ? x.dim(0) : 1;
    std::int64_t C = x.dim(batched ? 1 : 0);
    std::int64_t hw = x.dim(batched ? 2 : 1) * x.dim(batched ? 3 : 2);
    Tensor<T> out =
        batched ? Tensor<T>::zeros({N, C}) : Tensor<T>::zeros({C});
    const T* xv = x.data();
    T* ov = out.data();
    T inv = T(1) / static_cast<T>(hw);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xs = xv + (n * C + c) * hw;
            T s = T(0);
            for (std::int64_t i = 0; i < hw; ++i) s += xs[i] * inv;
            ov[n * C + c] = s;
        }
    detail::check_finite(out, "gap");
    Graph<T>* g = Graph<T>::current();
    if (g && detail::tracked(x)) {
        out.ptr()->wants_grad = true;
        auto X = x.ptr(), O = out.ptr();
        g->record([X, O, N, C, hw, inv] {
            if (O->grad.empty()) return;
            auto& gx = grad_buffer(X);
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    T gv = O->grad[n * C + c] * inv;
                    T* gs = gx.data() + (n * C + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) gs[i] += gv;
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(Shape{});
    const T* xv = x.data();
    T s = T(0);
    std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) s += xv[i];
    out.data()[0] = s;
    detail::check_finite(out, "sum");
    Graph<T>* g = Graph<T>::current();
    if (g && detail::tracked(x)) {
        out.ptr()->wants_grad = true;
        auto X = x.ptr(), O = out.ptr();
        g->record([X, O] {
            if (O->grad.empty()) return;
            auto& gx = grad_buffer(X);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += O->grad[0];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Select one element of a vector as a scalar (used to pick a class logit).
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::int64_t idx) {
    if (x.rank() != 1) throw ShapeError("pick: expects a rank-1 tensor");
    if (idx < 0 || idx >= x.dim(0))
        throw DomainError("pick: index out of range");
    Tensor<T> out = Tensor<T>::scalar(x.data()[idx]);
    Graph<T>* g = Graph<T>::current();
    if (g && detail::tracked(x)) {
        out.ptr()->wants_grad = true;
        auto X = x.ptr(), O = out.ptr();
        g->record([X, O, idx] {
            if (O->grad.empty()) return;
            grad_buffer(X)[static_cast<std::size_t>(idx)] += O->grad[0];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax and loss

// softmax(v / temperature) over a vector, max-subtracted. Non-finite input is
// a domain error (the caller fed garbage, the op did not overflow).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, T temperature) {
    if (x.rank() != 1) throw ShapeError("softmax: expects a rank-1 tensor");
    if (!(temperature > T(0)))
        throw DomainError("softmax: temperature must be positive");
    std::int64_t n = x.dim(0);
    const T* xv = x.data();
    for (std::int64_t i = 0; i < n; ++i)
        if (!detail::finite_v(xv[i]))
            throw DomainError("softmax: non-finite input");
    Tensor<T> out = Tensor<T>::zeros({n});
    T* ov = out.data();
    T m = xv[0];
    for (std::int64_t i = 1; i < n; ++i)
        if (xv[i] > m) m = xv[i];
    T s = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
        ov[i] = std::exp((xv[i] - m) / temperature);
        s += ov[i];
    }
    T inv = T(1) / s;
    for (std::int64_t i = 0; i < n; ++i) ov[i] *= inv;
    detail::check_finite(out, "softmax");
    Graph<T>* g = Graph<T>::current();
    if (g && detail::tracked(x)) {
        out.ptr()->wants_grad = true;
        auto X = x.ptr(), O = out.ptr();
        g->record([X, O, temperature, n] {
            if (O->grad.empty()) return;
            const auto& go = O->grad;
            const auto& p = O->value;
            T dot = T(0);
            for (std::int64_t i = 0; i < n; ++i) dot += go[i] * p[i];
            auto& gx = grad_buffer(X);
            T invt = T(1) / temperature;
            for (std::int64_t i = 0; i < n; ++i)
                gx[i] += invt * p[i] * (go[i] - dot);
        });
    }
    return out;
}

// Mean softmax cross-entropy. Rank-1 logits with a single label, or rank-2
// (N,C) with one label per row. Backward is (p - onehot) / N.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        const std::vector<std::int64_t>& labels) {
    std::int64_t N, C;
    if (logits.rank() == 1) {
        N = 1;
        C = logits.dim(0);
    } else if (logits.rank() == 2) {
        N = logits.dim(0);
        C = logits.dim(1);
    } else {
        throw ShapeError("cross_entropy: logits must be rank-1 or rank-2");
    }
    if (static_cast<std::int64_t>(labels.size()) != N)
        throw ShapeError("cross_entropy: one label per row required");
    for (std::int64_t lb : labels)
        if (lb < 0 || lb >= C)
            throw DomainError("cross_entropy: label out of range");

    const T* lv = logits.data();
    auto probs = std::make_shared<std::vector<T>>(
        static_cast<std::size_t>(N * C));
    T total = T(0);
    for (std::int64_t r = 0; r < N; ++r) {
        const T* row = lv + r * C;
        T m = row[0];
        for (std::int64_t j = 1; j < C; ++j)
            if (row[j] > m) m = row[j];
        T s = T(0);
        for (std::int64_t j = 0; j < C; ++j) s += std::exp(row[j] - m);
        T lse = m + std::log(s);
        for (std::int64_t j = 0; j < C; ++j)
            (*probs)[static_cast<std::size_t>(r * C + j)] =
                std::exp(row[j] - lse);
        total += lse - row[labels[static_cast<std::size_t>(r)]];
    }
    Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(N));
    detail::check_finite(out, "cross_entropy");
    Graph<T>* g = Graph<T>::current();
    if (g && detail::tracked(logits)) {
        out.ptr()->wants_grad = true;
        auto L = logits.ptr(), O = out.ptr();
        auto lab = labels;
        g->record([L, O, probs, lab, N, C] {
            if (O->grad.empty()) return;
            T go = O->grad[0] / static_cast<T>(N);
            auto& gl = grad_buffer(L);
            for (std::int64_t r = 0; r < N; ++r) {
                for (std::int64_t j = 0; j < C; ++j) {
                    T p = (*probs)[static_cast<std::size_t>(r * C + j)];
                    T onehot =
                        (j == lab[static_cast<std::size_t>(r)]) ? T(1) : T(0);
                    gl[r * C + j] += go * (p - onehot);
                }
            }
        });
    }
    return out;
}

}  // namespace castream
