#pragma once

// Test oracles. These deliberately avoid the library's fast paths: the
// convolution oracle is the six-nested-loop definition, and the gradient
// checker uses central finite differences on double precision. Keep them
// independent of the code under test.

#include <castream/castream.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

namespace oracle {

using castream::Rng;
using castream::Tensor;

// Plain definition of cross-correlation with zero padding. Output layout
// (N,K,Ho,Wo); reduction in (c,ki,kj) ascending order.
inline std::vector<double> conv2d_naive(const std::vector<double>& x,
                                        std::int64_t N, std::int64_t C,
                                        std::int64_t H, std::int64_t W,
                                        const std::vector<double>& k,
                                        std::int64_t K, std::int64_t kh,
                                        std::int64_t kw, std::int64_t stride,
                                        std::int64_t pad) {
    std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(N * K * Ho * Wo), 0.0);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t ko = 0; ko < K; ++ko)
            for (std::int64_t oy = 0; oy < Ho; ++oy)
                for (std::int64_t ox = 0; ox < Wo; ++ox) {
                    double acc = 0.0;
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t ki = 0; ki < kh; ++ki)
                            for (std::int64_t kj = 0; kj < kw; ++kj) {
                                std::int64_t iy = oy * stride + ki - pad;
                                std::int64_t ix = ox * stride + kj - pad;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W)
                                    continue;
                                acc += k[((ko * C + c) * kh + ki) * kw + kj] *
                                       x[((n * C + c) * H + iy) * W + ix];
                            }
                    out[((n * K + ko) * Ho + oy) * Wo + ox] = acc;
                }
    return out;
}

// Central-difference gradient check. `fn` must rebuild the scalar output
// from the current leaf values on every call. Relative error uses
// |a - n| / max(|a| + |n|, 0.01) so tiny true gradients are compared on an
// absolute scale instead of amplifying finite-difference noise.
struct FdReport {
    double max_rel_err = 0.0;
    std::int64_t checked = 0;
};

inline FdReport check_gradients(
    const std::function<Tensor<double>()>& fn,
    const std::vector<Tensor<double>>& leaves, double h = 1e-5) {
    std::vector<std::vector<double>> analytic;
    {
        castream::Graph<double> g;
        Tensor<double> y = fn();
        g.backward(y);
        for (const auto& leaf : leaves) {
            if (!leaf.has_grad())
                throw std::runtime_error("fd: leaf got no analytic gradient");
            analytic.push_back(leaf.grad());
        }
    }
    FdReport rep;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor<double> leaf = leaves[li];
        for (std::int64_t i = 0; i < leaf.numel(); ++i) {
            double saved = leaf.data()[i];
            leaf.data()[i] = saved + h;
            double yp = fn().item();
            leaf.data()[i] = saved - h;
            double ym = fn().item();
            leaf.data()[i] = saved;
            double numeric = (yp - ym) / (2.0 * h);
            double a = analytic[li][static_cast<std::size_t>(i)];
            double rel = std::fabs(a - numeric) /
                         std::max(std::fabs(a) + std::fabs(numeric), 0.01);
            if (rel > rep.max_rel_err) rep.max_rel_err = rel;
            ++rep.checked;
        }
    }
    for (auto& leaf : leaves) const_cast<Tensor<double>&>(leaf).zero_grad();
    return rep;
}

// Random tensor with entries in [lo, hi]; values within `gap` of zero are
// pushed outward so kinked ops (relu) are probed away from the kink.
inline Tensor<double> random_tensor(Rng& rng, castream::Shape s, double lo,
                                    double hi, double gap = 0.0) {
    Tensor<double> t = Tensor<double>::zeros(std::move(s));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        double v = rng.uniform(lo, hi);
        if (gap > 0.0 && std::fabs(v) < gap) v = v < 0.0 ? v - gap : v + gap;
        t.data()[i] = v;
    }
    return t;
}

// Fixed random functional that maps a tensor output to a scalar so full
// Jacobians are exercised through one backward pass.
inline Tensor<double> probe(const Tensor<double>& out, Rng& rng) {
    Tensor<double> w = random_tensor(rng, out.shape(), -1.0, 1.0);
    return castream::sum(castream::mul(out, w));
}

}  // namespace oracle
