#pragma once

// Shared test helpers. Reference implementations here are deliberately
// straight-line loop code, independent of the library's kernels.

#include <cmath>
#include <vector>

#include "sadinet/rng.hpp"
#include "sadinet/tensor.hpp"

namespace testutil {

inline sadi::Tensor random_tensor(sadi::Shape shape, sadi::Rng& rng, double lo = -1.0,
                                  double hi = 1.0) {
    sadi::Tensor t(shape);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

// Direct six-loop convolution, NCHW, cross-correlation with zero padding.
inline sadi::Tensor conv2d_reference(const sadi::Tensor& x, const sadi::Tensor& w, int stride,
                                     int padding, int dilation) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int OH = (H + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    const int OW = (W + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    sadi::Tensor y(sadi::Shape{N, O, OH, OW});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double acc = 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int m = 0; m < kh; ++m)
                            for (int q = 0; q < kw; ++q) {
                                const int iy = oy * stride - padding + m * dilation;
                                const int ix = ox * stride - padding + q * dilation;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += x.at({n, c, iy, ix}) * w.at({o, c, m, q});
                            }
                    y.at({n, o, oy, ox}) = acc;
                }
    return y;
}

inline double max_abs_diff(const sadi::Tensor& a, const sadi::Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.values().size(); ++i)
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

}  // namespace testutil
