#pragma once

// Heatmap MSE losses and their chi-weighted combination:
//   total = (1 - chi) * L_h1 + chi * L_h2
// with chi a constant in [0,1] per step, defaulted from the predicted sigmas.

#include <string>

#include "sadinet/ops.hpp"

namespace sadi {

struct LossBreakdown {
    Tensor l_h1;   // scalar
    Tensor l_h2;   // scalar
    Tensor total;  // scalar, exactly (1-chi)*l_h1 + chi*l_h2
    double chi = 0.0;
};

/// Mean squared error over visible joints' grids; invisible joints contribute
/// nothing to either the sum or the normalizer. Zero visible joints give 0.
inline Tensor mse_heatmap(const Tensor& a, const Tensor& b, const Tensor& visibility) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mse_heatmap: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    if (a.rank() != 4)
        throw std::invalid_argument("mse_heatmap: expected [N,J,H,W], got " +
                                    shape_str(a.shape()));
    const int N = a.dim(0), J = a.dim(1);
    if (visibility.rank() != 2 || visibility.dim(0) != N || visibility.dim(1) != J)
        throw std::invalid_argument("mse_heatmap: visibility must be [N,J]");
    double visible = 0.0;
    for (double v : visibility.values()) visible += v;
    if (visible == 0.0) return Tensor::scalar(0.0);
    Tensor mask = broadcast_to(reshape(visibility, {N, J, 1, 1}), a.shape());
    Tensor diff = mul(sub(a, b), mask);
    const double cells = visible * a.dim(2) * a.dim(3);
    return mul_scalar(sum_all(mul(diff, diff)), 1.0 / cells);
}

/// Eq.-8-style combination. chi must already lie in [0,1] (it is a detached
/// constant); `swapped` selects the rejected ablation form chi*L_h1 + (1-chi)*L_h2.
inline LossBreakdown combined_loss(const Tensor& l_h1, const Tensor& l_h2, double chi,
                                   bool swapped = false) {
    if (!(chi >= 0.0 && chi <= 1.0))
        throw std::invalid_argument("combined_loss: chi " + std::to_string(chi) +
                                    " outside [0,1]");
    LossBreakdown out;
    out.l_h1 = l_h1;
    out.l_h2 = l_h2;
    out.chi = chi;
    const double c1 = swapped ? chi : 1.0 - chi;
    const double c2 = swapped ? 1.0 - chi : chi;
    out.total = add(mul_scalar(l_h1, c1), mul_scalar(l_h2, c2));
    return out;
}

/// chi = sigma reduction: batch mean of the predicted sigma components
/// expressed as a fraction of the grid extent, detached, clamped to [0,1].
/// (A raw grid-unit mean saturates the clamp immediately; normalizing by the
/// extent keeps the weight inside the open interval where Eq. 8 is a blend.)
inline double chi_from_sigma(const Tensor& sigma, int grid) {
    double acc = 0.0;
    for (double v : sigma.values()) acc += v;
    const double mean = acc / static_cast<double>(sigma.numel());
    return std::clamp(mean / static_cast<double>(grid), 0.0, 1.0);
}

}  // namespace sadi
