#pragma once

// Distribution learning: per-joint (mu, sigma) heads read the classification
// features, a shared flow supplies the learned residual density, the
// standardized learned density I(x) = G((x - mu)/sigma) mixes with the
// standard Gaussian base, and the mixture rasterizes into peak-normalized
// learnable heatmaps H2. The flow's own moments enter as per-step constants
// (gradients flow through the density evaluation, not the moment estimate).

#include <array>
#include <string>
#include <utility>

#include "sadinet/flow.hpp"
#include "sadinet/ops.hpp"

namespace sadi {

inline constexpr double kTwoPi = 2.0 * 3.14159265358979323846;

struct DensityOptions {
    bool jacobian_correction = true;  // include the 1/sigma factor so I integrates to 1
    bool mixture = true;              // false: raw sum Q + I instead of the equal mixture
};

/// Standard 2-D normal density at points [M,2] -> [M,1].
inline Tensor standard_normal_density(const Tensor& pts) { return standard_normal2d(pts); }

/// I(x) = G((x - mu)/sigma), optionally with the 1/(sigma_x sigma_y) density
/// correction. mu/sigma are the flow's own moments, treated as constants.
inline Tensor i_xi_density(const Tensor& pts, const Flow& flow, const FlowMoments& m,
                           bool jacobian_correction = true) {
    if (m.sigma[0] <= 0.0 || m.sigma[1] <= 0.0)
        throw std::invalid_argument("i_xi_density: sigma must be positive");
    Tensor mu = Tensor::from({1, 1, 2}, {m.mu[0], m.mu[1]});
    Tensor sigma = Tensor::from({1, 1, 2}, {m.sigma[0], m.sigma[1]});
    Tensor standardized = standardize_points(pts, mu, sigma);
    Tensor g = sadi::exp(flow.log_prob(standardized));
    if (jacobian_correction) g = mul_scalar(g, 1.0 / (m.sigma[0] * m.sigma[1]));
    return g;
}

/// P(x): equal mixture of the base Gaussian and I (default), or their raw sum.
inline Tensor learned_density(const Tensor& pts, const Flow& flow, const FlowMoments& m,
                              const DensityOptions& opts = {}) {
    Tensor q = standard_normal_density(pts);
    Tensor i = i_xi_density(pts, flow, m, opts.jacobian_correction);
    if (opts.mixture) return add(mul_scalar(q, 0.5), mul_scalar(i, 0.5));
    return add(q, i);
}

/// Linear head mapping flattened classification features to per-joint
/// (mu, sigma) in grid units; sigma is softplus-constrained positive.
struct DistributionHeads {
    Tensor w;  // [F, J*4]
    Tensor b;  // [J*4]
    int joints = 0;
    int grid = 64;

    static DistributionHeads make(int feature_dim, int joints, int grid = 64) {
        DistributionHeads h;
        h.w = Tensor(Shape{feature_dim, joints * 4});
        h.b = Tensor(Shape{joints * 4});
        h.joints = joints;
        h.grid = grid;
        return h;
    }

    struct Out {
        Tensor mu;     // [N,J,2], grid units
        Tensor sigma;  // [N,J,2], strictly positive grid units
    };

    Out forward(const Tensor& features) const {
        const int N = features.dim(0);
        Tensor grouped = reshape(linear_bias(features, w, b), {N, joints, 4});
        Out out;
        out.mu = slice(grouped, 2, 0, 2);
        out.sigma = softplus(slice(grouped, 2, 2, 2));
        return out;
    }

    void collect(const std::string& prefix, ParamList& out) {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }

    void init(std::uint64_t master, const std::string& prefix) {
        detail::he_init(w, w.dim(0), master, prefix + ".w", 0.1);
        // start at the grid center with sigma ~= 2 grid px: softplus(1.8546) ~ 2
        for (int j = 0; j < joints; ++j) {
            b.values()[static_cast<std::size_t>(j * 4 + 0)] = grid / 2.0;
            b.values()[static_cast<std::size_t>(j * 4 + 1)] = grid / 2.0;
            b.values()[static_cast<std::size_t>(j * 4 + 2)] = 1.8546;
            b.values()[static_cast<std::size_t>(j * 4 + 3)] = 1.8546;
        }
    }
};

namespace detail {

/// Pixel-center grid coordinates as [G*G, 2] rows of (x, y).
inline Tensor density_grid(int grid) {
    Tensor g(Shape{grid * grid, 2});
    for (int y = 0; y < grid; ++y)
        for (int x = 0; x < grid; ++x) {
            g.at({y * grid + x, 0}) = x;
            g.at({y * grid + x, 1}) = y;
        }
    return g;
}

}  // namespace detail

/// Learnable heatmaps: for each sample and joint, evaluate P at
/// ((u,v) - mu_j) / sigma_j over the grid and divide by the per-joint maximum,
/// so every peak is exactly 1. Differentiable w.r.t. mu, sigma and the flow.
inline Tensor rasterize_h2(const Tensor& mu, const Tensor& sigma, const Flow& flow,
                           const FlowMoments& moments, int grid = 64,
                           const DensityOptions& opts = {}) {
    if (mu.rank() != 3 || mu.dim(2) != 2 || sigma.shape() != mu.shape())
        throw std::invalid_argument("rasterize_h2: heads must be [N,J,2], got mu " +
                                    shape_str(mu.shape()) + " sigma " + shape_str(sigma.shape()));
    const int N = mu.dim(0), J = mu.dim(1), G2 = grid * grid;
    Tensor grid_pts = detail::density_grid(grid);                       // [G2,2]
    Tensor standardized = standardize_points(grid_pts, mu, sigma);      // [N*J*G2, 2]
    Tensor dens = learned_density(standardized, flow, moments, opts);   // [N*J*G2, 1]
    Tensor maps = reshape(dens, {N * J, G2});
    Tensor peak = reduce_max(maps, 1);  // [N*J, 1]
    for (double p : peak.values()) {
        if (!std::isfinite(p))
            throw numerical_error("rasterize_h2: non-finite density over the grid");
        if (!(p > 0.0)) throw numerical_error("rasterize_h2: all-zero density over the grid");
    }
    Tensor h2 = div(maps, broadcast_to(peak, {N * J, G2}));
    return reshape(h2, {N, J, grid, grid});
}

/// Residual log-likelihood loss for one joint:
///   L = -log Q(mu_bar) - log G(mu_bar) - log s + log sigma
/// with mu_bar = (mu_g - mu_hat) / sigma_hat, s fixed, and log sigma summed
/// over both components. mu_hat/sigma_hat are [1,2] (or [2]) tensors.
inline Tensor rle_loss(const std::array<double, 2>& mu_g, const Tensor& mu_hat,
                       const Tensor& sigma_hat, const Flow& flow, double s = 1.0) {
    if (mu_hat.numel() != 2 || sigma_hat.numel() != 2)
        throw std::invalid_argument("rle_loss: heads must hold 2 components");
    for (double v : sigma_hat.values())
        if (v <= 0.0) throw std::invalid_argument("rle_loss: sigma_hat must be positive");
    Tensor mu_h = reshape(mu_hat, {1, 2});
    Tensor sg_h = reshape(sigma_hat, {1, 2});
    Tensor target = Tensor::from({1, 2}, {mu_g[0], mu_g[1]});
    Tensor mu_bar = div(sub(target, mu_h), sg_h);

    Tensor neg_log_q =
        add_scalar(mul_scalar(sum_all(mul(mu_bar, mu_bar)), 0.5), std::log(kTwoPi));
    Tensor neg_log_g = neg(sum_all(flow.log_prob(mu_bar)));
    Tensor log_sigma = sum_all(sadi::log(sg_h));
    return add_scalar(add(add(neg_log_q, neg_log_g), log_sigma), -std::log(s));
}

}  // namespace sadi
