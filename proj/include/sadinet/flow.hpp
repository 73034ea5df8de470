#pragma once

// Real-NVP-style flow on R^2: affine coupling layers alternate which
// coordinate is transformed; scale/shift come from small MLPs of the
// pass-through coordinate, with the scale bounded to [-3,3] by tanh. The
// log-determinant of each layer is the scale output itself, so densities come
// from the exact change of variables.

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "sadinet/blocks.hpp"
#include "sadinet/ops.hpp"
#include "sadinet/rng.hpp"

namespace sadi {

struct FlowMoments {
    std::array<double, 2> mu{0.0, 0.0};
    std::array<double, 2> sigma{1.0, 1.0};
    bool clamped = false;  // set when a sigma fell below 1e-6
};

/// Column-wise MLP [M,1] -> [M,1] with one tanh hidden layer.
struct CouplingNet {
    Tensor w1;  // [1, width]
    Tensor b1;  // [width]
    Tensor w2;  // [width, 1]
    Tensor b2;  // [1]

    static CouplingNet make(int width) {
        CouplingNet n;
        n.w1 = Tensor(Shape{1, width});
        n.b1 = Tensor(Shape{width});
        n.w2 = Tensor(Shape{width, 1});
        n.b2 = Tensor(Shape{1});
        return n;
    }

    Tensor forward(const Tensor& in) const { return coupling_mlp(in, w1, b1, w2, b2); }

    void collect(const std::string& prefix, ParamList& out) {
        out.push_back({prefix + ".w1", w1});
        out.push_back({prefix + ".b1", b1});
        out.push_back({prefix + ".w2", w2});
        out.push_back({prefix + ".b2", b2});
    }
    void init(std::uint64_t master, const std::string& prefix) {
        detail::he_init(w1, 1, master, prefix + ".w1", 0.7071);
        b1.fill(0.0);
        // small output layer keeps a fresh flow near the identity, so its
        // density stays concentrated where the truncated grids integrate it
        detail::he_init(w2, w2.dim(0), master, prefix + ".w2", 0.05);
        b2.fill(0.0);
    }
};

/// One affine coupling layer. `transformed` names the coordinate that is
/// scaled/shifted; the other passes through and drives the nets.
struct CouplingLayer {
    CouplingNet scale_net, shift_net;
    int transformed = 1;

    static CouplingLayer make(int width, int transformed) {
        CouplingLayer l;
        l.scale_net = CouplingNet::make(width);
        l.shift_net = CouplingNet::make(width);
        l.transformed = transformed;
        return l;
    }

    Tensor bounded_scale(const Tensor& pass) const {
        return mul_scalar(sadi::tanh(scale_net.forward(pass)), 3.0);
    }

    /// z -> x. Returns the mapped points [M,2] and per-point logdet [M,1]
    /// (equal to the scale output on the transformed coordinate).
    std::pair<Tensor, Tensor> forward(const Tensor& z) const {
        const int keep = 1 - transformed;
        Tensor pass = slice(z, 1, keep, 1);
        Tensor t = slice(z, 1, transformed, 1);
        Tensor s = bounded_scale(pass);
        Tensor mapped = add(mul(t, sadi::exp(s)), shift_net.forward(pass));
        Tensor x = transformed == 1 ? concat({pass, mapped}, 1) : concat({mapped, pass}, 1);
        return {x, s};
    }

    /// x -> z. logdet of this inverse map is -s(pass).
    std::pair<Tensor, Tensor> inverse(const Tensor& x) const {
        const int keep = 1 - transformed;
        Tensor pass = slice(x, 1, keep, 1);
        Tensor t = slice(x, 1, transformed, 1);
        Tensor s = bounded_scale(pass);
        Tensor unmapped = mul(sub(t, shift_net.forward(pass)), sadi::exp(neg(s)));
        Tensor z = transformed == 1 ? concat({pass, unmapped}, 1) : concat({unmapped, pass}, 1);
        return {z, neg(s)};
    }

    void collect(const std::string& prefix, ParamList& out) {
        scale_net.collect(prefix + ".scale", out);
        shift_net.collect(prefix + ".shift", out);
    }
    void init(std::uint64_t master, const std::string& prefix) {
        scale_net.init(master, prefix + ".scale");
        shift_net.init(master, prefix + ".shift");
    }
};

struct Flow {
    std::vector<CouplingLayer> layers;

    static Flow make(int n_layers = 4, int width = 16) {
        Flow f;
        for (int i = 0; i < n_layers; ++i)
            f.layers.push_back(CouplingLayer::make(width, i % 2));
        return f;
    }

    /// z -> x with accumulated logdet [M,1].
    std::pair<Tensor, Tensor> forward(const Tensor& z) const {
        Tensor x = z;
        Tensor logdet;
        for (const auto& layer : layers) {
            auto [mapped, ld] = layer.forward(x);
            x = mapped;
            logdet = logdet.defined() ? add(logdet, ld) : ld;
        }
        if (!logdet.defined()) logdet = Tensor(Shape{z.dim(0), 1});
        return {x, logdet};
    }

    /// x -> z with the logdet of the inverse map.
    std::pair<Tensor, Tensor> inverse(const Tensor& x) const {
        Tensor z = x;
        Tensor logdet;
        for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
            auto [unmapped, ld] = it->inverse(z);
            z = unmapped;
            logdet = logdet.defined() ? add(logdet, ld) : ld;
        }
        if (!logdet.defined()) logdet = Tensor(Shape{x.dim(0), 1});
        return {z, logdet};
    }

    /// log G(x) for points [M,2] by change of variables:
    /// log N(f^-1(x); 0, I) + log|det d f^-1 / dx|.
    Tensor log_prob(const Tensor& pts) const {
        auto [z, logdet] = inverse(pts);
        return add(log_standard_normal2d(z), logdet);
    }

    /// Monte-Carlo mean and standard deviation of x = f(z), z ~ N(0, I).
    /// Fixed seed, fixed order: bit-reproducible. Degenerate sigmas are
    /// clamped to 1e-6 and flagged.
    FlowMoments moments(int n_samples, std::uint64_t seed) const {
        if (n_samples < 1000)
            throw std::invalid_argument("Flow::moments: need at least 1000 samples");
        NoGradGuard eval_only;
        Rng rng(seed);
        Tensor z(Shape{n_samples, 2});
        for (auto& v : z.values()) v = rng.normal();
        Tensor x = forward(z).first;
        FlowMoments m;
        for (int c = 0; c < 2; ++c) {
            double sum = 0.0, sum2 = 0.0;
            for (int i = 0; i < n_samples; ++i) {
                const double v = x.at({i, c});
                sum += v;
                sum2 += v * v;
            }
            const double mean = sum / n_samples;
            const double var = std::max(sum2 / n_samples - mean * mean, 0.0);
            m.mu[static_cast<std::size_t>(c)] = mean;
            double sd = std::sqrt(var);
            if (sd < 1e-6) {
                sd = 1e-6;
                m.clamped = true;
            }
            m.sigma[static_cast<std::size_t>(c)] = sd;
        }
        return m;
    }

    void collect(const std::string& prefix, ParamList& out) {
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].collect(prefix + ".layer" + std::to_string(i), out);
    }
    void init(std::uint64_t master, const std::string& prefix) {
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].init(master, prefix + ".layer" + std::to_string(i));
    }
};

}  // namespace sadi
