#pragma once

// The registered finite-difference suite: one named check per primitive and
// per block, at toy shapes. The CLI gradcheck command and the acceptance
// gradient gate both run this registry.

#include <functional>
#include <string>
#include <vector>

#include "sadinet/backbone.hpp"
#include "sadinet/dlm.hpp"
#include "sadinet/gradcheck.hpp"
#include "sadinet/losses.hpp"
#include "sadinet/sfm.hpp"

namespace sadi {

struct RegisteredCheck {
    std::string name;
    std::function<GradCheckReport()> run;
};

namespace detail {

inline Tensor rand_t(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

inline void rand_params(ParamList& params, std::uint64_t seed, double lo = -0.5, double hi = 0.5) {
    Rng rng(seed);
    for (auto& p : params)
        for (auto& v : p.tensor.values()) v = rng.uniform(lo, hi);
}

}  // namespace detail

/// Builds the full registry. Every entry is independent: fresh inputs, fresh
/// parameters, deterministic seeds.
inline std::vector<RegisteredCheck> gradcheck_registry() {
    using Leaves = std::vector<std::pair<std::string, Tensor>>;
    std::vector<RegisteredCheck> reg;
    auto entry = [&](std::string name, std::function<GradCheckReport()> run) {
        reg.push_back({std::move(name), std::move(run)});
    };

    // -- primitives --
    entry("add", [] {
        Rng rng(101);
        Tensor a = detail::rand_t({2, 3}, rng), b = detail::rand_t({2, 3}, rng);
        return grad_check([&] { return sum_all(mul(add(a, b), add(a, b))); },
                          Leaves{{"a", a}, {"b", b}});
    });
    entry("sub", [] {
        Rng rng(102);
        Tensor a = detail::rand_t({2, 3}, rng), b = detail::rand_t({2, 3}, rng);
        return grad_check([&] { return sum_all(mul(sub(a, b), a)); }, Leaves{{"a", a}, {"b", b}});
    });
    entry("mul", [] {
        Rng rng(103);
        Tensor a = detail::rand_t({2, 3}, rng), b = detail::rand_t({2, 3}, rng);
        return grad_check([&] { return sum_all(mul(a, b)); }, Leaves{{"a", a}, {"b", b}});
    });
    entry("div", [] {
        Rng rng(104);
        Tensor a = detail::rand_t({2, 3}, rng), b = detail::rand_t({2, 3}, rng, 0.4, 1.2);
        return grad_check([&] { return sum_all(div(a, b)); }, Leaves{{"a", a}, {"b", b}});
    });
    entry("neg", [] {
        Rng rng(105);
        Tensor a = detail::rand_t({5}, rng);
        return grad_check([&] { return sum_all(mul(neg(a), a)); }, Leaves{{"a", a}});
    });
    entry("add_scalar", [] {
        Rng rng(106);
        Tensor a = detail::rand_t({5}, rng);
        return grad_check([&] { return sum_all(mul(add_scalar(a, 0.3), a)); }, Leaves{{"a", a}});
    });
    entry("mul_scalar", [] {
        Rng rng(107);
        Tensor a = detail::rand_t({5}, rng);
        return grad_check([&] { return sum_all(mul_scalar(a, -2.5)); }, Leaves{{"a", a}});
    });
    entry("relu", [] {
        Rng rng(108);
        Tensor a = detail::rand_t({3, 3}, rng, 0.1, 1.0);
        Tensor b = detail::rand_t({3, 3}, rng, 0.1, 1.0);
        return grad_check([&] { return sum_all(relu(sub(a, b))); }, Leaves{{"a", a}, {"b", b}});
    });
    entry("sigmoid", [] {
        Rng rng(109);
        Tensor a = detail::rand_t({4}, rng, -2, 2);
        return grad_check([&] { return sum_all(sigmoid(a)); }, Leaves{{"a", a}});
    });
    entry("tanh", [] {
        Rng rng(110);
        Tensor a = detail::rand_t({4}, rng, -2, 2);
        return grad_check([&] { return sum_all(sadi::tanh(a)); }, Leaves{{"a", a}});
    });
    entry("exp", [] {
        Rng rng(111);
        Tensor a = detail::rand_t({4}, rng, -1, 1);
        return grad_check([&] { return sum_all(sadi::exp(a)); }, Leaves{{"a", a}});
    });
    entry("log", [] {
        Rng rng(112);
        Tensor a = detail::rand_t({4}, rng, 0.3, 2.0);
        return grad_check([&] { return sum_all(sadi::log(a)); }, Leaves{{"a", a}});
    });
    entry("softplus", [] {
        Rng rng(113);
        Tensor a = detail::rand_t({4}, rng, -2, 2);
        return grad_check([&] { return sum_all(softplus(a)); }, Leaves{{"a", a}});
    });
    entry("softmax", [] {
        Rng rng(114);
        Tensor a = detail::rand_t({2, 4}, rng, -2, 2);
        Tensor w = detail::rand_t({2, 4}, rng);
        return grad_check([&] { return sum_all(mul(softmax(a, 1), w)); }, Leaves{{"a", a}});
    });
    entry("sum_all", [] {
        Rng rng(115);
        Tensor a = detail::rand_t({6}, rng);
        return grad_check([&] { return sum_all(mul(a, a)); }, Leaves{{"a", a}});
    });
    entry("mean_all", [] {
        Rng rng(116);
        Tensor a = detail::rand_t({6}, rng);
        return grad_check([&] { return mean_all(mul(a, a)); }, Leaves{{"a", a}});
    });
    entry("sum_axis", [] {
        Rng rng(117);
        Tensor a = detail::rand_t({2, 3, 2}, rng);
        return grad_check([&] { return sum_all(mul(sum_axis(a, 1), sum_axis(a, 1))); },
                          Leaves{{"a", a}});
    });
    entry("mean_axis", [] {
        Rng rng(118);
        Tensor a = detail::rand_t({2, 3, 2}, rng);
        return grad_check([&] { return sum_all(mul(mean_axis(a, 2), mean_axis(a, 2))); },
                          Leaves{{"a", a}});
    });
    entry("reduce_max", [] {
        Rng rng(119);
        Tensor a = detail::rand_t({3, 4}, rng);
        return grad_check([&] { return sum_all(reduce_max(a, 1)); }, Leaves{{"a", a}});
    });
    entry("reshape", [] {
        Rng rng(120);
        Tensor a = detail::rand_t({2, 6}, rng);
        return grad_check([&] { return sum_all(mul(reshape(a, {3, 4}), reshape(a, {3, 4}))); },
                          Leaves{{"a", a}});
    });
    entry("broadcast_to", [] {
        Rng rng(121);
        Tensor a = detail::rand_t({3, 1}, rng);
        Tensor w = detail::rand_t({2, 3, 4}, rng);
        return grad_check([&] { return sum_all(mul(broadcast_to(a, {2, 3, 4}), w)); },
                          Leaves{{"a", a}});
    });
    entry("concat", [] {
        Rng rng(122);
        Tensor a = detail::rand_t({2, 2}, rng), b = detail::rand_t({2, 3}, rng);
        return grad_check(
            [&] {
                Tensor c = concat({a, b}, 1);
                return sum_all(mul(c, c));
            },
            Leaves{{"a", a}, {"b", b}});
    });
    entry("slice", [] {
        Rng rng(123);
        Tensor a = detail::rand_t({3, 5}, rng);
        return grad_check([&] { return sum_all(mul(slice(a, 1, 1, 3), slice(a, 1, 2, 3))); },
                          Leaves{{"a", a}});
    });
    entry("matmul", [] {
        Rng rng(124);
        Tensor a = detail::rand_t({3, 4}, rng), b = detail::rand_t({4, 2}, rng);
        return grad_check(
            [&] {
                Tensor y = matmul(a, b);
                return sum_all(mul(y, y));
            },
            Leaves{{"a", a}, {"b", b}});
    });
    entry("conv2d", [] {
        Rng rng(125);
        Tensor x = detail::rand_t({2, 2, 6, 6}, rng), w = detail::rand_t({3, 2, 3, 3}, rng);
        return grad_check(
            [&] {
                Tensor y = conv2d(x, w, 1, 1, 1);
                return sum_all(mul(y, y));
            },
            Leaves{{"x", x}, {"w", w}});
    });
    entry("conv2d_dilated", [] {
        Rng rng(126);
        Tensor x = detail::rand_t({1, 2, 9, 9}, rng), w = detail::rand_t({2, 2, 3, 3}, rng);
        return grad_check(
            [&] {
                Tensor y = conv2d(x, w, 1, 2, 2);
                return sum_all(mul(y, y));
            },
            Leaves{{"x", x}, {"w", w}});
    });
    entry("conv2d_strided", [] {
        Rng rng(127);
        Tensor x = detail::rand_t({1, 2, 8, 8}, rng), w = detail::rand_t({2, 2, 3, 3}, rng);
        return grad_check(
            [&] {
                Tensor y = conv2d(x, w, 2, 1, 1);
                return sum_all(mul(y, y));
            },
            Leaves{{"x", x}, {"w", w}});
    });
    entry("add_channel_bias", [] {
        Rng rng(128);
        Tensor x = detail::rand_t({2, 3, 4, 4}, rng), b = detail::rand_t({3}, rng);
        return grad_check(
            [&] {
                Tensor y = add_channel_bias(x, b);
                return sum_all(mul(y, y));
            },
            Leaves{{"x", x}, {"b", b}});
    });
    entry("nearest_upsample2d", [] {
        Rng rng(129);
        Tensor x = detail::rand_t({1, 2, 3, 3}, rng);
        return grad_check(
            [&] {
                Tensor y = nearest_upsample2d(x, 2);
                return sum_all(mul(y, y));
            },
            Leaves{{"x", x}});
    });
    entry("nearest_downsample2d", [] {
        Rng rng(130);
        Tensor x = detail::rand_t({1, 2, 6, 6}, rng);
        return grad_check(
            [&] {
                Tensor y = nearest_downsample2d(x, 2);
                return sum_all(mul(y, y));
            },
            Leaves{{"x", x}});
    });
    entry("maxpool2d", [] {
        Rng rng(131);
        Tensor x = detail::rand_t({1, 2, 6, 6}, rng);
        return grad_check([&] { return sum_all(maxpool2d(x)); }, Leaves{{"x", x}});
    });
    entry("global_avg_pool", [] {
        Rng rng(132);
        Tensor x = detail::rand_t({2, 3, 4, 4}, rng);
        return grad_check(
            [&] {
                Tensor y = global_avg_pool(x);
                return sum_all(mul(y, y));
            },
            Leaves{{"x", x}});
    });
    entry("affine_scale_shift", [] {
        Rng rng(133);
        Tensor x = detail::rand_t({2, 2, 3, 3}, rng);
        Tensor sc = detail::rand_t({2, 1, 1, 1}, rng, 0.5, 1.5);
        Tensor sh = detail::rand_t({2, 1, 1, 1}, rng);
        return grad_check([&] { return sum_all(mul(affine_scale_shift(x, sc, sh), x)); },
                          Leaves{{"x", x}, {"sc", sc}, {"sh", sh}});
    });

    // -- blocks --
    entry("se_gate", [] {
        SEBlock se = SEBlock::make(4, 2);
        se.init(201, "se");
        Rng rng(202);
        Tensor x = detail::rand_t({1, 4, 3, 3}, rng);
        return grad_check(
            [&] {
                Tensor y = se.forward(x);
                return sum_all(mul(y, y));
            },
            Leaves{{"x", x}, {"fc1", se.fc1}, {"fc2", se.fc2}});
    });
    entry("basic_block", [] {
        BasicBlock b = BasicBlock::make(2, 3);
        ParamList params;
        b.collect("b", params);
        detail::rand_params(params, 203);
        Rng rng(204);
        Tensor x = detail::rand_t({1, 2, 5, 5}, rng);
        Leaves leaves{{"x", x}};
        for (auto& p : params) leaves.push_back({p.name, p.tensor});
        return grad_check(
            [&] {
                Tensor y = b.forward(x);
                return sum_all(mul(y, y));
            },
            leaves);
    });
    entry("dilated_residual_block", [] {
        DilatedResidualBlock d = DilatedResidualBlock::make(2, 2, 2, 2);
        ParamList params;
        d.collect("d", params);
        detail::rand_params(params, 205);
        Rng rng(206);
        Tensor x = detail::rand_t({1, 2, 6, 6}, rng);
        Leaves leaves{{"x", x}};
        for (auto& p : params) leaves.push_back({p.name, p.tensor});
        return grad_check(
            [&] {
                Tensor y = d.forward(x);
                return sum_all(mul(y, y));
            },
            leaves);
    });
    entry("hourglass_depth2", [] {
        HourglassConfig cfg;
        cfg.stacks = 1;
        cfg.depth = 2;
        cfg.base_channels = 2;
        cfg.joints = 2;
        cfg.heatmap = 8;
        cfg.dilation = 2;
        cfg.se_reduction = 2;
        Backbone b = Backbone::make(cfg);
        ParamList params;
        b.collect(params);
        detail::rand_params(params, 207, -0.4, 0.4);
        Rng rng(208);
        Tensor img = detail::rand_t({1, 3, 32, 32}, rng, 0.0, 1.0);
        Leaves leaves;
        for (auto& p : params) leaves.push_back({p.name, p.tensor});
        return grad_check(
            [&] {
                auto out = b.forward(img);
                return sum_all(mul(out.h1[0], out.h1[0]));
            },
            leaves);
    });
    entry("global_attention", [] {
        GlobalAttention g = GlobalAttention::make({1, 2, 4, 8}, 4);
        ParamList params;
        g.collect("g", params);
        detail::rand_params(params, 209);
        Rng rng(210);
        std::vector<Tensor> pyr;
        for (int l = 0; l < 4; ++l) pyr.push_back(detail::rand_t({1, 1 << l, 8 >> l, 8 >> l}, rng));
        Leaves leaves;
        for (auto& p : params) leaves.push_back({p.name, p.tensor});
        for (int l = 0; l < 4; ++l)
            leaves.push_back({"f" + std::to_string(l), pyr[static_cast<std::size_t>(l)]});
        return grad_check(
            [&] {
                auto out = g.forward(pyr);
                Tensor acc = sum_all(mul(out.fused[0], out.fused[0]));
                for (int l = 1; l < 4; ++l)
                    acc = add(acc, sum_all(mul(out.fused[static_cast<std::size_t>(l)],
                                               out.fused[static_cast<std::size_t>(l)])));
                return acc;
            },
            leaves);
    });
    entry("local_attention", [] {
        LocalAttention la = LocalAttention::make(2, 2);
        ParamList params;
        la.collect("la", params);
        detail::rand_params(params, 211);
        Rng rng(212);
        Tensor hi = detail::rand_t({1, 2, 6, 6}, rng), lo = detail::rand_t({1, 2, 3, 3}, rng);
        Leaves leaves{{"hi", hi}, {"lo", lo}};
        for (auto& p : params) leaves.push_back({p.name, p.tensor});
        return grad_check(
            [&] {
                Tensor y = la.forward(hi, lo);
                return sum_all(mul(y, y));
            },
            leaves);
    });
    entry("classification_head", [] {
        ClassificationHead h = ClassificationHead::make({1, 2, 4, 8});
        ParamList params;
        h.collect("h", params);
        detail::rand_params(params, 213);
        Rng rng(214);
        std::vector<Tensor> pyr;
        for (int l = 0; l < 4; ++l) pyr.push_back(detail::rand_t({1, 1 << l, 16 >> l, 16 >> l}, rng));
        Leaves leaves;
        for (auto& p : params) leaves.push_back({p.name, p.tensor});
        return grad_check(
            [&] {
                Tensor y = h.forward(pyr);
                return sum_all(mul(y, y));
            },
            leaves);
    });
    entry("coupling_forward", [] {
        Flow f = Flow::make(2, 8);
        f.init(215, "flow");
        Rng rng(216);
        Tensor z = detail::rand_t({4, 2}, rng);
        ParamList params;
        f.collect("flow", params);
        Leaves leaves{{"z", z}};
        for (auto& p : params) leaves.push_back({p.name, p.tensor});
        return grad_check(
            [&] {
                auto [x, ld] = f.forward(z);
                return add(sum_all(mul(x, x)), sum_all(ld));
            },
            leaves);
    });
    entry("coupling_inverse", [] {
        Flow f = Flow::make(2, 8);
        f.init(217, "flow");
        Rng rng(218);
        Tensor x = detail::rand_t({4, 2}, rng);
        ParamList params;
        f.collect("flow", params);
        Leaves leaves{{"x", x}};
        for (auto& p : params) leaves.push_back({p.name, p.tensor});
        return grad_check(
            [&] {
                auto [z, ld] = f.inverse(x);
                return add(sum_all(mul(z, z)), sum_all(ld));
            },
            leaves);
    });
    entry("flow_logprob", [] {
        Flow f = Flow::make(2, 8);
        f.init(219, "flow");
        Rng rng(220);
        Tensor x = detail::rand_t({5, 2}, rng);
        ParamList params;
        f.collect("flow", params);
        Leaves leaves{{"x", x}};
        for (auto& p : params) leaves.push_back({p.name, p.tensor});
        return grad_check([&] { return sum_all(f.log_prob(x)); }, leaves);
    });
    entry("i_xi_density", [] {
        Flow f = Flow::make(2, 8);
        f.init(221, "flow");
        FlowMoments m = f.moments(2000, 3);
        Rng rng(222);
        Tensor x = detail::rand_t({5, 2}, rng);
        ParamList params;
        f.collect("flow", params);
        Leaves leaves{{"x", x}};
        for (auto& p : params) leaves.push_back({p.name, p.tensor});
        return grad_check([&] { return sum_all(i_xi_density(x, f, m, true)); }, leaves);
    });
    entry("rasterize_h2", [] {
        Flow f = Flow::make(2, 8);
        f.init(223, "flow");
        FlowMoments m = f.moments(2000, 5);
        Tensor mu = Tensor::from({1, 2, 2}, {5.0, 7.5, 3.25, 9.0});
        Tensor sigma = Tensor::from({1, 2, 2}, {2.0, 1.5, 1.0, 2.5});
        ParamList params;
        f.collect("flow", params);
        Leaves leaves{{"mu", mu}, {"sigma", sigma}};
        for (auto& p : params) leaves.push_back({p.name, p.tensor});
        return grad_check(
            [&] {
                Tensor h2 = rasterize_h2(mu, sigma, f, m, 12);
                Rng wr(7);
                Tensor w(h2.shape());
                for (auto& v : w.values()) v = wr.uniform(-1, 1);
                return sum_all(mul(h2, w));
            },
            leaves);
    });
    entry("rle_loss", [] {
        Flow f = Flow::make(2, 8);
        f.init(225, "flow");
        Tensor mu_hat = Tensor::from({2}, {9.5, 21.0});
        Tensor sigma_hat = Tensor::from({2}, {1.5, 0.8});
        ParamList params;
        f.collect("flow", params);
        Leaves leaves{{"mu_hat", mu_hat}, {"sigma_hat", sigma_hat}};
        for (auto& p : params) leaves.push_back({p.name, p.tensor});
        return grad_check([&] { return rle_loss({10.0, 20.0}, mu_hat, sigma_hat, f, 1.0); },
                          leaves);
    });
    entry("mse_h1", [] {
        Rng rng(226);
        Tensor a = detail::rand_t({1, 2, 4, 4}, rng), b = detail::rand_t({1, 2, 4, 4}, rng);
        Tensor vis(Shape{1, 2}, 1.0);
        return grad_check([&] { return mse_heatmap(a, b, vis); }, Leaves{{"a", a}});
    });
    entry("mse_h2", [] {
        Rng rng(227);
        Tensor a = detail::rand_t({1, 2, 4, 4}, rng), b = detail::rand_t({1, 2, 4, 4}, rng);
        Tensor vis(Shape{1, 2}, 1.0);
        return grad_check([&] { return mse_heatmap(a, b, vis); }, Leaves{{"a", a}, {"b", b}});
    });
    entry("combined_loss", [] {
        Rng rng(228);
        Tensor a = detail::rand_t({1, 1, 3, 3}, rng), b = detail::rand_t({1, 1, 3, 3}, rng);
        Tensor t = detail::rand_t({1, 1, 3, 3}, rng);
        Tensor vis(Shape{1, 1}, 1.0);
        return grad_check(
            [&] {
                Tensor l1 = mse_heatmap(a, t, vis);
                Tensor l2 = mse_heatmap(a, b, vis);
                return combined_loss(l1, l2, 0.35).total;
            },
            Leaves{{"a", a}, {"b", b}});
    });
    return reg;
}

struct SuiteResult {
    std::string name;
    GradCheckReport report;
};

/// Runs every registered check whose name contains `filter` (all when empty).
inline std::vector<SuiteResult> run_gradcheck_suite(const std::string& filter = "") {
    std::vector<SuiteResult> results;
    for (auto& check : gradcheck_registry()) {
        if (!filter.empty() && check.name.find(filter) == std::string::npos) continue;
        results.push_back({check.name, check.run()});
    }
    return results;
}

}  // namespace sadi
