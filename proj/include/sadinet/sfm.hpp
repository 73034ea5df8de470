#pragma once

// Spatial fusion: global attention re-weights the four pyramid scales with a
// per-pixel softmax over branches, local attention fuses adjacent scales with
// a per-column softmax, and the classification head cascades both down to the
// coarse high-channel representation the distribution heads read.

#include <array>
#include <string>
#include <vector>

#include "sadinet/blocks.hpp"
#include "sadinet/ops.hpp"

namespace sadi {

/// Branch weights W from Eq.-style per-pixel softmax: align each level to a
/// common channel width, upsample to the full grid, project each to one
/// channel, softmax across the four branches, multiply back, then return each
/// product to its level's shape and add it to the original feature.
struct GlobalAttention {
    std::array<Conv2dLayer, 4> align;    // ch(l) -> aligned
    std::array<Conv2dLayer, 4> project;  // aligned -> 1
    std::array<Conv2dLayer, 4> resize;   // aligned -> ch(l)
    int aligned_channels = 256;

    struct Out {
        std::vector<Tensor> fused;  // same shapes as the input pyramid
        Tensor weights;             // [N,4,G,G], rows sum to 1 across branches
    };

    static GlobalAttention make(const std::array<int, 4>& level_channels, int aligned) {
        GlobalAttention g;
        g.aligned_channels = aligned;
        for (int l = 0; l < 4; ++l) {
            g.align[static_cast<std::size_t>(l)] =
                Conv2dLayer::make(aligned, level_channels[static_cast<std::size_t>(l)], 1, 1, 0);
            g.project[static_cast<std::size_t>(l)] = Conv2dLayer::make(1, aligned, 1, 1, 0);
            g.resize[static_cast<std::size_t>(l)] =
                Conv2dLayer::make(level_channels[static_cast<std::size_t>(l)], aligned, 1, 1, 0);
        }
        return g;
    }

    Out forward(const std::vector<Tensor>& pyramid) const {
        if (pyramid.size() != 4)
            throw std::invalid_argument("GlobalAttention: expected 4 pyramid levels, got " +
                                        std::to_string(pyramid.size()));
        const int G = pyramid[0].dim(2);
        std::array<Tensor, 4> up;
        std::vector<Tensor> branch_scores;
        for (int l = 0; l < 4; ++l) {
            const Tensor& f = pyramid[static_cast<std::size_t>(l)];
            Tensor a = align[static_cast<std::size_t>(l)].forward(f);
            up[static_cast<std::size_t>(l)] = l == 0 ? a : nearest_upsample2d(a, 1 << l);
            branch_scores.push_back(
                project[static_cast<std::size_t>(l)].forward(up[static_cast<std::size_t>(l)]));
        }
        Tensor u = concat(branch_scores, 1);  // [N,4,G,G]
        Out out;
        out.weights = softmax(u, 1);
        for (int l = 0; l < 4; ++l) {
            Tensor w_l = slice(out.weights, 1, l, 1);  // [N,1,G,G]
            Tensor prod = mul(broadcast_to(w_l, {pyramid[0].dim(0), aligned_channels, G, G}),
                              up[static_cast<std::size_t>(l)]);
            Tensor back = resize[static_cast<std::size_t>(l)].forward(prod);
            if (l > 0) back = nearest_downsample2d(back, 1 << l);
            out.fused.push_back(add(pyramid[static_cast<std::size_t>(l)], back));
        }
        return out;
    }

    void collect(const std::string& prefix, ParamList& out) {
        for (int l = 0; l < 4; ++l) {
            align[static_cast<std::size_t>(l)].collect(prefix + ".align" + std::to_string(l), out);
            project[static_cast<std::size_t>(l)].collect(prefix + ".project" + std::to_string(l), out);
            resize[static_cast<std::size_t>(l)].collect(prefix + ".resize" + std::to_string(l), out);
        }
    }
    void init(std::uint64_t master, const std::string& prefix) {
        for (int l = 0; l < 4; ++l) {
            align[static_cast<std::size_t>(l)].init(master, prefix + ".align" + std::to_string(l));
            project[static_cast<std::size_t>(l)].init(master, prefix + ".project" + std::to_string(l));
            resize[static_cast<std::size_t>(l)].init(master, prefix + ".resize" + std::to_string(l));
        }
    }
};

/// Adjacent-scale fusion: the high-resolution map is brought to the low one by
/// a single stride-2 3x3 conv (which also aligns channels), summed, and the
/// sum re-weighted by a softmax over the row index within each (channel,
/// column) — axis 3 flips the reading to columns-within-a-row.
struct LocalAttention {
    Conv2dLayer down;  // 3x3 stride 2, hi channels -> lo channels
    int softmax_axis = 2;

    static LocalAttention make(int hi_channels, int lo_channels, int softmax_axis = 2) {
        LocalAttention l;
        l.down = Conv2dLayer::make(lo_channels, hi_channels, 3, 2, 1);
        l.softmax_axis = softmax_axis;
        return l;
    }

    Tensor forward(const Tensor& hi, const Tensor& lo) const {
        if (hi.dim(2) != 2 * lo.dim(2) || hi.dim(3) != 2 * lo.dim(3))
            throw std::invalid_argument("LocalAttention: high-res " + shape_str(hi.shape()) +
                                        " is not exactly twice low-res " + shape_str(lo.shape()));
        Tensor fused = add(down.forward(hi), lo);
        Tensor weights = softmax(fused, softmax_axis);
        return mul(weights, fused);
    }

    void collect(const std::string& prefix, ParamList& out) { down.collect(prefix + ".down", out); }
    void init(std::uint64_t master, const std::string& prefix) { down.init(master, prefix + ".down"); }
};

/// HRNet-style head: widen each fused level's channels, then cascade the
/// resolution down through local attention until the coarsest, widest
/// representation remains ([N, 16*base, G/8, G/8] for a 4-level pyramid).
struct ClassificationHead {
    std::array<Conv2dLayer, 4> widen;
    std::array<LocalAttention, 3> fuse;

    static ClassificationHead make(const std::array<int, 4>& level_channels, int softmax_axis = 2) {
        ClassificationHead h;
        std::array<int, 4> wide{};
        for (int l = 0; l < 4; ++l) {
            wide[static_cast<std::size_t>(l)] = 2 * level_channels[static_cast<std::size_t>(l)];
            h.widen[static_cast<std::size_t>(l)] = Conv2dLayer::make(
                wide[static_cast<std::size_t>(l)], level_channels[static_cast<std::size_t>(l)], 1, 1, 0);
        }
        for (int l = 0; l < 3; ++l)
            h.fuse[static_cast<std::size_t>(l)] = LocalAttention::make(
                wide[static_cast<std::size_t>(l)], wide[static_cast<std::size_t>(l + 1)], softmax_axis);
        return h;
    }

    Tensor forward(const std::vector<Tensor>& fused_pyramid) const {
        if (fused_pyramid.size() != 4)
            throw std::invalid_argument("ClassificationHead: expected 4 levels, got " +
                                        std::to_string(fused_pyramid.size()));
        Tensor x = widen[0].forward(fused_pyramid[0]);
        for (int l = 0; l < 3; ++l)
            x = fuse[static_cast<std::size_t>(l)].forward(
                x, widen[static_cast<std::size_t>(l + 1)].forward(
                       fused_pyramid[static_cast<std::size_t>(l + 1)]));
        return x;
    }

    void collect(const std::string& prefix, ParamList& out) {
        for (int l = 0; l < 4; ++l)
            widen[static_cast<std::size_t>(l)].collect(prefix + ".widen" + std::to_string(l), out);
        for (int l = 0; l < 3; ++l)
            fuse[static_cast<std::size_t>(l)].collect(prefix + ".fuse" + std::to_string(l), out);
    }
    void init(std::uint64_t master, const std::string& prefix) {
        for (int l = 0; l < 4; ++l)
            widen[static_cast<std::size_t>(l)].init(master, prefix + ".widen" + std::to_string(l));
        for (int l = 0; l < 3; ++l)
            fuse[static_cast<std::size_t>(l)].init(master, prefix + ".fuse" + std::to_string(l));
    }
};

}  // namespace sadi
