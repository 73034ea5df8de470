#pragma once

// Stacked-hourglass backbone built from residual units. Each stack encodes
// depth scales (halving resolution, doubling channels), recurses back up with
// skip connections, and emits a heatmap stack H1 through a 1x1 head; the final
// stack's encoder features form the pyramid F1..F4 consumed downstream.

#include <string>
#include <vector>

#include "sadinet/blocks.hpp"
#include "sadinet/ops.hpp"

namespace sadi {

struct HourglassConfig {
    int stacks = 2;
    int depth = 4;  // number of scales; depth 4 on a 64 grid gives 64/32/16/8 px
    int base_channels = 64;
    int joints = 16;
    int heatmap = 64;
    int dilation = 3;
    int se_reduction = 4;
    UnitKind unit = UnitKind::rfm;

    int channels_at(int level) const { return base_channels << level; }
    int input_size() const { return heatmap * 4; }

    void validate() const {
        if (stacks < 1) throw std::invalid_argument("HourglassConfig: stacks must be >= 1");
        if (depth < 1) throw std::invalid_argument("HourglassConfig: depth must be >= 1");
        if (heatmap % (1 << (depth - 1)) != 0)
            throw std::invalid_argument("HourglassConfig: heatmap extent " +
                                        std::to_string(heatmap) + " does not fit depth " +
                                        std::to_string(depth));
        for (int l = 0; l < depth; ++l)
            if (channels_at(l) % se_reduction != 0)
                throw std::invalid_argument("HourglassConfig: se_reduction does not divide level " +
                                            std::to_string(l) + " channels");
    }
};

struct BackboneOutput {
    std::vector<Tensor> h1;       // one [N,J,G,G] heatmap stack per hourglass stack
    std::vector<Tensor> pyramid;  // final stack's encoder features, full to coarse
};

/// 7x7 stride-2 conv, residual unit, 2x2 max pool, residual unit:
/// [N,3,4G,4G] -> [N,base,G,G].
struct Stem {
    Conv2dLayer conv7;
    ResidualUnit unit1, unit2;

    static Stem make(const HourglassConfig& cfg) {
        Stem s;
        s.conv7 = Conv2dLayer::make(cfg.base_channels, 3, 7, 2, 3);
        s.unit1 = ResidualUnit::make(cfg.unit, cfg.base_channels, cfg.base_channels, cfg.dilation,
                                     cfg.se_reduction);
        s.unit2 = ResidualUnit::make(cfg.unit, cfg.base_channels, cfg.base_channels, cfg.dilation,
                                     cfg.se_reduction);
        return s;
    }

    Tensor forward(const Tensor& image) const {
        return unit2.forward(maxpool2d(unit1.forward(conv7.forward(image))));
    }

    void collect(const std::string& prefix, ParamList& out) {
        conv7.collect(prefix + ".conv7", out);
        unit1.collect(prefix + ".unit1", out);
        unit2.collect(prefix + ".unit2", out);
    }
    void init(std::uint64_t master, const std::string& prefix) {
        conv7.init(master, prefix + ".conv7");
        unit1.init(master, prefix + ".unit1");
        unit2.init(master, prefix + ".unit2");
    }
};

struct HourglassStack {
    std::vector<ResidualUnit> enc;    // depth units; enc[l] runs at scale l
    std::vector<ResidualUnit> skip;   // depth-1 same-scale units on the skip path
    std::vector<ResidualUnit> up;     // depth-1 units after upsampling from below
    ResidualUnit bottleneck;
    Conv2dLayer head;                 // 1x1 -> joints
    Conv2dLayer remap_feat, remap_pred;  // feed the next stack (absent on the last)

    struct Out {
        Tensor h1;
        Tensor next;                  // input for the following stack (undefined on last)
        std::vector<Tensor> encoder;  // per-scale features F1..Fdepth
    };

    static HourglassStack make(const HourglassConfig& cfg, bool last) {
        HourglassStack s;
        for (int l = 0; l < cfg.depth; ++l) {
            const int in_ch = l == 0 ? cfg.base_channels : cfg.channels_at(l - 1);
            s.enc.push_back(ResidualUnit::make(cfg.unit, in_ch, cfg.channels_at(l), cfg.dilation,
                                               cfg.se_reduction));
        }
        for (int l = 0; l + 1 < cfg.depth; ++l) {
            s.skip.push_back(ResidualUnit::make(cfg.unit, cfg.channels_at(l), cfg.channels_at(l),
                                                cfg.dilation, cfg.se_reduction));
            s.up.push_back(ResidualUnit::make(cfg.unit, cfg.channels_at(l + 1), cfg.channels_at(l),
                                              cfg.dilation, cfg.se_reduction));
        }
        s.bottleneck = ResidualUnit::make(cfg.unit, cfg.channels_at(cfg.depth - 1),
                                          cfg.channels_at(cfg.depth - 1), cfg.dilation,
                                          cfg.se_reduction);
        s.head = Conv2dLayer::make(cfg.joints, cfg.base_channels, 1, 1, 0);
        if (!last) {
            s.remap_feat = Conv2dLayer::make(cfg.base_channels, cfg.base_channels, 1, 1, 0);
            s.remap_pred = Conv2dLayer::make(cfg.base_channels, cfg.joints, 1, 1, 0);
        }
        return s;
    }

    Out forward(const Tensor& x) const {
        Out out;
        Tensor cur = x;
        for (std::size_t l = 0; l < enc.size(); ++l) {
            if (l > 0) cur = maxpool2d(cur);
            cur = enc[l].forward(cur);
            out.encoder.push_back(cur);
        }
        Tensor f = bottleneck.forward(cur);
        for (int l = static_cast<int>(enc.size()) - 2; l >= 0; --l) {
            f = up[static_cast<std::size_t>(l)].forward(nearest_upsample2d(f, 2));
            f = add(f, skip[static_cast<std::size_t>(l)].forward(
                         out.encoder[static_cast<std::size_t>(l)]));
        }
        out.h1 = head.forward(f);
        if (remap_feat.w.defined())
            out.next = add(add(x, remap_feat.forward(f)), remap_pred.forward(out.h1));
        return out;
    }

    void collect(const std::string& prefix, ParamList& out) {
        for (std::size_t l = 0; l < enc.size(); ++l)
            enc[l].collect(prefix + ".enc" + std::to_string(l), out);
        for (std::size_t l = 0; l < skip.size(); ++l) {
            skip[l].collect(prefix + ".skip" + std::to_string(l), out);
            up[l].collect(prefix + ".up" + std::to_string(l), out);
        }
        bottleneck.collect(prefix + ".bottleneck", out);
        head.collect(prefix + ".head", out);
        if (remap_feat.w.defined()) {
            remap_feat.collect(prefix + ".remap_feat", out);
            remap_pred.collect(prefix + ".remap_pred", out);
        }
    }
    void init(std::uint64_t master, const std::string& prefix) {
        for (std::size_t l = 0; l < enc.size(); ++l)
            enc[l].init(master, prefix + ".enc" + std::to_string(l));
        for (std::size_t l = 0; l < skip.size(); ++l) {
            skip[l].init(master, prefix + ".skip" + std::to_string(l));
            up[l].init(master, prefix + ".up" + std::to_string(l));
        }
        bottleneck.init(master, prefix + ".bottleneck");
        head.init(master, prefix + ".head");
        if (remap_feat.w.defined()) {
            remap_feat.init(master, prefix + ".remap_feat");
            remap_pred.init(master, prefix + ".remap_pred");
        }
    }
};

struct Backbone {
    HourglassConfig cfg;
    Stem stem;
    std::vector<HourglassStack> stacks;

    static Backbone make(const HourglassConfig& cfg) {
        cfg.validate();
        Backbone b;
        b.cfg = cfg;
        b.stem = Stem::make(cfg);
        for (int s = 0; s < cfg.stacks; ++s)
            b.stacks.push_back(HourglassStack::make(cfg, s + 1 == cfg.stacks));
        return b;
    }

    /// Full pass from images. Emits one H1 per stack (intermediate
    /// supervision) and the final stack's encoder pyramid.
    BackboneOutput forward(const Tensor& image) const {
        const int S = cfg.input_size();
        if (image.rank() != 4 || image.dim(1) != 3 || image.dim(2) != S || image.dim(3) != S)
            throw std::invalid_argument("Backbone: expected image [N,3," + std::to_string(S) + "," +
                                        std::to_string(S) + "], got " + shape_str(image.shape()));
        BackboneOutput out;
        Tensor x = stem.forward(image);
        for (std::size_t s = 0; s < stacks.size(); ++s) {
            auto so = stacks[s].forward(x);
            out.h1.push_back(so.h1);
            if (s + 1 == stacks.size()) out.pyramid = std::move(so.encoder);
            else x = so.next;
        }
        return out;
    }

    void collect(ParamList& out) {
        stem.collect("stem", out);
        for (std::size_t s = 0; s < stacks.size(); ++s)
            stacks[s].collect("stack" + std::to_string(s), out);
    }
    void init(std::uint64_t master) {
        stem.init(master, "stem");
        for (std::size_t s = 0; s < stacks.size(); ++s)
            stacks[s].init(master, "stack" + std::to_string(s));
    }
};

}  // namespace sadi
