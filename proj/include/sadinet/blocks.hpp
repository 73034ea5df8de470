#pragma once

// Building blocks of the backbone: a plain residual basic block, the dilated
// residual block with SE gating (the hourglass unit), and the parameter
// registry the optimizer / checkpoints / gradient checks walk.
//
// Initialization is He fan-in scaling from a stream derived per parameter
// name, so two models sharing a parameter path initialize it bit-identically
// regardless of what else they contain.

#include <string>
#include <vector>

#include "sadinet/ops.hpp"
#include "sadinet/rng.hpp"
#include "sadinet/tensor.hpp"

namespace sadi {

struct ParamRef {
    std::string name;
    Tensor tensor;
};
using ParamList = std::vector<ParamRef>;

namespace detail {

inline void he_init(Tensor& w, int fan_in, std::uint64_t master, const std::string& name,
                    double gain = 1.0) {
    Rng rng(derive_seed(master, name));
    const double s = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.values()) v = rng.normal() * s;
}

}  // namespace detail

/// One convolution layer with an optional per-channel bias (the bias stands in
/// for normalization; there is no batch norm anywhere).
struct Conv2dLayer {
    Tensor w;  // [O,C,k,k]
    Tensor b;  // [O], undefined when bias-less
    int stride = 1, padding = 0, dilation = 1;

    static Conv2dLayer make(int out_ch, int in_ch, int k, int stride, int padding, int dilation = 1,
                            bool bias = true) {
        Conv2dLayer l;
        l.w = Tensor(Shape{out_ch, in_ch, k, k});
        if (bias) l.b = Tensor(Shape{out_ch});
        l.stride = stride;
        l.padding = padding;
        l.dilation = dilation;
        return l;
    }

    Tensor forward(const Tensor& x) const {
        return conv2d_bias(x, w, b, stride, padding, dilation);
    }

    void collect(const std::string& prefix, ParamList& out) {
        out.push_back({prefix + ".w", w});
        if (b.defined()) out.push_back({prefix + ".b", b});
    }

    void init(std::uint64_t master, const std::string& prefix, double gain = 1.0) {
        detail::he_init(w, w.dim(1) * w.dim(2) * w.dim(3), master, prefix + ".w", gain);
        if (b.defined()) b.fill(0.0);
    }
};

/// Squeeze-and-excitation channel gate:
/// y = x * broadcast(sigmoid(fc2(relu(fc1(gap(x)))))).
struct SEBlock {
    Tensor fc1;  // [C, C/r]
    Tensor fc2;  // [C/r, C]
    int reduction = 4;

    static SEBlock make(int channels, int reduction) {
        if (reduction < 1 || channels % reduction != 0)
            throw std::invalid_argument("SEBlock: reduction " + std::to_string(reduction) +
                                        " does not divide " + std::to_string(channels) +
                                        " channels");
        SEBlock s;
        s.reduction = reduction;
        s.fc1 = Tensor(Shape{channels, channels / reduction});
        s.fc2 = Tensor(Shape{channels / reduction, channels});
        return s;
    }

    Tensor gate(const Tensor& x) const {
        Tensor g = global_avg_pool(x);                     // [N,C]
        g = sigmoid(matmul(relu(matmul(g, fc1)), fc2));    // [N,C], values in (0,1)
        return reshape(g, {x.dim(0), x.dim(1), 1, 1});
    }

    Tensor forward(const Tensor& x) const {
        return mul(x, broadcast_to(gate(x), x.shape()));
    }

    void collect(const std::string& prefix, ParamList& out) {
        out.push_back({prefix + ".fc1", fc1});
        out.push_back({prefix + ".fc2", fc2});
    }

    void init(std::uint64_t master, const std::string& prefix) {
        detail::he_init(fc1, fc1.dim(0), master, prefix + ".fc1");
        detail::he_init(fc2, fc2.dim(0), master, prefix + ".fc2");
    }
};

/// Two consecutive 3x3 convolutions joined to an identity (or 1x1-projected)
/// shortcut: out = relu(conv2(relu(conv1(x))) + shortcut(x)).
struct BasicBlock {
    Conv2dLayer conv1, conv2;
    Conv2dLayer proj;  // 1x1 shortcut projection, only when channels change
    int in_channels = 0, out_channels = 0;

    static BasicBlock make(int in_ch, int out_ch) {
        BasicBlock b;
        b.in_channels = in_ch;
        b.out_channels = out_ch;
        b.conv1 = Conv2dLayer::make(out_ch, in_ch, 3, 1, 1);
        b.conv2 = Conv2dLayer::make(out_ch, out_ch, 3, 1, 1);
        if (in_ch != out_ch) b.proj = Conv2dLayer::make(out_ch, in_ch, 1, 1, 0, 1, false);
        return b;
    }

    Tensor main_branch(const Tensor& x) const { return conv2.forward(relu(conv1.forward(x))); }

    Tensor shortcut(const Tensor& x) const {
        if (proj.w.defined()) return proj.forward(x);
        if (x.dim(1) != out_channels)
            throw std::invalid_argument("BasicBlock: " + std::to_string(x.dim(1)) +
                                        " input channels with no projection to " +
                                        std::to_string(out_channels));
        return x;
    }

    Tensor preactivation(const Tensor& x) const { return add(main_branch(x), shortcut(x)); }

    Tensor forward(const Tensor& x) const { return relu(preactivation(x)); }

    void collect(const std::string& prefix, ParamList& out) {
        conv1.collect(prefix + ".conv1", out);
        conv2.collect(prefix + ".conv2", out);
        if (proj.w.defined()) proj.collect(prefix + ".proj", out);
    }

    void init(std::uint64_t master, const std::string& prefix) {
        conv1.init(master, prefix + ".conv1");
        conv2.init(master, prefix + ".conv2");
        if (proj.w.defined()) proj.init(master, prefix + ".proj");
    }
};

/// The hourglass unit: the basic block's main branch plus a parallel dilated
/// 3x3 branch (padding = dilation keeps shapes equal) and the shortcut, summed
/// and passed through the SE gate.
struct DilatedResidualBlock {
    BasicBlock base;
    Conv2dLayer dilated;
    SEBlock se;
    int dilation = 3;

    static DilatedResidualBlock make(int in_ch, int out_ch, int dilation = 3, int se_reduction = 4) {
        if (dilation < 2)
            throw std::invalid_argument("DilatedResidualBlock: dilation must be >= 2");
        DilatedResidualBlock d;
        d.base = BasicBlock::make(in_ch, out_ch);
        d.dilated = Conv2dLayer::make(out_ch, in_ch, 3, 1, dilation, dilation);
        d.se = SEBlock::make(out_ch, se_reduction);
        d.dilation = dilation;
        return d;
    }

    Tensor forward(const Tensor& x) const {
        Tensor fused = add(add(base.main_branch(x), dilated.forward(x)), base.shortcut(x));
        return se.forward(fused);
    }

    void collect(const std::string& prefix, ParamList& out) {
        base.collect(prefix, out);
        dilated.collect(prefix + ".dilated", out);
        se.collect(prefix + ".se", out);
    }

    void init(std::uint64_t master, const std::string& prefix) {
        base.init(master, prefix);
        dilated.init(master, prefix + ".dilated");
        se.init(master, prefix + ".se");
    }
};

/// A backbone unit that is either a plain basic block or the dilated residual
/// block; the two share the basic-block parameter paths bit for bit.
enum class UnitKind { basic, rfm };

struct ResidualUnit {
    UnitKind kind = UnitKind::rfm;
    BasicBlock basic;
    DilatedResidualBlock rfm;

    static ResidualUnit make(UnitKind kind, int in_ch, int out_ch, int dilation, int se_reduction) {
        ResidualUnit u;
        u.kind = kind;
        if (kind == UnitKind::basic) {
            u.basic = BasicBlock::make(in_ch, out_ch);
        } else {
            u.rfm = DilatedResidualBlock::make(in_ch, out_ch, dilation, se_reduction);
        }
        return u;
    }

    Tensor forward(const Tensor& x) const {
        return kind == UnitKind::basic ? basic.forward(x) : rfm.forward(x);
    }

    void collect(const std::string& prefix, ParamList& out) {
        if (kind == UnitKind::basic) basic.collect(prefix, out);
        else rfm.collect(prefix, out);
    }

    void init(std::uint64_t master, const std::string& prefix) {
        if (kind == UnitKind::basic) basic.init(master, prefix);
        else rfm.init(master, prefix);
    }
};

}  // namespace sadi
