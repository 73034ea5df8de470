#pragma once

// The full network: backbone -> global attention over the pyramid ->
// classification head -> distribution heads -> learnable heatmaps H2.
// Checkpoints are self-describing SADC containers (architecture metadata
// rides along as scalar entries under "__meta.").

#include <map>
#include <string>
#include <vector>

#include "sadinet/backbone.hpp"
#include "sadinet/dlm.hpp"
#include "sadinet/serialize.hpp"
#include "sadinet/sfm.hpp"

namespace sadi {

struct ModelConfig {
    HourglassConfig backbone;  // depth 4 feeds the four-level fusion
    int flow_layers = 4;
    int flow_width = 16;
    int local_softmax_axis = 2;
    DensityOptions density;
    int moment_samples = 2000;
    bool with_dlm = true;  // false: backbone only (ablation arm)

    void validate() const {
        backbone.validate();
        if (with_dlm && backbone.depth != 4)
            throw std::invalid_argument("ModelConfig: the fusion stage expects depth 4, got " +
                                        std::to_string(backbone.depth));
        if (flow_layers < 1 || flow_width < 1)
            throw std::invalid_argument("ModelConfig: flow needs at least one layer and unit");
    }

    std::array<int, 4> pyramid_channels() const {
        return {backbone.channels_at(0), backbone.channels_at(1), backbone.channels_at(2),
                backbone.channels_at(3)};
    }
    int aligned_channels() const { return 4 * backbone.base_channels; }
    int feature_dim() const {
        const int coarse = backbone.heatmap >> 3;  // after three stride-2 fusions
        return 2 * backbone.channels_at(3) * coarse * coarse;
    }
};

struct SadiNet {
    ModelConfig cfg;
    Backbone backbone;
    GlobalAttention global_att;
    ClassificationHead cls_head;
    DistributionHeads heads;
    Flow flow;

    static SadiNet make(const ModelConfig& cfg) {
        cfg.validate();
        SadiNet m;
        m.cfg = cfg;
        m.backbone = Backbone::make(cfg.backbone);
        if (cfg.with_dlm) {
            m.global_att = GlobalAttention::make(cfg.pyramid_channels(), cfg.aligned_channels());
            m.cls_head = ClassificationHead::make(cfg.pyramid_channels(), cfg.local_softmax_axis);
            m.heads = DistributionHeads::make(cfg.feature_dim(), cfg.backbone.joints,
                                              cfg.backbone.heatmap);
            m.flow = Flow::make(cfg.flow_layers, cfg.flow_width);
        }
        for (auto& p : m.params()) p.tensor.set_requires_grad(true);
        return m;
    }

    struct Forward {
        BackboneOutput bb;
        std::vector<Tensor> fused;  // DLM path only
        Tensor weights;             // global attention W [N,4,G,G]
        Tensor mu, sigma;           // [N,J,2]
        Tensor h2;                  // [N,J,G,G]
        FlowMoments moments;
    };

    /// Full pass. The flow moments are re-estimated from the current flow
    /// parameters with the given seed and enter as constants.
    Forward forward(const Tensor& images, std::uint64_t moment_seed = 12345) const {
        Forward out;
        out.bb = backbone.forward(images);
        if (!cfg.with_dlm) return out;
        auto ga = global_att.forward(out.bb.pyramid);
        out.fused = std::move(ga.fused);
        out.weights = std::move(ga.weights);
        Tensor features = cls_head.forward(out.fused);
        Tensor flat = reshape(features, {features.dim(0), cfg.feature_dim()});
        auto ho = heads.forward(flat);
        out.mu = std::move(ho.mu);
        out.sigma = std::move(ho.sigma);
        out.moments = flow.moments(cfg.moment_samples, moment_seed);
        out.h2 = rasterize_h2(out.mu, out.sigma, flow, out.moments, cfg.backbone.heatmap,
                              cfg.density);
        return out;
    }

    /// Heatmap-only pass for evaluation (skips fusion and the DLM).
    BackboneOutput forward_backbone(const Tensor& images) const {
        return backbone.forward(images);
    }

    ParamList params() {
        ParamList p;
        backbone.collect(p);
        if (cfg.with_dlm) {
            global_att.collect("sfm.global", p);
            cls_head.collect("sfm.cls", p);
            heads.collect("dlm.heads", p);
            flow.collect("dlm.flow", p);
        }
        return p;
    }

    void init(std::uint64_t seed) {
        backbone.init(seed);
        if (cfg.with_dlm) {
            global_att.init(seed, "sfm.global");
            cls_head.init(seed, "sfm.cls");
            heads.init(seed, "dlm.heads");
            flow.init(seed, "dlm.flow");
        }
    }

    void save(const std::string& path) {
        std::vector<std::pair<std::string, Tensor>> entries;
        auto meta = [&](const std::string& k, double v) {
            entries.emplace_back("__meta." + k, Tensor::scalar(v));
        };
        meta("stacks", cfg.backbone.stacks);
        meta("depth", cfg.backbone.depth);
        meta("base_channels", cfg.backbone.base_channels);
        meta("joints", cfg.backbone.joints);
        meta("heatmap", cfg.backbone.heatmap);
        meta("dilation", cfg.backbone.dilation);
        meta("se_reduction", cfg.backbone.se_reduction);
        meta("unit", cfg.backbone.unit == UnitKind::rfm ? 1 : 0);
        meta("flow_layers", cfg.flow_layers);
        meta("flow_width", cfg.flow_width);
        meta("local_softmax_axis", cfg.local_softmax_axis);
        meta("jacobian_correction", cfg.density.jacobian_correction ? 1 : 0);
        meta("mixture", cfg.density.mixture ? 1 : 0);
        meta("moment_samples", cfg.moment_samples);
        meta("with_dlm", cfg.with_dlm ? 1 : 0);
        for (auto& p : params()) entries.emplace_back(p.name, p.tensor);
        sadc_save(entries, path);
    }

    static SadiNet load(const std::string& path) {
        auto entries = sadc_load(path);
        std::map<std::string, Tensor> by_name;
        for (auto& [name, t] : entries) by_name.emplace(name, t);
        auto meta = [&](const std::string& k) {
            auto it = by_name.find("__meta." + k);
            if (it == by_name.end())
                throw std::invalid_argument("checkpoint missing __meta." + k);
            return it->second.item();
        };
        ModelConfig cfg;
        cfg.backbone.stacks = static_cast<int>(meta("stacks"));
        cfg.backbone.depth = static_cast<int>(meta("depth"));
        cfg.backbone.base_channels = static_cast<int>(meta("base_channels"));
        cfg.backbone.joints = static_cast<int>(meta("joints"));
        cfg.backbone.heatmap = static_cast<int>(meta("heatmap"));
        cfg.backbone.dilation = static_cast<int>(meta("dilation"));
        cfg.backbone.se_reduction = static_cast<int>(meta("se_reduction"));
        cfg.backbone.unit = meta("unit") > 0.5 ? UnitKind::rfm : UnitKind::basic;
        cfg.flow_layers = static_cast<int>(meta("flow_layers"));
        cfg.flow_width = static_cast<int>(meta("flow_width"));
        cfg.local_softmax_axis = static_cast<int>(meta("local_softmax_axis"));
        cfg.density.jacobian_correction = meta("jacobian_correction") > 0.5;
        cfg.density.mixture = meta("mixture") > 0.5;
        cfg.moment_samples = static_cast<int>(meta("moment_samples"));
        cfg.with_dlm = meta("with_dlm") > 0.5;
        SadiNet m = make(cfg);
        for (auto& p : m.params()) {
            auto it = by_name.find(p.name);
            if (it == by_name.end())
                throw std::invalid_argument("checkpoint missing parameter " + p.name);
            if (it->second.shape() != p.tensor.shape())
                throw std::invalid_argument("checkpoint shape mismatch for " + p.name + ": " +
                                            shape_str(it->second.shape()) + " vs " +
                                            shape_str(p.tensor.shape()));
            p.tensor.values() = it->second.values();
        }
        return m;
    }
};

}  // namespace sadi
