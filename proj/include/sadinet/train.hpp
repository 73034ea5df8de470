#pragma once

// Training: Adam with the step-wise learning-rate schedule, the combined-loss
// train step, held-out evaluation, and the full run driver that writes the
// metrics CSV, the per-step loss log, the free-form training log, and the
// final checkpoint.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "sadinet/config.hpp"
#include "sadinet/data.hpp"
#include "sadinet/losses.hpp"
#include "sadinet/metrics.hpp"
#include "sadinet/model.hpp"

namespace sadi {

/// 1e-3 before epoch 170, 1e-4 from 170, 1e-5 from 200.
inline double lr_schedule(int epoch) {
    if (epoch < 170) return 1e-3;
    if (epoch < 200) return 1e-4;
    return 1e-5;
}

class Adam {
  public:
    explicit Adam(const ParamList& params, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params) {
            m_.emplace_back(p.tensor.values().size(), 0.0);
            v_.emplace_back(p.tensor.values().size(), 0.0);
        }
    }

    /// One update from the gradients currently on the parameters; gradients
    /// are cleared afterwards. Parameters without a gradient are skipped.
    void step(ParamList& params, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = params[i].tensor;
            if (!p.has_grad()) continue;
            const auto& g = p.grad();
            auto& vals = p.values();
            for (std::size_t k = 0; k < vals.size(); ++k) {
                m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
                v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
                vals[k] -= lr * (m_[i][k] / bc1) / (std::sqrt(v_[i][k] / bc2) + eps_);
            }
            p.zero_grad();
        }
    }

    long steps_taken() const { return t_; }

  private:
    double beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct StepResult {
    double l_h1 = 0.0, l_h2 = 0.0, chi = 0.0, total = 0.0;
    bool ok = true;
    std::string diagnostic;
};

/// Forward + combined loss + backward + Adam. A non-finite loss aborts the
/// step with the optimizer state and parameters untouched.
inline StepResult train_step(SadiNet& model, ParamList& params, Adam& adam, const Tensor& images,
                             const Tensor& targets, const Tensor& visibility, int epoch,
                             const ChiMode& chi_mode, std::uint64_t moment_seed) {
    StepResult res;
    Graph graph;
    LossBreakdown loss;
    try {
        auto fwd = model.forward(images, moment_seed);
        Tensor l_h1;
        for (const auto& h1 : fwd.bb.h1) {
            Tensor term = mse_heatmap(h1, targets, visibility);
            l_h1 = l_h1.defined() ? add(l_h1, term) : term;
        }
        Tensor l_h2 = model.cfg.with_dlm ? mse_heatmap(fwd.bb.h1.back(), fwd.h2, visibility)
                                         : Tensor::scalar(0.0);

        double chi = 0.0;
        bool swapped = false;
        switch (chi_mode.kind) {
            case ChiMode::Kind::sigma:
                chi = model.cfg.with_dlm ? chi_from_sigma(fwd.sigma, model.cfg.backbone.heatmap)
                                         : 0.0;
                break;
            case ChiMode::Kind::fixed:
                chi = chi_mode.fixed_value;
                break;
            case ChiMode::Kind::swapped:
                chi = model.cfg.with_dlm ? chi_from_sigma(fwd.sigma, model.cfg.backbone.heatmap)
                                         : 0.0;
                swapped = true;
                break;
            case ChiMode::Kind::sum:
                break;
        }
        if (chi_mode.kind == ChiMode::Kind::sum) {
            loss = combined_loss(l_h1, l_h2, 0.5);
            loss.total = mul_scalar(loss.total, 2.0);  // exactly l_h1 + l_h2
        } else {
            loss = combined_loss(l_h1, l_h2, chi, swapped);
        }
    } catch (const numerical_error& e) {
        res.ok = false;
        res.diagnostic = std::string(e.what()) + "; step aborted, state unchanged";
        return res;
    }
    res.l_h1 = loss.l_h1.item();
    res.l_h2 = loss.l_h2.item();
    res.chi = loss.chi;
    res.total = loss.total.item();
    if (!std::isfinite(res.total)) {
        res.ok = false;
        res.diagnostic = "non-finite loss; step aborted, state unchanged";
        return res;
    }
    graph.backward(loss.total);
    adam.step(params, lr_schedule(epoch));
    return res;
}

// ---- evaluation ----

/// Mirrors an image horizontally.
inline Image8 flip_image(const Image8& img) {
    Image8 out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
    return out;
}

/// Un-mirrors a heatmap stack [N,J,G,G]: flips the x axis and swaps
/// left/right joint channels.
inline Tensor unflip_heatmaps(const Tensor& maps, const Skeleton& skeleton) {
    const int N = maps.dim(0), J = maps.dim(1), H = maps.dim(2), W = maps.dim(3);
    std::vector<int> source(static_cast<std::size_t>(J));
    for (int j = 0; j < J; ++j) source[static_cast<std::size_t>(j)] = j;
    for (const auto& pr : skeleton.lr_pairs) {
        source[static_cast<std::size_t>(pr[0])] = pr[1];
        source[static_cast<std::size_t>(pr[1])] = pr[0];
    }
    Tensor out(maps.shape());
    for (int n = 0; n < N; ++n)
        for (int j = 0; j < J; ++j)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    out.at({n, j, y, x}) =
                        maps.at({n, source[static_cast<std::size_t>(j)], y, W - 1 - x});
    return out;
}

/// Decoded keypoints in the image frame for a set of images; optionally
/// averages the prediction with the unflipped prediction of the mirrored
/// input.
inline std::vector<std::vector<std::array<double, 2>>> predict_keypoints(
    const SadiNet& model, const std::vector<const Image8*>& images, const Skeleton& skeleton,
    int batch = 8, bool flip_average = false) {
    NoGradGuard eval_only;
    const double stride =
        static_cast<double>(model.cfg.backbone.input_size()) / model.cfg.backbone.heatmap;
    std::vector<std::vector<std::array<double, 2>>> preds;
    for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(batch));
        std::vector<const Image8*> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                         images.begin() + static_cast<std::ptrdiff_t>(end));
        Tensor x = images_to_tensor(chunk);
        Tensor h1 = model.forward_backbone(x).h1.back();
        if (flip_average) {
            std::vector<Image8> flipped;
            flipped.reserve(chunk.size());
            for (const Image8* im : chunk) flipped.push_back(flip_image(*im));
            std::vector<const Image8*> fptr;
            for (const auto& im : flipped) fptr.push_back(&im);
            Tensor h1f = model.forward_backbone(images_to_tensor(fptr)).h1.back();
            h1 = mul_scalar(add(h1, unflip_heatmaps(h1f, skeleton)), 0.5);
        }
        const int J = h1.dim(1), G = h1.dim(2);
        for (int n = 0; n < static_cast<int>(chunk.size()); ++n) {
            Tensor maps = reshape(slice(h1, 0, n, 1), {J, G, G});
            auto dec = decode_heatmap(maps);
            std::vector<std::array<double, 2>> row;
            for (const auto& d : dec) row.push_back({d.x * stride, d.y * stride});
            preds.push_back(std::move(row));
        }
    }
    return preds;
}

// ---- the run driver ----

struct TrainResult {
    bool ok = true;
    std::string diagnostic;
    std::vector<double> per_epoch_pck;
    double final_pck = 0.0;
    std::string metrics_csv, loss_log_csv, train_log, checkpoint;
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline ModelConfig model_config_from(const RunConfig& cfg) {
    ModelConfig mc;
    mc.backbone.stacks = cfg.stacks;
    mc.backbone.depth = cfg.depth;
    mc.backbone.base_channels = cfg.channels;
    mc.backbone.joints = cfg.joints;
    mc.backbone.heatmap = cfg.heatmap;
    mc.backbone.dilation = cfg.dilation;
    mc.backbone.se_reduction = cfg.se_reduction;
    mc.backbone.unit = cfg.rfm_unit ? UnitKind::rfm : UnitKind::basic;
    mc.flow_layers = cfg.flow_layers;
    mc.flow_width = cfg.flow_width;
    mc.local_softmax_axis = cfg.local_softmax_axis;
    mc.density.jacobian_correction = cfg.jacobian_correction;
    mc.density.mixture = cfg.mixture;
    mc.moment_samples = cfg.moment_samples;
    mc.with_dlm = cfg.with_dlm;
    return mc;
}

/// Loads or generates the dataset named by the config.
inline std::vector<SynthSample> load_dataset(const RunConfig& cfg) {
    if (cfg.synthetic > 0)
        return synth_dataset(cfg.synthetic, cfg.joints, cfg.seed, cfg.heatmap * 4);
    auto report = load_annotations(cfg.annotations);
    if (!report.errors.empty()) {
        std::fprintf(stderr, "%d annotation record(s) skipped:\n", report.skipped);
        for (const auto& e : report.errors) std::fprintf(stderr, "  %s\n", e.c_str());
    }
    std::vector<SynthSample> out;
    const std::filesystem::path dir = std::filesystem::path(cfg.annotations).parent_path();
    for (auto& a : report.annotations) {
        SynthSample s;
        if (cfg.procedural_images) {
            // image ids "synth_<seed>_<index>" regenerate deterministically
            std::uint64_t sd = 0, idx = 0;
            if (std::sscanf(a.image_id.c_str(), "synth_%lu_%lu", &sd, &idx) != 2)
                throw std::invalid_argument("procedural images: cannot parse image_id '" +
                                            a.image_id + "'");
            s = synth_sample(sd, idx, a.joint_count(), cfg.heatmap * 4);
        } else {
            s.image = png_load((dir / (a.image_id + ".png")).string());
        }
        s.anno = std::move(a);
        out.push_back(std::move(s));
    }
    if (out.empty()) throw std::invalid_argument("dataset is empty after loading " + cfg.annotations);
    return out;
}

inline TrainResult run_training(RunConfig cfg) {
    cfg.finalize();
    const ChiMode chi_mode = parse_chi_mode(cfg.chi_mode);
    std::filesystem::create_directories(cfg.out_dir);
    TrainResult result;
    result.metrics_csv = cfg.out_dir + "/metrics.csv";
    result.loss_log_csv = cfg.out_dir + "/loss_log.csv";
    result.train_log = cfg.out_dir + "/train.log";
    result.checkpoint = cfg.out_dir + "/checkpoint.sadc";

    std::ofstream metrics(result.metrics_csv);
    std::ofstream loss_log(result.loss_log_csv);
    std::ofstream train_log(result.train_log);
    metrics << "epoch,split,joint,metric,threshold,value\n";
    loss_log << "step,l_h1,l_h2,chi,total\n";

    if (cfg.schedule_dry_run) {
        for (int e = 0; e < cfg.epochs; ++e)
            train_log << "epoch=" << e << " lr=" << detail::fmt_double(lr_schedule(e))
                      << " dry_run=1\n";
        return result;
    }

    const auto t0 = std::chrono::steady_clock::now();
    const Skeleton skeleton = Skeleton::chain(cfg.joints);
    auto dataset = load_dataset(cfg);

    // held-out split from a seeded shuffle
    std::vector<int> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    {
        Rng rng(derive_seed(cfg.seed, "split"));
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[static_cast<std::size_t>(i)],
                      order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    }
    const int val_count =
        std::max(1, static_cast<int>(std::lround(cfg.val_fraction * dataset.size())));
    std::vector<int> val_idx(order.begin(), order.begin() + val_count);
    std::vector<int> train_idx(order.begin() + val_count, order.end());
    if (train_idx.empty()) throw std::invalid_argument("config: no training samples after split");

    SadiNet model = SadiNet::make(model_config_from(cfg));
    model.init(cfg.seed);
    ParamList params = model.params();
    Adam adam(params);

    const double stride = static_cast<double>(model.cfg.backbone.input_size()) / cfg.heatmap;
    GaussianEncodeConfig enc;
    enc.sigma_px = cfg.sigma_px;
    enc.grid = cfg.heatmap;

    long step = 0;
    int consecutive_bad = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> idx = train_idx;
        {
            Rng rng(derive_seed(cfg.seed, "epoch" + std::to_string(epoch)));
            for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
                std::swap(idx[static_cast<std::size_t>(i)],
                          idx[static_cast<std::size_t>(rng.uniform_int(0, i))]);
        }
        double epoch_total = 0.0;
        int epoch_steps = 0;
        for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(cfg.batch));
            const int n = static_cast<int>(end - start);
            std::vector<const Image8*> imgs;
            std::vector<Image8> augmented;
            std::vector<KeypointAnnotation> annos;
            augmented.reserve(static_cast<std::size_t>(n));
            for (std::size_t k = start; k < end; ++k) {
                const auto& s = dataset[static_cast<std::size_t>(idx[k])];
                if (cfg.augment) {
                    Rng rng(derive_seed(cfg.seed, "aug" + std::to_string(epoch) + "_" +
                                                      std::to_string(idx[k])));
                    auto a = sadi::augment(s.image, s.anno, skeleton, rng);
                    augmented.push_back(std::move(a.image));
                    annos.push_back(std::move(a.anno));
                } else {
                    annos.push_back(s.anno);
                }
            }
            for (std::size_t k = start; k < end; ++k)
                imgs.push_back(cfg.augment ? &augmented[k - start]
                                           : &dataset[static_cast<std::size_t>(idx[k])].image);
            Tensor images = images_to_tensor(imgs);
            Tensor targets(Shape{n, cfg.joints, cfg.heatmap, cfg.heatmap});
            Tensor visibility(Shape{n, cfg.joints});
            for (int b = 0; b < n; ++b) {
                std::vector<std::array<double, 2>> grid_joints;
                std::vector<std::uint8_t> vis = annos[static_cast<std::size_t>(b)].visible;
                for (const auto& p : annos[static_cast<std::size_t>(b)].joints)
                    grid_joints.push_back({p[0] / stride, p[1] / stride});
                Tensor maps = encode_gaussian(grid_joints, vis, enc);
                std::copy(maps.values().begin(), maps.values().end(),
                          targets.values().begin() +
                              static_cast<std::ptrdiff_t>(b) * maps.numel());
                for (int j = 0; j < cfg.joints; ++j)
                    visibility.at({b, j}) = vis[static_cast<std::size_t>(j)] ? 1.0 : 0.0;
            }
            auto sr = train_step(model, params, adam, images, targets, visibility, epoch, chi_mode,
                                 derive_seed(cfg.seed, "moments"));
            loss_log << step << ',' << detail::fmt_double(sr.l_h1) << ','
                     << detail::fmt_double(sr.l_h2) << ',' << detail::fmt_double(sr.chi) << ','
                     << detail::fmt_double(sr.total) << "\n";
            ++step;
            if (!sr.ok) {
                std::fprintf(stderr, "step %ld: %s\n", step - 1, sr.diagnostic.c_str());
                if (++consecutive_bad >= 3) {
                    result.ok = false;
                    result.diagnostic = "aborted: non-finite loss on 3 consecutive steps";
                    train_log << "abort epoch=" << epoch << " reason=non_finite_loss\n";
                    return result;
                }
                continue;
            }
            consecutive_bad = 0;
            epoch_total += sr.total;
            ++epoch_steps;
        }

        // held-out PCK@0.2
        std::vector<const Image8*> val_imgs;
        std::vector<KeypointAnnotation> val_annos;
        for (int i : val_idx) {
            val_imgs.push_back(&dataset[static_cast<std::size_t>(i)].image);
            val_annos.push_back(dataset[static_cast<std::size_t>(i)].anno);
        }
        auto preds = predict_keypoints(model, val_imgs, skeleton, cfg.batch);
        auto r = pck(preds, val_annos, 0.2, NormKind::torso, skeleton);
        result.per_epoch_pck.push_back(r.mean);
        for (std::size_t j = 0; j < r.per_joint.size(); ++j)
            metrics << epoch << ",val," << r.joint_names[j] << ",pck,0.2,"
                    << detail::fmt_double(r.per_joint[j]) << "\n";
        metrics << epoch << ",val,mean,pck,0.2," << detail::fmt_double(r.mean) << "\n";
        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        train_log << "epoch=" << epoch << " lr=" << detail::fmt_double(lr_schedule(epoch))
                  << " steps=" << epoch_steps << " train_total="
                  << detail::fmt_double(epoch_steps ? epoch_total / epoch_steps : 0.0)
                  << " val_pck02=" << detail::fmt_double(r.mean) << " elapsed_s="
                  << detail::fmt_double(elapsed) << "\n";
    }
    result.final_pck = result.per_epoch_pck.empty() ? 0.0 : result.per_epoch_pck.back();
    model.save(result.checkpoint);
    return result;
}

}  // namespace sadi
