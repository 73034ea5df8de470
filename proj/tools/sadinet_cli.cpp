// Command-line front end: train, eval, gradcheck, ablate, inspect, synth.
// Exit codes: 0 success, 1 validation error, 2 numerical failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "sadinet/ablate.hpp"
#include "sadinet/gradcheck_suite.hpp"
#include "sadinet/model.hpp"
#include "sadinet/train.hpp"

using namespace sadi;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;

void add_run_options(CLI::App* cmd, RunConfig& cfg) {
    cmd->add_option("--seed", cfg.seed, "master seed (SADI_SEED overrides)");
    cmd->add_option("--stacks", cfg.stacks, "hourglass stacks");
    cmd->add_option("--depth", cfg.depth, "hourglass depth (scales)");
    cmd->add_option("--channels", cfg.channels, "base channel width; the pyramid scales as 1x/2x/4x/8x");
    cmd->add_option("--joints", cfg.joints, "joint count");
    cmd->add_option("--heatmap", cfg.heatmap, "heatmap grid extent");
    cmd->add_option("--dilation", cfg.dilation, "dilation rate of the parallel branch");
    cmd->add_option("--se-reduction", cfg.se_reduction, "SE bottleneck reduction");
    cmd->add_option("--flow-layers", cfg.flow_layers, "coupling layers in the flow");
    cmd->add_option("--flow-width", cfg.flow_width, "hidden width of the coupling nets");
    cmd->add_option("--moment-samples", cfg.moment_samples, "Monte Carlo samples for flow moments");
    cmd->add_option("--sigma", cfg.sigma_px, "target Gaussian sigma in grid px");
    cmd->add_option("--chi-mode", cfg.chi_mode, "sigma | fixed:<v> | swapped | sum");
    cmd->add_option("--epochs", cfg.epochs, "training epochs");
    cmd->add_option("--batch", cfg.batch, "batch size");
    cmd->add_option("--synthetic", cfg.synthetic, "synthetic sample count (0: use --annotations)");
    cmd->add_option("--annotations", cfg.annotations, "annotation JSON path");
    cmd->add_flag("--procedural", cfg.procedural_images,
                  "regenerate images from synth_<seed>_<index> ids instead of loading PNGs");
    cmd->add_option("--val-fraction", cfg.val_fraction, "held-out fraction");
    cmd->add_flag("--augment", cfg.augment, "enable rotation/scale/flip augmentation");
    cmd->add_flag("--basic-unit", [&cfg](std::int64_t) { cfg.rfm_unit = false; },
                  "use plain basic blocks instead of the dilated residual unit");
    cmd->add_option("--local-axis", cfg.local_softmax_axis,
                    "local attention softmax axis: 2 rows-within-column, 3 columns-within-row");
    cmd->add_flag("--no-jacobian-correction", [&cfg](std::int64_t) { cfg.jacobian_correction = false; },
                  "evaluate the standardized density without the 1/sigma factor");
    cmd->add_flag("--density-sum", [&cfg](std::int64_t) { cfg.mixture = false; },
                  "raw Q + I sum instead of the equal mixture");
    cmd->add_flag("--no-dlm", [&cfg](std::int64_t) { cfg.with_dlm = false; },
                  "train the backbone alone");
    cmd->add_option("--out", cfg.out_dir, "output directory");
    cmd->set_config("--config", "", "flat key=value config file; flags override");
}

int guarded(const std::function<int()>& body) {
    try {
        return body();
    } catch (const numerical_error& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kExitNumerical;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "invalid configuration: %s\n", e.what());
        return kExitValidation;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    }
}

std::vector<SynthSample> dataset_for_eval(const RunConfig& cfg) { return load_dataset(cfg); }

/// 10-level percentile rendering of one heatmap.
void print_grid_percentiles(const Tensor& map) {
    static const char levels[] = " .:-=+*#%@";
    const int H = map.dim(0), W = map.dim(1);
    std::vector<double> sorted(map.values().begin(), map.values().end());
    std::sort(sorted.begin(), sorted.end());
    for (int y = 0; y < H; ++y) {
        std::string row;
        for (int x = 0; x < W; ++x) {
            const double v = map.at({y, x});
            const auto pos = std::lower_bound(sorted.begin(), sorted.end(), v) - sorted.begin();
            int decile = static_cast<int>(10.0 * static_cast<double>(pos) / sorted.size());
            row.push_back(levels[std::clamp(decile, 0, 9)]);
        }
        std::printf("%s\n", row.c_str());
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SADI-Net pose estimation: training, evaluation and inspection"};
    app.require_subcommand(1);

    // ---- train ----
    RunConfig train_cfg;
    bool dry_run = false;
    auto* train_cmd = app.add_subcommand("train", "train a model and write logs + checkpoint");
    add_run_options(train_cmd, train_cfg);
    train_cmd->add_flag("--schedule-dry-run", dry_run,
                        "write the per-epoch learning-rate log without training");

    // ---- eval ----
    RunConfig eval_cfg;
    std::string eval_checkpoint, eval_metric = "pck0.2", eval_csv;
    bool eval_flip = false;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (per-joint PCK table)");
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint path")->required();
    eval_cmd->add_option("--metric", eval_metric, "pck0.2 | pckh0.5");
    eval_cmd->add_flag("--flip", eval_flip, "average with the mirrored input's prediction");
    eval_cmd->add_option("--csv", eval_csv, "also write the table as CSV rows");
    eval_cmd->add_option("--seed", eval_cfg.seed, "seed for the synthetic evaluation set");
    eval_cmd->add_option("--synthetic", eval_cfg.synthetic, "synthetic sample count");
    eval_cmd->add_option("--annotations", eval_cfg.annotations, "annotation JSON path");
    eval_cmd->add_flag("--procedural", eval_cfg.procedural_images, "regenerate images from ids");
    eval_cmd->add_option("--batch", eval_cfg.batch, "evaluation batch size");

    // ---- gradcheck ----
    std::string gc_scope;
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of every registered op");
    gc_cmd->add_option("--scope", gc_scope, "only run checks whose name contains this substring");

    // ---- ablate ----
    RunConfig ab_cfg;
    std::string ab_recipe;
    int ab_seeds = 1;
    auto* ab_cmd = app.add_subcommand("ablate", "paired-seed ablation recipes");
    ab_cmd->add_option("--recipe", ab_recipe, "rfm | sfm_dlm | loss")->required();
    ab_cmd->add_option("--seeds", ab_seeds, "number of paired seeds");
    ab_cfg.synthetic = 160;
    ab_cfg.epochs = 8;
    add_run_options(ab_cmd, ab_cfg);

    // ---- inspect ----
    std::string in_checkpoint, in_weights, in_h1_out, in_h2_out;
    int in_h2_joint = -1;
    std::uint64_t in_seed = 1, in_index = 0;
    auto* in_cmd = app.add_subcommand("inspect", "dump attention weights / heatmaps for one sample");
    in_cmd->add_option("--checkpoint", in_checkpoint, "checkpoint path")->required();
    in_cmd->add_option("--weights", in_weights, "write global attention W as a SADT tensor");
    in_cmd->add_option("--h1-out", in_h1_out, "write the final H1 stack as a SADT tensor");
    in_cmd->add_option("--h2-out", in_h2_out, "write the H2 stack as a SADT tensor");
    in_cmd->add_option("--h2", in_h2_joint, "print joint's H2 grid as text percentiles");
    in_cmd->add_option("--sample-seed", in_seed, "synthetic sample seed");
    in_cmd->add_option("--sample-index", in_index, "synthetic sample index");

    // ---- synth ----
    int sy_n = 500, sy_joints = 4;
    std::uint64_t sy_seed = 1;
    std::string sy_out = "synth_out";
    bool sy_png = false;
    auto* sy_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
    sy_cmd->add_option("--n", sy_n, "sample count");
    sy_cmd->add_option("--joints", sy_joints, "joint count");
    sy_cmd->add_option("--seed", sy_seed, "seed");
    sy_cmd->add_option("--out", sy_out, "output directory");
    sy_cmd->add_flag("--png", sy_png, "also write PNG images next to annotations.json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitValidation;
    }

    if (train_cmd->parsed()) {
        return guarded([&] {
            train_cfg.schedule_dry_run = dry_run;
            auto r = run_training(train_cfg);
            if (!r.ok) {
                std::fprintf(stderr, "training aborted: %s\n", r.diagnostic.c_str());
                return kExitNumerical;
            }
            if (!dry_run)
                std::printf("final val PCK@0.2 = %.4f  (checkpoint: %s)\n", r.final_pck,
                            r.checkpoint.c_str());
            std::printf("logs: %s %s %s\n", r.metrics_csv.c_str(), r.loss_log_csv.c_str(),
                        r.train_log.c_str());
            return kExitOk;
        });
    }

    if (eval_cmd->parsed()) {
        return guarded([&] {
            if (eval_metric != "pck0.2" && eval_metric != "pckh0.5")
                throw std::invalid_argument("eval: metric must be pck0.2 or pckh0.5");
            SadiNet model = SadiNet::load(eval_checkpoint);
            eval_cfg.joints = model.cfg.backbone.joints;
            eval_cfg.heatmap = model.cfg.backbone.heatmap;
            if (eval_cfg.synthetic == 0 && eval_cfg.annotations.empty())
                eval_cfg.synthetic = 100;
            auto dataset = dataset_for_eval(eval_cfg);
            if (dataset[0].anno.joint_count() != model.cfg.backbone.joints)
                throw std::invalid_argument(
                    "eval: dataset has " + std::to_string(dataset[0].anno.joint_count()) +
                    " joints but the checkpoint expects " +
                    std::to_string(model.cfg.backbone.joints));
            const Skeleton skeleton = Skeleton::chain(model.cfg.backbone.joints);
            std::vector<const Image8*> imgs;
            std::vector<KeypointAnnotation> annos;
            for (auto& s : dataset) {
                imgs.push_back(&s.image);
                annos.push_back(s.anno);
            }
            auto preds = predict_keypoints(model, imgs, skeleton, eval_cfg.batch, eval_flip);
            const bool head = eval_metric == "pckh0.5";
            auto r = pck(preds, annos, head ? 0.5 : 0.2, head ? NormKind::head : NormKind::torso,
                         skeleton);
            std::printf("%s", pck_table(r, skeleton).c_str());
            if (r.skipped_zero_norm > 0)
                std::fprintf(stderr, "warning: %d sample(s) without a positive norm skipped\n",
                             r.skipped_zero_norm);
            if (!eval_csv.empty()) {
                std::ofstream f(eval_csv);
                f << "epoch,split,joint,metric,threshold,value\n";
                const char* metric = head ? "pckh" : "pck";
                const double thr = head ? 0.5 : 0.2;
                for (std::size_t j = 0; j < r.per_joint.size(); ++j)
                    f << "0,eval," << r.joint_names[j] << ',' << metric << ',' << thr << ','
                      << detail::fmt_double(r.per_joint[j]) << "\n";
                f << "0,eval,mean," << metric << ',' << thr << ',' << detail::fmt_double(r.mean)
                  << "\n";
            }
            return kExitOk;
        });
    }

    if (gc_cmd->parsed()) {
        return guarded([&] {
            const auto t0 = std::chrono::steady_clock::now();
            auto results = run_gradcheck_suite(gc_scope);
            if (results.empty()) throw std::invalid_argument("gradcheck: no checks match scope");
            bool all_ok = true;
            for (const auto& r : results) {
                const bool ok = r.report.pass(1e-4);
                all_ok = all_ok && ok;
                if (r.report.nonfinite_node >= 0)
                    std::printf("%-24s FAIL  non-finite forward at node %d (%s)\n", r.name.c_str(),
                                r.report.nonfinite_node, r.report.nonfinite_op.c_str());
                else
                    std::printf("%-24s %s  max rel err %.3e\n", r.name.c_str(),
                                ok ? "pass" : "FAIL", r.report.max_rel_err);
            }
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::printf("%zu checks in %.1f s: %s\n", results.size(), secs,
                        all_ok ? "all passed" : "FAILURES");
            return all_ok ? kExitOk : kExitNumerical;
        });
    }

    if (ab_cmd->parsed()) {
        return guarded([&] {
            auto r = run_ablation(ab_recipe, ab_cfg, ab_seeds);
            if (!r.ok) {
                std::fprintf(stderr, "ablation aborted: %s\n", r.diagnostic.c_str());
                return kExitNumerical;
            }
            std::printf("%-24s %-12s %s\n", "arm", "mean PCK@0.2", "per-seed");
            for (const auto& arm : r.arms) {
                std::string seeds;
                for (double v : arm.per_seed_pck) {
                    char buf[16];
                    std::snprintf(buf, sizeof buf, "%.4f ", v);
                    seeds += buf;
                }
                std::printf("%-24s %-12.4f %s\n", arm.label.c_str(), arm.mean_pck, seeds.c_str());
            }
            if (ab_recipe == "rfm")
                std::printf("impulse extents: %s=%d px, %s=%d px\n", r.arms[0].label.c_str(),
                            r.arms[0].impulse_extent, r.arms[1].label.c_str(),
                            r.arms[1].impulse_extent);
            std::printf("delta mean = %+.4f  (csv: %s)\n",
                        r.arms[1].mean_pck - r.arms[0].mean_pck, r.csv_path.c_str());
            return kExitOk;
        });
    }

    if (in_cmd->parsed()) {
        return guarded([&] {
            SadiNet model = SadiNet::load(in_checkpoint);
            const int J = model.cfg.backbone.joints;
            auto sample = synth_sample(in_seed, in_index, J, model.cfg.backbone.input_size());
            NoGradGuard eval_only;
            auto fwd = model.forward(images_to_tensor({&sample.image}));
            if (!in_weights.empty()) {
                if (!fwd.weights.defined())
                    throw std::invalid_argument("inspect: checkpoint has no fusion stage");
                sadt_save(fwd.weights, in_weights);
                std::printf("wrote %s\n", in_weights.c_str());
            }
            if (!in_h1_out.empty()) {
                sadt_save(fwd.bb.h1.back(), in_h1_out);
                std::printf("wrote %s\n", in_h1_out.c_str());
            }
            if (!in_h2_out.empty()) {
                if (!fwd.h2.defined())
                    throw std::invalid_argument("inspect: checkpoint has no distribution stage");
                sadt_save(fwd.h2, in_h2_out);
                std::printf("wrote %s\n", in_h2_out.c_str());
            }
            if (in_h2_joint >= 0) {
                if (!fwd.h2.defined())
                    throw std::invalid_argument("inspect: checkpoint has no distribution stage");
                if (in_h2_joint >= J)
                    throw std::invalid_argument("inspect: joint id out of range");
                const int G = model.cfg.backbone.heatmap;
                std::printf("H2 joint %d (percentile levels):\n", in_h2_joint);
                print_grid_percentiles(reshape(slice(reshape(fwd.h2, {J, G, G}), 0, in_h2_joint, 1),
                                               {G, G}));
            }
            return kExitOk;
        });
    }

    if (sy_cmd->parsed()) {
        return guarded([&] {
            auto ds = synth_dataset(sy_n, sy_joints, sy_seed);
            std::filesystem::create_directories(sy_out);
            std::vector<KeypointAnnotation> annos;
            for (auto& s : ds) annos.push_back(s.anno);
            save_annotations(annos, sy_out + "/annotations.json");
            if (sy_png)
                for (auto& s : ds)
                    png_save(s.image, sy_out + "/" + s.anno.image_id + ".png");
            std::printf("wrote %d samples to %s%s\n", sy_n, sy_out.c_str(),
                        sy_png ? " (with PNGs)" : "");
            return kExitOk;
        });
    }

    return kExitValidation;
}
