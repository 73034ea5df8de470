#pragma once

// Run configuration shared by the CLI and the training/eval entry points.
// Defaults reproduce the desk-scale acceptance setup. SADI_SEED overrides the
// configured seed.

#include <cstdlib>
#include <stdexcept>
#include <string>

#include "sadinet/blocks.hpp"

namespace sadi {

struct ChiMode {
    enum class Kind { sigma, fixed, swapped, sum } kind = Kind::sigma;
    double fixed_value = 0.0;
};

inline ChiMode parse_chi_mode(const std::string& text) {
    ChiMode m;
    if (text == "sigma") {
        m.kind = ChiMode::Kind::sigma;
    } else if (text == "swapped") {
        m.kind = ChiMode::Kind::swapped;
    } else if (text == "sum") {
        m.kind = ChiMode::Kind::sum;  // plain L_h1 + L_h2 (the un-weighted ablation row)
    } else if (text.rfind("fixed:", 0) == 0) {
        m.kind = ChiMode::Kind::fixed;
        try {
            m.fixed_value = std::stod(text.substr(6));
        } catch (const std::exception&) {
            throw std::invalid_argument("chi mode: cannot parse fixed value in '" + text + "'");
        }
        if (m.fixed_value < 0.0 || m.fixed_value > 1.0)
            throw std::invalid_argument("chi mode: fixed value must lie in [0,1]");
    } else {
        throw std::invalid_argument("chi mode: expected sigma | fixed:<v> | swapped | sum, got '" +
                                    text + "'");
    }
    return m;
}

struct RunConfig {
    std::uint64_t seed = 1;
    int stacks = 2;
    int depth = 4;
    int channels = 4;  // base width; the pyramid plan scales proportionally
    int joints = 4;
    int heatmap = 64;
    int dilation = 3;
    int se_reduction = 4;
    int flow_layers = 4;
    int flow_width = 16;
    int moment_samples = 2000;
    double sigma_px = 2.0;
    std::string chi_mode = "sigma";
    int epochs = 30;
    int batch = 8;
    int synthetic = 500;      // 0: load `annotations` instead
    std::string annotations;  // JSON path when synthetic == 0
    bool procedural_images = false;
    double val_fraction = 0.2;
    bool augment = false;
    bool rfm_unit = true;  // false: plain basic blocks (ablation arm)
    int local_softmax_axis = 2;
    bool jacobian_correction = true;
    bool mixture = true;
    bool with_dlm = true;
    bool schedule_dry_run = false;
    std::string out_dir = "out";

    /// Applies the environment seed override and checks every field.
    void finalize() {
        if (const char* env = std::getenv("SADI_SEED")) {
            try {
                seed = std::stoull(env);
            } catch (const std::exception&) {
                throw std::invalid_argument("SADI_SEED is not an unsigned integer: '" +
                                            std::string(env) + "'");
            }
        }
        if (stacks < 1) throw std::invalid_argument("config: stacks must be >= 1");
        if (depth < 1) throw std::invalid_argument("config: depth must be >= 1");
        if (channels < 1) throw std::invalid_argument("config: channels must be >= 1");
        if (joints < 3) throw std::invalid_argument("config: joints must be >= 3");
        if (heatmap < 8) throw std::invalid_argument("config: heatmap must be >= 8");
        if (dilation < 2) throw std::invalid_argument("config: dilation must be >= 2");
        if (sigma_px <= 0) throw std::invalid_argument("config: sigma_px must be > 0");
        if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
        if (batch < 1) throw std::invalid_argument("config: batch must be >= 1");
        if (synthetic < 0) throw std::invalid_argument("config: synthetic must be >= 0");
        if (synthetic == 0 && annotations.empty())
            throw std::invalid_argument("config: need --synthetic n or --annotations path");
        if (val_fraction <= 0.0 || val_fraction >= 1.0)
            throw std::invalid_argument("config: val_fraction must lie in (0,1)");
        if (moment_samples < 1000)
            throw std::invalid_argument("config: moment_samples must be >= 1000");
        if (local_softmax_axis != 2 && local_softmax_axis != 3)
            throw std::invalid_argument("config: local_softmax_axis must be 2 or 3");
        (void)parse_chi_mode(chi_mode);
    }
};

}  // namespace sadi
