#pragma once

// Paired ablation recipes: both arms run the same seeds, and shared parameter
// paths initialize bit-identically, so deltas isolate the architectural
// change.
//   rfm     : basic-block hourglass vs the dilated-residual (RFM) hourglass
//   sfm_dlm : plain hourglass vs hourglass + fusion + distribution learning
//   loss    : un-weighted L_h1 + L_h2 vs the chi-weighted combination

#include <fstream>
#include <string>
#include <vector>

#include "sadinet/train.hpp"

namespace sadi {

struct AblationArm {
    std::string label;
    std::vector<double> per_seed_pck;
    double mean_pck = 0.0;
    int impulse_extent = 0;  // rfm recipe only
};

struct AblationResult {
    std::string recipe;
    std::vector<AblationArm> arms;
    std::string csv_path;
    bool ok = true;
    std::string diagnostic;
};

namespace detail {

/// Impulse-response support extent (one axis) of a fresh residual unit.
inline int unit_impulse_extent(UnitKind kind, int dilation) {
    NoGradGuard eval_only;
    ResidualUnit u = ResidualUnit::make(kind, 1, 1, dilation, 1);
    ParamList params;
    u.collect("u", params);
    for (auto& p : params)
        if (p.name.find(".b") == std::string::npos) p.tensor.fill(0.25);
    const int size = 4 * dilation + 5;
    Tensor x(Shape{1, 1, size, size});
    x.at({0, 0, size / 2, size / 2}) = 1.0;
    Tensor y = u.forward(x);
    int lo = size, hi = -1;
    for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j)
            if (std::abs(y.at({0, 0, i, j})) > 1e-15) {
                lo = std::min(lo, i);
                hi = std::max(hi, i);
            }
    return hi >= lo ? hi - lo + 1 : 0;
}

}  // namespace detail

inline AblationResult run_ablation(const std::string& recipe, RunConfig base, int n_seeds) {
    if (n_seeds < 1) throw std::invalid_argument("ablate: need at least one seed");
    struct ArmSpec {
        std::string label;
        bool rfm_unit;
        bool with_dlm;
        std::string chi_mode;
    };
    std::vector<ArmSpec> specs;
    if (recipe == "rfm") {
        specs = {{"basicblock", false, false, "fixed:0"}, {"rfm", true, false, "fixed:0"}};
    } else if (recipe == "sfm_dlm") {
        specs = {{"hourglass", false, false, "fixed:0"}, {"hourglass+sfm_dlm", false, true, "sigma"}};
    } else if (recipe == "loss") {
        specs = {{"l_h1+l_h2", true, true, "sum"}, {"(1-chi)l_h1+chi*l_h2", true, true, "sigma"}};
    } else {
        throw std::invalid_argument("ablate: unknown recipe '" + recipe +
                                    "' (expected rfm | sfm_dlm | loss)");
    }

    AblationResult result;
    result.recipe = recipe;
    std::filesystem::create_directories(base.out_dir);
    result.csv_path = base.out_dir + "/ablation.csv";
    std::ofstream csv(result.csv_path);
    csv << "recipe,arm,seed,metric,value\n";

    for (const auto& spec : specs) {
        AblationArm arm;
        arm.label = spec.label;
        for (int s = 0; s < n_seeds; ++s) {
            RunConfig cfg = base;
            cfg.seed = base.seed + static_cast<std::uint64_t>(s);
            cfg.rfm_unit = spec.rfm_unit;
            cfg.with_dlm = spec.with_dlm;
            cfg.chi_mode = spec.chi_mode;
            cfg.out_dir = base.out_dir + "/" + recipe + "_" + spec.label + "_seed" +
                          std::to_string(s);
            auto r = run_training(cfg);
            if (!r.ok) {
                result.ok = false;
                result.diagnostic = spec.label + " seed " + std::to_string(s) + ": " + r.diagnostic;
                return result;
            }
            arm.per_seed_pck.push_back(r.final_pck);
            csv << recipe << ',' << spec.label << ',' << cfg.seed << ",final_pck,"
                << detail::fmt_double(r.final_pck) << "\n";
        }
        for (double v : arm.per_seed_pck) arm.mean_pck += v;
        arm.mean_pck /= static_cast<double>(arm.per_seed_pck.size());
        if (recipe == "rfm") {
            arm.impulse_extent = detail::unit_impulse_extent(
                spec.rfm_unit ? UnitKind::rfm : UnitKind::basic, base.dilation);
            csv << recipe << ',' << spec.label << ",-,impulse_extent," << arm.impulse_extent
                << "\n";
        }
        result.arms.push_back(std::move(arm));
    }
    return result;
}

}  // namespace sadi
