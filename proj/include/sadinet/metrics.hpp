#pragma once

// PCK / PCKh: the fraction of predictions whose normalized distance to ground
// truth is <= the threshold (inclusive). PCKh@0.5 normalizes by the head
// segment, PCK@0.2 by the torso. Only annotated-visible joints count; samples
// without a positive normalization length are excluded and tallied.

#include <array>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "sadinet/data.hpp"

namespace sadi {

enum class NormKind { head, torso };

inline const char* norm_kind_name(NormKind k) { return k == NormKind::head ? "head" : "torso"; }

struct PckResult {
    std::vector<std::string> joint_names;
    std::vector<double> per_joint;  // fraction in [0,1]; joints with no instances hold 0
    std::vector<int> evaluated;     // counted instances per joint
    double mean = 0.0;              // average of per-joint fractions over joints with instances
    double threshold = 0.0;
    NormKind norm = NormKind::torso;
    int skipped_zero_norm = 0;
};

inline PckResult pck(const std::vector<std::vector<std::array<double, 2>>>& predictions,
                     const std::vector<KeypointAnnotation>& annotations, double threshold,
                     NormKind norm, const Skeleton& skeleton) {
    if (predictions.size() != annotations.size())
        throw std::invalid_argument("pck: " + std::to_string(predictions.size()) +
                                    " predictions vs " + std::to_string(annotations.size()) +
                                    " annotations");
    const int J = static_cast<int>(skeleton.joint_names.size());
    PckResult r;
    r.joint_names = skeleton.joint_names;
    r.per_joint.assign(static_cast<std::size_t>(J), 0.0);
    r.evaluated.assign(static_cast<std::size_t>(J), 0);
    r.threshold = threshold;
    r.norm = norm;
    std::vector<int> correct(static_cast<std::size_t>(J), 0);

    for (std::size_t p = 0; p < annotations.size(); ++p) {
        const auto& anno = annotations[p];
        if (anno.joint_count() != J)
            throw std::invalid_argument("pck: sample " + std::to_string(p) + " has " +
                                        std::to_string(anno.joint_count()) + " joints, expected " +
                                        std::to_string(J));
        const auto& len = norm == NormKind::head ? anno.norm_head : anno.norm_torso;
        if (!len || *len <= 0.0) {
            ++r.skipped_zero_norm;
            continue;
        }
        for (int j = 0; j < J; ++j) {
            if (!anno.visible[static_cast<std::size_t>(j)]) continue;
            const auto& gt = anno.joints[static_cast<std::size_t>(j)];
            const auto& pr = predictions[p][static_cast<std::size_t>(j)];
            const double d = std::hypot(pr[0] - gt[0], pr[1] - gt[1]);
            ++r.evaluated[static_cast<std::size_t>(j)];
            if (d / *len <= threshold) ++correct[static_cast<std::size_t>(j)];
        }
    }

    int joints_seen = 0;
    double acc = 0.0;
    for (int j = 0; j < J; ++j) {
        if (r.evaluated[static_cast<std::size_t>(j)] > 0) {
            r.per_joint[static_cast<std::size_t>(j)] =
                static_cast<double>(correct[static_cast<std::size_t>(j)]) /
                r.evaluated[static_cast<std::size_t>(j)];
            acc += r.per_joint[static_cast<std::size_t>(j)];
            ++joints_seen;
        }
    }
    r.mean = joints_seen > 0 ? acc / joints_seen : 0.0;
    return r;
}

/// Per-joint + Mean table in the canonical column order, percentages with one
/// decimal.
inline std::string pck_table(const PckResult& r, const Skeleton& skeleton) {
    const auto order = canonical_joint_order(skeleton);
    std::ostringstream head, vals;
    head << std::left;
    vals << std::fixed << std::setprecision(1);
    for (int j : order) {
        std::string name = r.joint_names[static_cast<std::size_t>(j)];
        name[0] = static_cast<char>(std::toupper(name[0]));
        head << std::setw(10) << name;
        vals << std::left << std::setw(10) << 100.0 * r.per_joint[static_cast<std::size_t>(j)];
    }
    head << "Mean";
    vals << 100.0 * r.mean;
    return head.str() + "\n" + vals.str() + "\n";
}

}  // namespace sadi
