#pragma once

// Central finite-difference verification of recorded gradients. The numeric
// side re-runs the forward function with recording suppressed, so it stays
// independent of every backward rule it checks.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sadinet/tensor.hpp"

namespace sadi {

struct GradCheckLeaf {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckLeaf> leaves;
    double max_rel_err = 0.0;
    int nonfinite_node = -1;   // id of the first non-finite forward node, -1 if none
    std::string nonfinite_op;  // op name of that node

    bool pass(double tol) const { return nonfinite_node < 0 && max_rel_err < tol; }
};

/// Checks d(f)/d(leaf) for every element of every leaf against central
/// differences with step h. `f` must be a deterministic scalar function of the
/// leaves. Relative error uses max(1, |numeric|) in the denominator.
inline GradCheckReport grad_check(const std::function<Tensor()>& f,
                                  const std::vector<std::pair<std::string, Tensor>>& leaves,
                                  double h = 1e-5) {
    GradCheckReport report;

    std::vector<std::vector<double>> analytic;
    {
        for (auto& [name, leaf] : leaves) {
            leaf.rep()->requires_grad = true;
            leaf.rep()->g.clear();
        }
        Graph graph;
        Tensor loss = f();
        const int bad = graph.first_nonfinite_node();
        if (bad >= 0) {
            report.nonfinite_node = bad;
            report.nonfinite_op = graph.node(bad).op;
            return report;
        }
        graph.backward(loss);
        for (const auto& [name, leaf] : leaves) {
            if (leaf.has_grad())
                analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
            else
                analytic.emplace_back(leaf.values().size(), 0.0);
        }
    }

    NoGradGuard eval_only;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const auto& name = leaves[li].first;
        Tensor leaf = leaves[li].second;
        GradCheckLeaf entry{name, 0.0};
        auto& vals = leaf.values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double keep = vals[i];
            vals[i] = keep + h;
            const double fp = f().item();
            vals[i] = keep - h;
            const double fm = f().item();
            vals[i] = keep;
            const double numeric = (fp - fm) / (2.0 * h);
            const double err =
                std::abs(analytic[li][i] - numeric) / std::max(1.0, std::abs(numeric));
            entry.max_rel_err = std::max(entry.max_rel_err, err);
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.leaves.push_back(std::move(entry));
    }
    return report;
}

}  // namespace sadi
