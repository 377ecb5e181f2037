#pragma once

// Central-difference gradient verification for tape-built scalars.

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pmcr/autodiff.hpp"
#include "pmcr/errors.hpp"

namespace pmcr {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::map<std::string, double> per_param;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
using ScalarBuilder = std::function<ad::Var(ad::Graph&, const std::vector<ad::Var>&)>;

// Compares backward() gradients against (f(x+e)-f(x-e))/2e per coordinate.
// Relative error uses a 1e-4 floor so that near-zero gradients are judged
// on an absolute scale.
inline GradCheckReport grad_check(const ScalarBuilder& build, const NamedTensors& inputs,
                                  double eps = 1e-4) {
    auto eval = [&](const NamedTensors& pts, bool want_grads,
                    std::vector<Tensor>* grads) -> double {
        ad::Graph g;
        std::vector<ad::Var> leaves;
        leaves.reserve(pts.size());
        for (const auto& [name, t] : pts) leaves.push_back(g.leaf(t, want_grads));
        ad::Var out = build(g, leaves);
        if (out.val().numel() != 1) throw DimMismatch("grad_check target must be scalar");
        if (!out.val().all_finite()) throw NonDifferentiablePoint("non-finite objective");
        if (want_grads) {
            g.backward(out);
            grads->clear();
            for (const ad::Var& v : leaves) {
                Tensor gt = v.grad().numel() == v.val().numel() ? v.grad()
                                                                : Tensor::zeros(v.val().dims());
                grads->push_back(std::move(gt));
            }
        }
        return out.val()[0];
    };

    std::vector<Tensor> analytic;
    eval(inputs, true, &analytic);

    GradCheckReport report;
    NamedTensors work = inputs;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
        double worst = 0.0;
        for (std::size_t i = 0; i < inputs[p].second.numel(); ++i) {
            const double orig = work[p].second[i];
            work[p].second[i] = orig + eps;
            const double fp = eval(work, false, nullptr);
            work[p].second[i] = orig - eps;
            const double fm = eval(work, false, nullptr);
            work[p].second[i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double ga = analytic[p][i];
            const double rel = std::abs(ga - numeric) /
                               std::max({1e-4, std::abs(ga), std::abs(numeric)});
            worst = std::max(worst, rel);
        }
        report.per_param[inputs[p].first] = worst;
        report.max_rel_error = std::max(report.max_rel_error, worst);
    }
    return report;
}

}  // namespace pmcr
