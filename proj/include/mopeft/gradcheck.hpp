#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mopeft/tensor.hpp"

namespace mopeft {

struct GradMismatch {
    std::string param;
    size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradReport {
    size_t coords_checked = 0;
    double max_rel_err = 0.0;
    std::string worst_param;
    size_t worst_index = 0;
    double tol = 0.0;
    std::vector<GradMismatch> failures;

    bool passed() const { return failures.empty(); }
};

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Compares analytic gradients (one backward pass of f) against central finite
// differences over every coordinate of every named parameter. f must rebuild
// its graph from the parameter tensors' current data on each call, and return
// a scalar. Relative error uses max(denom_floor, |analytic|, |numeric|) as
// the denominator, so near-zero pairs compare under an absolute budget of
// tol*denom_floor. The floor must sit above the estimator's own error band:
// the central difference carries ~eps*|f|/h of rounding noise plus h^2/6*f'''
// of truncation error, so sharply curved losses need a larger floor than the
// default (which suits the well-conditioned single-op checks).
inline GradReport finite_diff_check(const std::function<Tensor()>& f, const NamedParams& params,
                                    double h = 1e-5, double tol = 1e-3,
                                    double denom_floor = 1e-8) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_check: step h must be positive");
    if (denom_floor <= 0.0)
        throw std::invalid_argument("finite_diff_check: denom_floor must be positive");
    for (const auto& [name, p] : params)
        if (!p.requires_grad())
            throw std::invalid_argument("finite_diff_check: parameter '" + name +
                                        "' does not require grad");

    for (const auto& [name, p] : params) const_cast<Tensor&>(p).zero_grad();
    Tensor loss = f();
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, p] : params) analytic.push_back(p.grad());

    GradReport report;
    report.tol = tol;
    for (size_t k = 0; k < params.size(); ++k) {
        Tensor p = params[k].second;
        for (size_t i = 0; i < p.numel(); ++i) {
            double saved = p.data()[i];
            p.data()[i] = saved + h;
            double fp = f().item();
            p.data()[i] = saved - h;
            double fm = f().item();
            p.data()[i] = saved;
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[k][i];
            double rel = std::fabs(a - numeric) /
                         std::max({denom_floor, std::fabs(a), std::fabs(numeric)});
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = params[k].first;
                report.worst_index = i;
            }
            if (rel > tol)
                report.failures.push_back({params[k].first, i, a, numeric, rel});
        }
    }
    return report;
}

inline std::string format_grad_report(const GradReport& r) {
    std::string out = "checked " + std::to_string(r.coords_checked) + " coordinates, max rel err " +
                      std::to_string(r.max_rel_err);
    if (!r.worst_param.empty())
        out += " at " + r.worst_param + "[" + std::to_string(r.worst_index) + "]";
    out += r.passed() ? " -- PASS" : " -- FAIL";
    if (!r.failures.empty()) {
        out += " (" + std::to_string(r.failures.size()) + " coordinates over tol " +
               std::to_string(r.tol) + ")";
        size_t shown = std::min<size_t>(r.failures.size(), 8);
        for (size_t i = 0; i < shown; ++i) {
            const auto& m = r.failures[i];
            out += "\n  " + m.param + "[" + std::to_string(m.index) + "]: analytic " +
                   std::to_string(m.analytic) + " vs numeric " + std::to_string(m.numeric) +
                   " (rel " + std::to_string(m.rel_err) + ")";
        }
        if (r.failures.size() > shown)
            out += "\n  ... " + std::to_string(r.failures.size() - shown) + " more";
    }
    return out;
}

}  // namespace mopeft
