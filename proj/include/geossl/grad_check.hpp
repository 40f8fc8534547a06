#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "geossl/tensor.hpp"

namespace geossl {

struct GradCheckReport {
    double max_rel_err = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    int worst_param = -1;
    int worst_index = -1;
};

// Central-difference gradient check in double precision.
//
// `build` receives a fresh Graph and one leaf id per parameter block (values
// taken from `params`, requires_grad on) and must return the id of a scalar
// loss node. The analytic gradient from one backward pass is compared against
// (f(x+eps) - f(x-eps)) / (2 eps) for every element of every block. Relative
// error uses max(|analytic|, |numeric|, denom_floor) as the denominator; the
// floor keeps near-zero gradients from being judged by the cancellation noise
// of the finite-difference quotient itself (~1e-11 absolute for losses of
// order one), which would otherwise dominate the ratio.
template <typename BuildFn>
GradCheckReport grad_check(const std::vector<std::vector<double>>& params,
                           const std::vector<std::pair<int, int>>& shapes, BuildFn build,
                           double eps = 1e-5, double denom_floor = 1e-6) {
    auto eval = [&](const std::vector<std::vector<double>>& values, bool with_grad,
                    std::vector<std::vector<double>>* grads_out) {
        Graph<double> g;
        std::vector<int> ids;
        ids.reserve(values.size());
        for (size_t p = 0; p < values.size(); ++p) {
            ids.push_back(
                g.leaf(shapes[p].first, shapes[p].second, values[p], /*requires_grad=*/true));
        }
        const int loss = build(g, ids);
        const double value = g.scalar(loss);
        if (with_grad) {
            g.backward(loss);
            grads_out->clear();
            for (size_t p = 0; p < values.size(); ++p) {
                grads_out->push_back(g.grad(ids[p]));
            }
        }
        return value;
    };

    std::vector<std::vector<double>> analytic;
    eval(params, true, &analytic);

    GradCheckReport report;
    std::vector<std::vector<double>> probe = params;
    for (size_t p = 0; p < params.size(); ++p) {
        for (size_t i = 0; i < params[p].size(); ++i) {
            const double saved = probe[p][i];
            probe[p][i] = saved + eps;
            const double fp = eval(probe, false, nullptr);
            probe[p][i] = saved - eps;
            const double fm = eval(probe, false, nullptr);
            probe[p][i] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[p][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), denom_floor});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
                report.worst_param = static_cast<int>(p);
                report.worst_index = static_cast<int>(i);
            }
        }
    }
    return report;
}

}  // namespace geossl
