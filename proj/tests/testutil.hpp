#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "kgg/tensor.hpp"

// Shared oracles. These stay independent of the library's compute paths:
// the matmul reference is a scalar triple loop, and gradient checking uses
// central finite differences over fresh forward passes.

namespace kggtest {

inline kgg::Tensor triple_loop_matmul(const kgg::Tensor& a, const kgg::Tensor& b) {
    int m = a.rows(), k = a.cols(), n = b.cols();
    kgg::Tensor c({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int p = 0; p < k; ++p) s += a(i, p) * b(p, j);
            c.set(static_cast<long>(i) * n + j, s);
        }
    return c;
}

struct GradCheckResult {
    double max_rel_err = 0;
    double worst_analytic = 0;
    double worst_numeric = 0;
};

// Central-difference check of d(loss)/d(param) at `points` randomly chosen
// entries of `param`. `forward` must rebuild the loss from current values.
inline GradCheckResult finite_diff_check(const std::function<double()>& forward, kgg::Tensor param,
                                         const kgg::DVec& analytic_grad, kgg::Rng& rng,
                                         int points = 20, double h = 1e-5) {
    GradCheckResult res;
    for (int p = 0; p < points; ++p) {
        long i = rng.below(static_cast<int>(param.numel()));
        double saved = param.at(i);
        param.set(i, saved + h);
        double fp = forward();
        param.set(i, saved - h);
        double fm = forward();
        param.set(i, saved);
        double numeric = (fp - fm) / (2 * h);
        double analytic = analytic_grad[static_cast<size_t>(i)];
        double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
        double rel = std::abs(numeric - analytic) / denom;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_analytic = analytic;
            res.worst_numeric = numeric;
        }
    }
    return res;
}

}  // namespace kggtest
