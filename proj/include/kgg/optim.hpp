#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "kgg/tensor.hpp"

namespace kgg {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.0;
    double beta2 = 0.9;
    double epsilon = 1e-8;
};

// Per-parameter first/second moment accumulators plus a step counter that
// advances by exactly one per update.
struct AdamState {
    AdamConfig config;
    long step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    static AdamState init(const std::vector<Tensor>& params, AdamConfig config) {
        AdamState st;
        st.config = config;
        st.m.reserve(params.size());
        st.v.reserve(params.size());
        for (const auto& p : params) {
            st.m.emplace_back(p.numel(), 0.0);
            st.v.emplace_back(p.numel(), 0.0);
        }
        return st;
    }
};

// One bias-corrected Adam update, reading each parameter's populated .grad.
// Mutates the parameter values in place; deterministic given inputs.
inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
    if (params.size() != state.m.size()) throw DimensionError("adam_step: state/parameter count mismatch");
    state.step += 1;
    const AdamConfig& c = state.config;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (size_t p = 0; p < params.size(); ++p) {
        Tensor& t = params[p];
        if (static_cast<long>(state.m[p].size()) != t.numel())
            throw DimensionError("adam_step: moment/parameter shape mismatch");
        const DVec& g = t.grad();
        std::vector<double>& m = state.m[p];
        std::vector<double>& v = state.v[p];
        DVec& x = t.mutable_data();
        for (size_t i = 0; i < g.size(); ++i) {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            x[i] -= c.lr * mhat / (std::sqrt(vhat) + c.epsilon);
        }
    }
}

inline void zero_grads(std::vector<Tensor>& params) {
    for (auto& p : params) p.zero_grad();
}

}  // namespace kgg
