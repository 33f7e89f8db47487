#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "kgg/common.hpp"
#include "kgg/tensor.hpp"

// Network building blocks: a conditional MLP generator, a projection
// discriminator, and spectral normalization. One generator parameter store
// serves both seen- and unseen-conditioned generation; conditioning enters
// by input concatenation.

namespace kgg {

// ---------------------------------------------------------------------------
// Spectral normalization. Persistent left singular-vector estimate u is
// refined by one power-iteration step per forward pass; sigma is treated as
// a constant during backward, so W_sn = W * (1/sigma) is a plain scaling of
// the taped weight.
// ---------------------------------------------------------------------------

struct SpectralNormState {
    Tensor u;  // [rows], unit norm, persisted across steps and checkpoints
    double sigma = 1.0;
    int steps = 1;

    static SpectralNormState init(int rows, Rng& rng) {
        if (rows <= 0) throw ContractError("SpectralNormState: rows must be positive");
        SpectralNormState s;
        s.u = Tensor::randn({rows}, rng);
        double norm = std::sqrt(s.u.mat().squaredNorm());
        if (norm == 0.0) {
            s.u.set(0, 1.0);
            norm = 1.0;
        }
        s.u.mat_mut() /= norm;
        return s;
    }
};

// With update, runs the configured power-iteration steps and persists u;
// without, evaluates sigma from the persisted u directly, so an updating
// call followed by a frozen call on the same weight yields the same sigma
// (both forwards inside one loss must share it).
inline Tensor spectral_normalize(const Tensor& w, SpectralNormState& state, bool update = true) {
    if (w.rank() != 2) throw ContractError("spectral_normalize expects a 2-D weight");
    if (state.u.numel() != w.rows()) throw ContractError("spectral_normalize: u does not match row dimension");
    constexpr double eps = 1e-12;

    {
        NoTape guard;
        ConstMatMap W = w.mat();
        Eigen::VectorXd u = Eigen::Map<const Eigen::VectorXd>(state.u.data().data(), w.rows());
        if (update) {
            for (int i = 0; i < std::max(1, state.steps); ++i) {
                Eigen::VectorXd v = W.transpose() * u;
                v /= std::max(v.norm(), eps);
                u = W * v;
                u /= std::max(u.norm(), eps);
            }
            Eigen::Map<Eigen::VectorXd>(state.u.mutable_data().data(), w.rows()) = u;
        }
        // sigma = u^T W v with v = (W^T u)/|W^T u|, which collapses to |W^T u|.
        state.sigma = (W.transpose() * u).norm();
    }
    if (state.sigma < eps) {
        std::fprintf(stderr, "[kgg] spectral_normalize: sigma %.3e clamped to %.0e\n", state.sigma, eps);
        state.sigma = eps;
    }
    return scale(w, 1.0 / state.sigma);
}

// ---------------------------------------------------------------------------
// Dense layer over batch-major activations: y = x W + b with W stored
// [in x out].
// ---------------------------------------------------------------------------

struct DenseLayer {
    Tensor w;  // [in x out]
    Tensor b;  // [out]

    static DenseLayer init(int in, int out, Rng& rng, double stddev) {
        DenseLayer l;
        l.w = Tensor::randn({in, out}, rng, stddev, true);
        l.b = Tensor({out}, 0.0, true);
        return l;
    }

    Tensor apply(const Tensor& x) const { return add_rowwise(matmul(x, w), b); }
    Tensor apply_with(const Tensor& w_used, const Tensor& x) const { return add_rowwise(matmul(x, w_used), b); }
};

// ---------------------------------------------------------------------------
// Generator. Hidden layers use relu; the output layer uses tanh, so pixels
// live in [-1, 1]. He-scaled initialization; the output layer starts small
// so untrained samples sit near mid-gray.
// ---------------------------------------------------------------------------

struct GeneratorParams {
    int noise_dim = 0;
    int cond_dim = 0;
    int out_dim = 0;
    std::vector<int> hidden;
    std::vector<DenseLayer> layers;

    static GeneratorParams init(int noise_dim, int cond_dim, std::vector<int> hidden, int out_dim, Rng& rng) {
        if (noise_dim < 1 || cond_dim < 1 || out_dim < 1 || hidden.empty())
            throw ContractError("GeneratorParams: dimensions must be positive and hidden nonempty");
        GeneratorParams g;
        g.noise_dim = noise_dim;
        g.cond_dim = cond_dim;
        g.out_dim = out_dim;
        g.hidden = std::move(hidden);
        int in = noise_dim + cond_dim;
        for (int width : g.hidden) {
            g.layers.push_back(DenseLayer::init(in, width, rng, std::sqrt(2.0 / in)));
            in = width;
        }
        g.layers.push_back(DenseLayer::init(in, out_dim, rng, 0.2 * std::sqrt(1.0 / in)));
        return g;
    }

    std::vector<Tensor> parameters() {
        std::vector<Tensor> out;
        for (auto& l : layers) {
            out.push_back(l.w);
            out.push_back(l.b);
        }
        return out;
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters() {
        std::vector<std::pair<std::string, Tensor>> out;
        for (size_t i = 0; i < layers.size(); ++i) {
            out.emplace_back("g.w" + std::to_string(i), layers[i].w);
            out.emplace_back("g.b" + std::to_string(i), layers[i].b);
        }
        return out;
    }
};

inline Tensor generator_forward(const GeneratorParams& g, const Tensor& z, const Tensor& v) {
    if (z.rank() != 2 || z.cols() != g.noise_dim) throw ContractError("generator_forward: bad noise shape");
    if (v.rank() != 2 || v.cols() != g.cond_dim) throw ContractError("generator_forward: bad condition shape");
    if (z.rows() != v.rows()) throw ContractError("generator_forward: noise/condition batch mismatch");
    Tensor x = concat_cols(z, v);
    for (size_t i = 0; i + 1 < g.layers.size(); ++i) x = relu(g.layers[i].apply(x));
    return tanh(g.layers.back().apply(x));
}

// ---------------------------------------------------------------------------
// Projection discriminator: score(x, v) = psi(phi(x)) + <v, V phi(x)>. All
// trunk and head weight matrices plus the projection are spectrally
// normalized before use; biases are not.
// ---------------------------------------------------------------------------

struct DiscriminatorParams {
    int in_dim = 0;
    int cond_dim = 0;
    int feature_dim = 0;
    std::vector<DenseLayer> trunk;
    DenseLayer head;  // [f x 1]
    Tensor proj;      // [f x d]; the score contracts phi(x) against it
    std::vector<SpectralNormState> sn;  // trunk..., head, proj

    static DiscriminatorParams init(int in_dim, int cond_dim, std::vector<int> widths, Rng& rng) {
        if (in_dim < 1 || cond_dim < 1 || widths.empty())
            throw ContractError("DiscriminatorParams: dimensions must be positive and trunk nonempty");
        DiscriminatorParams d;
        d.in_dim = in_dim;
        d.cond_dim = cond_dim;
        d.feature_dim = widths.back();
        int in = in_dim;
        for (int width : widths) {
            d.trunk.push_back(DenseLayer::init(in, width, rng, std::sqrt(2.0 / in)));
            in = width;
        }
        d.head = DenseLayer::init(in, 1, rng, std::sqrt(1.0 / in));
        d.proj = Tensor::randn({in, cond_dim}, rng, std::sqrt(1.0 / in), true);
        for (const auto& l : d.trunk) d.sn.push_back(SpectralNormState::init(l.w.rows(), rng));
        d.sn.push_back(SpectralNormState::init(d.head.w.rows(), rng));
        d.sn.push_back(SpectralNormState::init(d.proj.rows(), rng));
        return d;
    }

    std::vector<Tensor> parameters() {
        std::vector<Tensor> out;
        for (auto& l : trunk) {
            out.push_back(l.w);
            out.push_back(l.b);
        }
        out.push_back(head.w);
        out.push_back(head.b);
        out.push_back(proj);
        return out;
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters() {
        std::vector<std::pair<std::string, Tensor>> out;
        for (size_t i = 0; i < trunk.size(); ++i) {
            out.emplace_back("d.w" + std::to_string(i), trunk[i].w);
            out.emplace_back("d.b" + std::to_string(i), trunk[i].b);
        }
        out.emplace_back("d.head_w", head.w);
        out.emplace_back("d.head_b", head.b);
        out.emplace_back("d.proj", proj);
        for (size_t i = 0; i < sn.size(); ++i) out.emplace_back("d.sn_u" + std::to_string(i), sn[i].u);
        return out;
    }
};

// Rescales raw discriminator weights so their top singular value stays at
// most 1. The normalized function W/sigma(W) is invariant under this, but
// without it per-coordinate Adam steps shrink relative to the growing raw
// scale and the discriminator effectively stops learning mid-run.
inline void renormalize_spectral_weights(DiscriminatorParams& d) {
    auto renorm = [](Tensor& w, SpectralNormState& s) {
        NoTape guard;
        ConstMatMap W = w.mat();
        Eigen::VectorXd u = Eigen::Map<const Eigen::VectorXd>(s.u.data().data(), w.rows());
        Eigen::VectorXd v = W.transpose() * u;
        v /= std::max(v.norm(), 1e-12);
        u = W * v;
        u /= std::max(u.norm(), 1e-12);
        Eigen::Map<Eigen::VectorXd>(s.u.mutable_data().data(), w.rows()) = u;
        double sigma = (W.transpose() * u).norm();
        if (sigma > 1.0) {
            w.mat_mut() /= sigma;
            sigma = 1.0;
        }
        s.sigma = std::max(sigma, 1e-12);
    };
    for (size_t i = 0; i < d.trunk.size(); ++i) renorm(d.trunk[i].w, d.sn[i]);
    renorm(d.head.w, d.sn[d.trunk.size()]);
    renorm(d.proj, d.sn[d.trunk.size() + 1]);
}

// Returns a [B x 1] column of scores. `update_sn` refines the persistent
// power-iteration state and should be true exactly once per optimization
// step (the first forward) and false during evaluation.
inline Tensor discriminator_forward(DiscriminatorParams& d, const Tensor& x, const Tensor& v,
                                    bool update_sn = true) {
    if (x.rank() != 2 || x.cols() != d.in_dim) throw ContractError("discriminator_forward: bad image shape");
    if (v.rank() != 2 || v.cols() != d.cond_dim) throw ContractError("discriminator_forward: bad condition shape");
    if (x.rows() != v.rows()) throw ContractError("discriminator_forward: image/condition batch mismatch");
    Tensor h = x;
    for (size_t i = 0; i < d.trunk.size(); ++i) {
        Tensor w_sn = spectral_normalize(d.trunk[i].w, d.sn[i], update_sn);
        h = leaky_relu(d.trunk[i].apply_with(w_sn, h), 0.1);
    }
    Tensor head_sn = spectral_normalize(d.head.w, d.sn[d.trunk.size()], update_sn);
    Tensor psi = d.head.apply_with(head_sn, h);
    Tensor proj_sn = spectral_normalize(d.proj, d.sn[d.trunk.size() + 1], update_sn);
    Tensor projection = row_sum(mul(matmul(h, proj_sn), v));
    return add(psi, projection);
}

}  // namespace kgg
