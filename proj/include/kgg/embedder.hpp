#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "kgg/common.hpp"
#include "kgg/layers.hpp"
#include "kgg/optim.hpp"
#include "kgg/tensor.hpp"

// The domain-knowledge constraint network: an embedding regression MLP E
// trained on seen-category images to predict the category's semantic
// embedding, then frozen. The knowledge loss pulls generated images toward
// their condition through the frozen E.

namespace kgg {

struct EmbedderParams {
    int in_dim = 0;
    int out_dim = 0;
    std::vector<int> hidden;
    std::vector<DenseLayer> layers;
    bool frozen = false;

    static EmbedderParams init(int in_dim, std::vector<int> hidden, int out_dim, Rng& rng) {
        if (in_dim < 1 || out_dim < 1 || hidden.empty())
            throw ContractError("EmbedderParams: dimensions must be positive and hidden nonempty");
        EmbedderParams e;
        e.in_dim = in_dim;
        e.out_dim = out_dim;
        e.hidden = std::move(hidden);
        int in = in_dim;
        for (int width : e.hidden) {
            e.layers.push_back(DenseLayer::init(in, width, rng, std::sqrt(2.0 / in)));
            in = width;
        }
        e.layers.push_back(DenseLayer::init(in, out_dim, rng, std::sqrt(1.0 / in)));
        return e;
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
            out.emplace_back("e.w" + std::to_string(i), layers[i].w);
            out.emplace_back("e.b" + std::to_string(i), layers[i].b);
        }
        return out;
    }

    // Irreversible: detaches every weight from gradient tracking and drops
    // any stale gradient buffers, so no optimizer step can touch the
    // network again.
    void freeze() {
        for (auto& p : parameters()) {
            p.set_requires_grad(false);
            p.drop_grad();
        }
        frozen = true;
    }
};

// Sigmoid head keeps predictions in (0,1)^d, the semantic embedding range.
inline Tensor predict_embedding(const EmbedderParams& e, const Tensor& x) {
    if (x.rank() != 2 || x.cols() != e.in_dim) throw ContractError("predict_embedding: bad image shape");
    Tensor h = x;
    for (size_t i = 0; i + 1 < e.layers.size(); ++i) h = relu(e.layers[i].apply(h));
    return sigmoid(e.layers.back().apply(h));
}

// Mean over the batch of ||E(x) - v||^2.
inline Tensor embedding_loss(const EmbedderParams& e, const Tensor& x, const Tensor& v) {
    if (v.rank() != 2 || v.cols() != e.out_dim) throw ContractError("embedding_loss: bad target shape");
    if (x.rows() != v.rows()) throw ContractError("embedding_loss: batch mismatch");
    if (x.rows() == 0) throw ContractError("embedding_loss: empty batch");
    return scale(sq_l2(sub(predict_embedding(e, x), v)), 1.0 / x.rows());
}

// Knowledge loss on generated images: mean_b ||E(G(z_b, v_b)) - v_b||^2.
// E must be frozen; gradients reach only the generator (and z, v if tracked).
inline Tensor knowledge_loss(const EmbedderParams& e, const GeneratorParams& g, const Tensor& z,
                             const Tensor& v) {
    if (!e.frozen) throw ContractError("knowledge_loss requires a frozen embedder");
    if (z.rows() < 1) throw ContractError("knowledge_loss: empty batch");
    return embedding_loss(e, generator_forward(g, z, v), v);
}

struct EmbedderConfig {
    std::vector<int> hidden = {256, 128};
    int epochs = 50;
    int batch = 64;
    double val_fraction = 0.1;
    AdamConfig adam = {1e-3, 0.9, 0.999, 1e-8};
};

struct EmbedderExample {
    std::vector<double> image;
    std::vector<double> target;
};

struct EmbedderMetrics {
    double train_mse = 0;
    double val_mse = 0;
    double baseline_mse = 0;  // constant mean-target predictor on the same split
};

namespace detail {

inline void fill_embedder_batch(const std::vector<EmbedderExample>& examples, const std::vector<int>& idx,
                                size_t begin, size_t end, Tensor& x, Tensor& y) {
    const int b = static_cast<int>(end - begin);
    const int in = static_cast<int>(examples[0].image.size());
    const int out = static_cast<int>(examples[0].target.size());
    x = Tensor({b, in});
    y = Tensor({b, out});
    for (size_t r = begin; r < end; ++r) {
        const auto& ex = examples[static_cast<size_t>(idx[r])];
        for (int c = 0; c < in; ++c) x.set(static_cast<long>(r - begin) * in + c, ex.image[static_cast<size_t>(c)]);
        for (int c = 0; c < out; ++c) y.set(static_cast<long>(r - begin) * out + c, ex.target[static_cast<size_t>(c)]);
    }
}

}  // namespace detail

// Trains E on seen-category pairs and returns it frozen. A deterministic
// val slice is held out before training; metrics report val MSE next to the
// constant mean-predictor baseline on the same slice.
inline EmbedderParams train_embedder(const std::vector<EmbedderExample>& examples, const EmbedderConfig& config,
                                     uint64_t seed, EmbedderMetrics* metrics = nullptr) {
    if (examples.empty()) throw ContractError("train_embedder: empty training set");
    const int in_dim = static_cast<int>(examples[0].image.size());
    const int out_dim = static_cast<int>(examples[0].target.size());
    for (const auto& ex : examples)
        if (static_cast<int>(ex.image.size()) != in_dim || static_cast<int>(ex.target.size()) != out_dim)
            throw ContractError("train_embedder: ragged examples");

    Rng rng(mix_seed(seed, 0xe3bedde));
    EmbedderParams e = EmbedderParams::init(in_dim, config.hidden, out_dim, rng);

    std::vector<int> idx(examples.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[static_cast<size_t>(rng.below(static_cast<int>(i) + 1))]);
    size_t n_val = std::min(examples.size() - 1, static_cast<size_t>(std::floor(config.val_fraction * examples.size())));
    const size_t n_train = examples.size() - n_val;

    auto params = e.parameters();
    AdamState adam = AdamState::init(params, config.adam);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        for (size_t i = n_train - 1; i > 0; --i)
            std::swap(idx[n_val + i], idx[n_val + static_cast<size_t>(rng.below(static_cast<int>(i) + 1))]);
        for (size_t begin = 0; begin < n_train; begin += static_cast<size_t>(config.batch)) {
            size_t end = std::min(n_train, begin + static_cast<size_t>(config.batch));
            Tensor x, y;
            detail::fill_embedder_batch(examples, idx, n_val + begin, n_val + end, x, y);
            Tape tape;
            Tensor loss = embedding_loss(e, x, y);
            zero_grads(params);
            tape.backward(loss);
            adam_step(params, adam);
        }
    }

    if (metrics) {
        auto mse_on = [&](size_t begin, size_t end) {
            Tensor x, y;
            detail::fill_embedder_batch(examples, idx, begin, end, x, y);
            NoTape guard;
            return embedding_loss(e, x, y).item();
        };
        metrics->train_mse = mse_on(n_val, examples.size());
        std::vector<double> mean_target(static_cast<size_t>(out_dim), 0.0);
        for (size_t r = n_val; r < examples.size(); ++r)
            for (int c = 0; c < out_dim; ++c)
                mean_target[static_cast<size_t>(c)] += examples[static_cast<size_t>(idx[r])].target[static_cast<size_t>(c)];
        for (double& m : mean_target) m /= static_cast<double>(n_train);
        if (n_val > 0) {
            metrics->val_mse = mse_on(0, n_val);
            double base = 0;
            for (size_t r = 0; r < n_val; ++r)
                for (int c = 0; c < out_dim; ++c) {
                    double diff = examples[static_cast<size_t>(idx[r])].target[static_cast<size_t>(c)] -
                                  mean_target[static_cast<size_t>(c)];
                    base += diff * diff;
                }
            metrics->baseline_mse = base / static_cast<double>(n_val);
        }
    }

    e.freeze();
    return e;
}

}  // namespace kgg
