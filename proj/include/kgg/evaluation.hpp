#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgg/common.hpp"
#include "kgg/flora.hpp"
#include "kgg/layers.hpp"
#include "kgg/optim.hpp"
#include "kgg/tensor.hpp"
#include "kgg/training.hpp"

// Per-category Frechet-distance scoring and attribute-constraint reporting.
// Features come from an independently trained classifier, not from the
// embedder that shaped the knowledge loss, so the metric is not coupled to
// any training objective. The same frozen extractor scores every method in
// a comparison.

namespace kgg {

// ---------------------------------------------------------------------------
// Feature extractor: a small classifier over ALL categories (its penultimate
// activations are the evaluation feature space).
// ---------------------------------------------------------------------------

struct ExtractorConfig {
    std::vector<int> hidden = {32};
    int feature_dim = 16;
    int epochs = 40;
    int batch = 64;
    AdamConfig adam = {1e-3, 0.9, 0.999, 1e-8};
};

struct FeatureExtractor {
    std::vector<DenseLayer> trunk;  // hidden lrelu layers, then the tanh feature layer
    DenseLayer head;                // feature_dim -> num_classes, training only
    int in_dim = 0;
    int feature_dim = 0;
    int num_classes = 0;
    std::string identity;  // recorded in every report that used this extractor

    // Penultimate-layer activations in [-1, 1]^feature_dim.
    Tensor features_graph(const Tensor& x) const {
        if (x.rank() != 2 || x.cols() != in_dim) throw ContractError("features: bad input shape");
        Tensor h = x;
        for (size_t i = 0; i + 1 < trunk.size(); ++i) h = leaky_relu(trunk[i].apply(h));
        return tanh(trunk.back().apply(h));
    }

    Tensor features(const Tensor& x) const {
        NoTape guard;
        return features_graph(x);
    }

    std::vector<Tensor> parameters() {
        std::vector<Tensor> out;
        for (auto& l : trunk) {
            out.push_back(l.w);
            out.push_back(l.b);
        }
        out.push_back(head.w);
        out.push_back(head.b);
        return out;
    }
};

// Trains on every category (real data only; generated images never touch
// the extractor's training set), then freezes. Deterministic in
// (dataset, config, seed).
inline FeatureExtractor train_feature_extractor(const Dataset& ds, const ExtractorConfig& config,
                                                uint64_t seed) {
    const int in_dim = static_cast<int>(ds.spec.pixels());
    const int k = ds.spec.num_categories();
    if (config.feature_dim < 1 || config.hidden.empty())
        throw ContractError("train_feature_extractor: bad architecture");

    Rng rng(mix_seed(seed, 0xfea7));
    FeatureExtractor ex;
    ex.in_dim = in_dim;
    ex.feature_dim = config.feature_dim;
    ex.num_classes = k;
    int prev = in_dim;
    for (int h : config.hidden) {
        ex.trunk.push_back(DenseLayer::init(prev, h, rng, std::sqrt(2.0 / prev)));
        prev = h;
    }
    ex.trunk.push_back(DenseLayer::init(prev, config.feature_dim, rng, std::sqrt(1.0 / prev)));
    ex.head = DenseLayer::init(config.feature_dim, k, rng, std::sqrt(1.0 / config.feature_dim));
    {
        std::string arch = "classifier-penultimate[" + std::to_string(in_dim);
        for (int h : config.hidden) arch += "-" + std::to_string(h);
        arch += "-" + std::to_string(config.feature_dim) + "-" + std::to_string(k) + "]";
        ex.identity = arch + " seed=" + std::to_string(seed);
    }

    std::vector<size_t> order(ds.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto params = ex.parameters();
    AdamState adam = AdamState::init(params, config.adam);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(rng.below(static_cast<int>(i)))]);
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(config.batch));
            const int rows = static_cast<int>(stop - start);
            if (rows < 1) continue;
            Tensor x({rows, in_dim});
            Tensor y({rows, k});
            for (int r = 0; r < rows; ++r) {
                const Sample& s = ds.samples[order[start + static_cast<size_t>(r)]];
                for (int c = 0; c < in_dim; ++c)
                    x.set(static_cast<long>(r) * in_dim + c, s.image[static_cast<size_t>(c)]);
                y.set(static_cast<long>(r) * k + s.category, 1.0);
            }
            Tape tape;
            Tensor logits = ex.head.apply(ex.features_graph(x));
            Tensor loss = scale(sq_l2(sub(logits, y)), 1.0 / rows);
            zero_grads(params);
            tape.backward(loss);
            adam_step(params, adam);
        }
    }
    for (auto& p : params) {
        p.set_requires_grad(false);
        p.drop_grad();
    }
    return ex;
}

// ---------------------------------------------------------------------------
// Gaussian statistics and the Frechet distance.
// ---------------------------------------------------------------------------

struct GaussianStats {
    EVec mu;
    EMat cov;

    int dim() const { return static_cast<int>(mu.size()); }
};

inline GaussianStats gaussian_stats(const Tensor& features) {
    if (!features.defined() || features.rank() != 2) throw ContractError("gaussian_stats: need an n x f matrix");
    const int n = features.rows(), f = features.cols();
    if (n < 2) throw ContractError("gaussian_stats: need at least 2 rows");
    ConstMatMap x(features.data().data(), n, f);
    GaussianStats s;
    s.mu = x.colwise().mean();
    EMat centered = x.rowwise() - s.mu.transpose();
    s.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
    s.cov = ((s.cov + s.cov.transpose()) / 2.0).eval();
    return s;
}

struct FrechetDiag {
    double trace_arg = 0;    // tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2) before clamping
    double min_inner_eig = 0;  // smallest eigenvalue fed to the matrix square root
};

// d^2 = ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2). The inner
// square root uses a symmetric eigendecomposition with negative eigenvalues
// clamped to 0; the final value is clamped to be nonnegative.
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b, FrechetDiag* diag = nullptr) {
    if (a.dim() != b.dim()) throw ContractError("frechet_distance: dimension mismatch");
    Eigen::SelfAdjointEigenSolver<EMat> es_a(a.cov);
    if (es_a.info() != Eigen::Success)
        throw NumericError("frechet_distance: eigendecomposition failed (||S1|| = " +
                           std::to_string(a.cov.norm()) + ")");
    EVec root_eigs = es_a.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    EMat sqrt_a = es_a.eigenvectors() * root_eigs.asDiagonal() * es_a.eigenvectors().transpose();

    EMat inner = sqrt_a * b.cov * sqrt_a;
    inner = ((inner + inner.transpose()) / 2.0).eval();
    Eigen::SelfAdjointEigenSolver<EMat> es_i(inner);
    if (es_i.info() != Eigen::Success)
        throw NumericError("frechet_distance: inner eigendecomposition failed (||S1|| = " +
                           std::to_string(a.cov.norm()) + ", ||S2|| = " + std::to_string(b.cov.norm()) + ")");
    double tr_sqrt = es_i.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    double trace_arg = a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if (diag) {
        diag->trace_arg = trace_arg;
        diag->min_inner_eig = es_i.eigenvalues().minCoeff();
    }
    return std::max(0.0, (a.mu - b.mu).squaredNorm() + trace_arg);
}

// ---------------------------------------------------------------------------
// Per-category FID report.
// ---------------------------------------------------------------------------

struct CategoryFid {
    int category = -1;
    bool unseen = false;
    double fid = 0;
    int n_real = 0;
    int n_fake = 0;
};

struct FidReport {
    std::string method;
    std::string extractor;
    uint64_t seed = 0;
    std::vector<CategoryFid> per_category;
    double seen_mean = 0;
    double unseen_mean = 0;

    json to_json() const {
        json j;
        j["method"] = method;
        j["extractor"] = extractor;
        j["seed"] = seed;
        j["seen_mean"] = seen_mean;
        j["unseen_mean"] = unseen_mean;
        j["per_category"] = json::array();
        for (const auto& c : per_category)
            j["per_category"].push_back({{"category", c.category},
                                         {"unseen", c.unseen},
                                         {"fid", c.fid},
                                         {"n_real", c.n_real},
                                         {"n_fake", c.n_fake}});
        return j;
    }
};

namespace detail {

inline Tensor sample_rows(const Dataset& ds, const std::vector<size_t>& idx) {
    const int dim = static_cast<int>(ds.spec.pixels());
    Tensor x({static_cast<int>(idx.size()), dim});
    for (size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < dim; ++c)
            x.set(static_cast<long>(r) * dim + c, ds.samples[idx[r]].image[static_cast<size_t>(c)]);
    return x;
}

inline std::vector<std::vector<size_t>> samples_by_category(const Dataset& ds) {
    std::vector<std::vector<size_t>> by_cat(static_cast<size_t>(ds.spec.num_categories()));
    for (size_t i = 0; i < ds.samples.size(); ++i)
        by_cat[static_cast<size_t>(ds.samples[i].category)].push_back(i);
    return by_cat;
}

inline void finish_means(FidReport& rep) {
    double seen_sum = 0, unseen_sum = 0;
    int seen_n = 0, unseen_n = 0;
    for (const auto& c : rep.per_category) {
        if (c.unseen) {
            unseen_sum += c.fid;
            ++unseen_n;
        } else {
            seen_sum += c.fid;
            ++seen_n;
        }
    }
    rep.seen_mean = seen_n ? seen_sum / seen_n : 0.0;
    rep.unseen_mean = unseen_n ? unseen_sum / unseen_n : 0.0;
}

}  // namespace detail

// FID between each category's real samples and n freshly generated images
// under that category's condition vector. Unseen categories' real samples
// exist only for evaluation; the report aggregates over the dataset split.
inline FidReport per_category_fid(const Dataset& ds, const GeneratorParams& gen,
                                  const std::vector<std::vector<double>>& cond_table,
                                  const FeatureExtractor& ex, int n_per_category, uint64_t seed,
                                  const std::string& method_label) {
    if (n_per_category < 2) throw ContractError("per_category_fid: need at least 2 fakes per category");
    auto by_cat = detail::samples_by_category(ds);
    FidReport rep;
    rep.method = method_label;
    rep.extractor = ex.identity;
    rep.seed = seed;
    for (int c = 0; c < ds.spec.num_categories(); ++c) {
        const auto& idx = by_cat[static_cast<size_t>(c)];
        if (idx.size() < 2) throw ContractError("per_category_fid: category " + std::to_string(c) + " lacks real samples");
        Tensor real = detail::sample_rows(ds, idx);
        Tensor fake = generate_batch(gen, {cond_table[static_cast<size_t>(c)]}, n_per_category,
                                     mix_seed(seed, static_cast<uint64_t>(c)));
        double fid = frechet_distance(gaussian_stats(ex.features(real)), gaussian_stats(ex.features(fake)));
        rep.per_category.push_back(
            {c, ds.split.is_unseen(c), fid, static_cast<int>(idx.size()), n_per_category});
    }
    detail::finish_means(rep);
    return rep;
}

// Sampling-noise floor: each category's real set split in half and scored
// against itself. Trained-model scores sit well above this.
inline FidReport real_split_fid(const Dataset& ds, const FeatureExtractor& ex) {
    auto by_cat = detail::samples_by_category(ds);
    FidReport rep;
    rep.method = "real-vs-real";
    rep.extractor = ex.identity;
    for (int c = 0; c < ds.spec.num_categories(); ++c) {
        const auto& idx = by_cat[static_cast<size_t>(c)];
        if (idx.size() < 4) throw ContractError("real_split_fid: category " + std::to_string(c) + " too small");
        std::vector<size_t> a, b;
        for (size_t i = 0; i < idx.size(); ++i) (i % 2 ? b : a).push_back(idx[i]);
        double fid = frechet_distance(gaussian_stats(ex.features(detail::sample_rows(ds, a))),
                                      gaussian_stats(ex.features(detail::sample_rows(ds, b))));
        rep.per_category.push_back(
            {c, ds.split.is_unseen(c), fid, static_cast<int>(a.size()), static_cast<int>(b.size())});
    }
    detail::finish_means(rep);
    return rep;
}

// ---------------------------------------------------------------------------
// Attribute-constraint report over generated images.
// ---------------------------------------------------------------------------

struct CategoryConstraint {
    int category = -1;
    double color = 0;
    double shape = 0;
};

struct ConstraintReport {
    std::vector<CategoryConstraint> per_category;
    double color_mean = 0;
    double shape_mean = 0;
    int n_per_category = 0;

    json to_json() const {
        json j;
        j["color_mean"] = color_mean;
        j["shape_mean"] = shape_mean;
        j["n_per_category"] = n_per_category;
        j["per_category"] = json::array();
        for (const auto& c : per_category)
            j["per_category"].push_back({{"category", c.category}, {"color", c.color}, {"shape", c.shape}});
        return j;
    }
};

// Mean oracle color/shape scores of n generated images per listed category.
inline ConstraintReport constraint_report(const GeneratorParams& gen, const std::vector<int>& categories,
                                          const std::vector<std::vector<double>>& cond_table,
                                          const FloraSpec& spec, int n_per_category, uint64_t seed) {
    if (categories.empty() || n_per_category < 1) throw ContractError("constraint_report: empty request");
    const int dim = static_cast<int>(spec.pixels());
    ConstraintReport rep;
    rep.n_per_category = n_per_category;
    for (int c : categories) {
        Tensor fake = generate_batch(gen, {cond_table[static_cast<size_t>(c)]}, n_per_category,
                                     mix_seed(seed, 0xc0u ^ static_cast<uint64_t>(c)));
        CategoryConstraint cc;
        cc.category = c;
        std::vector<double> image(static_cast<size_t>(dim));
        for (int r = 0; r < n_per_category; ++r) {
            for (int k = 0; k < dim; ++k) image[static_cast<size_t>(k)] = fake.at(static_cast<long>(r) * dim + k);
            OracleScores s = oracle_attribute_check(spec, image, c);
            cc.color += s.color;
            cc.shape += s.shape;
        }
        cc.color /= n_per_category;
        cc.shape /= n_per_category;
        rep.per_category.push_back(cc);
    }
    for (const auto& c : rep.per_category) {
        rep.color_mean += c.color;
        rep.shape_mean += c.shape;
    }
    rep.color_mean /= static_cast<double>(rep.per_category.size());
    rep.shape_mean /= static_cast<double>(rep.per_category.size());
    return rep;
}

}  // namespace kgg
