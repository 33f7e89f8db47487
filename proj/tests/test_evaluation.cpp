#include <gtest/gtest.h>

#include <cmath>

#include "kgg/evaluation.hpp"
#include "testutil.hpp"

namespace {

// Shared small dataset (8x8, 10 samples per category, 4 unseen).
const kgg::Dataset& eval_dataset() {
    static kgg::Dataset ds = [] {
        kgg::FloraSpec spec = kgg::FloraSpec::defaults();
        spec.image = 8;
        spec.samples_per_category = 20;
        return kgg::build_dataset(spec, 4, 131);
    }();
    return ds;
}

const kgg::FeatureExtractor& eval_extractor() {
    static kgg::FeatureExtractor ex = [] {
        kgg::ExtractorConfig cfg;
        cfg.hidden = {96};
        cfg.feature_dim = 8;
        cfg.epochs = 120;
        cfg.adam.lr = 2e-3;
        return kgg::train_feature_extractor(eval_dataset(), cfg, 5);
    }();
    return ex;
}

kgg::GaussianStats stats_1d(double mu, double var) {
    kgg::GaussianStats s;
    s.mu = kgg::EVec::Constant(1, mu);
    s.cov = kgg::EMat::Constant(1, 1, var);
    return s;
}

// Random PSD covariance with eigenvalues in [lo, hi], built from the Q of a
// Gram-Schmidt pass over a random matrix.
kgg::GaussianStats random_stats(int d, kgg::Rng& rng, double lo, double hi) {
    kgg::EMat a(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
    Eigen::HouseholderQR<kgg::EMat> qr(a);
    kgg::EMat q = qr.householderQ();
    kgg::EVec eigs(d);
    for (int i = 0; i < d; ++i) eigs(i) = rng.uniform(lo, hi);
    kgg::GaussianStats s;
    s.cov = q * eigs.asDiagonal() * q.transpose();
    s.cov = ((s.cov + s.cov.transpose()) / 2.0).eval();
    s.mu = kgg::EVec(d);
    for (int i = 0; i < d; ++i) s.mu(i) = rng.normal();
    return s;
}

}  // namespace

TEST(GaussianStats, DegenerateAndHandCases) {
    auto constant = kgg::Tensor::from({3, 2}, {4.0, -1.0, 4.0, -1.0, 4.0, -1.0});
    auto s = kgg::gaussian_stats(constant);
    EXPECT_DOUBLE_EQ(s.mu(0), 4.0);
    EXPECT_DOUBLE_EQ(s.mu(1), -1.0);
    EXPECT_NEAR(s.cov.norm(), 0.0, 1e-15);

    auto one_d = kgg::gaussian_stats(kgg::Tensor::from({2, 1}, {0.0, 2.0}));
    EXPECT_DOUBLE_EQ(one_d.mu(0), 1.0);
    EXPECT_DOUBLE_EQ(one_d.cov(0, 0), 2.0);  // unbiased

    EXPECT_THROW(kgg::gaussian_stats(kgg::Tensor::from({1, 3}, {1, 2, 3})), kgg::ContractError);
    EXPECT_THROW(kgg::gaussian_stats(kgg::Tensor()), kgg::ContractError);
}

// Independent oracle: explicit two-pass mean/covariance loops.
TEST(GaussianStats, MatchesTwoPassReference) {
    kgg::Rng rng(17);
    const int n = 500, f = 4;
    kgg::Tensor x = kgg::Tensor::randn({n, f}, rng, 2.0);

    std::vector<double> mean(f, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < f; ++j) mean[static_cast<size_t>(j)] += x(i, j);
    for (auto& m : mean) m /= n;
    std::vector<std::vector<double>> cov(f, std::vector<double>(f, 0.0));
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < f; ++a)
            for (int b = 0; b < f; ++b)
                cov[static_cast<size_t>(a)][static_cast<size_t>(b)] +=
                    (x(i, a) - mean[static_cast<size_t>(a)]) * (x(i, b) - mean[static_cast<size_t>(b)]);
    for (auto& row : cov)
        for (auto& v : row) v /= (n - 1);

    auto s = kgg::gaussian_stats(x);
    for (int j = 0; j < f; ++j) EXPECT_NEAR(s.mu(j), mean[static_cast<size_t>(j)], 1e-10);
    for (int a = 0; a < f; ++a)
        for (int b = 0; b < f; ++b)
            EXPECT_NEAR(s.cov(a, b), cov[static_cast<size_t>(a)][static_cast<size_t>(b)], 1e-10);
}

TEST(FrechetDistance, IdenticalStatsIsZero) {
    kgg::Rng rng(3);
    auto s = random_stats(6, rng, 0.5, 3.0);
    EXPECT_LE(kgg::frechet_distance(s, s), 1e-8);
}

TEST(FrechetDistance, IdentityCovarianceMeanShift) {
    kgg::Rng rng(4);
    for (int rep = 0; rep < 10; ++rep) {
        const int d = 5;
        kgg::GaussianStats a, b;
        a.cov = kgg::EMat::Identity(d, d);
        b.cov = kgg::EMat::Identity(d, d);
        a.mu = kgg::EVec(d);
        b.mu = kgg::EVec(d);
        for (int i = 0; i < d; ++i) {
            a.mu(i) = rng.normal();
            b.mu(i) = rng.normal();
        }
        double expected = (a.mu - b.mu).squaredNorm();
        EXPECT_NEAR(kgg::frechet_distance(a, b), expected, 1e-8);
    }
}

TEST(FrechetDistance, OneDimensionalClosedForm) {
    kgg::Rng rng(9);
    for (int rep = 0; rep < 20; ++rep) {
        double mu1 = rng.uniform(-3, 3), mu2 = rng.uniform(-3, 3);
        double s1 = rng.uniform(0.1, 2.0), s2 = rng.uniform(0.1, 2.0);
        double expected = (mu1 - mu2) * (mu1 - mu2) + (s1 - s2) * (s1 - s2);
        EXPECT_NEAR(kgg::frechet_distance(stats_1d(mu1, s1 * s1), stats_1d(mu2, s2 * s2)), expected, 1e-8);
    }
}

TEST(FrechetDistance, Symmetry) {
    kgg::Rng rng(21);
    for (int rep = 0; rep < 10; ++rep) {
        auto a = random_stats(6, rng, 0.1, 10.0);
        auto b = random_stats(6, rng, 0.1, 10.0);
        EXPECT_NEAR(kgg::frechet_distance(a, b), kgg::frechet_distance(b, a), 1e-8);
    }
}

// On well-conditioned covariance pairs the clamps must stay inactive.
TEST(FrechetDistance, ClampInactiveOnWellConditionedInputs) {
    kgg::Rng rng(33);
    for (int rep = 0; rep < 20; ++rep) {
        auto a = random_stats(8, rng, 0.1, 10.0);
        auto b = random_stats(8, rng, 0.1, 10.0);
        kgg::FrechetDiag diag;
        (void)kgg::frechet_distance(a, b, &diag);
        EXPECT_GE(diag.min_inner_eig, -1e-6);
    }
}

TEST(FrechetDistance, DimensionMismatchThrows) {
    kgg::Rng rng(2);
    auto a = random_stats(3, rng, 0.5, 2.0);
    auto b = random_stats(4, rng, 0.5, 2.0);
    EXPECT_THROW(kgg::frechet_distance(a, b), kgg::ContractError);
}

TEST(FeatureExtractor, SeparatesCategoriesAndIsFrozen) {
    const auto& ds = eval_dataset();
    auto ex = eval_extractor();

    // Training-set argmax accuracy well above the 1/24 chance floor.
    int correct = 0, total = 0;
    auto by_cat = kgg::detail::samples_by_category(ds);
    for (int c = 0; c < ds.spec.num_categories(); ++c) {
        auto x = kgg::detail::sample_rows(ds, by_cat[static_cast<size_t>(c)]);
        kgg::NoTape guard;
        auto logits = ex.head.apply(ex.features_graph(x));
        for (int r = 0; r < logits.rows(); ++r) {
            int best = 0;
            for (int k = 1; k < logits.cols(); ++k)
                if (logits(r, k) > logits(r, best)) best = k;
            correct += (best == c);
            ++total;
        }
    }
    EXPECT_GT(static_cast<double>(correct) / total, 0.9)
        << "classifier accuracy " << static_cast<double>(correct) / total;

    for (auto& p : ex.parameters()) EXPECT_FALSE(p.requires_grad());

    // Feature range respects the tanh tap.
    auto f = ex.features(kgg::detail::sample_rows(ds, by_cat[0]));
    for (long i = 0; i < f.numel(); ++i) {
        EXPECT_LE(f.at(i), 1.0);
        EXPECT_GE(f.at(i), -1.0);
    }
}

TEST(PerCategoryFid, RealSplitFloorFarBelowUntrainedGenerator) {
    const auto& ds = eval_dataset();
    const auto& ex = eval_extractor();

    auto floor_report = kgg::real_split_fid(ds, ex);
    ASSERT_EQ(static_cast<int>(floor_report.per_category.size()), ds.spec.num_categories());

    kgg::Rng rng(44);
    auto gen = kgg::GeneratorParams::init(16, static_cast<int>(ds.embeddings.at(0).v.size()), {32, 48},
                                          static_cast<int>(ds.spec.pixels()), rng);
    std::vector<std::vector<double>> conds;
    for (int c = 0; c < ds.spec.num_categories(); ++c) conds.push_back(ds.embeddings.at(c).v);
    auto untrained = kgg::per_category_fid(ds, gen, conds, ex, 10, 7, "untrained");

    double floor_mean = (floor_report.seen_mean * static_cast<double>(ds.split.seen.size()) +
                         floor_report.unseen_mean * static_cast<double>(ds.split.unseen.size())) /
                        ds.spec.num_categories();
    double untrained_mean = (untrained.seen_mean * static_cast<double>(ds.split.seen.size()) +
                             untrained.unseen_mean * static_cast<double>(ds.split.unseen.size())) /
                            ds.spec.num_categories();
    EXPECT_LT(floor_mean, 0.1 * untrained_mean)
        << "floor mean " << floor_mean << " vs untrained mean " << untrained_mean;

    // Seen mean aggregates exactly the seen categories.
    int seen_rows = 0;
    for (const auto& c : untrained.per_category) seen_rows += !c.unseen;
    EXPECT_EQ(seen_rows, static_cast<int>(ds.split.seen.size()));
    for (const auto& c : untrained.per_category) EXPECT_GE(c.fid, 0.0);
}

TEST(PerCategoryFid, DeterministicGivenSeed) {
    const auto& ds = eval_dataset();
    const auto& ex = eval_extractor();
    kgg::Rng rng(45);
    auto gen = kgg::GeneratorParams::init(16, static_cast<int>(ds.embeddings.at(0).v.size()), {32},
                                          static_cast<int>(ds.spec.pixels()), rng);
    std::vector<std::vector<double>> conds;
    for (int c = 0; c < ds.spec.num_categories(); ++c) conds.push_back(ds.embeddings.at(c).v);
    auto a = kgg::per_category_fid(ds, gen, conds, ex, 8, 3, "m");
    auto b = kgg::per_category_fid(ds, gen, conds, ex, 8, 3, "m");
    ASSERT_EQ(a.per_category.size(), b.per_category.size());
    for (size_t i = 0; i < a.per_category.size(); ++i) EXPECT_EQ(a.per_category[i].fid, b.per_category[i].fid);
    EXPECT_EQ(a.seen_mean, b.seen_mean);
    EXPECT_EQ(a.unseen_mean, b.unseen_mean);
}

TEST(ConstraintReport, UntrainedNearRandomBaselineAndInRange) {
    const auto& ds = eval_dataset();
    kgg::Rng rng(46);
    auto gen = kgg::GeneratorParams::init(16, static_cast<int>(ds.embeddings.at(0).v.size()), {32, 48},
                                          static_cast<int>(ds.spec.pixels()), rng);
    std::vector<std::vector<double>> conds;
    for (int c = 0; c < ds.spec.num_categories(); ++c) conds.push_back(ds.embeddings.at(c).v);

    auto rep = kgg::constraint_report(gen, ds.split.unseen, conds, ds.spec, 12, 9);
    ASSERT_EQ(rep.per_category.size(), ds.split.unseen.size());
    for (const auto& c : rep.per_category) {
        EXPECT_GE(c.color, 0.0);
        EXPECT_LE(c.color, 1.0);
        EXPECT_GE(c.shape, 0.0);
        EXPECT_LE(c.shape, 1.0);
    }

    // Noise-image baseline for the same categories.
    kgg::Rng noise_rng(99);
    double noise_color = 0;
    int count = 0;
    std::vector<double> image(static_cast<size_t>(ds.spec.pixels()));
    for (int c : ds.split.unseen)
        for (int r = 0; r < 12; ++r) {
            for (auto& v : image) v = noise_rng.uniform(-1.0, 1.0);
            noise_color += kgg::oracle_attribute_check(ds.spec, image, c).color;
            ++count;
        }
    noise_color /= count;
    EXPECT_NEAR(rep.color_mean, noise_color, 0.1)
        << "untrained " << rep.color_mean << " vs noise baseline " << noise_color;
}

TEST(ConstraintReport, JsonShape) {
    const auto& ds = eval_dataset();
    kgg::Rng rng(47);
    auto gen = kgg::GeneratorParams::init(16, static_cast<int>(ds.embeddings.at(0).v.size()), {32},
                                          static_cast<int>(ds.spec.pixels()), rng);
    std::vector<std::vector<double>> conds;
    for (int c = 0; c < ds.spec.num_categories(); ++c) conds.push_back(ds.embeddings.at(c).v);
    auto rep = kgg::constraint_report(gen, {ds.split.unseen[0]}, conds, ds.spec, 3, 1);
    auto j = rep.to_json();
    EXPECT_TRUE(j.contains("color_mean"));
    EXPECT_TRUE(j.contains("shape_mean"));
    EXPECT_EQ(j["per_category"].size(), 1u);
    EXPECT_EQ(j["n_per_category"].get<int>(), 3);
}
