#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "kgg/training.hpp"
#include "testutil.hpp"

namespace fs = std::filesystem;

namespace {

// Small dataset shared by the loop tests: full 24-category layout, 8x8
// images, 4 samples per category.
const kgg::Dataset& tiny_dataset() {
    static kgg::Dataset ds = [] {
        kgg::FloraSpec spec = kgg::FloraSpec::defaults();
        spec.image = 8;
        spec.samples_per_category = 10;
        return kgg::build_dataset(spec, 4, 91);
    }();
    return ds;
}

kgg::TrainingConfig tiny_config() {
    kgg::TrainingConfig c;
    c.batch_size = 8;
    c.iterations = 4;
    c.noise_dim = 16;
    c.gen_hidden = {32, 48};
    c.disc_hidden = {48, 32};
    c.embedder.hidden = {64, 32};
    c.embedder.epochs = 5;
    c.seed = 7;
    return c;
}

std::vector<kgg::DVec> grads_of(std::vector<kgg::Tensor> params) {
    std::vector<kgg::DVec> out;
    for (auto& p : params) out.push_back(p.grad());
    return out;
}

}  // namespace

TEST(DHingeLoss, HandCases) {
    auto real0 = kgg::Tensor::from({2, 1}, {0.0, 0.0});
    auto fake0 = kgg::Tensor::from({2, 1}, {0.0, 0.0});
    EXPECT_DOUBLE_EQ(kgg::d_hinge_loss(real0, fake0).item(), 2.0);

    auto real = kgg::Tensor::from({2, 1}, {2.0, 0.5});
    auto fake = kgg::Tensor::from({2, 1}, {-2.0, 0.5});
    // real term mean(0, 0.5) = 0.25; fake term mean(0, 1.5) = 0.75
    EXPECT_DOUBLE_EQ(kgg::d_hinge_loss(real, fake).item(), 1.0);
}

TEST(DHingeLoss, EmptyBatchThrows) {
    auto empty = kgg::Tensor();
    auto one = kgg::Tensor::from({1, 1}, {0.0});
    EXPECT_THROW(kgg::d_hinge_loss(empty, one), kgg::ContractError);
    EXPECT_THROW(kgg::d_hinge_loss(one, empty), kgg::ContractError);
}

TEST(GAdvLoss, HandCases) {
    EXPECT_DOUBLE_EQ(kgg::g_adv_loss(kgg::Tensor::from({2, 1}, {1.0, 1.0})).item(), -1.0);
    EXPECT_DOUBLE_EQ(kgg::g_adv_loss(kgg::Tensor::from({1, 1}, {0.0})).item(), 0.0);
    EXPECT_DOUBLE_EQ(kgg::g_adv_loss(kgg::Tensor::from({2, 1}, {2.0, -4.0})).item(), 1.0);
    EXPECT_THROW(kgg::g_adv_loss(kgg::Tensor()), kgg::ContractError);
}

TEST(TotalGLoss, HandCombination) {
    kgg::TrainingConfig cfg;
    cfg.lambda_se = 0.1;
    auto adv = kgg::Tensor::scalar(1.0);
    auto ls = kgg::Tensor::scalar(0.5);
    auto lu = kgg::Tensor::scalar(0.3);
    EXPECT_DOUBLE_EQ(kgg::total_g_loss(adv, ls, lu, cfg).item(), 1.0 + 0.1 * (0.5 + 0.3));
}

TEST(TotalGLoss, DisabledKnowledgeReturnsAdvUntouched) {
    kgg::TrainingConfig cfg;
    cfg.use_knowledge_loss = false;
    auto adv = kgg::Tensor::scalar(2.5);
    auto ls = kgg::Tensor::scalar(0.5);
    auto lu = kgg::Tensor::scalar(0.3);
    auto out = kgg::total_g_loss(adv, ls, lu, cfg);
    EXPECT_EQ(out.storage_id(), adv.storage_id());
}

TEST(TotalGLoss, MissingTermsDegradeGracefully) {
    kgg::TrainingConfig cfg;
    cfg.lambda_se = 0.1;
    auto adv = kgg::Tensor::scalar(1.0);
    auto lu = kgg::Tensor::scalar(0.3);
    EXPECT_DOUBLE_EQ(kgg::total_g_loss(adv, kgg::Tensor(), lu, cfg).item(), 1.0 + 0.1 * 0.3);
    EXPECT_EQ(kgg::total_g_loss(adv, kgg::Tensor(), kgg::Tensor(), cfg).storage_id(), adv.storage_id());
}

// With lambda_se = 0 the generator gradient must match the gradient of the
// adversarial term alone even though the knowledge terms stay in the graph.
TEST(TotalGLoss, ZeroLambdaGradientMatchesAdvAlone) {
    kgg::Rng rng(31);
    auto gen = kgg::GeneratorParams::init(4, 3, {5}, 6, rng);
    auto disc = kgg::DiscriminatorParams::init(6, 3, {7, 5}, rng);
    auto emb = kgg::EmbedderParams::init(6, {6}, 3, rng);
    emb.freeze();
    auto z1 = kgg::Tensor::randn({4, 4}, rng);
    auto v1 = kgg::Tensor::randn({4, 3}, rng);
    auto z2 = kgg::Tensor::randn({4, 4}, rng);
    auto v2 = kgg::Tensor::randn({4, 3}, rng);

    kgg::TrainingConfig cfg;
    cfg.lambda_se = 0.0;

    std::vector<kgg::DVec> with_terms, adv_only;
    {
        kgg::Tape tape;
        auto x1 = kgg::generator_forward(gen, z1, v1);
        auto adv = kgg::g_adv_loss(kgg::discriminator_forward(disc, x1, v1, false));
        auto ls = kgg::embedding_loss(emb, x1, v1);
        auto x2 = kgg::generator_forward(gen, z2, v2);
        auto lu = kgg::embedding_loss(emb, x2, v2);
        auto loss = kgg::total_g_loss(adv, ls, lu, cfg);
        auto params = gen.parameters();
        kgg::zero_grads(params);
        tape.backward(loss);
        with_terms = grads_of(params);
    }
    {
        kgg::Tape tape;
        auto x1 = kgg::generator_forward(gen, z1, v1);
        auto adv = kgg::g_adv_loss(kgg::discriminator_forward(disc, x1, v1, false));
        auto params = gen.parameters();
        kgg::zero_grads(params);
        tape.backward(adv);
        adv_only = grads_of(params);
    }
    ASSERT_EQ(with_terms.size(), adv_only.size());
    for (size_t p = 0; p < with_terms.size(); ++p)
        for (size_t i = 0; i < with_terms[p].size(); ++i)
            EXPECT_NEAR(with_terms[p][i], adv_only[p][i], 1e-12);
}

// The unseen branch has no adversarial term; its knowledge gradient must
// still reach every tensor of the single shared generator store.
TEST(WeightSharing, UnseenKnowledgeGradientReachesAllGeneratorWeights) {
    kgg::Rng rng(77);
    auto gen = kgg::GeneratorParams::init(4, 3, {5, 6}, 6, rng);
    auto emb = kgg::EmbedderParams::init(6, {6}, 3, rng);
    emb.freeze();
    auto z = kgg::Tensor::randn({8, 4}, rng);
    auto v = kgg::Tensor::randn({8, 3}, rng);

    kgg::Tape tape;
    auto loss = kgg::knowledge_loss(emb, gen, z, v);
    auto params = gen.parameters();
    kgg::zero_grads(params);
    tape.backward(loss);
    for (auto& p : params) {
        ASSERT_TRUE(p.has_grad());
        double norm = 0;
        for (double gv : p.grad()) norm += gv * gv;
        EXPECT_GT(norm, 0.0);
    }
    // The store exposed to the seen and unseen branches is one and the same.
    auto a = gen.parameters();
    auto b = gen.parameters();
    for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].storage_id(), b[i].storage_id());
}

TEST(TrainLoop, StepsAreDeterministic) {
    auto cfg = tiny_config();
    auto s1 = kgg::init_train_state(cfg, tiny_dataset());
    auto s2 = kgg::init_train_state(cfg, tiny_dataset());
    for (int i = 0; i < 3; ++i) {
        kgg::train_step(s1, tiny_dataset());
        kgg::train_step(s2, tiny_dataset());
    }
    auto p1 = s1.gen.parameters();
    auto p2 = s2.gen.parameters();
    for (size_t i = 0; i < p1.size(); ++i) EXPECT_EQ(p1[i].data(), p2[i].data());
    auto d1 = s1.disc.named_parameters();
    auto d2 = s2.disc.named_parameters();
    for (size_t i = 0; i < d1.size(); ++i) EXPECT_EQ(d1[i].second.data(), d2[i].second.data());
    EXPECT_EQ(s1.rng.serialize(), s2.rng.serialize());
    ASSERT_EQ(s1.metrics.size(), s2.metrics.size());
    for (size_t i = 0; i < s1.metrics.size(); ++i) {
        EXPECT_EQ(s1.metrics[i].d_loss, s2.metrics[i].d_loss);
        EXPECT_EQ(s1.metrics[i].g_adv, s2.metrics[i].g_adv);
        EXPECT_EQ(s1.metrics[i].l_se_seen, s2.metrics[i].l_se_seen);
        EXPECT_EQ(s1.metrics[i].l_se_unseen, s2.metrics[i].l_se_unseen);
    }
}

// The discriminator update ignores the knowledge-loss configuration: its
// first step is bit-identical with and without the knowledge terms.
TEST(TrainLoop, DiscriminatorStepIndependentOfKnowledgeConfig) {
    auto cfg_full = tiny_config();
    auto cfg_bare = tiny_config();
    cfg_bare.use_knowledge_loss = false;
    auto sf = kgg::init_train_state(cfg_full, tiny_dataset());
    auto sb = kgg::init_train_state(cfg_bare, tiny_dataset());
    kgg::train_step(sf, tiny_dataset());
    kgg::train_step(sb, tiny_dataset());
    auto df = sf.disc.named_parameters();
    auto db = sb.disc.named_parameters();
    for (size_t i = 0; i < df.size(); ++i) EXPECT_EQ(df[i].second.data(), db[i].second.data());
    // The generator step does depend on it.
    bool gen_differs = false;
    auto gf = sf.gen.parameters();
    auto gb = sb.gen.parameters();
    for (size_t i = 0; i < gf.size(); ++i)
        if (gf[i].data() != gb[i].data()) gen_differs = true;
    EXPECT_TRUE(gen_differs);
}

TEST(TrainLoop, DiscriminatorNeverSeesUnseenConditions) {
    auto st = kgg::init_train_state(tiny_config(), tiny_dataset());
    for (int i = 0; i < 4; ++i) kgg::train_step(st, tiny_dataset());
    EXPECT_EQ(st.unseen_d_evals, 0);

    // Negative control: the sensor fires when unseen ids leak into the
    // batches that reach the discriminator.
    st.seen = {st.unseen[0]};
    kgg::train_step(st, tiny_dataset());
    EXPECT_EQ(st.unseen_d_evals, 2L * tiny_config().batch_size);
}

TEST(TrainLoop, NonFiniteLossAborts) {
    auto st = kgg::init_train_state(tiny_config(), tiny_dataset());
    st.gen.layers.back().b.set(0, std::numeric_limits<double>::quiet_NaN());
    try {
        kgg::train_step(st, tiny_dataset());
        FAIL() << "expected NumericError";
    } catch (const kgg::NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("iteration"), std::string::npos);
    }
}

TEST(TrainLoop, ResumeReproducesUninterruptedRunBitExactly) {
    auto cfg = tiny_config();
    cfg.iterations = 6;
    cfg.checkpoint_every = 3;
    auto dir_a = (fs::temp_directory_path() / "kgg_train_a").string();
    auto dir_b = (fs::temp_directory_path() / "kgg_train_b").string();
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);

    auto full = kgg::init_train_state(cfg, tiny_dataset());
    kgg::train(full, tiny_dataset(), dir_a);

    auto resumed = kgg::init_train_state(cfg, tiny_dataset());
    kgg::load_train_state(resumed, dir_a + "/checkpoint-3");
    EXPECT_EQ(resumed.iteration, 3);
    kgg::train(resumed, tiny_dataset(), dir_b);

    auto pf = full.gen.parameters();
    auto pr = resumed.gen.parameters();
    for (size_t i = 0; i < pf.size(); ++i) EXPECT_EQ(pf[i].data(), pr[i].data());
    EXPECT_EQ(full.rng.serialize(), resumed.rng.serialize());

    // The two final checkpoints must be byte-identical, file by file.
    for (const auto& entry : fs::directory_iterator(dir_a + "/checkpoint-final")) {
        auto name = entry.path().filename().string();
        EXPECT_EQ(kgg::file_checksum(entry.path().string()),
                  kgg::file_checksum(dir_b + "/checkpoint-final/" + name))
            << name;
    }
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST(TrainLoop, MetricsLogIsLineDelimitedJson) {
    auto cfg = tiny_config();
    cfg.iterations = 2;
    auto dir = (fs::temp_directory_path() / "kgg_train_log").string();
    fs::remove_all(dir);
    auto st = kgg::init_train_state(cfg, tiny_dataset());
    kgg::train(st, tiny_dataset(), dir);
    std::istringstream lines(kgg::read_file(dir + "/metrics.jsonl"));
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        auto j = kgg::json::parse(line);
        EXPECT_EQ(j.at("iteration").get<long>(), n + 1);
        EXPECT_TRUE(j.contains("d_loss"));
        EXPECT_TRUE(j.contains("g_adv"));
        EXPECT_TRUE(j.contains("l_se_seen"));
        EXPECT_TRUE(j.contains("l_se_unseen"));
        ++n;
    }
    EXPECT_EQ(n, 2);
    fs::remove_all(dir);
}

TEST(TrainingConfig, JsonRoundTrip) {
    kgg::TrainingConfig c;
    c.lambda_se = 0.25;
    c.condition_mode = kgg::ConditionMode::one_hot;
    c.use_knowledge_loss = false;
    c.lse_on_seen = false;
    c.train_on_all = true;
    c.batch_size = 32;
    c.iterations = 123;
    c.d_steps = 2;
    c.noise_dim = 48;
    c.gen_hidden = {64, 96};
    c.disc_hidden = {96, 64};
    c.gen_adam.lr = 1e-3;
    c.disc_adam.beta2 = 0.95;
    c.embedder.epochs = 11;
    c.seed = 99;
    c.checkpoint_every = 17;
    auto r = kgg::training_config_from_json(kgg::training_config_to_json(c));
    EXPECT_EQ(r.lambda_se, c.lambda_se);
    EXPECT_EQ(r.condition_mode, c.condition_mode);
    EXPECT_EQ(r.use_knowledge_loss, c.use_knowledge_loss);
    EXPECT_EQ(r.lse_on_seen, c.lse_on_seen);
    EXPECT_EQ(r.train_on_all, c.train_on_all);
    EXPECT_EQ(r.batch_size, c.batch_size);
    EXPECT_EQ(r.iterations, c.iterations);
    EXPECT_EQ(r.d_steps, c.d_steps);
    EXPECT_EQ(r.noise_dim, c.noise_dim);
    EXPECT_EQ(r.gen_hidden, c.gen_hidden);
    EXPECT_EQ(r.disc_hidden, c.disc_hidden);
    EXPECT_EQ(r.gen_adam.lr, c.gen_adam.lr);
    EXPECT_EQ(r.disc_adam.beta2, c.disc_adam.beta2);
    EXPECT_EQ(r.embedder.epochs, c.embedder.epochs);
    EXPECT_EQ(r.seed, c.seed);
    EXPECT_EQ(r.checkpoint_every, c.checkpoint_every);
}

TEST(TrainingConfig, RejectsInvalidValues) {
    EXPECT_THROW(kgg::training_config_from_json({{"condition_mode", "fourier"}}), kgg::SpecError);
    EXPECT_THROW(kgg::training_config_from_json({{"lambda_se", -0.1}}), kgg::SpecError);
    EXPECT_THROW(kgg::training_config_from_json({{"batch_size", 1}}), kgg::SpecError);
    EXPECT_THROW(kgg::training_config_from_json({{"iterations", 0}}), kgg::SpecError);
}

TEST(TrainLoop, OneHotModeUsesCategoryCountConditions) {
    auto cfg = tiny_config();
    cfg.condition_mode = kgg::ConditionMode::one_hot;
    auto st = kgg::init_train_state(cfg, tiny_dataset());
    const int k = tiny_dataset().spec.num_categories();
    EXPECT_EQ(st.cond_dim(), k);
    EXPECT_EQ(st.gen.cond_dim, k);
    EXPECT_EQ(st.disc.cond_dim, k);
    // Knowledge-loss targets stay semantic even under one-hot conditions.
    EXPECT_EQ(static_cast<int>(st.target[0].size()),
              static_cast<int>(tiny_dataset().embeddings.at(0).v.size()));
    kgg::train_step(st, tiny_dataset());
    EXPECT_EQ(st.unseen_d_evals, 0);
}

TEST(TrainLoop, TrainOnAllTreatsEveryCategoryAsSeen) {
    auto cfg = tiny_config();
    cfg.train_on_all = true;
    auto st = kgg::init_train_state(cfg, tiny_dataset());
    EXPECT_TRUE(st.unseen.empty());
    EXPECT_EQ(static_cast<int>(st.seen.size()), tiny_dataset().spec.num_categories());
    EXPECT_EQ(st.seen_pool.size(), tiny_dataset().samples.size());
    kgg::train_step(st, tiny_dataset());
    EXPECT_EQ(st.metrics.back().l_se_unseen, 0.0);
}

TEST(GenerateBatch, DeterministicGroupedOutput) {
    kgg::Rng rng(5);
    auto gen = kgg::GeneratorParams::init(4, 3, {5}, 6, rng);
    std::vector<std::vector<double>> conds = {{0.1, 0.2, 0.3}, {0.9, 0.8, 0.7}};
    auto a = kgg::generate_batch(gen, conds, 3, 11);
    auto b = kgg::generate_batch(gen, conds, 3, 11);
    auto c = kgg::generate_batch(gen, conds, 3, 12);
    EXPECT_EQ(a.rows(), 6);
    EXPECT_EQ(a.cols(), 6);
    EXPECT_EQ(a.data(), b.data());
    EXPECT_NE(a.data(), c.data());
    EXPECT_THROW(kgg::generate_batch(gen, {}, 3, 1), kgg::ContractError);
    EXPECT_THROW(kgg::generate_batch(gen, {{0.1}}, 3, 1), kgg::ContractError);
}
