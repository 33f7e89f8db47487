#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgg/checkpoint.hpp"
#include "kgg/common.hpp"
#include "kgg/embedder.hpp"
#include "kgg/flora.hpp"
#include "kgg/layers.hpp"
#include "kgg/optim.hpp"
#include "kgg/tensor.hpp"

// The training loop: alternating hinge-loss discriminator/generator updates
// with a weight-shared generator serving seen and unseen conditions. Seen
// categories learn adversarially; unseen categories receive gradient only
// through the frozen embedder's knowledge loss. One parameter store, one
// discriminator, strict seen-only discriminator exposure.

namespace kgg {

enum class ConditionMode { embedding, one_hot };

struct TrainingConfig {
    double lambda_se = 0.1;
    ConditionMode condition_mode = ConditionMode::embedding;
    bool use_knowledge_loss = true;
    // The concrete objective applies the knowledge loss to both the seen and
    // unseen generator halves; clearing this keeps only the unseen term (the
    // general form of the objective).
    bool lse_on_seen = true;
    // Upper-bound variant: every category is treated as seen (real data for
    // all), isolating the effect of data availability.
    bool train_on_all = false;
    int batch_size = 64;
    int iterations = 5000;
    int d_steps = 1;
    int noise_dim = 64;
    std::vector<int> gen_hidden = {128, 256};
    std::vector<int> disc_hidden = {256, 128};
    AdamConfig gen_adam = {2e-4, 0.0, 0.9, 1e-8};
    AdamConfig disc_adam = {2e-4, 0.0, 0.9, 1e-8};
    EmbedderConfig embedder;
    uint64_t seed = 1;
    int checkpoint_every = 0;  // 0: only the final checkpoint

    void validate() const {
        if (lambda_se < 0) throw SpecError("TrainingConfig: lambda_se must be nonnegative");
        if (batch_size < 2) throw SpecError("TrainingConfig: batch_size must be >= 2");
        if (iterations < 1) throw SpecError("TrainingConfig: iterations must be >= 1");
        if (d_steps < 1) throw SpecError("TrainingConfig: d_steps must be >= 1");
        if (noise_dim < 1) throw SpecError("TrainingConfig: noise_dim must be >= 1");
    }
};

inline json training_config_to_json(const TrainingConfig& c) {
    json j;
    j["lambda_se"] = c.lambda_se;
    j["condition_mode"] = c.condition_mode == ConditionMode::embedding ? "embedding" : "one_hot";
    j["use_knowledge_loss"] = c.use_knowledge_loss;
    j["lse_on_seen"] = c.lse_on_seen;
    j["train_on_all"] = c.train_on_all;
    j["batch_size"] = c.batch_size;
    j["iterations"] = c.iterations;
    j["d_steps"] = c.d_steps;
    j["noise_dim"] = c.noise_dim;
    j["gen_hidden"] = c.gen_hidden;
    j["disc_hidden"] = c.disc_hidden;
    j["gen_adam"] = {{"lr", c.gen_adam.lr}, {"beta1", c.gen_adam.beta1}, {"beta2", c.gen_adam.beta2}};
    j["disc_adam"] = {{"lr", c.disc_adam.lr}, {"beta1", c.disc_adam.beta1}, {"beta2", c.disc_adam.beta2}};
    j["embedder"] = {{"hidden", c.embedder.hidden},
                     {"epochs", c.embedder.epochs},
                     {"batch", c.embedder.batch},
                     {"val_fraction", c.embedder.val_fraction},
                     {"lr", c.embedder.adam.lr}};
    j["seed"] = c.seed;
    j["checkpoint_every"] = c.checkpoint_every;
    return j;
}

inline TrainingConfig training_config_from_json(const json& j) {
    TrainingConfig c;
    c.lambda_se = j.value("lambda_se", c.lambda_se);
    std::string mode = j.value("condition_mode", "embedding");
    if (mode == "embedding")
        c.condition_mode = ConditionMode::embedding;
    else if (mode == "one_hot")
        c.condition_mode = ConditionMode::one_hot;
    else
        throw SpecError("TrainingConfig: unknown condition_mode '" + mode + "'");
    c.use_knowledge_loss = j.value("use_knowledge_loss", c.use_knowledge_loss);
    c.lse_on_seen = j.value("lse_on_seen", c.lse_on_seen);
    c.train_on_all = j.value("train_on_all", c.train_on_all);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.iterations = j.value("iterations", c.iterations);
    c.d_steps = j.value("d_steps", c.d_steps);
    c.noise_dim = j.value("noise_dim", c.noise_dim);
    c.gen_hidden = j.value("gen_hidden", c.gen_hidden);
    c.disc_hidden = j.value("disc_hidden", c.disc_hidden);
    if (j.contains("gen_adam")) {
        c.gen_adam.lr = j["gen_adam"].value("lr", c.gen_adam.lr);
        c.gen_adam.beta1 = j["gen_adam"].value("beta1", c.gen_adam.beta1);
        c.gen_adam.beta2 = j["gen_adam"].value("beta2", c.gen_adam.beta2);
    }
    if (j.contains("disc_adam")) {
        c.disc_adam.lr = j["disc_adam"].value("lr", c.disc_adam.lr);
        c.disc_adam.beta1 = j["disc_adam"].value("beta1", c.disc_adam.beta1);
        c.disc_adam.beta2 = j["disc_adam"].value("beta2", c.disc_adam.beta2);
    }
    if (j.contains("embedder")) {
        c.embedder.hidden = j["embedder"].value("hidden", c.embedder.hidden);
        c.embedder.epochs = j["embedder"].value("epochs", c.embedder.epochs);
        c.embedder.batch = j["embedder"].value("batch", c.embedder.batch);
        c.embedder.val_fraction = j["embedder"].value("val_fraction", c.embedder.val_fraction);
        c.embedder.adam.lr = j["embedder"].value("lr", c.embedder.adam.lr);
    }
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

// mean(max(0, 1 - real)) + mean(max(0, 1 + fake)), the hinge discriminator
// objective.
inline Tensor d_hinge_loss(const Tensor& real_scores, const Tensor& fake_scores) {
    if (!real_scores.defined() || !fake_scores.defined()) throw ContractError("d_hinge_loss: empty batch");
    Tensor real_term = mean(relu(scale(add_scalar(real_scores, -1.0), -1.0)));
    Tensor fake_term = mean(relu(add_scalar(fake_scores, 1.0)));
    return add(real_term, fake_term);
}

// Negative mean score on generated seen-category images.
inline Tensor g_adv_loss(const Tensor& fake_scores) {
    if (!fake_scores.defined()) throw ContractError("g_adv_loss: empty batch");
    return scale(mean(fake_scores), -1.0);
}

// adv + lambda * (L_se(G1) + L_se(G2)). Either knowledge term may be an
// undefined tensor when its sub-batch does not exist; with the knowledge
// loss disabled the adversarial term is returned untouched.
inline Tensor total_g_loss(const Tensor& adv, const Tensor& lse_seen, const Tensor& lse_unseen,
                           const TrainingConfig& config) {
    if (!config.use_knowledge_loss) return adv;
    Tensor knowledge;
    if (lse_seen.defined() && lse_unseen.defined())
        knowledge = add(lse_seen, lse_unseen);
    else if (lse_seen.defined())
        knowledge = lse_seen;
    else if (lse_unseen.defined())
        knowledge = lse_unseen;
    else
        return adv;
    return add(adv, scale(knowledge, config.lambda_se));
}

// ---------------------------------------------------------------------------
// Training state.
// ---------------------------------------------------------------------------

struct MetricRecord {
    long iteration = 0;
    double d_loss = 0;
    double g_adv = 0;
    double l_se_seen = 0;
    double l_se_unseen = 0;

    json to_json() const {
        return {{"iteration", iteration}, {"d_loss", d_loss},         {"g_adv", g_adv},
                {"l_se_seen", l_se_seen}, {"l_se_unseen", l_se_unseen}};
    }
};

struct TrainState {
    TrainingConfig config;
    GeneratorParams gen;
    DiscriminatorParams disc;
    EmbedderParams embedder;
    EmbedderMetrics embedder_metrics;
    AdamState gen_adam;
    AdamState disc_adam;
    Rng rng;
    long iteration = 0;
    // Counts discriminator evaluations conditioned on unseen categories;
    // the isolation invariant requires this to stay 0 for an entire run.
    long unseen_d_evals = 0;
    std::vector<int> seen;    // category ids with real data
    std::vector<int> unseen;  // category ids served only through L_se
    std::vector<std::vector<double>> cond;    // per category: generator/discriminator condition
    std::vector<std::vector<double>> target;  // per category: semantic embedding (L_se target)
    std::vector<int> seen_pool;               // dataset sample indices of seen categories
    std::vector<MetricRecord> metrics;

    int cond_dim() const { return static_cast<int>(cond.empty() ? 0 : cond[0].size()); }
};

namespace detail {

inline bool contains(const std::vector<int>& xs, int x) {
    return std::find(xs.begin(), xs.end(), x) != xs.end();
}

}  // namespace detail

// Builds networks, trains and freezes the embedder on seen data, and
// prepares per-category condition/target tables. Deterministic in
// (config, dataset).
inline TrainState init_train_state(const TrainingConfig& config, const Dataset& ds) {
    config.validate();
    TrainState st;
    st.config = config;
    const int num_categories = ds.spec.num_categories();
    const int image_dim = static_cast<int>(ds.spec.pixels());

    if (config.train_on_all) {
        for (int c = 0; c < num_categories; ++c) st.seen.push_back(c);
    } else {
        st.seen = ds.split.seen;
        st.unseen = ds.split.unseen;
    }
    if (st.seen.empty()) throw SpecError("init_train_state: no seen categories");

    const int embed_dim = static_cast<int>(ds.embeddings.begin()->second.v.size());
    st.cond.resize(static_cast<size_t>(num_categories));
    st.target.resize(static_cast<size_t>(num_categories));
    for (int c = 0; c < num_categories; ++c) {
        st.target[static_cast<size_t>(c)] = ds.embeddings.at(c).v;
        st.cond[static_cast<size_t>(c)] = config.condition_mode == ConditionMode::one_hot
                                              ? one_hot(c, num_categories)
                                              : ds.embeddings.at(c).v;
    }

    for (size_t i = 0; i < ds.samples.size(); ++i)
        if (detail::contains(st.seen, ds.samples[i].category)) st.seen_pool.push_back(static_cast<int>(i));
    if (st.seen_pool.empty()) throw SpecError("init_train_state: dataset has no seen-category samples");

    Rng net_rng(mix_seed(config.seed, 0x9e7));
    st.gen = GeneratorParams::init(config.noise_dim, st.cond_dim(), config.gen_hidden, image_dim, net_rng);
    st.disc = DiscriminatorParams::init(image_dim, st.cond_dim(), config.disc_hidden, net_rng);

    std::vector<EmbedderExample> pairs;
    for (int i : st.seen_pool)
        pairs.push_back({ds.samples[static_cast<size_t>(i)].image,
                         st.target[static_cast<size_t>(ds.samples[static_cast<size_t>(i)].category)]});
    st.embedder = train_embedder(pairs, config.embedder, config.seed, &st.embedder_metrics);
    (void)embed_dim;

    auto gp = st.gen.parameters();
    auto dp = st.disc.parameters();
    st.gen_adam = AdamState::init(gp, config.gen_adam);
    st.disc_adam = AdamState::init(dp, config.disc_adam);
    st.rng = Rng(mix_seed(config.seed, 0x7a41));
    return st;
}

namespace detail {

// Uniform category draw; every row's id is checked against the unseen set
// when the batch is destined for the discriminator.
inline std::vector<int> draw_categories(Rng& rng, const std::vector<int>& from, int n) {
    std::vector<int> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = from[static_cast<size_t>(rng.below(static_cast<int>(from.size())))];
    return out;
}

inline Tensor rows_from_table(const std::vector<std::vector<double>>& table, const std::vector<int>& cats) {
    const int d = static_cast<int>(table[static_cast<size_t>(cats[0])].size());
    Tensor out({static_cast<int>(cats.size()), d});
    for (size_t r = 0; r < cats.size(); ++r)
        for (int c = 0; c < d; ++c)
            out.set(static_cast<long>(r) * d + c, table[static_cast<size_t>(cats[r])][static_cast<size_t>(c)]);
    return out;
}

inline Tensor noise_batch(Rng& rng, int rows, int dim) {
    Tensor z({rows, dim});
    for (long i = 0; i < z.numel(); ++i) z.set(i, rng.normal());
    return z;
}

}  // namespace detail

// One alternating update: config.d_steps hinge discriminator updates on
// seen real/fake batches, then one generator update on the combined
// objective. Deterministic given the state's RNG.
inline void train_step(TrainState& st, const Dataset& ds) {
    const TrainingConfig& cfg = st.config;
    const int B = cfg.batch_size;
    const int image_dim = static_cast<int>(ds.spec.pixels());

    auto count_unseen = [&st](const std::vector<int>& cats) {
        for (int c : cats)
            if (detail::contains(st.unseen, c)) ++st.unseen_d_evals;
    };

    auto gen_params = st.gen.parameters();
    auto disc_params = st.disc.parameters();

    MetricRecord rec;
    rec.iteration = st.iteration + 1;

    for (int dstep = 0; dstep < cfg.d_steps; ++dstep) {
        Tensor x_real({B, image_dim});
        std::vector<int> real_cats(static_cast<size_t>(B));
        for (int b = 0; b < B; ++b) {
            int s = st.seen_pool[static_cast<size_t>(st.rng.below(static_cast<int>(st.seen_pool.size())))];
            const Sample& sample = ds.samples[static_cast<size_t>(s)];
            real_cats[static_cast<size_t>(b)] = sample.category;
            for (int c = 0; c < image_dim; ++c)
                x_real.set(static_cast<long>(b) * image_dim + c, sample.image[static_cast<size_t>(c)]);
        }
        std::vector<int> fake_cats = detail::draw_categories(st.rng, st.seen, B);
        Tensor z = detail::noise_batch(st.rng, B, cfg.noise_dim);
        Tensor v_real = detail::rows_from_table(st.cond, real_cats);
        Tensor v_fake = detail::rows_from_table(st.cond, fake_cats);

        Tensor x_fake;
        {
            NoTape guard;  // the generator is a constant during D updates
            x_fake = generator_forward(st.gen, z, v_fake);
        }

        Tape tape;
        count_unseen(real_cats);
        Tensor real_scores = discriminator_forward(st.disc, x_real, v_real, true);
        count_unseen(fake_cats);
        Tensor fake_scores = discriminator_forward(st.disc, x_fake, v_fake, false);
        Tensor loss = d_hinge_loss(real_scores, fake_scores);
        rec.d_loss = loss.item();
        zero_grads(disc_params);
        tape.backward(loss);
        adam_step(disc_params, st.disc_adam);
        renormalize_spectral_weights(st.disc);
    }

    {
        std::vector<int> seen_cats = detail::draw_categories(st.rng, st.seen, B);
        Tensor z1 = detail::noise_batch(st.rng, B, cfg.noise_dim);
        Tensor v1 = detail::rows_from_table(st.cond, seen_cats);

        const bool want_unseen_term = cfg.use_knowledge_loss && !st.unseen.empty();
        std::vector<int> unseen_cats;
        Tensor z2, v2, t2;
        if (want_unseen_term) {
            unseen_cats = detail::draw_categories(st.rng, st.unseen, B);
            z2 = detail::noise_batch(st.rng, B, cfg.noise_dim);
            v2 = detail::rows_from_table(st.cond, unseen_cats);
            t2 = detail::rows_from_table(st.target, unseen_cats);
        }

        Tape tape;
        Tensor x1 = generator_forward(st.gen, z1, v1);
        count_unseen(seen_cats);
        Tensor fake_scores = discriminator_forward(st.disc, x1, v1, true);
        Tensor adv = g_adv_loss(fake_scores);

        Tensor lse_seen, lse_unseen;
        if (cfg.use_knowledge_loss && cfg.lse_on_seen) {
            Tensor t1 = detail::rows_from_table(st.target, seen_cats);
            lse_seen = embedding_loss(st.embedder, x1, t1);  // reuses the adversarial forward
        }
        if (want_unseen_term) {
            Tensor x2 = generator_forward(st.gen, z2, v2);
            lse_unseen = embedding_loss(st.embedder, x2, t2);
        }

        Tensor loss = total_g_loss(adv, lse_seen, lse_unseen, cfg);
        rec.g_adv = adv.item();
        rec.l_se_seen = lse_seen.defined() ? lse_seen.item() : 0.0;
        rec.l_se_unseen = lse_unseen.defined() ? lse_unseen.item() : 0.0;
        zero_grads(gen_params);
        zero_grads(disc_params);  // the generator loss also pushes into D weights
        tape.backward(loss);
        adam_step(gen_params, st.gen_adam);
    }

    st.iteration += 1;
    st.metrics.push_back(rec);
    if (!std::isfinite(rec.d_loss) || !std::isfinite(rec.g_adv) || !std::isfinite(rec.l_se_seen) ||
        !std::isfinite(rec.l_se_unseen))
        throw NumericError("non-finite loss at iteration " + std::to_string(st.iteration));
}

// ---------------------------------------------------------------------------
// Checkpointing. Parameter tensors, spectral-norm state, and both Adam
// moment stores round trip bit-exactly; the RNG goes into the manifest meta.
// ---------------------------------------------------------------------------

namespace detail {

inline TensorSet adam_snapshot(const std::string& name, const AdamState& adam) {
    TensorSet set{name, {}};
    for (size_t i = 0; i < adam.m.size(); ++i) {
        set.tensors.emplace_back("m" + std::to_string(i),
                                 Tensor::from({static_cast<int>(adam.m[i].size())}, adam.m[i]));
        set.tensors.emplace_back("v" + std::to_string(i),
                                 Tensor::from({static_cast<int>(adam.v[i].size())}, adam.v[i]));
    }
    return set;
}

inline void adam_restore(const TensorSet& set, AdamState& adam) {
    for (size_t i = 0; i < adam.m.size(); ++i) {
        const DVec& m = set.tensors[2 * i].second.data();
        const DVec& v = set.tensors[2 * i + 1].second.data();
        adam.m[i].assign(m.begin(), m.end());
        adam.v[i].assign(v.begin(), v.end());
    }
}

}  // namespace detail

inline void save_train_state(TrainState& st, const std::string& dir) {
    std::vector<TensorSet> sets = {{"generator", st.gen.named_parameters()},
                                   {"discriminator", st.disc.named_parameters()},
                                   {"embedder", st.embedder.named_parameters()},
                                   detail::adam_snapshot("gen_adam", st.gen_adam),
                                   detail::adam_snapshot("disc_adam", st.disc_adam)};
    json meta;
    meta["iteration"] = st.iteration;
    meta["rng"] = st.rng.serialize();
    meta["gen_adam_step"] = st.gen_adam.step;
    meta["disc_adam_step"] = st.disc_adam.step;
    meta["unseen_d_evals"] = st.unseen_d_evals;
    meta["embedder_metrics"] = {{"train_mse", st.embedder_metrics.train_mse},
                                {"val_mse", st.embedder_metrics.val_mse},
                                {"baseline_mse", st.embedder_metrics.baseline_mse}};
    meta["config"] = training_config_to_json(st.config);
    save_checkpoint(dir, sets, meta);
}

// Restores into a state freshly produced by init_train_state with the same
// config and dataset.
inline void load_train_state(TrainState& st, const std::string& dir) {
    std::vector<TensorSet> sets = {{"generator", st.gen.named_parameters()},
                                   {"discriminator", st.disc.named_parameters()},
                                   {"embedder", st.embedder.named_parameters()},
                                   detail::adam_snapshot("gen_adam", st.gen_adam),
                                   detail::adam_snapshot("disc_adam", st.disc_adam)};
    json meta = load_checkpoint(dir, sets);
    detail::adam_restore(sets[3], st.gen_adam);
    detail::adam_restore(sets[4], st.disc_adam);
    st.iteration = meta.at("iteration").get<long>();
    st.rng.deserialize(meta.at("rng").get<std::string>());
    st.gen_adam.step = meta.at("gen_adam_step").get<long>();
    st.disc_adam.step = meta.at("disc_adam_step").get<long>();
    st.unseen_d_evals = meta.value("unseen_d_evals", 0L);
}

// Runs the loop to config.iterations, appending line-delimited metrics and
// dropping periodic checkpoints when out_dir is set. Safe to call on a
// resumed state: it continues from st.iteration.
inline void train(TrainState& st, const Dataset& ds, const std::string& out_dir = "") {
    std::ofstream log;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        log.open(out_dir + "/metrics.jsonl", st.iteration > 0 ? std::ios::app : std::ios::trunc);
        if (!log) throw ArtifactError("cannot write " + out_dir + "/metrics.jsonl");
    }
    while (st.iteration < st.config.iterations) {
        train_step(st, ds);
        if (log.is_open()) log << st.metrics.back().to_json().dump() << "\n";
        if (!out_dir.empty() && st.config.checkpoint_every > 0 && st.iteration < st.config.iterations &&
            st.iteration % st.config.checkpoint_every == 0)
            save_train_state(st, out_dir + "/checkpoint-" + std::to_string(st.iteration));
    }
    if (!out_dir.empty()) save_train_state(st, out_dir + "/checkpoint-final");
}

// n images per condition row, grouped by condition, deterministic in seed.
inline Tensor generate_batch(const GeneratorParams& gen, const std::vector<std::vector<double>>& conds,
                             int n_per_cond, uint64_t seed) {
    if (conds.empty() || n_per_cond < 1) throw ContractError("generate_batch: empty request");
    const int d = static_cast<int>(conds[0].size());
    if (d != gen.cond_dim) throw ContractError("generate_batch: condition dimension mismatch");
    Rng rng(mix_seed(seed, 0x9eb));
    const int rows = static_cast<int>(conds.size()) * n_per_cond;
    Tensor z = detail::noise_batch(rng, rows, gen.noise_dim);
    Tensor v({rows, d});
    for (size_t ci = 0; ci < conds.size(); ++ci)
        for (int k = 0; k < n_per_cond; ++k)
            for (int c = 0; c < d; ++c)
                v.set((static_cast<long>(ci) * n_per_cond + k) * d + c, conds[ci][static_cast<size_t>(c)]);
    NoTape guard;
    return generator_forward(gen, z, v);
}

}  // namespace kgg
