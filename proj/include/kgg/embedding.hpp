#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgg/common.hpp"

// Per-category semantic embeddings from textual descriptions. A sentence is
// featurized by hashing character n-grams of its tokens into d signed
// buckets; the corpus is min-max normalized per dimension into [0, 1]; a
// category's embedding is the mean of its descriptions' vectors.

namespace kgg {

struct Description {
    int category = -1;
    std::string text;  // lowercase ascii words
};

struct SemanticEmbedding {
    int category = -1;
    std::vector<double> v;  // components in [0, 1]
};

enum class TokenWeighting { uniform, idf };

struct EmbedConfig {
    int dim = 32;
    int ngram_min = 2;
    int ngram_max = 4;
    uint64_t hash_seed = 0x9d5c0fb020u;
    TokenWeighting weighting = TokenWeighting::idf;
    // Per-token weights; filled from corpus document frequencies when
    // weighting == idf, empty means every token weighs 1.
    std::map<std::string, double> token_weights;

    void validate() const {
        if (dim < 2) throw ContractError("EmbedConfig: dim must be >= 2");
        if (ngram_min < 1 || ngram_max < ngram_min) throw ContractError("EmbedConfig: empty n-gram range");
    }
};

// Deterministic raw sentence vector: each token is wrapped in boundary
// markers, its character n-grams contribute +-1/sqrt(dim) to hashed buckets
// and are averaged per token, and the sentence vector is the weighted mean
// of the token vectors (uniform when the weight table is empty). Averaging
// per token first keeps a token's influence independent of its length, so
// sentence vectors compose additively over tokens.
inline std::vector<double> sentence_vector(const std::string& text, const EmbedConfig& config) {
    config.validate();
    std::vector<double> acc(static_cast<size_t>(config.dim), 0.0);
    std::vector<double> tok(static_cast<size_t>(config.dim));
    long tokens = 0;
    double total_weight = 0.0;
    size_t i = 0;
    const double unit = 1.0 / std::sqrt(static_cast<double>(config.dim));
    while (i < text.size()) {
        while (i < text.size() && text[i] == ' ') ++i;
        size_t j = i;
        while (j < text.size() && text[j] != ' ') ++j;
        if (j > i) {
            std::string word = text.substr(i, j - i);
            double weight = 1.0;
            if (!config.token_weights.empty()) {
                auto it = config.token_weights.find(word);
                if (it != config.token_weights.end()) weight = it->second;
            }
            std::string token = "<" + word + ">";
            std::fill(tok.begin(), tok.end(), 0.0);
            long count = 0;
            for (int n = config.ngram_min; n <= config.ngram_max; ++n) {
                if (static_cast<size_t>(n) > token.size()) break;
                for (size_t k = 0; k + n <= token.size(); ++k) {
                    uint64_t h = fnv1a64(token.data() + k, static_cast<size_t>(n), config.hash_seed);
                    int bucket = static_cast<int>(h % static_cast<uint64_t>(config.dim));
                    double sign = (h >> 63) ? -1.0 : 1.0;
                    tok[static_cast<size_t>(bucket)] += sign * unit;
                    ++count;
                }
            }
            if (count > 0) {
                for (size_t k = 0; k < acc.size(); ++k) acc[k] += weight * tok[k] / static_cast<double>(count);
                total_weight += weight;
                ++tokens;
            }
        }
        i = j;
    }
    if (tokens == 0) throw ContractError("sentence_vector: empty text");
    // All-filler sentences can weigh ~0 under idf; fall back to an unweighted
    // average rather than dividing by it.
    if (total_weight <= 1e-12) {
        EmbedConfig uniform = config;
        uniform.token_weights.clear();
        return sentence_vector(text, uniform);
    }
    for (double& x : acc) x /= total_weight;
    return acc;
}

// Smoothed inverse document frequency per token, with one document per
// category (all of a category's descriptions pooled): log((1+K)/(1+df)).
// Phrasing shared by every category weighs zero, so the sentence vectors
// are carried by the attribute words that distinguish categories.
inline std::map<std::string, double> idf_weights(const std::vector<Description>& descriptions) {
    std::map<std::string, std::set<int>> df;
    std::set<int> categories;
    for (const auto& d : descriptions) {
        categories.insert(d.category);
        size_t i = 0;
        while (i < d.text.size()) {
            while (i < d.text.size() && d.text[i] == ' ') ++i;
            size_t j = i;
            while (j < d.text.size() && d.text[j] != ' ') ++j;
            if (j > i) df[d.text.substr(i, j - i)].insert(d.category);
            i = j;
        }
    }
    const double k = static_cast<double>(categories.size());
    std::map<std::string, double> weights;
    for (const auto& [word, cats] : df)
        weights[word] = std::log((1.0 + k) / (1.0 + static_cast<double>(cats.size())));
    return weights;
}

// Per-dimension min-max scaling over the corpus; constant dimensions map
// to 0.5.
inline std::vector<std::vector<double>> normalize_corpus(const std::vector<std::vector<double>>& raw) {
    if (raw.size() < 2) throw ContractError("normalize_corpus: need at least 2 vectors");
    const size_t d = raw[0].size();
    std::vector<double> lo(d, std::numeric_limits<double>::infinity());
    std::vector<double> hi(d, -std::numeric_limits<double>::infinity());
    for (const auto& v : raw) {
        if (v.size() != d) throw DimensionError("normalize_corpus: inconsistent dimensions");
        for (size_t k = 0; k < d; ++k) {
            lo[k] = std::min(lo[k], v[k]);
            hi[k] = std::max(hi[k], v[k]);
        }
    }
    std::vector<std::vector<double>> out(raw.size(), std::vector<double>(d));
    for (size_t i = 0; i < raw.size(); ++i)
        for (size_t k = 0; k < d; ++k)
            out[i][k] = (hi[k] > lo[k]) ? (raw[i][k] - lo[k]) / (hi[k] - lo[k]) : 0.5;
    return out;
}

// Componentwise mean of one category's normalized description vectors.
inline SemanticEmbedding category_embedding(int category, const std::vector<Description>& descriptions,
                                            const std::vector<std::vector<double>>& normalized) {
    if (descriptions.size() != normalized.size())
        throw DimensionError("category_embedding: descriptions/vectors length mismatch");
    SemanticEmbedding e;
    e.category = category;
    long n = 0;
    for (size_t i = 0; i < descriptions.size(); ++i) {
        if (descriptions[i].category != category) continue;
        if (e.v.empty()) e.v.assign(normalized[i].size(), 0.0);
        for (size_t k = 0; k < e.v.size(); ++k) e.v[k] += normalized[i][k];
        ++n;
    }
    if (n == 0) throw LookupError("category_embedding: unknown category " + std::to_string(category));
    for (double& x : e.v) x /= static_cast<double>(n);
    return e;
}

inline std::vector<double> one_hot(int k, int num_categories) {
    if (k < 0 || k >= num_categories) throw ContractError("one_hot: index out of range");
    std::vector<double> v(static_cast<size_t>(num_categories), 0.0);
    v[static_cast<size_t>(k)] = 1.0;
    return v;
}

// Full pipeline: featurize every description (with corpus idf weights when
// configured), normalize, average per category. Returns embeddings keyed by
// category id.
inline std::map<int, SemanticEmbedding> build_embedding_table(const std::vector<Description>& descriptions,
                                                              const EmbedConfig& config) {
    EmbedConfig cfg = config;
    if (cfg.weighting == TokenWeighting::idf && cfg.token_weights.empty()) cfg.token_weights = idf_weights(descriptions);
    std::vector<std::vector<double>> raw;
    raw.reserve(descriptions.size());
    for (const auto& d : descriptions) raw.push_back(sentence_vector(d.text, cfg));
    auto normalized = normalize_corpus(raw);
    std::map<int, SemanticEmbedding> table;
    for (const auto& d : descriptions)
        if (!table.count(d.category)) table[d.category] = category_embedding(d.category, descriptions, normalized);
    return table;
}

inline nlohmann::json embedding_table_to_json(const std::map<int, SemanticEmbedding>& table,
                                              const EmbedConfig& config) {
    nlohmann::json j;
    j["dim"] = config.dim;
    j["ngram_min"] = config.ngram_min;
    j["ngram_max"] = config.ngram_max;
    j["hash_seed"] = config.hash_seed;
    j["weighting"] = config.weighting == TokenWeighting::idf ? "idf" : "uniform";
    j["categories"] = nlohmann::json::array();
    for (const auto& [id, e] : table) j["categories"].push_back({{"id", id}, {"vector", e.v}});
    return j;
}

inline std::map<int, SemanticEmbedding> embedding_table_from_json(const nlohmann::json& j) {
    std::map<int, SemanticEmbedding> table;
    for (const auto& c : j.at("categories")) {
        SemanticEmbedding e;
        e.category = c.at("id").get<int>();
        e.v = c.at("vector").get<std::vector<double>>();
        table[e.category] = e;
    }
    return table;
}

}  // namespace kgg
