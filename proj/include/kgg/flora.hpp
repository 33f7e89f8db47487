#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgg/common.hpp"
#include "kgg/embedding.hpp"

// Procedural dataset of small colored-shape images with templated textual
// descriptions. Categories are the cross product of a color palette and a
// shape set; an analytic oracle scores any image's color and shape fidelity
// against a category.

namespace kgg {

using json = nlohmann::json;
using Rgb = std::array<double, 3>;

struct PaletteColor {
    std::string name;
    Rgb rgb;  // components in [0, 1]
    std::vector<std::string> words;
};

struct ShapeKind {
    std::string name;
    std::vector<std::string> words;
};

struct FloraSpec {
    int image = 16;  // H == W
    int channels = 3;
    int samples_per_category = 80;
    int descriptions_per_image = 10;
    std::vector<PaletteColor> palette;
    std::vector<ShapeKind> shapes;
    // Geometric jitter is kept small so every rendered sample still clears
    // the oracle's shape gate against the centered ideal mask; chromatic
    // jitter is cheap there, and the spread it adds is what forces the
    // embedder onto color features that transfer across categories.
    double position_jitter = 0.25;  // px
    double scale_lo = 0.98, scale_hi = 1.02;
    double color_jitter = 0.070;  // per channel
    double bg_level = 0.08, bg_noise = 0.08;

    static FloraSpec defaults() {
        FloraSpec s;
        // Color synonyms are deliberately longer than shape synonyms: the
        // character n-gram featurizer weights words by length, and the
        // embedding-consistency property needs color identity to dominate
        // pairwise distances.
        s.palette = {
            {"red", {0.88, 0.10, 0.12}, {"crimson", "scarlet"}},
            {"yellow", {0.92, 0.86, 0.12}, {"yellow", "mustard"}},
            {"blue", {0.16, 0.34, 0.90}, {"sapphire", "cobalt"}},
            {"orange", {0.95, 0.52, 0.08}, {"orange", "apricot"}},
            {"purple", {0.56, 0.14, 0.78}, {"purple", "violet"}},
            {"pink", {0.95, 0.52, 0.67}, {"magenta", "salmon"}},
        };
        // All four shapes are filled, centered blobs of similar area with
        // smooth boundaries. Similar area means a category's per-pixel color
        // statistics transfer across shapes, so held-out color-shape
        // combinations sit close to seen ones in pixel space; smooth
        // boundaries mean sub-pixel jitter moves the thresholded foreground
        // one pixel at a time instead of flipping whole edge rows.
        s.shapes = {
            {"disc", {"round", "circular"}},
            {"oval", {"oval", "oblong"}},
            {"clover", {"clover", "lobed"}},
            {"trefoil", {"trefoil", "pointed"}},
        };
        return s;
    }

    int num_categories() const { return static_cast<int>(palette.size() * shapes.size()); }
    int color_of(int category) const { return category / static_cast<int>(shapes.size()); }
    int shape_of(int category) const { return category % static_cast<int>(shapes.size()); }
    std::string category_name(int category) const {
        return palette[color_of(category)].name + "-" + shapes[shape_of(category)].name;
    }
    long pixels() const { return static_cast<long>(channels) * image * image; }

    void validate() const {
        if (palette.size() < 2 || shapes.empty()) throw SpecError("palette/shape set too small");
        if (samples_per_category < 10) throw SpecError("samples_per_category must be >= 10");
        if (image < 8) throw SpecError("image size too small");
        // Nearest-anchor preservation under jitter needs anchors separated by
        // more than twice the jitter radius.
        double radius = color_jitter * std::sqrt(3.0);
        for (size_t a = 0; a < palette.size(); ++a)
            for (size_t b = a + 1; b < palette.size(); ++b) {
                double d2 = 0;
                for (int k = 0; k < 3; ++k) {
                    double diff = palette[a].rgb[k] - palette[b].rgb[k];
                    d2 += diff * diff;
                }
                if (std::sqrt(d2) <= 2.0 * radius)
                    throw SpecError("palette collision: " + palette[a].name + " vs " + palette[b].name);
            }
    }
};

struct Sample {
    int category = -1;
    std::vector<double> image;  // C*H*W, row-major per channel, values in [-1, 1]
    std::vector<std::string> descriptions;
};

struct DatasetSplit {
    std::vector<int> seen;    // Y1
    std::vector<int> unseen;  // Y2

    bool is_unseen(int category) const {
        for (int u : unseen)
            if (u == category) return true;
        return false;
    }
};

namespace detail {

enum class ShapeId { disc, oval, clover, trefoil };

inline ShapeId shape_id(const std::string& shape) {
    if (shape == "disc") return ShapeId::disc;
    if (shape == "oval") return ShapeId::oval;
    if (shape == "clover") return ShapeId::clover;
    if (shape == "trefoil") return ShapeId::trefoil;
    throw SpecError("unknown shape: " + shape);
}

// Coverage of one pixel by a shape, supersampled 4x4. Center and scale are
// in pixel units of an `n` x `n` image.
inline double shape_coverage(const std::string& shape, int n, double px, double py, double cx, double cy,
                             double s) {
    const ShapeId id = shape_id(shape);
    int hits = 0;
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
            double x = px + (a + 0.5) / 4.0 - cx;
            double y = py + (b + 0.5) / 4.0 - cy;
            bool inside = false;
            switch (id) {
                case ShapeId::disc: {
                    double r = 0.33 * n * s;
                    inside = x * x + y * y <= r * r;
                    break;
                }
                case ShapeId::oval: {
                    double rx = 0.42 * n * s, ry = 0.26 * n * s;
                    inside = (x / rx) * (x / rx) + (y / ry) * (y / ry) <= 1.0;
                    break;
                }
                case ShapeId::clover: {
                    double theta = std::atan2(y, x);
                    double r = (0.31 + 0.10 * std::cos(4.0 * theta)) * n * s;
                    inside = x * x + y * y <= r * r;
                    break;
                }
                case ShapeId::trefoil: {
                    double theta = std::atan2(y, x);
                    double r = (0.32 + 0.09 * std::cos(3.0 * theta)) * n * s;
                    inside = x * x + y * y <= r * r;
                    break;
                }
            }
            hits += inside ? 1 : 0;
        }
    return hits / 16.0;
}

inline double quantize8(double x01) { return std::round(std::clamp(x01, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace detail

// Centered, unjittered boolean mask for a category's shape. For the IoU the
// coverage cut sits at the renderer's half-coverage boundary, and the
// foreground threshold at half the anchor-to-background distance, so a
// blended edge pixel crosses both cuts at the same coverage regardless of
// how far the category's color is from the background; the color mean uses
// the eroded interior (0.9) where geometric jitter cannot bleed background
// in.
inline std::vector<bool> ideal_mask(const FloraSpec& spec, int category, double min_coverage = 0.5) {
    const int n = spec.image;
    const std::string& shape = spec.shapes[spec.shape_of(category)].name;
    std::vector<bool> mask(static_cast<size_t>(n) * n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            mask[static_cast<size_t>(y) * n + x] =
                detail::shape_coverage(shape, n, x, y, n / 2.0, n / 2.0, 1.0) >= min_coverage;
    return mask;
}

// Renders one sample. Pixel values are snapped to the 8-bit grid so that the
// in-memory dataset and its PPM round trip are bit-identical.
inline Sample render_sample(const FloraSpec& spec, int category, uint64_t sample_seed) {
    Rng rng(sample_seed);
    const int n = spec.image;
    const PaletteColor& color = spec.palette[spec.color_of(category)];
    const std::string& shape = spec.shapes[spec.shape_of(category)].name;

    double cx = n / 2.0 + rng.uniform(-spec.position_jitter, spec.position_jitter);
    double cy = n / 2.0 + rng.uniform(-spec.position_jitter, spec.position_jitter);
    double s = rng.uniform(spec.scale_lo, spec.scale_hi);
    Rgb fg;
    for (int k = 0; k < 3; ++k)
        fg[k] = std::clamp(color.rgb[k] + rng.uniform(-spec.color_jitter, spec.color_jitter), 0.0, 1.0);

    Sample sample;
    sample.category = category;
    sample.image.resize(spec.pixels());
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double cov = detail::shape_coverage(shape, n, x, y, cx, cy, s);
            double bg = spec.bg_level + rng.uniform(-spec.bg_noise, spec.bg_noise);
            for (int k = 0; k < 3; ++k) {
                double v01 = detail::quantize8(bg * (1.0 - cov) + fg[k] * cov);
                sample.image[static_cast<size_t>(k) * n * n + static_cast<size_t>(y) * n + x] = v01 * 2.0 - 1.0;
            }
        }
    return sample;
}

inline std::vector<std::string> description_templates() {
    return {
        "this flower has {s} petals that are {c}",
        "a {c} flower with {s} petals",
        "the {c2} petals are {c} and the bloom looks {s}",
        "{c} petals arranged in a {s} {s2} pattern",
        "a small {s} blossom colored {c} {c2}",
    };
}

// Balanced enumeration over (template, synonym rotation): the canonical
// color and shape words appear in every description so category embeddings
// decompose into stable per-attribute components (which is what lets the
// generator extrapolate to unseen attribute combinations), while synonym
// slots keep shared vocabulary across categories with a common attribute.
// The per-image offset rotates phrasing without changing word frequencies.
inline std::string make_description(const FloraSpec& spec, int category, int d, int offset) {
    static const std::vector<std::string> templates = description_templates();
    const PaletteColor& color = spec.palette[spec.color_of(category)];
    const ShapeKind& shape = spec.shapes[spec.shape_of(category)];
    std::string text = templates[static_cast<size_t>(d + offset) % templates.size()];
    const std::string& c2 = color.words[static_cast<size_t>(d + offset) % color.words.size()];
    const std::string& s2 = shape.words[static_cast<size_t>(d + d / 2 + offset) % shape.words.size()];
    auto replace = [&](const std::string& key, const std::string& value) {
        size_t pos = text.find(key);
        if (pos != std::string::npos) text.replace(pos, key.size(), value);
    };
    replace("{c2}", c2);
    replace("{s2}", s2);
    replace("{c}", color.name);
    replace("{s}", shape.words[0]);
    return text;
}

// Deterministic in (spec, seed); every sample draws from its own derived
// stream, so generation order does not matter.
inline std::vector<Sample> generate_dataset(const FloraSpec& spec, uint64_t seed) {
    spec.validate();
    std::vector<Sample> samples;
    samples.reserve(static_cast<size_t>(spec.num_categories()) * spec.samples_per_category);
    for (int c = 0; c < spec.num_categories(); ++c)
        for (int i = 0; i < spec.samples_per_category; ++i) {
            uint64_t s = mix_seed(seed, (static_cast<uint64_t>(c) << 20) | static_cast<uint64_t>(i));
            Sample sample = render_sample(spec, c, s);
            int offset = static_cast<int>(s % 1000);
            for (int d = 0; d < spec.descriptions_per_image; ++d)
                sample.descriptions.push_back(make_description(spec, c, d, offset));
            samples.push_back(std::move(sample));
        }
    return samples;
}

// Uniform split with rejection until every color and shape appears in at
// least one seen category.
inline DatasetSplit split_categories(const FloraSpec& spec, int n_unseen, uint64_t seed) {
    const int total = spec.num_categories();
    if (n_unseen <= 0 || n_unseen >= total) throw SpecError("split: n_unseen out of range");
    Rng rng(mix_seed(seed, 0x5917));
    for (int attempt = 0; attempt < 100000; ++attempt) {
        std::vector<int> ids(static_cast<size_t>(total));
        for (int i = 0; i < total; ++i) ids[static_cast<size_t>(i)] = i;
        for (int i = total - 1; i > 0; --i) std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(rng.below(i + 1))]);
        DatasetSplit split;
        split.unseen.assign(ids.begin(), ids.begin() + n_unseen);
        split.seen.assign(ids.begin() + n_unseen, ids.end());
        std::sort(split.unseen.begin(), split.unseen.end());
        std::sort(split.seen.begin(), split.seen.end());
        std::set<int> colors, shapes;
        for (int c : split.seen) {
            colors.insert(spec.color_of(c));
            shapes.insert(spec.shape_of(c));
        }
        if (colors.size() == spec.palette.size() && shapes.size() == spec.shapes.size()) return split;
    }
    throw SpecError("split: no valid split found under attribute coverage");
}

// ---------------------------------------------------------------------------
// Attribute oracle. color_score: 1 minus the euclidean distance between the
// category anchor and the mean color over the ideal mask, normalized by the
// RGB cube diameter sqrt(3), clamped to [0,1]. shape_score: IoU of the
// thresholded foreground (pixels far from the per-image median color) with
// the ideal mask.
// ---------------------------------------------------------------------------

struct OracleScores {
    double color = 0;
    double shape = 0;
};

inline OracleScores oracle_attribute_check(const FloraSpec& spec, const std::vector<double>& image,
                                           int category) {
    if (static_cast<long>(image.size()) != spec.pixels())
        throw DimensionError("oracle: image size does not match spec");
    const int n = spec.image;
    const long hw = static_cast<long>(n) * n;
    auto px = [&](long i, int k) { return std::clamp((image[static_cast<size_t>(k) * hw + i] + 1.0) / 2.0, 0.0, 1.0); };

    std::vector<bool> mask = ideal_mask(spec, category);
    std::vector<bool> interior = ideal_mask(spec, category, 0.9);

    // Mean color over the mask interior vs the palette anchor.
    Rgb mean{0, 0, 0};
    long m = 0;
    for (long i = 0; i < hw; ++i) {
        if (!interior[static_cast<size_t>(i)]) continue;
        for (int k = 0; k < 3; ++k) mean[k] += px(i, k);
        ++m;
    }
    OracleScores scores;
    if (m > 0) {
        double d2 = 0;
        const Rgb& anchor = spec.palette[spec.color_of(category)].rgb;
        for (int k = 0; k < 3; ++k) {
            mean[k] /= static_cast<double>(m);
            d2 += (mean[k] - anchor[k]) * (mean[k] - anchor[k]);
        }
        scores.color = std::clamp(1.0 - std::sqrt(d2 / 3.0), 0.0, 1.0);
    }

    // Foreground = pixels far from the per-image median color.
    std::array<std::vector<double>, 3> chan;
    for (int k = 0; k < 3; ++k) {
        chan[k].resize(static_cast<size_t>(hw));
        for (long i = 0; i < hw; ++i) chan[k][static_cast<size_t>(i)] = px(i, k);
    }
    Rgb median;
    for (int k = 0; k < 3; ++k) {
        std::vector<double> v = chan[k];
        std::nth_element(v.begin(), v.begin() + hw / 2, v.end());
        median[k] = v[static_cast<size_t>(hw / 2)];
    }
    double anchor_dist = 0;
    {
        const Rgb& anchor = spec.palette[spec.color_of(category)].rgb;
        for (int k = 0; k < 3; ++k)
            anchor_dist += (anchor[k] - median[k]) * (anchor[k] - median[k]);
        anchor_dist = std::sqrt(anchor_dist);
    }
    const double tau = 0.5 * anchor_dist;
    long inter = 0, uni = 0;
    for (long i = 0; i < hw; ++i) {
        double d2 = 0;
        for (int k = 0; k < 3; ++k) {
            double diff = chan[k][static_cast<size_t>(i)] - median[k];
            d2 += diff * diff;
        }
        bool fg = std::sqrt(d2) > tau;
        bool id = mask[static_cast<size_t>(i)];
        inter += (fg && id) ? 1 : 0;
        uni += (fg || id) ? 1 : 0;
    }
    scores.shape = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
    return scores;
}

// ---------------------------------------------------------------------------
// Disk format: manifest.json + split.json + binary PPM (P6) images.
// ---------------------------------------------------------------------------

inline std::string image_to_ppm(const std::vector<double>& image, int n, int channels) {
    if (channels != 3) throw ContractError("ppm writer expects 3 channels");
    std::string out = "P6\n" + std::to_string(n) + " " + std::to_string(n) + "\n255\n";
    const long hw = static_cast<long>(n) * n;
    for (long i = 0; i < hw; ++i)
        for (int k = 0; k < 3; ++k) {
            double v01 = std::clamp((image[static_cast<size_t>(k) * hw + i] + 1.0) / 2.0, 0.0, 1.0);
            out.push_back(static_cast<char>(std::lround(v01 * 255.0)));
        }
    return out;
}

inline std::vector<double> image_from_ppm(const std::string& ppm) {
    std::istringstream is(ppm);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255 || w != h || w <= 0) throw ArtifactError("unsupported ppm header");
    is.get();  // single whitespace after header
    const long hw = static_cast<long>(w) * h;
    std::vector<double> image(static_cast<size_t>(3) * hw);
    for (long i = 0; i < hw; ++i)
        for (int k = 0; k < 3; ++k) {
            int c = is.get();
            if (c == EOF) throw ArtifactError("truncated ppm");
            image[static_cast<size_t>(k) * hw + i] = static_cast<double>(c) / 255.0 * 2.0 - 1.0;
        }
    return image;
}

struct Dataset {
    FloraSpec spec;
    uint64_t seed = 0;
    std::vector<Sample> samples;
    DatasetSplit split;
    std::map<int, SemanticEmbedding> embeddings;
    EmbedConfig embed_config;
};

inline json flora_spec_to_json(const FloraSpec& s) {
    json j;
    j["image"] = s.image;
    j["channels"] = s.channels;
    j["samples_per_category"] = s.samples_per_category;
    j["descriptions_per_image"] = s.descriptions_per_image;
    j["position_jitter"] = s.position_jitter;
    j["scale_lo"] = s.scale_lo;
    j["scale_hi"] = s.scale_hi;
    j["color_jitter"] = s.color_jitter;
    j["bg_level"] = s.bg_level;
    j["bg_noise"] = s.bg_noise;
    j["palette"] = json::array();
    for (const auto& p : s.palette) j["palette"].push_back({{"name", p.name}, {"rgb", p.rgb}, {"words", p.words}});
    j["shapes"] = json::array();
    for (const auto& sh : s.shapes) j["shapes"].push_back({{"name", sh.name}, {"words", sh.words}});
    return j;
}

inline FloraSpec flora_spec_from_json(const json& j) {
    FloraSpec s = FloraSpec::defaults();
    s.image = j.value("image", s.image);
    s.channels = j.value("channels", s.channels);
    s.samples_per_category = j.value("samples_per_category", s.samples_per_category);
    s.descriptions_per_image = j.value("descriptions_per_image", s.descriptions_per_image);
    s.position_jitter = j.value("position_jitter", s.position_jitter);
    s.scale_lo = j.value("scale_lo", s.scale_lo);
    s.scale_hi = j.value("scale_hi", s.scale_hi);
    s.color_jitter = j.value("color_jitter", s.color_jitter);
    s.bg_level = j.value("bg_level", s.bg_level);
    s.bg_noise = j.value("bg_noise", s.bg_noise);
    if (j.contains("palette")) {
        s.palette.clear();
        for (const auto& p : j["palette"])
            s.palette.push_back({p.at("name").get<std::string>(), p.at("rgb").get<Rgb>(),
                                 p.at("words").get<std::vector<std::string>>()});
    }
    if (j.contains("shapes")) {
        s.shapes.clear();
        for (const auto& sh : j["shapes"])
            s.shapes.push_back({sh.at("name").get<std::string>(), sh.at("words").get<std::vector<std::string>>()});
    }
    return s;
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir + "/images");
    json manifest;
    manifest["format"] = "kgg-flora-v1";
    manifest["seed"] = ds.seed;
    manifest["spec"] = flora_spec_to_json(ds.spec);
    manifest["categories"] = json::array();
    for (int c = 0; c < ds.spec.num_categories(); ++c)
        manifest["categories"].push_back({{"id", c},
                                          {"name", ds.spec.category_name(c)},
                                          {"color", ds.spec.palette[ds.spec.color_of(c)].name},
                                          {"shape", ds.spec.shapes[ds.spec.shape_of(c)].name}});
    manifest["samples"] = json::array();
    std::map<int, int> counter;
    for (const auto& s : ds.samples) {
        char name[64];
        std::snprintf(name, sizeof name, "images/c%02d_s%03d.ppm", s.category, counter[s.category]++);
        write_file(dir + "/" + name, image_to_ppm(s.image, ds.spec.image, ds.spec.channels));
        manifest["samples"].push_back({{"file", name}, {"category", s.category}, {"descriptions", s.descriptions}});
    }
    write_file(dir + "/manifest.json", manifest.dump() + "\n");
    write_file(dir + "/split.json", json{{"seen", ds.split.seen}, {"unseen", ds.split.unseen}}.dump(2) + "\n");
    write_file(dir + "/embeddings.json", embedding_table_to_json(ds.embeddings, ds.embed_config).dump() + "\n");
}

inline Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    json manifest = json::parse(read_file(dir + "/manifest.json"));
    if (manifest.value("format", "") != "kgg-flora-v1") throw ArtifactError(dir + ": not a dataset directory");
    ds.seed = manifest["seed"].get<uint64_t>();
    ds.spec = flora_spec_from_json(manifest["spec"]);
    for (const auto& s : manifest["samples"]) {
        Sample sample;
        sample.category = s.at("category").get<int>();
        sample.descriptions = s.at("descriptions").get<std::vector<std::string>>();
        sample.image = image_from_ppm(read_file(dir + "/" + s.at("file").get<std::string>()));
        ds.samples.push_back(std::move(sample));
    }
    json split = json::parse(read_file(dir + "/split.json"));
    ds.split.seen = split.at("seen").get<std::vector<int>>();
    ds.split.unseen = split.at("unseen").get<std::vector<int>>();
    json emb = json::parse(read_file(dir + "/embeddings.json"));
    ds.embeddings = embedding_table_from_json(emb);
    ds.embed_config.dim = emb.value("dim", 32);
    return ds;
}

inline std::vector<Description> all_descriptions(const std::vector<Sample>& samples) {
    std::vector<Description> out;
    for (const auto& s : samples)
        for (const auto& text : s.descriptions) out.push_back({s.category, text});
    return out;
}

// Assembles the full in-memory dataset: rendered samples, a seen/unseen
// split covering every color and shape on the seen side, and per-category
// semantic embeddings built from the description corpus.
inline Dataset build_dataset(const FloraSpec& spec, int n_unseen, uint64_t seed,
                             const EmbedConfig& embed_config = {}) {
    Dataset ds;
    ds.spec = spec;
    ds.seed = seed;
    ds.samples = generate_dataset(spec, seed);
    ds.split = split_categories(spec, n_unseen, seed);
    ds.embed_config = embed_config;
    ds.embeddings = build_embedding_table(all_descriptions(ds.samples), embed_config);
    return ds;
}

}  // namespace kgg
