#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kgg/tensor.hpp"

// Checkpoint format: a directory holding manifest.json plus one flat binary
// blob per named tensor set. Blobs are little-endian IEEE-754 float64, tensors
// concatenated in manifest order. The manifest's "meta" object carries
// non-tensor state (iteration counters, RNG state, config snapshots).

namespace kgg {

using json = nlohmann::json;

// A named group of tensors serialized into one blob. Tensor handles alias the
// caller's storage, so loading writes parameters in place.
struct TensorSet {
    std::string name;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

namespace detail {

inline void append_f64_le(std::string& out, const DVec& values) {
    for (double d : values) {
        uint64_t bits;
        std::memcpy(&bits, &d, 8);
        for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
}

inline void read_f64_le(const std::string& blob, size_t offset_elems, DVec& into) {
    size_t byte0 = offset_elems * 8;
    if (byte0 + into.size() * 8 > blob.size()) throw ArtifactError("checkpoint blob truncated");
    for (size_t i = 0; i < into.size(); ++i) {
        uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<uint64_t>(static_cast<unsigned char>(blob[byte0 + i * 8 + b])) << (8 * b);
        std::memcpy(&into[i], &bits, 8);
    }
}

}  // namespace detail

inline void save_checkpoint(const std::string& dir, const std::vector<TensorSet>& sets, const json& meta) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["format"] = "kgg-checkpoint-v1";
    manifest["meta"] = meta;
    manifest["sets"] = json::array();
    for (const auto& set : sets) {
        std::string blob;
        json entry;
        entry["name"] = set.name;
        entry["file"] = set.name + ".bin";
        entry["tensors"] = json::array();
        long offset = 0;
        for (const auto& [name, t] : set.tensors) {
            entry["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
            detail::append_f64_le(blob, t.data());
            offset += t.numel();
        }
        write_file(dir + "/" + set.name + ".bin", blob);
        manifest["sets"].push_back(entry);
    }
    write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

inline json load_checkpoint_manifest(const std::string& dir) {
    json manifest = json::parse(read_file(dir + "/manifest.json"));
    if (manifest.value("format", "") != "kgg-checkpoint-v1")
        throw ArtifactError(dir + "/manifest.json: unrecognized checkpoint format");
    return manifest;
}

// Loads the named sets into the provided tensors. Every requested tensor must
// exist in the manifest with an identical shape.
inline json load_checkpoint(const std::string& dir, std::vector<TensorSet>& sets) {
    json manifest = load_checkpoint_manifest(dir);
    for (auto& set : sets) {
        const json* entry = nullptr;
        for (const auto& e : manifest["sets"])
            if (e["name"] == set.name) entry = &e;
        if (!entry) throw ArtifactError("checkpoint set '" + set.name + "' missing from " + dir);
        std::string blob = read_file(dir + "/" + (*entry)["file"].get<std::string>());
        for (auto& [name, t] : set.tensors) {
            const json* rec = nullptr;
            for (const auto& r : (*entry)["tensors"])
                if (r["name"] == name) rec = &r;
            if (!rec) throw ArtifactError("checkpoint tensor '" + set.name + "/" + name + "' missing from " + dir);
            Shape shape = (*rec)["shape"].get<Shape>();
            if (shape != t.shape())
                throw DimensionError("checkpoint tensor '" + name + "' shape mismatch in " + dir);
            detail::read_f64_le(blob, (*rec)["offset"].get<size_t>(), t.mutable_data());
        }
    }
    return manifest["meta"];
}

}  // namespace kgg
