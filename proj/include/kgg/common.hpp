#pragma once

#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kgg {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto exit codes (see tools/).
// ---------------------------------------------------------------------------

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& what) : std::runtime_error("dimension error: " + what) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& what) : std::runtime_error("contract error: " + what) {}
};

struct SpecError : std::runtime_error {
    explicit SpecError(const std::string& what) : std::runtime_error("spec error: " + what) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error("numeric error: " + what) {}
};

struct LookupError : std::runtime_error {
    explicit LookupError(const std::string& what) : std::runtime_error("lookup error: " + what) {}
};

// Missing or unreadable files and directories; carries the offending path.
struct ArtifactError : std::runtime_error {
    explicit ArtifactError(const std::string& what) : std::runtime_error("artifact error: " + what) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. Wraps mt19937_64 with distributions implemented here so
// that sampled streams depend only on this code, and the full state can be
// serialized into checkpoints.
// ---------------------------------------------------------------------------

class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    double uniform() {  // [0, 1)
        return (engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller without cached state: consumes exactly two draws per call.
    double normal() {
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Uniform integer in [0, n). Multiply-shift bound; n must be positive.
    int below(int n) {
        if (n <= 0) throw ContractError("Rng::below requires n > 0");
        return static_cast<int>((static_cast<unsigned __int128>(engine_()) * static_cast<uint64_t>(n)) >> 64);
    }

    uint64_t raw() { return engine_(); }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (!is) throw ContractError("Rng::deserialize: malformed state string");
    }

  private:
    std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Hashing and file helpers.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// Mixes integers into a seed stream; used to derive per-sample RNGs.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

inline std::string to_hex(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline void write_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + path);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw ArtifactError("short write to " + path);
}

inline uint64_t file_checksum(const std::string& path) { return fnv1a64(read_file(path)); }

}  // namespace kgg
