#pragma once

// Shared plumbing: error taxonomy, deterministic RNG, small utilities.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmiris {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Errors. Every failure surfaced to callers is a pmiris::Error with a kind;
// the CLI maps kinds to process exit codes (config/file -> 2, training
// divergence -> 3, internal invariant breach -> 4).
// ---------------------------------------------------------------------------

enum class ErrKind {
    Config,       // bad parameter / configuration
    Validation,   // malformed input data
    Io,           // filesystem / encoding failures
    Environment,  // missing external prerequisite (e.g. pretrained weights)
    Consistency,  // cross-object mismatch (split vs dataset, map vs map)
    Integrity,    // corrupt serialized artifact
    Divergence,   // training produced non-finite loss
    Internal      // broken invariant inside the library
};

class Error : public std::runtime_error {
  public:
    Error(ErrKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrKind kind() const { return kind_; }

    int exit_code() const {
        switch (kind_) {
            case ErrKind::Divergence: return 3;
            case ErrKind::Internal: return 4;
            default: return 2;
        }
    }

    const char* kind_name() const {
        switch (kind_) {
            case ErrKind::Config: return "config";
            case ErrKind::Validation: return "validation";
            case ErrKind::Io: return "io";
            case ErrKind::Environment: return "environment";
            case ErrKind::Consistency: return "consistency";
            case ErrKind::Integrity: return "integrity";
            case ErrKind::Divergence: return "divergence";
            case ErrKind::Internal: return "internal";
        }
        return "unknown";
    }

  private:
    ErrKind kind_;
};

[[noreturn]] inline void fail(ErrKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool cond, ErrKind kind, const std::string& msg) {
    if (!cond) fail(kind, msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 has a fixed sequence by standard; the bounded
// draw and the Gaussian are hand-rolled because the std distributions are
// implementation-defined and would break byte-identical reproducibility.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t next() { return gen_(); }

    // Uniform in [0, n) without modulo bias.
    std::uint64_t bounded(std::uint64_t n) {
        require(n > 0, ErrKind::Internal, "Rng::bounded called with n = 0");
        const std::uint64_t lim = std::uint64_t(-1) - std::uint64_t(-1) % n;
        std::uint64_t v;
        do {
            v = gen_();
        } while (v >= lim);
        return v % n;
    }

    double uniform01() { return double(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller, second value cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = std::size_t(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent stream derived from this seed and a stream id.
    Rng derive(std::uint64_t stream) const {
        return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x5555555555555555ull)));
    }

  private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// FNV-1a, used for artifact integrity hashes and explain-input digests.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

template <typename T>
std::uint64_t fnv1a64_span(const std::vector<T>& v, std::uint64_t h = 0xCBF29CE484222325ull) {
    return fnv1a64(v.data(), v.size() * sizeof(T), h);
}

}  // namespace pmiris
