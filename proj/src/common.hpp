#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace duap {

enum class ErrorCode {
    Config,    // invalid encoder or attack configuration
    Data,      // empty/missing dataset, bad input data
    Shape,     // dimension mismatch between tensors/files
    Range,     // index out of range (layers, windows)
    Format,    // corrupt or mismatched file contents
    Labels,    // label CSV problems
    Grid,      // invalid sweep grid value
    Layer,     // uncapturable layer requested
    Contract,  // caller violated an operation precondition
    Internal,  // non-finite objective, unreachable states
};

const char* error_code_name(ErrorCode code);  // "E_CONFIG", "E_DATA", ...

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}
    ErrorCode code() const { return code_; }
    const char* code_name() const { return error_code_name(code_); }

private:
    ErrorCode code_;
};

// Deterministic random source. mt19937_64 output is pinned by the standard;
// the distributions below are implemented here because the std:: ones are not.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1), 53-bit resolution
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return v % n;
    }

    // Box-Muller, second value discarded so the draw order stays simple
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * M_PI * u2);
    }

    // rejection-sampled normal truncated at +-cut sigmas, then scaled
    double trunc_normal(double sigma, double cut = 2.0) {
        double z;
        do {
            z = normal();
        } while (std::abs(z) > cut);
        return z * sigma;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

// FNV-1a, used for trigram hashing and manifest hashes
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace duap
