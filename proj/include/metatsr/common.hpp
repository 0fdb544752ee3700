#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace metatsr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// FNV-1a 64-bit over raw bytes. Used for config lineage hashes and
/// parameter digests; not a cryptographic hash.
std::uint64_t fnv1a(std::string_view bytes,
                    std::uint64_t state = 0xcbf29ce484222325ull);

/// Folds a 64-bit word into an FNV state (little-endian byte order).
std::uint64_t fnv1a_u64(std::uint64_t value, std::uint64_t state);

/// Deterministic RNG stream. Streams are derived from one global seed by
/// folding a tag (and optional indices) into the seed, so every consumer
/// draws from its own stream and thread scheduling cannot reorder draws.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed);

    RngStream derive(std::string_view tag) const;
    RngStream derive(std::string_view tag, std::uint64_t a,
                     std::uint64_t b = 0) const;

    std::uint64_t seed() const { return seed_; }
    std::mt19937_64& gen() { return gen_; }

    double uniform(double lo, double hi);
    /// Box-Muller without state caching: draws are a pure function of the
    /// underlying engine position.
    double gaussian(double mean, double stddev);
    /// Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n);

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
};

/// Thrown for malformed or inconsistent input data (CSV, artifacts).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Thrown for invalid configuration.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Thrown when a numeric procedure fails (divergence, non-finite values).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace metatsr
