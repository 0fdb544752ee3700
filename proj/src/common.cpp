#include "metatsr/common.hpp"

#include <cmath>

namespace metatsr {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t state) {
    constexpr std::uint64_t prime = 0x100000001b3ull;
    for (unsigned char c : bytes) {
        state ^= c;
        state *= prime;
    }
    return state;
}

std::uint64_t fnv1a_u64(std::uint64_t value, std::uint64_t state) {
    constexpr std::uint64_t prime = 0x100000001b3ull;
    for (int i = 0; i < 8; ++i) {
        state ^= (value >> (8 * i)) & 0xffull;
        state *= prime;
    }
    return state;
}

RngStream::RngStream(std::uint64_t seed) : seed_(seed), gen_(seed) {}

RngStream RngStream::derive(std::string_view tag) const {
    return RngStream(fnv1a(tag, fnv1a_u64(seed_, 0xcbf29ce484222325ull)));
}

RngStream RngStream::derive(std::string_view tag, std::uint64_t a,
                            std::uint64_t b) const {
    std::uint64_t h = fnv1a(tag, fnv1a_u64(seed_, 0xcbf29ce484222325ull));
    h = fnv1a_u64(a, h);
    h = fnv1a_u64(b, h);
    return RngStream(h);
}

double RngStream::uniform(double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    return dist(gen_);
}

double RngStream::gaussian(double mean, double stddev) {
    // u1 in (0,1] so log() is finite.
    double u1 = 1.0 - uniform(0.0, 1.0);
    double u2 = uniform(0.0, 1.0);
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
}

std::uint64_t RngStream::index(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> dist(0, n - 1);
    return dist(gen_);
}

}  // namespace metatsr
