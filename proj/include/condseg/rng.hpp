#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "condseg/common.hpp"
#include "condseg/tensor.hpp"

namespace condseg {

// Named deterministic stream: identical (seed, stream) pairs replay the same
// sequence on any platform. Distributions are implemented here instead of
// <random>'s (whose normal/uniform outputs are implementation-defined).
class Rng {
public:
    Rng(std::uint64_t seed, std::string_view stream)
        : gen_(splitmix64(splitmix64(seed) ^ fnv1a64(stream))) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) {
        require(n > 0, "uniform_int: n must be positive");
        return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

template <typename T>
Tensor<T> rand_uniform(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor<T> t(s);
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
Tensor<T> rand_normal(Shape s, Rng& rng, double mean = 0.0,
                      double stddev = 1.0) {
    Tensor<T> t(s);
    for (auto& v : t.data) v = static_cast<T>(mean + stddev * rng.normal());
    return t;
}

}  // namespace condseg
