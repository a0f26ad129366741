#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "stylefuse/tensor.hpp"

namespace stylefuse {

// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64 so
// that streams are identical across standard libraries and platforms
// (std::normal_distribution is implementation-defined).
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : seed_(seed), gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [lo, hi] inclusive
    int uniform_int(int lo, int hi) {
        auto span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(gen_() % span);
    }

    // standard normal via Box-Muller, pairs cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r     = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        spare_       = r * std::sin(theta);
        has_spare_   = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    Tensor normal_tensor(Shape shape, double mean = 0.0, double std = 1.0) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal(mean, std);
        return t;
    }

    Tensor uniform_tensor(Shape shape, double lo = 0.0, double hi = 1.0) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
        return t;
    }

    // derive an independent child stream; used to decouple phases / subsystems
    Rng child(uint64_t stream) const {
        uint64_t b[2] = {seed_, stream};
        return Rng(fnv1a64(b, sizeof(b)));
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_ = 0;
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_   = 0.0;
};

}  // namespace stylefuse
