#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace sct {

// Deterministic RNG. mt19937 is fully specified by the standard; the
// distributions are hand-rolled here because the std:: ones are not, and
// seeded runs must reproduce bit-identically across toolchains.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

    std::uint32_t next_u32() { return gen_(); }

    // Uniform in [0, 1) with 24 bits of mantissa.
    float uniform() { return static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f); }
    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, bound), rejection-sampled to avoid modulo bias.
    std::uint32_t uniform_below(std::uint32_t bound) {
        if (bound <= 1) return 0;
        const std::uint32_t limit = UINT32_MAX - UINT32_MAX % bound;
        std::uint32_t r;
        do {
            r = next_u32();
        } while (r >= limit);
        return r % bound;
    }
    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(uniform_below(static_cast<std::uint32_t>(hi_inclusive - lo + 1)));
    }

    bool bernoulli(float p) { return uniform() < p; }

    // Box-Muller; caches the spare draw.
    float normal(float mean = 0.0f, float stddev = 1.0f) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        float u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 1e-12f);
        u2 = uniform();
        const float r = std::sqrt(-2.0f * std::log(u1));
        const float a = 6.2831853071795864769f * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return mean + stddev * (r * std::cos(a));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = uniform_below(static_cast<std::uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // splitmix64 mix for deriving independent per-epoch / per-purpose seeds.
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

  private:
    std::mt19937 gen_;
    float spare_ = 0.0f;
    bool has_spare_ = false;
};

}  // namespace sct
