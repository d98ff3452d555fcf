#pragma once

#include <cstdint>
#include <vector>

namespace qnoise {

/// SplitMix64 generator. The integer stream depends only on the seed, so runs
/// are reproducible across platforms and compilers.
///
///   state += 0x9E3779B97F4A7C15
///   z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   return z ^ (z >> 31)
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed), seed_(seed) {}

    std::uint64_t next_u64();

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    /// Standard normal via Box-Muller.
    double normal();
    bool bernoulli(double p) { return uniform() < p; }

    /// Independent child stream; does not advance this generator.
    Rng derive(std::uint64_t stream) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t state_;
    std::uint64_t seed_;
    double spare_normal_ = 0.0;
    bool has_spare_ = false;
};

/// `count` i.i.d. Bernoulli(p) draws. Throws std::invalid_argument unless 0 <= p <= 1.
std::vector<bool> rng_bernoulli(Rng& rng, double p, std::size_t count);

/// Fisher-Yates shuffle of 0..n-1.
std::vector<std::size_t> shuffled_indices(Rng& rng, std::size_t n);

} // namespace qnoise
