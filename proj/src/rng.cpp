#include "qnoise/rng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace qnoise {

namespace {

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace

std::uint64_t Rng::next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix64(state_);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) {
        throw std::invalid_argument("Rng::below: empty range");
    }
    // Multiply-shift; bias is at most n / 2^64.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_normal_;
    }
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_normal_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

Rng Rng::derive(std::uint64_t stream) const {
    return Rng(mix64(seed_ ^ mix64(stream + 0x632BE59BD9B4E019ULL)));
}

std::vector<bool> rng_bernoulli(Rng& rng, double p, std::size_t count) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw std::invalid_argument("rng_bernoulli: p must lie in [0, 1]");
    }
    std::vector<bool> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        out[i] = rng.bernoulli(p);
    }
    return out;
}

std::vector<std::size_t> shuffled_indices(Rng& rng, std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.below(i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

} // namespace qnoise
