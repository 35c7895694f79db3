#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>
#include <vector>

namespace ntkcorr {

// Deterministic RNG with a fixed algorithm (xoshiro256** seeded via
// splitmix64). std::mt19937 + <random> distributions are not bit-stable
// across standard libraries, and every CSV byte here must reproduce from
// a master seed, so the generator and the distributions are pinned.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    // Uniform on [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi);

    // Standard normal via Box-Muller (pairs cached).
    double normal();

    // Integer uniform on [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

    std::vector<double> normal_vector(std::size_t n);

    // Uniform draw from the unit sphere S^{dim-1}.
    std::vector<double> unit_sphere(std::size_t dim);

private:
    std::uint64_t state_[4];
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

// Order-sensitive seed mixer. Streams derived as
// mix_seed({master, hash_str(statistic), n, seed_index}) stay stable when
// other cells are added to a sweep.
std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts);

std::uint64_t hash_str(std::string_view s);

}  // namespace ntkcorr
