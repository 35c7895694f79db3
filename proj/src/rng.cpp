#include "ntkcorr/rng.hpp"

#include <cmath>

namespace ntkcorr {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
}

}  // namespace

Rng::Rng(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& word : state_) {
        word = splitmix64(s);
    }
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::normal() {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return cached_normal_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    cached_normal_ = radius * std::sin(angle);
    has_cached_normal_ = true;
    return radius * std::cos(angle);
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
}

std::vector<double> Rng::normal_vector(std::size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) {
        v = normal();
    }
    return out;
}

std::vector<double> Rng::unit_sphere(std::size_t dim) {
    std::vector<double> v = normal_vector(dim);
    double norm_sq = 0.0;
    for (double x : v) {
        norm_sq += x * x;
    }
    if (norm_sq == 0.0) {
        v[0] = 1.0;
        return v;
    }
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (double& x : v) {
        x *= inv;
    }
    return v;
}

std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t acc = 0x6a09e667f3bcc908ULL;
    for (std::uint64_t p : parts) {
        acc ^= p + 0x9e3779b97f4a7c15ULL + (acc << 6) + (acc >> 2);
        acc = splitmix64(acc);
    }
    return acc;
}

std::uint64_t hash_str(std::string_view s) {
    // FNV-1a
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace ntkcorr
