#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace ntkcorr {

// Dense tensor of rank r >= 0 stored flat in row-major order.
// Rank 0 is a scalar with a single value.
class DenseTensor {
public:
    DenseTensor() : values_(1, 0.0) {}
    DenseTensor(std::vector<std::size_t> shape, std::vector<double> values);

    static DenseTensor zeros(std::vector<std::size_t> shape);
    static DenseTensor scalar(double v);
    static DenseTensor vector(std::vector<double> v);
    static DenseTensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);
    static DenseTensor random_normal(std::vector<std::size_t> shape, std::uint64_t seed);

    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return values_.size(); }
    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t extent(std::size_t mode) const { return shape_[mode]; }

    const std::vector<double>& values() const { return values_; }
    std::vector<double>& values() { return values_; }

    double at(std::span<const std::size_t> idx) const;
    double& at(std::span<const std::size_t> idx);

    bool all_finite() const;
    bool is_zero() const;

    DenseTensor& operator+=(const DenseTensor& other);
    DenseTensor& operator*=(double s);
    friend DenseTensor operator+(DenseTensor a, const DenseTensor& b) { return a += b; }

    // Flat offset of a multi-index.
    std::size_t offset(std::span<const std::size_t> idx) const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> values_;
};

struct NormEstimate {
    enum class Method { ExactMatrix, PowerIteration, BruteForce };

    double value = 0.0;
    Method method = Method::PowerIteration;
    int restarts = 0;
    int iterations = 0;
    bool converged = false;
    bool is_lower_bound = false;
};

std::string to_string(NormEstimate::Method m);

struct NormOptions {
    int restarts = 8;
    double tol = 1e-10;
    int max_iters = 500;
    std::uint64_t seed = 0x5eedULL;
    bool symmetric_iteration = true;  // shared-vector updates on symmetric modes
};

// Caps for the exhaustive norm search: every extent and the rank must stay
// below these before the sphere-product grid is enumerable.
struct BruteForceCaps {
    std::size_t max_extent = 4;
    std::size_t max_rank = 4;
};

// sup_{unit v^1..v^r} M . (v^1 x ... x v^r) estimated by alternating
// maximization (higher-order power method). Exact for rank 1; converges to
// the largest singular value for rank 2; a certified lower bound for
// rank >= 3. Tensors symmetric under mode permutations additionally run a
// shared-vector iteration, falling back to plain restarts when it stalls.
NormEstimate subordinate_norm(const DenseTensor& m, const NormOptions& opts = {});

// Same, also returning the maximizing unit vectors (one per mode).
std::pair<NormEstimate, std::vector<std::vector<double>>> subordinate_norm_with_vectors(
    const DenseTensor& m, const NormOptions& opts = {});

double frobenius_norm(const DenseTensor& m);

// Grid search over the product of unit spheres (all but the last mode;
// the last mode is maximized in closed form), refined by coordinate
// ascent from the best grid points. Resolution ~ 1/grid_density.
NormEstimate brute_force_norm(const DenseTensor& m, std::size_t grid_density = 8,
                              const BruteForceCaps& caps = {});

// Exact spectral norm of a rank-2 tensor via one-sided Jacobi.
NormEstimate matrix_spectral_norm(const DenseTensor& m);

// Contract the listed modes with the given vectors. Modes must be distinct
// and each vector's length must match its mode extent; result keeps the
// remaining modes in order.
DenseTensor contract(const DenseTensor& m,
                     const std::vector<std::pair<std::size_t, std::vector<double>>>& vectors);

// Outer (direct) product: shape is the concatenation of shapes.
DenseTensor direct_product(const DenseTensor& a, const DenseTensor& b);

// sqrt( mean_samples ||M||^2 / N ) with N the element count per sample.
double norm_expectation(const std::vector<DenseTensor>& samples,
                        const NormOptions& opts = {});

// Entrywise p-th power, p >= 1.
DenseTensor elementwise_power(const DenseTensor& m, unsigned p);

// Debug dump: one row per entry, "i_1,...,i_r,value".
void dump_csv(const DenseTensor& m, std::ostream& os);

}  // namespace ntkcorr
