#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ntkcorr/network.hpp"
#include "ntkcorr/tensor.hpp"

namespace ntkcorr {

inline constexpr int kMaxJetDirections = 4;

// Mixed-partial Taylor coefficients of every layer with respect to k
// perturbation directions in parameter space. coeffs[l][mask] holds
// d^{popcount(mask)} F^(l) / prod_{j in mask} dt_j of
// F^(l)(theta + sum_j t_j v_j) at t = 0; mask 0 is the plain activation.
struct JetBundle {
    int k = 0;
    std::vector<std::vector<std::vector<double>>> coeffs;

    std::size_t full_mask() const { return (std::size_t{1} << k) - 1; }
    const std::vector<double>& top() const { return coeffs.back()[full_mask()]; }
};

using Directions = std::vector<std::vector<double>>;

JetBundle jet_forward(const NetworkConfig& config, const NetworkParams& params,
                      std::span<const double> x, const Directions& directions);

// Gradient of the top mixed coefficient (output component `output_index`)
// with respect to the flat parameters, holding the directions fixed. One
// reverse sweep through the jet propagation; needs at most 3 directions so
// that activation derivatives stay within the registered order 4.
std::vector<double> jet_adjoint(const NetworkConfig& config, const NetworkParams& params,
                                std::span<const double> x, const Directions& directions,
                                int output_index);

// Exact reverse-mode gradient of F_{output_index}(x); length = params.size().
std::vector<double> gradient(const NetworkConfig& config, const NetworkParams& params,
                             std::span<const double> x, int output_index);

// Theta(x, x') = eta * grad F(x)^T grad F(x'), d_Y x d_Y row-major.
std::vector<double> kernel_eval(const NetworkConfig& config, const NetworkParams& params,
                                std::span<const double> x, std::span<const double> x2, double eta);

// Same kernel via the layerwise recursion (builds the previous layer's
// kernel and sandwiches it through the weights and activation slopes).
// FCNN-family models only; O(n^2) memory, meant for modest widths.
std::vector<double> kernel_layerwise(const NetworkConfig& config, const NetworkParams& params,
                                     std::span<const double> x, std::span<const double> x2,
                                     double eta);

struct CorrelationSpec {
    int D = 0;
    int d = 1;
    std::vector<std::vector<double>> inputs;  // x_0..x_d
    std::vector<int> output_indices;          // i_0..i_d
};

struct CorrelationResult {
    int D = 0;
    int d = 1;
    double eta = 0.0;
    bool prefactor_applied = true;
    std::vector<std::vector<double>> inputs;
    std::vector<int> output_indices;

    double value = 0.0;                 // D = 0
    std::vector<double> vector_value;   // D = 1 (free parameter index)
    NormEstimate norm;                  // D = 2

    // |value|, ||vector||_2, or the norm estimate, as appropriate.
    double magnitude() const;
};

// C^{D,d} with the eta^{D/2+d}/(D! d!) prefactor. D in {0, 1};
// D = 2 goes through correlation_norm_hopm.
CorrelationResult correlation(const NetworkConfig& config, const NetworkParams& params,
                              const CorrelationSpec& spec, double eta);

struct HopmOptions {
    int restarts = 3;
    double tol = 1e-9;
    int max_iters = 200;
    std::uint64_t seed = 0x401dULL;
};

// Subordinate norm of the two free parameter modes of C^{2,d}, estimated
// matrix-free: each matvec contracts grad^{x(2+d)}F with the d gradients
// plus the current iterate via one reverse-over-jets sweep.
CorrelationResult correlation_norm_hopm(const NetworkConfig& config, const NetworkParams& params,
                                        const CorrelationSpec& spec, double eta,
                                        const HopmOptions& opts = {});

// Central-difference polarization for the mixed directional derivative,
// with one Richardson pass; order <= 3. Truncation error O(step^4) after
// extrapolation. Returns one value per output component.
std::vector<double> finite_difference_mixed(const NetworkConfig& config,
                                            const NetworkParams& params, std::span<const double> x,
                                            const Directions& directions, double step = 1e-2);

}  // namespace ntkcorr
