#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntkcorr/activation.hpp"
#include "ntkcorr/asymptotics.hpp"
#include "ntkcorr/rng.hpp"

namespace ntkcorr {

enum class InitScheme { Gaussian, UniformSymmetric, RademacherScaled };
enum class VarianceRule { FanIn, FanOut };
enum class ModelKind { Fcnn, FcnnPerNeuron, QuadraticPerp };

std::string to_string(InitScheme s);
std::string to_string(VarianceRule r);
std::string to_string(ModelKind m);
InitScheme init_scheme_from_string(const std::string& s);
VarianceRule variance_rule_from_string(const std::string& s);
ModelKind model_kind_from_string(const std::string& s);

struct NetworkConfig {
    int depth = 3;         // L: number of affine layers
    int input_dim = 8;     // n_0
    int output_dim = 1;    // n_L
    int hidden_width = 64;  // n_1..n_{L-1}; the sweep's limiting parameter n
    std::string activation = "tanh";
    ModelKind model_kind = ModelKind::Fcnn;
    InitScheme init_scheme = InitScheme::Gaussian;
    VarianceRule variance_rule = VarianceRule::FanIn;
    double bias_variance = 1.0;
    double c_eta = 1.0;        // eta = c_eta / n; <= 0 requests calibration
    bool phi_on_input = false;  // apply phi to the input layer as well
    std::uint64_t quad_feature_seed = 77;  // random-feature draw for the quadratic model

    bool per_neuron() const { return model_kind == ModelKind::FcnnPerNeuron; }

    // n_0..n_L for FCNN variants.
    std::vector<std::size_t> widths() const;

    double eta() const;

    void validate() const;

    nlohmann::json to_json() const;
    static NetworkConfig from_json(const nlohmann::json& j);
};

struct LayerShape {
    std::size_t rows = 0;      // n_l
    std::size_t cols = 0;      // n_{l-1}
    std::size_t w_offset = 0;  // offset of the weight block in the flat vector
    std::size_t b_offset = 0;  // offset of the bias block
    std::size_t bias_len = 0;  // rows for FCNN layers, 0 for the quadratic model
};

// All parameters in one flat vector (the index alpha), with per-layer
// weight/bias views for FCNN variants. The quadratic model uses a single
// coefficient block.
struct NetworkParams {
    std::vector<double> flat;
    std::vector<LayerShape> layers;

    static NetworkParams zeros_for(const NetworkConfig& config);

    std::size_t size() const { return flat.size(); }

    std::span<double> weight(std::size_t layer) {
        const auto& s = layers[layer];
        return {flat.data() + s.w_offset, s.rows * s.cols};
    }
    std::span<const double> weight(std::size_t layer) const {
        const auto& s = layers[layer];
        return {flat.data() + s.w_offset, s.rows * s.cols};
    }
    std::span<double> bias(std::size_t layer) {
        const auto& s = layers[layer];
        return {flat.data() + s.b_offset, s.bias_len};
    }
    std::span<const double> bias(std::size_t layer) const {
        const auto& s = layers[layer];
        return {flat.data() + s.b_offset, s.bias_len};
    }
};

NetworkParams init_params(const NetworkConfig& config, std::uint64_t seed);

// Activation applied to coordinate j of layer `src_layer` when it feeds the
// next affine layer. Resolves the per-neuron variant and the input-layer
// convention.
double phi_value(const NetworkConfig& config, std::size_t src_layer, std::size_t j, double x);
double phi_deriv(const NetworkConfig& config, std::size_t src_layer, std::size_t j, int order,
                 double x);

// F^(0)..F^(L); F^(l) = W^(l) phi(F^(l-1)) + b^(l).
std::vector<std::vector<double>> forward_layers(const NetworkConfig& config,
                                                const NetworkParams& params,
                                                std::span<const double> x);

std::vector<double> forward(const NetworkConfig& config, const NetworkParams& params,
                            std::span<const double> x);

// Random Fourier features f_i(x) = sqrt(2/n) cos(omega_i . x + phase_i) and
// their quarter-turn rotation g = A f pairing coordinates (2i, 2i+1) as
// (-f_{2i+1}, f_{2i}), so g(x) . f(x) = 0 pointwise.
struct QuadPerpFeatures {
    std::size_t n_features = 0;
    std::size_t input_dim = 0;
    std::vector<double> omega;  // n_features x input_dim, row-major
    std::vector<double> phase;

    std::vector<double> features(std::span<const double> x) const;
    static std::vector<double> rotate(const std::vector<double>& f);
};

// Cached per (seed, n_features, input_dim); safe for concurrent use.
const QuadPerpFeatures& quad_features(const NetworkConfig& config);

double quad_value(const QuadPerpFeatures& feats, std::span<const double> theta,
                  std::span<const double> x);

// Width-sweep samples of ||F^(l)|| / sqrt(n_l) per layer, keyed
// "layer_norm_l<k>". Inputs drawn from the unit sphere per cell.
std::map<std::string, std::vector<SweepSample>> layer_norm_audit(
    const NetworkConfig& base, const std::vector<std::size_t>& widths_grid, std::size_t seeds,
    std::uint64_t master_seed);

// Supervised task: spherical inputs, fixed seeded teacher (or analytic
// target), and a probe set drawn once.
struct Task {
    int input_dim = 8;
    int output_dim = 1;
    std::string target = "teacher";  // "teacher" | "sinusoid" | "linear"
    double target_scale = 1.0;
    std::uint64_t task_seed = 1234;
    int teacher_width = 16;
    int teacher_depth = 3;
    std::string teacher_activation = "tanh";
    int probe_count = 32;

    // Built by make_task:
    NetworkConfig teacher_config;
    NetworkParams teacher_params;
    std::vector<std::vector<double>> probe;

    std::vector<double> sample_input(Rng& rng) const;
    std::vector<double> target_at(std::span<const double> x) const;

    nlohmann::json to_json() const;
    static Task from_json(const nlohmann::json& j);
};

Task make_task(int input_dim, int output_dim, const std::string& target, std::uint64_t task_seed,
               int probe_count = 32, double target_scale = 1.0);

// Parameter snapshot: one JSON header line with the shapes, then the flat
// parameter vector as little-endian 64-bit reals.
void save_params(const NetworkParams& params, const std::string& path);
NetworkParams load_params(const std::string& path);

}  // namespace ntkcorr
