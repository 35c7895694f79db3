#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ntkcorr/asymptotics.hpp"
#include "ntkcorr/jets.hpp"
#include "ntkcorr/network.hpp"

namespace ntkcorr {

// Convex cost; mse is C(u,y) = 1/2 ||u-y||^2.
struct CostSpec {
    std::string id = "mse";

    double value(std::span<const double> u, std::span<const double> y) const;
    std::vector<double> grad(std::span<const double> u, std::span<const double> y) const;
    // Row-major d_Y x d_Y second derivative.
    std::vector<double> hessian(std::span<const double> u, std::span<const double> y) const;
};

// Smallest eigenvalue of C'' over sampled (u, y) pairs; convexity demands
// it stays >= -1e-12.
double convexity_audit(const CostSpec& cost, std::size_t dim, std::size_t samples,
                       std::uint64_t seed);

// One stochastic gradient step on the true model:
// theta <- theta - eta * grad F(x) C'(F(x), y). Returns F(x) before the
// update so callers can record the loss without a second forward pass.
std::vector<double> sgd_step(const NetworkConfig& config, NetworkParams& params,
                             std::span<const double> x, std::span<const double> y,
                             const CostSpec& cost, double eta);

// F_hat(theta)(x) = F(theta_0)(x) + grad F(theta_0)(x)^T (theta - theta_0).
std::vector<double> f_hat_eval(const NetworkConfig& config, const NetworkParams& params0,
                               std::span<const double> theta, std::span<const double> x);

// theta_lin(s+1) = theta_lin(s) - eta * grad F(theta_0)(x_s) C'(...);
// grads_xs holds one gradient per output component.
void theta_lin_step(std::vector<double>& theta_lin,
                    const std::vector<std::vector<double>>& grads_xs,
                    std::span<const double> cprime, double eta);

// Pointwise linearized dynamics on a fixed tracked set. Each tracked point
// carries its initial value and gradient at theta_0; a step consumes the
// fresh input's gradient and applies F_lin(p) -= Theta_0(p, x_s) C'.
class LinTracker {
public:
    LinTracker(const NetworkConfig& config, const NetworkParams& params0,
               const std::vector<std::vector<double>>& points, double eta);

    std::size_t tracked_count() const { return values_.size(); }
    int output_dim() const { return dy_; }

    // F_lin value of tracked point p (cache-miss error outside the set).
    const std::vector<double>& value_at(std::size_t point_index) const;

    // Theta_0(p, x_s) as a d_Y x d_Y block given the step input's gradients.
    std::vector<double> theta0_row(std::size_t point_index,
                                   const std::vector<std::vector<double>>& grads_xs) const;

    void step(const std::vector<std::vector<double>>& grads_xs, std::span<const double> cprime);

    const std::vector<std::vector<double>>& gradient_of(std::size_t point_index) const {
        return grads_[point_index];
    }

private:
    double eta_;
    int dy_;
    std::vector<std::vector<double>> values_;                // per point, length d_Y
    std::vector<std::vector<std::vector<double>>> grads_;    // per point, per output
};

struct TraceRow {
    int step = 0;
    std::uint64_t x_id = 0;
    double loss_sgd = 0.0;
    double loss_lin = 0.0;
    double cprime_norm = 0.0;
    double delta_max = 0.0;
    double delta_mean = 0.0;
    double zeta_norm = 0.0;
    double rho = 0.0;
    double kernel_drift = 0.0;
};

struct DecayFit {
    double T = 0.0;          // log ||C'|| ~ a - s/T over the first half
    double r_squared = 0.0;
    bool exponential = false;  // r_squared >= 0.9
};

struct TrainingTrace {
    std::vector<TraceRow> rows;
    DecayFit decay;
    std::string status = "ok";  // "ok" | "diverged"
    double eta = 0.0;           // base eta from the config
    double rescale = 1.0;
    std::uint64_t seed = 0;

    // Populated when a capture step was requested.
    struct Capture {
        int step = 0;
        std::vector<double> theta;
        std::vector<double> theta_lin;
        std::vector<double> theta0;
    };
    std::optional<Capture> capture;
};

inline constexpr double kDivergenceGuard = 1e6;

// Runs SGD and the three linearized trackers on one shared input stream at
// learning rate r * eta. Rows are recorded at states s = 0..S-1 before each
// update; delta/zeta statistics are taken over the task's probe set.
TrainingTrace train_and_trace(const NetworkConfig& config, const Task& task, const CostSpec& cost,
                              int steps, std::uint64_t seed, double rescale = 1.0,
                              int capture_step = -1);

void write_trace_csv(std::ostream& os, const TrainingTrace& trace);

// Largest c_eta (by doubling) for which the linearized memorization
// recursion on every probe point converges monotonically.
double calibrate_c_eta(const NetworkConfig& config, const Task& task);

struct PgdmlReport {
    std::map<std::string, std::vector<SweepSample>> samples;
    std::map<std::string, AsymptoticFit> fits;
    // condition index (1..4) -> fitted exponent within its band
    std::map<std::string, bool> pass;
};

// Empirical check of the four proper-normalization conditions across a
// width grid: finite initial output, finite first step, maximal kernel
// scaling, and the derivative hierarchy for D = 2, 3.
PgdmlReport pgdml_audit(const NetworkConfig& base, const Task& task, const CostSpec& cost,
                        const std::vector<std::size_t>& widths, std::size_t seeds,
                        std::uint64_t master_seed);

struct PerturbationReport {
    int step = 0;
    double delta_scale = 0.0;     // max probe |delta|
    double residual_rel = 0.0;    // max probe |delta - rhs| / delta_scale
    bool supported = true;
};

// Evaluates the leading-order expansion of delta(s) out of the linearized
// path: grad F^T (theta - theta_lin) plus the three second-order terms in
// (theta_lin - theta_0) and (theta - theta_lin), all matrix-free.
PerturbationReport perturbation_identity_check(const NetworkConfig& config, const Task& task,
                                               const CostSpec& cost, int step,
                                               std::uint64_t seed, double rescale = 1.0,
                                               std::size_t probe_limit = 8);

}  // namespace ntkcorr
