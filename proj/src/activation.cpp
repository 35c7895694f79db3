#include "ntkcorr/activation.hpp"

#include <array>
#include <cmath>

#include "ntkcorr/errors.hpp"

namespace ntkcorr {

namespace {

// ---- tanh -----------------------------------------------------------------
double tanh0(double x) { return std::tanh(x); }
double tanh1(double x) {
    const double t = std::tanh(x);
    return 1.0 - t * t;
}
double tanh2(double x) {
    const double t = std::tanh(x);
    return -2.0 * t * (1.0 - t * t);
}
double tanh3(double x) {
    const double t = std::tanh(x);
    return (1.0 - t * t) * (6.0 * t * t - 2.0);
}
double tanh4(double x) {
    const double t = std::tanh(x);
    return 8.0 * t * (1.0 - t * t) * (2.0 - 3.0 * t * t);
}

// ---- erf ------------------------------------------------------------------
constexpr double kTwoOverSqrtPi = 1.1283791670955126;
double erf0(double x) { return std::erf(x); }
double erf1(double x) { return kTwoOverSqrtPi * std::exp(-x * x); }
double erf2(double x) { return -2.0 * x * erf1(x); }
double erf3(double x) { return (4.0 * x * x - 2.0) * erf1(x); }
double erf4(double x) { return (12.0 * x - 8.0 * x * x * x) * erf1(x); }

// ---- sin ------------------------------------------------------------------
double sin0(double x) { return std::sin(x); }
double sin1(double x) { return std::cos(x); }
double sin2(double x) { return -std::sin(x); }
double sin3(double x) { return -std::cos(x); }
double sin4(double x) { return std::sin(x); }

// ---- softplus ---------------------------------------------------------------
double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}
double softplus0(double x) {
    if (x > 30.0) {
        return x;
    }
    return std::log1p(std::exp(x));
}
double softplus1(double x) { return sigmoid(x); }
double softplus2(double x) {
    const double s = sigmoid(x);
    return s * (1.0 - s);
}
double softplus3(double x) {
    const double s = sigmoid(x);
    return s * (1.0 - s) * (1.0 - 2.0 * s);
}
double softplus4(double x) {
    const double s = sigmoid(x);
    return s * (1.0 - s) * (1.0 - 6.0 * s + 6.0 * s * s);
}

// ---- identity ---------------------------------------------------------------
double id0(double x) { return x; }
double id1(double) { return 1.0; }
double idk(double) { return 0.0; }

const std::array<ActivationSpec, 5> kRegistry = {{
    {"tanh", {tanh0, tanh1, tanh2, tanh3, tanh4}, 0.5},
    {"erf", {erf0, erf1, erf2, erf3, erf4}, 1.0},
    {"sin", {sin0, sin1, sin2, sin3, sin4}, 1.0},
    {"softplus", {softplus0, softplus1, softplus2, softplus3, softplus4}, 1.0},
    {"identity", {id0, id1, idk, idk, idk}, 1.0},
}};

}  // namespace

const ActivationSpec& activation(const std::string& id) {
    for (const auto& spec : kRegistry) {
        if (spec.id == id) {
            return spec;
        }
    }
    throw ConfigError("unknown activation '" + id + "'");
}

bool activation_registered(const std::string& id) {
    for (const auto& spec : kRegistry) {
        if (spec.id == id) {
            return true;
        }
    }
    return false;
}

const std::vector<std::string>& activation_ids() {
    static const std::vector<std::string> ids = [] {
        std::vector<std::string> out;
        for (const auto& spec : kRegistry) {
            out.push_back(spec.id);
        }
        return out;
    }();
    return ids;
}

ActivationAuditReport activation_bound_audit(const ActivationSpec& spec, double lo, double hi,
                                             int max_order, std::size_t sample_count) {
    if (max_order < 1 || max_order > kMaxDerivativeOrder) {
        throw InputError("activation_bound_audit: order must lie in 1..4");
    }
    if (!(lo < hi) || sample_count < 2) {
        throw InputError("activation_bound_audit: bad domain");
    }

    ActivationAuditReport report;
    const double fd_step = 1e-4;
    double factorial = 1.0;  // (k+1)! running product
    std::vector<double> limits(static_cast<std::size_t>(max_order) + 1, 0.0);
    for (int k = 1; k <= max_order; ++k) {
        factorial = 1.0;
        for (int i = 2; i <= k + 1; ++i) {
            factorial *= i;
        }
        limits[static_cast<std::size_t>(k)] = spec.bound_B * factorial;
    }

    for (std::size_t i = 0; i < sample_count; ++i) {
        const double x =
            lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(sample_count - 1);
        for (int k = 1; k <= max_order; ++k) {
            const double dk = spec.d(k, x);
            const double limit = limits[static_cast<std::size_t>(k)];
            if (std::fabs(dk) > limit) {
                report.bounds_ok = false;
                report.violations.push_back({x, k, dk, limit});
            }
            const double fd =
                (spec.d(k - 1, x + fd_step) - spec.d(k - 1, x - fd_step)) / (2.0 * fd_step);
            const double rel = std::fabs(fd - dk) / std::max(1.0, std::fabs(dk));
            report.max_fd_rel_error = std::max(report.max_fd_rel_error, rel);
            if (rel > 1e-5) {
                report.derivatives_consistent = false;
            }
        }
    }
    return report;
}

}  // namespace ntkcorr
