#pragma once

#include <string>
#include <vector>

namespace ntkcorr {

inline constexpr int kMaxDerivativeOrder = 4;

// Scalar activation with closed-form derivatives up to order 4 and a
// registered constant B asserting |phi^[k]| <= B * (k+1)! on the audit
// domain.
struct ActivationSpec {
    std::string id;
    double (*deriv[kMaxDerivativeOrder + 1])(double);  // deriv[0] = phi itself
    double bound_B = 1.0;

    double value(double x) const { return deriv[0](x); }
    double d(int order, double x) const { return deriv[order](x); }
};

// Registered ids: tanh, erf, sin, softplus, identity.
const ActivationSpec& activation(const std::string& id);
bool activation_registered(const std::string& id);
const std::vector<std::string>& activation_ids();

struct ActivationAuditViolation {
    double x = 0.0;
    int order = 0;
    double value = 0.0;
    double limit = 0.0;
};

struct ActivationAuditReport {
    bool bounds_ok = true;
    bool derivatives_consistent = true;
    std::vector<ActivationAuditViolation> violations;
    double max_fd_rel_error = 0.0;  // worst finite-difference mismatch seen
};

// Samples [lo, hi], checks |phi^[k]| <= B*(k+1)! for k = 1..max_order and
// cross-checks each phi^[k] against central differences of phi^[k-1]
// (step 1e-4, relative tolerance 1e-5).
ActivationAuditReport activation_bound_audit(const ActivationSpec& spec, double lo, double hi,
                                             int max_order = kMaxDerivativeOrder,
                                             std::size_t sample_count = 2001);

}  // namespace ntkcorr
