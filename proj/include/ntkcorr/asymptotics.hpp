#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace ntkcorr {

// One measurement of a statistic at a width of the sweep grid.
struct SweepSample {
    std::size_t n = 0;
    std::uint64_t seed = 0;
    double value = 0.0;
};

struct WidthStats {
    double mean = 0.0;
    double median = 0.0;
    double quantile = 0.0;
    std::size_t count = 0;
};

// Power-law envelope fit: value ~ exp(log_prefactor) * n^exponent, from
// ordinary least squares on (log n, log per-width-quantile).
struct AsymptoticFit {
    double exponent = 0.0;
    double log_prefactor = 0.0;
    double exponent_stderr = 0.0;
    double r_squared = 0.0;
    double quantile = 0.95;
    std::map<std::size_t, WidthStats> per_width_stats;
    bool zero_floored = false;  // some values hit the log floor
    bool degenerate = false;    // a width had only zero values; exponent is NaN
    std::string status = "ok";
};

inline constexpr double kLogFloor = 1e-300;

AsymptoticFit fit_power_law(const std::vector<SweepSample>& samples, double quantile = 0.95);

// Empirical probability table for "||M_n|| <= c * n^f_exponent" across a
// c-grid, plus a consistency verdict: at the largest c the probability at
// the largest width must reach 0.95 and must not trend downward over the
// top half of the width grid.
struct BoundTable {
    struct Row {
        double c = 0.0;
        std::size_t n = 0;
        double probability = 0.0;
    };
    std::vector<Row> rows;
    bool consistent = false;
    double spearman_top_half = 0.0;
};

BoundTable verify_bound(const std::vector<SweepSample>& samples, double f_exponent,
                        const std::vector<double>& c_grid);

// Per-family fits plus the fit of the across-family per-width maximum, the
// finite-sample analogue of one envelope covering every family.
struct FamilyFitReport {
    std::map<std::string, AsymptoticFit> fits;
    AsymptoticFit shared_envelope;
};

FamilyFitReport uniform_family_fit(const std::map<std::string, std::vector<SweepSample>>& families,
                                   double quantile = 0.95);

// CSV with header "statistic,n,seed,value"; rows sorted by (statistic, n, seed).
void write_sweep_csv(std::ostream& os,
                     const std::map<std::string, std::vector<SweepSample>>& by_statistic);
std::map<std::string, std::vector<SweepSample>> read_sweep_csv(std::istream& is);

nlohmann::json fit_to_json(const std::string& statistic, const AsymptoticFit& fit);

// Canonical float formatting used for every CSV/JSON number we emit.
std::string format_double(double v);

}  // namespace ntkcorr
