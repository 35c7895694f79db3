#include "ntkcorr/asymptotics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "ntkcorr/errors.hpp"

namespace ntkcorr {

namespace {

double quantile_of_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) {
        return 0.0;
    }
    if (sorted.size() == 1) {
        return sorted.front();
    }
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

struct Ols {
    double slope = 0.0;
    double intercept = 0.0;
    double slope_stderr = 0.0;
    double r_squared = 1.0;
};

Ols least_squares(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t k = x.size();
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(k);
    my /= static_cast<double>(k);
    double sxx = 0.0;
    double sxy = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    Ols out;
    out.slope = sxy / sxx;
    out.intercept = my - out.slope * mx;
    double rss = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double resid = y[i] - (out.intercept + out.slope * x[i]);
        rss += resid * resid;
    }
    out.r_squared = syy > 0.0 ? 1.0 - rss / syy : 1.0;
    if (k > 2) {
        out.slope_stderr = std::sqrt(rss / static_cast<double>(k - 2) / sxx);
    }
    return out;
}

std::map<std::size_t, std::vector<double>> group_by_width(
    const std::vector<SweepSample>& samples) {
    std::map<std::size_t, std::vector<double>> by_width;
    for (const auto& s : samples) {
        by_width[s.n].push_back(s.value);
    }
    return by_width;
}

}  // namespace

AsymptoticFit fit_power_law(const std::vector<SweepSample>& samples, double quantile) {
    if (quantile <= 0.0 || quantile > 1.0) {
        throw InputError("fit_power_law: quantile must lie in (0, 1]");
    }
    auto by_width = group_by_width(samples);
    if (by_width.size() < 3) {
        throw InsufficientDataError("fit_power_law: need at least 3 distinct widths");
    }
    for (const auto& [n, vals] : by_width) {
        if (vals.size() < 3) {
            throw InsufficientDataError("fit_power_law: need at least 3 seeds per width");
        }
    }

    AsymptoticFit fit;
    fit.quantile = quantile;
    std::vector<double> log_n;
    std::vector<double> log_q;
    for (auto& [n, vals] : by_width) {
        std::sort(vals.begin(), vals.end());
        WidthStats ws;
        ws.count = vals.size();
        double sum = 0.0;
        for (double v : vals) {
            sum += v;
        }
        ws.mean = sum / static_cast<double>(vals.size());
        ws.median = quantile_of_sorted(vals, 0.5);
        ws.quantile = quantile_of_sorted(vals, quantile);
        fit.per_width_stats[n] = ws;

        if (ws.quantile <= 0.0) {
            const bool all_zero = vals.back() == 0.0;
            if (all_zero) {
                fit.degenerate = true;
            }
            fit.zero_floored = true;
        }
        log_n.push_back(std::log(static_cast<double>(n)));
        log_q.push_back(std::log(std::max(ws.quantile, kLogFloor)));
    }

    if (fit.degenerate) {
        fit.exponent = std::numeric_limits<double>::quiet_NaN();
        fit.log_prefactor = std::numeric_limits<double>::quiet_NaN();
        fit.exponent_stderr = 0.0;
        fit.r_squared = 0.0;
        fit.status = "degenerate-fit: a width produced only zero values";
        return fit;
    }

    const Ols ols = least_squares(log_n, log_q);
    fit.exponent = ols.slope;
    fit.log_prefactor = ols.intercept;
    fit.exponent_stderr = ols.slope_stderr;
    fit.r_squared = ols.r_squared;
    if (fit.zero_floored) {
        fit.status = "zero-floored: some values clamped at the log floor";
    }
    return fit;
}

namespace {

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t k = a.size();
    auto ranks = [](const std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) {
            order[i] = i;
        }
        std::sort(order.begin(), order.end(),
                  [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        std::vector<double> r(n, 0.0);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[order[j + 1]] == v[order[i]]) {
                ++j;
            }
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t t = i; t <= j; ++t) {
                r[order[t]] = avg;
            }
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    double ma = 0.0;
    double mb = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(k);
    mb /= static_cast<double>(k);
    double num = 0.0;
    double da = 0.0;
    double db = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da == 0.0 || db == 0.0) {
        return 0.0;  // constant series: no trend
    }
    return num / std::sqrt(da * db);
}

}  // namespace

BoundTable verify_bound(const std::vector<SweepSample>& samples, double f_exponent,
                        const std::vector<double>& c_grid) {
    if (c_grid.empty()) {
        throw InputError("verify_bound: empty c grid");
    }
    for (std::size_t i = 0; i < c_grid.size(); ++i) {
        if (c_grid[i] <= 0.0 || (i > 0 && c_grid[i] <= c_grid[i - 1])) {
            throw InputError("verify_bound: c grid must be positive ascending");
        }
    }
    const auto by_width = group_by_width(samples);
    if (by_width.empty()) {
        throw InputError("verify_bound: no samples");
    }

    BoundTable table;
    for (double c : c_grid) {
        for (const auto& [n, vals] : by_width) {
            const double bound = c * std::pow(static_cast<double>(n), f_exponent);
            std::size_t ok = 0;
            for (double v : vals) {
                if (v <= bound) {
                    ++ok;
                }
            }
            table.rows.push_back(
                {c, n, static_cast<double>(ok) / static_cast<double>(vals.size())});
        }
    }

    const double c_max = c_grid.back();
    std::vector<double> widths;
    std::vector<double> probs;
    for (const auto& row : table.rows) {
        if (row.c == c_max) {
            widths.push_back(static_cast<double>(row.n));
            probs.push_back(row.probability);
        }
    }
    const std::size_t top = (widths.size() + 1) / 2;
    std::vector<double> w_top(widths.end() - static_cast<std::ptrdiff_t>(top), widths.end());
    std::vector<double> p_top(probs.end() - static_cast<std::ptrdiff_t>(top), probs.end());
    table.spearman_top_half = spearman(w_top, p_top);
    table.consistent = probs.back() >= 0.95 && table.spearman_top_half >= 0.0;
    return table;
}

FamilyFitReport uniform_family_fit(
    const std::map<std::string, std::vector<SweepSample>>& families, double quantile) {
    if (families.empty()) {
        throw InputError("uniform_family_fit: no families");
    }
    FamilyFitReport report;
    std::map<std::size_t, double> envelope;
    std::size_t family_count = 0;
    for (const auto& [label, samples] : families) {
        AsymptoticFit fit = fit_power_law(samples, quantile);
        for (const auto& [n, ws] : fit.per_width_stats) {
            auto it = envelope.find(n);
            if (it == envelope.end()) {
                envelope[n] = ws.quantile;
            } else {
                it->second = std::max(it->second, ws.quantile);
            }
        }
        report.fits.emplace(label, std::move(fit));
        ++family_count;
    }

    AsymptoticFit& shared = report.shared_envelope;
    shared.quantile = quantile;
    std::vector<double> log_n;
    std::vector<double> log_q;
    for (const auto& [n, q] : envelope) {
        WidthStats ws;
        ws.mean = q;
        ws.median = q;
        ws.quantile = q;
        ws.count = family_count;
        shared.per_width_stats[n] = ws;
        if (q <= 0.0) {
            shared.degenerate = true;
        }
        log_n.push_back(std::log(static_cast<double>(n)));
        log_q.push_back(std::log(std::max(q, kLogFloor)));
    }
    if (shared.degenerate) {
        shared.exponent = std::numeric_limits<double>::quiet_NaN();
        shared.log_prefactor = std::numeric_limits<double>::quiet_NaN();
        shared.status = "degenerate-fit: envelope hit zero";
        return report;
    }
    const Ols ols = least_squares(log_n, log_q);
    shared.exponent = ols.slope;
    shared.log_prefactor = ols.intercept;
    shared.exponent_stderr = ols.slope_stderr;
    shared.r_squared = ols.r_squared;
    return report;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_sweep_csv(std::ostream& os,
                     const std::map<std::string, std::vector<SweepSample>>& by_statistic) {
    os << "statistic,n,seed,value\n";
    for (const auto& [stat, samples] : by_statistic) {
        std::vector<SweepSample> sorted = samples;
        std::sort(sorted.begin(), sorted.end(), [](const SweepSample& a, const SweepSample& b) {
            if (a.n != b.n) {
                return a.n < b.n;
            }
            return a.seed < b.seed;
        });
        for (const auto& s : sorted) {
            os << stat << ',' << s.n << ',' << s.seed << ',' << format_double(s.value) << '\n';
        }
    }
}

std::map<std::string, std::vector<SweepSample>> read_sweep_csv(std::istream& is) {
    std::map<std::string, std::vector<SweepSample>> out;
    std::string line;
    if (!std::getline(is, line)) {
        throw InputError("sweep csv: empty stream");
    }
    if (line != "statistic,n,seed,value") {
        throw InputError("sweep csv: unexpected header '" + line + "'");
    }
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::istringstream ss(line);
        std::string stat;
        std::string field;
        SweepSample s;
        if (!std::getline(ss, stat, ',')) {
            throw InputError("sweep csv: bad row at line " + std::to_string(line_no));
        }
        if (!std::getline(ss, field, ',')) {
            throw InputError("sweep csv: bad row at line " + std::to_string(line_no));
        }
        s.n = std::stoull(field);
        if (!std::getline(ss, field, ',')) {
            throw InputError("sweep csv: bad row at line " + std::to_string(line_no));
        }
        s.seed = std::stoull(field);
        if (!std::getline(ss, field)) {
            throw InputError("sweep csv: bad row at line " + std::to_string(line_no));
        }
        s.value = std::stod(field);
        out[stat].push_back(s);
    }
    return out;
}

nlohmann::json fit_to_json(const std::string& statistic, const AsymptoticFit& fit) {
    nlohmann::json j;
    j["statistic"] = statistic;
    j["exponent"] = fit.exponent;
    j["exponent_stderr"] = fit.exponent_stderr;
    j["log_prefactor"] = fit.log_prefactor;
    j["r_squared"] = fit.r_squared;
    j["quantile"] = fit.quantile;
    std::vector<std::size_t> widths;
    std::vector<std::size_t> seeds;
    for (const auto& [n, ws] : fit.per_width_stats) {
        widths.push_back(n);
        seeds.push_back(ws.count);
    }
    j["widths"] = widths;
    j["seeds_per_width"] = seeds;
    return j;
}

}  // namespace ntkcorr
