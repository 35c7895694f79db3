#include "ntkcorr/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "ntkcorr/errors.hpp"
#include "ntkcorr/jets.hpp"
#include "ntkcorr/svg.hpp"
#include "ntkcorr/tensor.hpp"

namespace fs = std::filesystem;

namespace ntkcorr {

Task ExperimentConfig::build_task() const {
    return make_task(network.input_dim, network.output_dim, target, task_seed, probe_count,
                     target_scale);
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j;
    j["experiment"] = experiment;
    j["network"] = network.to_json();
    j["target"] = target;
    j["target_scale"] = target_scale;
    j["task_seed"] = task_seed;
    j["probe_count"] = probe_count;
    j["widths"] = widths;
    j["seeds"] = seeds;
    j["statistics"] = statistics;
    j["steps"] = steps;
    j["rescales"] = rescales;
    j["quantile"] = quantile;
    j["out_dir"] = out_dir;
    j["jobs"] = jobs;
    j["master_seed"] = master_seed;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.experiment = j.value("experiment", c.experiment);
    if (j.contains("network")) {
        c.network = NetworkConfig::from_json(j.at("network"));
    }
    c.target = j.value("target", c.target);
    c.target_scale = j.value("target_scale", c.target_scale);
    c.task_seed = j.value("task_seed", c.task_seed);
    c.probe_count = j.value("probe_count", c.probe_count);
    c.widths = j.value("widths", c.widths);
    c.seeds = j.value("seeds", c.seeds);
    c.statistics = j.value("statistics", c.statistics);
    c.steps = j.value("steps", c.steps);
    c.rescales = j.value("rescales", c.rescales);
    c.quantile = j.value("quantile", c.quantile);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.jobs = j.value("jobs", c.jobs);
    c.master_seed = j.value("master_seed", c.master_seed);
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw InputError("cannot open config '" + path + "'");
    }
    nlohmann::json j;
    is >> j;
    return from_json(j);
}

std::string ExperimentConfig::config_hash() const {
    const std::string dump = to_json().dump();
    std::ostringstream ss;
    ss << std::hex << hash_str(dump);
    return ss.str();
}

const std::vector<std::string>& default_corr_statistics() {
    static const std::vector<std::string> stats = {
        "corr_D0_d1_distinct", "corr_D0_d1_same",  "corr_D0_d2_distinct", "corr_D0_d2_same",
        "corr_D0_d3_distinct", "corr_D0_d3_same",  "corr_D1_d1_distinct", "corr_D1_d1_same",
        "corr_D1_d2_distinct", "corr_D1_d2_same",  "corr_D2_d1_distinct", "corr_D2_d1_same",
    };
    return stats;
}

namespace {

struct CorrStatName {
    int D = 0;
    int d = 1;
    bool same_inputs = false;
};

std::optional<CorrStatName> parse_corr_statistic(const std::string& name) {
    CorrStatName out;
    int consumed = 0;
    char mode[16] = {0};
    if (std::sscanf(name.c_str(), "corr_D%d_d%d_%15s%n", &out.D, &out.d, mode, &consumed) < 3 ||
        static_cast<std::size_t>(consumed) != name.size()) {
        return std::nullopt;
    }
    const std::string m = mode;
    if (m == "same") {
        out.same_inputs = true;
    } else if (m == "distinct") {
        out.same_inputs = false;
    } else {
        return std::nullopt;
    }
    if (out.D < 0 || out.D > 2 || out.d < 1 || out.D + out.d > 4) {
        return std::nullopt;
    }
    return out;
}

}  // namespace

bool corr_statistic_registered(const std::string& name) {
    return parse_corr_statistic(name).has_value();
}

void run_cells(std::size_t count, int jobs, const std::function<void(std::size_t)>& cell,
               const std::function<void(std::size_t, const std::string&)>& on_failure) {
    std::mutex failure_mu;
    auto guarded = [&](std::size_t i) {
        try {
            cell(i);
        } catch (const std::exception& e) {
            std::scoped_lock lock(failure_mu);
            on_failure(i, e.what());
        } catch (...) {
            std::scoped_lock lock(failure_mu);
            on_failure(i, "unknown error");
        }
    };
    if (jobs <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) {
            guarded(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    const int workers = std::min<int>(jobs, static_cast<int>(count));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) {
                    return;
                }
                guarded(i);
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
}

double eval_corr_statistic(const std::string& name, const NetworkConfig& base, const Task& task,
                           std::size_t width, std::size_t seed_index,
                           std::uint64_t master_seed) {
    const auto parsed = parse_corr_statistic(name);
    if (!parsed) {
        throw ConfigError("unknown statistic '" + name + "'");
    }
    NetworkConfig cfg = base;
    cfg.hidden_width = static_cast<int>(width);
    const std::uint64_t cell = mix_seed({master_seed, hash_str(name), width, seed_index});
    const NetworkParams params = init_params(cfg, cell);
    Rng rng(mix_seed({cell, hash_str("inputs")}));

    CorrelationSpec spec;
    spec.D = parsed->D;
    spec.d = parsed->d;
    spec.inputs.push_back(task.sample_input(rng));
    const std::vector<double> shared = task.sample_input(rng);
    for (int a = 1; a <= parsed->d; ++a) {
        spec.inputs.push_back(parsed->same_inputs ? shared : task.sample_input(rng));
    }
    spec.output_indices.assign(static_cast<std::size_t>(parsed->d) + 1, 0);

    const double eta = cfg.eta();
    if (parsed->D == 2) {
        HopmOptions opts;
        opts.restarts = 2;
        opts.tol = 1e-6;
        opts.max_iters = 50;
        opts.seed = mix_seed({cell, hash_str("hopm")});
        return correlation_norm_hopm(cfg, params, spec, eta, opts).magnitude();
    }
    return correlation(cfg, params, spec, eta).magnitude();
}

// ---------------------------------------------------------------------------
// norm selftest
// ---------------------------------------------------------------------------

namespace {

struct InvariantResult {
    std::string name;
    bool pass = true;
    double worst = 0.0;
    std::string note;
};

DenseTensor random_tensor(Rng& rng, const std::vector<std::size_t>& shape) {
    DenseTensor t = DenseTensor::zeros(shape);
    for (double& v : t.values()) {
        v = rng.normal();
    }
    return t;
}

std::vector<std::size_t> pick_shape(Rng& rng) {
    static const std::vector<std::vector<std::size_t>> shapes = {
        {3, 3, 3}, {2, 4}, {5}, {2, 2, 2, 2}, {4, 3, 2},
    };
    return shapes[static_cast<std::size_t>(rng.uniform_int(0, 4))];
}

}  // namespace

int cmd_norm_selftest(const SelftestOptions& opts, std::ostream& log) {
    std::vector<InvariantResult> results;
    const NormOptions norm_opts;

    {
        InvariantResult r;
        r.name = "triangle-inequality";
        for (int i = 0; i < 50; ++i) {
            Rng rng(mix_seed({hash_str("triangle"), static_cast<std::uint64_t>(i)}));
            const auto shape = pick_shape(rng);
            const DenseTensor a = random_tensor(rng, shape);
            const DenseTensor b = random_tensor(rng, shape);
            DenseTensor sum = a;
            sum += b;
            const double lhs = subordinate_norm(sum, norm_opts).value;
            const double rhs =
                subordinate_norm(a, norm_opts).value + subordinate_norm(b, norm_opts).value;
            const double violation = lhs - rhs;
            r.worst = std::max(r.worst, violation);
            if (violation > 1e-8) {
                r.pass = false;
            }
        }
        results.push_back(r);
    }

    {
        InvariantResult r;
        r.name = "contraction-bound";
        for (int i = 0; i < 50; ++i) {
            Rng rng(mix_seed({hash_str("contraction"), static_cast<std::uint64_t>(i)}));
            const auto shape = pick_shape(rng);
            const DenseTensor m = random_tensor(rng, shape);
            const double full = subordinate_norm(m, norm_opts).value;
            const std::size_t q = 1 + static_cast<std::size_t>(rng.uniform_int(
                                          0, static_cast<std::int64_t>(shape.size()) - 1));
            std::vector<std::pair<std::size_t, std::vector<double>>> vecs;
            for (std::size_t k = 0; k < q; ++k) {
                vecs.emplace_back(k, rng.unit_sphere(shape[k]));
            }
            const DenseTensor reduced = contract(m, vecs);
            const double reduced_norm = reduced.rank() == 0
                                            ? std::fabs(reduced.values()[0])
                                            : subordinate_norm(reduced, norm_opts).value;
            const double violation = reduced_norm - full;
            r.worst = std::max(r.worst, violation);
            if (violation > 1e-8) {
                r.pass = false;
            }
        }
        results.push_back(r);
    }

    {
        InvariantResult r;
        r.name = "product-law";
        for (int i = 0; i < 50; ++i) {
            Rng rng(mix_seed({hash_str("product"), static_cast<std::uint64_t>(i)}));
            const DenseTensor a = random_tensor(
                rng, i % 2 == 0 ? std::vector<std::size_t>{2, 3} : std::vector<std::size_t>{4});
            const DenseTensor b = random_tensor(
                rng, i % 3 == 0 ? std::vector<std::size_t>{3} : std::vector<std::size_t>{2, 2});
            const double na = a.rank() == 2 ? matrix_spectral_norm(a).value
                                            : subordinate_norm(a, norm_opts).value;
            const double nb = b.rank() == 2 ? matrix_spectral_norm(b).value
                                            : subordinate_norm(b, norm_opts).value;
            double prod = subordinate_norm(direct_product(a, b), norm_opts).value;
            if (opts.inject_product_law_fault) {
                prod *= 1.01;  // deliberate fault to prove the gate trips
            }
            const double violation = std::fabs(prod - na * nb) / std::max(1e-300, na * nb);
            r.worst = std::max(r.worst, violation);
            if (violation > 1e-6) {
                r.pass = false;
            }
        }
        results.push_back(r);
    }

    {
        InvariantResult r;
        r.name = "frobenius-dominance";
        for (int i = 0; i < 50; ++i) {
            Rng rng(mix_seed({hash_str("dominance"), static_cast<std::uint64_t>(i)}));
            const auto shape = pick_shape(rng);
            const DenseTensor m = random_tensor(rng, shape);
            const double sub = subordinate_norm(m, norm_opts).value;
            const double frob = frobenius_norm(m);
            const double violation = sub - frob;
            r.worst = std::max(r.worst, violation);
            if (violation > 1e-10) {
                r.pass = false;
            }
            if (shape.size() == 1 && std::fabs(sub - frob) > 1e-12) {
                r.pass = false;
                r.note = "vector equality violated";
            }
        }
        results.push_back(r);
    }

    {
        InvariantResult r;
        r.name = "oracle-agreement";
        for (int i = 0; i < 50; ++i) {
            Rng rng(mix_seed({hash_str("oracle"), static_cast<std::uint64_t>(i)}));
            const std::vector<std::vector<std::size_t>> shapes = {{3, 3, 3}, {2, 2, 2}, {4, 4}};
            const auto shape = shapes[static_cast<std::size_t>(i) % shapes.size()];
            const DenseTensor m = random_tensor(rng, shape);
            const double power = subordinate_norm(m, norm_opts).value;
            const double brute = brute_force_norm(m, 8).value;
            const double violation = std::fabs(power - brute) / std::max(1e-300, brute);
            r.worst = std::max(r.worst, violation);
            if (violation > 1e-5) {
                r.pass = false;
            }
        }
        results.push_back(r);
    }

    {
        InvariantResult r;
        r.name = "symmetric-maximizer";
        for (int i = 0; i < 20; ++i) {
            Rng rng(mix_seed({hash_str("symmetric"), static_cast<std::uint64_t>(i)}));
            DenseTensor raw = random_tensor(rng, {3, 3, 3});
            DenseTensor sym = DenseTensor::zeros({3, 3, 3});
            for (std::size_t a = 0; a < 3; ++a) {
                for (std::size_t b = 0; b < 3; ++b) {
                    for (std::size_t c = 0; c < 3; ++c) {
                        double acc = 0.0;
                        const std::size_t perms[6][3] = {{a, b, c}, {a, c, b}, {b, a, c},
                                                         {b, c, a}, {c, a, b}, {c, b, a}};
                        for (const auto& p : perms) {
                            acc += raw.at(std::span<const std::size_t>(p, 3));
                        }
                        const std::size_t idx[3] = {a, b, c};
                        sym.at(std::span<const std::size_t>(idx, 3)) = acc / 6.0;
                    }
                }
            }
            NormOptions plain_only = norm_opts;
            plain_only.symmetric_iteration = false;
            const double with_sym = subordinate_norm(sym, norm_opts).value;
            const double plain = subordinate_norm(sym, plain_only).value;
            const double violation = plain - with_sym;
            r.worst = std::max(r.worst, violation);
            if (violation > 1e-8) {
                r.pass = false;
            }
        }
        results.push_back(r);
    }

    {
        InvariantResult r;
        r.name = "norm-expectation";
        std::vector<double> unit(9, 0.0);
        unit[4] = 1.0;
        const double single = norm_expectation({DenseTensor::vector(unit)});
        if (std::fabs(single - 1.0 / 3.0) > 1e-12) {
            r.pass = false;
        }
        Rng rng(hash_str("norm-expectation"));
        std::vector<DenseTensor> samples;
        for (int i = 0; i < 200; ++i) {
            samples.push_back(DenseTensor::vector(rng.normal_vector(64)));
        }
        const double mc = norm_expectation(samples);
        r.worst = std::fabs(mc - 1.0);
        if (r.worst > 0.05) {
            r.pass = false;
        }
        results.push_back(r);
    }

    bool all_pass = true;
    log << "norm selftest\n";
    for (const auto& r : results) {
        all_pass = all_pass && r.pass;
        log << "  " << (r.pass ? "PASS" : "FAIL") << "  " << r.name << "  (worst "
            << format_double(r.worst) << (r.note.empty() ? "" : "; " + r.note) << ")\n";
    }

    if (!opts.dump_tensor_path.empty()) {
        std::ofstream os(opts.dump_tensor_path);
        if (!os) {
            log << "cannot open dump path '" << opts.dump_tensor_path << "'\n";
            return kExitInputError;
        }
        dump_csv(DenseTensor::random_normal({3, 3, 3}, 100), os);
        log << "  dumped seeded 3x3x3 tensor to " << opts.dump_tensor_path << "\n";
    }
    return all_pass ? kExitOk : kExitInvariantFailure;
}

// ---------------------------------------------------------------------------
// init audit
// ---------------------------------------------------------------------------

namespace {

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) {
        throw InputError("cannot open '" + path + "'");
    }
    os << j.dump(2) << '\n';
}

PlotSeries fit_line_series(const AsymptoticFit& fit, double x_lo, double x_hi,
                           const std::string& label, const std::string& color) {
    PlotSeries line;
    line.label = label;
    line.color = color;
    line.draw_line = true;
    for (int i = 0; i <= 32; ++i) {
        const double lx = std::log(x_lo) + (std::log(x_hi) - std::log(x_lo)) * i / 32.0;
        line.points.emplace_back(std::exp(lx),
                                 std::exp(fit.log_prefactor + fit.exponent * lx));
    }
    return line;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

int cmd_init_audit(const ExperimentConfig& config, std::ostream& log) {
    if (config.widths.size() < 3) {
        log << "init-audit: need at least 3 widths\n";
        return kExitInputError;
    }
    fs::create_directories(config.out_dir);
    const auto samples =
        layer_norm_audit(config.network, config.widths, config.seeds, config.master_seed);

    {
        std::ofstream os(fs::path(config.out_dir) / "init_audit.csv");
        write_sweep_csv(os, samples);
    }

    nlohmann::json summary;
    summary["experiment"] = "init-audit";
    summary["config_hash"] = config.config_hash();
    bool any_degenerate = false;
    std::vector<PlotSeries> series;
    std::size_t color_idx = 0;
    for (const auto& [stat, ss] : samples) {
        const AsymptoticFit fit = fit_power_law(ss, config.quantile);
        any_degenerate = any_degenerate || fit.degenerate;
        write_json_file((fs::path(config.out_dir) / (stat + "_fit.json")).string(),
                        fit_to_json(stat, fit));
        summary["fits"][stat] = fit_to_json(stat, fit);
        log << "  " << stat << ": exponent " << format_double(fit.exponent) << " +- "
            << format_double(fit.exponent_stderr) << (fit.degenerate ? "  [degenerate]" : "")
            << "\n";

        PlotSeries pts;
        pts.label = stat;
        pts.color = kPalette[color_idx % 8];
        for (const auto& s : ss) {
            pts.points.emplace_back(static_cast<double>(s.n), s.value);
        }
        series.push_back(pts);
        if (!fit.degenerate) {
            series.push_back(fit_line_series(fit, static_cast<double>(config.widths.front()),
                                             static_cast<double>(config.widths.back()), "",
                                             kPalette[color_idx % 8]));
        }
        ++color_idx;
    }
    write_json_file((fs::path(config.out_dir) / "summary.json").string(), summary);

    PlotOptions po;
    po.title = "layer norms vs width";
    po.x_label = "n";
    po.y_label = "||F^(l)|| / sqrt(n_l)";
    po.log_x = true;
    po.log_y = true;
    write_plot((fs::path(config.out_dir) / "init_audit.svg").string(), series, po);

    if (any_degenerate) {
        log << "init-audit: degenerate fit present (warning)\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// correlation sweep
// ---------------------------------------------------------------------------

int cmd_corr_sweep(const ExperimentConfig& config, std::ostream& log) {
    const std::vector<std::string>& stats =
        config.statistics.empty() ? default_corr_statistics() : config.statistics;
    for (const auto& s : stats) {
        if (!corr_statistic_registered(s)) {
            log << "corr-sweep: unsupported statistic '" << s << "'\n";
            return kExitInputError;
        }
    }
    fs::create_directories(config.out_dir);
    const Task task = config.build_task();

    struct Cell {
        std::size_t stat_idx;
        std::size_t n;
        std::size_t seed;
    };
    std::vector<Cell> cells;
    for (std::size_t si = 0; si < stats.size(); ++si) {
        for (std::size_t n : config.widths) {
            for (std::size_t seed = 0; seed < config.seeds; ++seed) {
                cells.push_back({si, n, seed});
            }
        }
    }
    std::vector<std::optional<double>> values(cells.size());
    std::vector<CellFailure> failures;
    std::mutex fail_mu;

    run_cells(
        cells.size(), config.jobs,
        [&](std::size_t i) {
            const Cell& c = cells[i];
            values[i] = eval_corr_statistic(stats[c.stat_idx], config.network, task, c.n, c.seed,
                                            config.master_seed);
        },
        [&](std::size_t i, const std::string& err) {
            const Cell& c = cells[i];
            std::scoped_lock lock(fail_mu);
            failures.push_back({stats[c.stat_idx], c.n, c.seed, err});
        });

    std::map<std::string, std::vector<SweepSample>> by_stat;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (values[i]) {
            by_stat[stats[cells[i].stat_idx]].push_back({cells[i].n, cells[i].seed, *values[i]});
        }
    }
    {
        std::ofstream os(fs::path(config.out_dir) / "sweep.csv");
        write_sweep_csv(os, by_stat);
    }
    if (!failures.empty()) {
        std::ofstream os(fs::path(config.out_dir) / "failures.csv");
        os << "statistic,n,seed,error\n";
        for (const auto& f : failures) {
            os << f.statistic << ',' << f.n << ',' << f.seed << ',' << f.error << '\n';
        }
    }

    nlohmann::json summary;
    summary["experiment"] = "corr-sweep";
    summary["config_hash"] = config.config_hash();
    summary["failed_cells"] = failures.size();
    log << "correlation exponent summary\n";
    for (const auto& [stat, ss] : by_stat) {
        AsymptoticFit fit;
        try {
            fit = fit_power_law(ss, config.quantile);
        } catch (const InsufficientDataError& e) {
            log << "  " << stat << ": " << e.what() << "\n";
            continue;
        }
        write_json_file((fs::path(config.out_dir) / (stat + "_fit.json")).string(),
                        fit_to_json(stat, fit));
        summary["fits"][stat] = fit_to_json(stat, fit);
        log << "  " << stat << ": exponent " << format_double(fit.exponent) << " +- "
            << format_double(fit.exponent_stderr) << "  (r2 " << format_double(fit.r_squared)
            << (fit.degenerate ? ", degenerate" : "") << ")\n";

        PlotSeries pts;
        pts.label = stat;
        pts.color = kPalette[0];
        for (const auto& s : ss) {
            pts.points.emplace_back(static_cast<double>(s.n), s.value);
        }
        std::vector<PlotSeries> series{pts};
        if (!fit.degenerate) {
            series.push_back(fit_line_series(fit, static_cast<double>(config.widths.front()),
                                             static_cast<double>(config.widths.back()),
                                             "fit", kPalette[1]));
        }
        PlotOptions po;
        po.title = stat + " vs width";
        po.x_label = "n";
        po.y_label = "|value|";
        po.log_x = true;
        po.log_y = true;
        write_plot((fs::path(config.out_dir) / (stat + ".svg")).string(), series, po);
    }
    write_json_file((fs::path(config.out_dir) / "summary.json").string(), summary);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// ntk deviation
// ---------------------------------------------------------------------------

namespace {

std::string rescale_tag(double r) {
    std::ostringstream ss;
    ss << r;
    std::string s = ss.str();
    for (char& c : s) {
        if (c == '.') {
            c = 'p';
        }
    }
    return s;
}

// log-log slope of delta_max(s) over the second half of the trace
double late_delta_slope(const TrainingTrace& trace) {
    const std::size_t total = trace.rows.size();
    double sx = 0.0;
    double sy = 0.0;
    double sxx = 0.0;
    double sxy = 0.0;
    std::size_t k = 0;
    for (std::size_t s = total / 2; s < total; ++s) {
        const double d = trace.rows[s].delta_max;
        if (d <= 0.0 || trace.rows[s].step <= 0) {
            continue;
        }
        const double x = std::log(static_cast<double>(trace.rows[s].step));
        const double y = std::log(d);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++k;
    }
    if (k < 3) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    const double kk = static_cast<double>(k);
    return (kk * sxy - sx * sy) / (kk * sxx - sx * sx);
}

double median(std::vector<double> v) {
    if (v.empty()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

}  // namespace

int cmd_ntk_deviation(const ExperimentConfig& config, std::ostream& log) {
    if (config.widths.empty() || config.rescales.empty()) {
        log << "ntk-deviation: empty width or rescale grid\n";
        return kExitInputError;
    }
    fs::create_directories(fs::path(config.out_dir) / "traces");
    const Task task = config.build_task();
    const CostSpec cost;

    NetworkConfig base = config.network;
    if (base.c_eta <= 0.0) {
        NetworkConfig probe_cfg = base;
        probe_cfg.hidden_width = static_cast<int>(config.widths.front());
        probe_cfg.c_eta = 1.0;
        base.c_eta = calibrate_c_eta(probe_cfg, task);
        log << "calibrated c_eta = " << format_double(base.c_eta) << "\n";
    }

    struct Cell {
        std::size_t n;
        std::size_t seed;
        double rescale;
    };
    std::vector<Cell> cells;
    for (std::size_t n : config.widths) {
        for (std::size_t seed = 0; seed < config.seeds; ++seed) {
            for (double r : config.rescales) {
                cells.push_back({n, seed, r});
            }
        }
    }

    struct CellResult {
        double delta_final = 0.0;
        double delta_slope = 0.0;
        double t_fit = 0.0;
        double decay_r2 = 0.0;
        std::string status;
        std::vector<double> log_cprime_first_half;
    };
    std::vector<std::optional<CellResult>> results(cells.size());
    std::vector<CellFailure> failures;
    std::mutex fail_mu;

    run_cells(
        cells.size(), config.jobs,
        [&](std::size_t i) {
            const Cell& c = cells[i];
            NetworkConfig cfg = base;
            cfg.hidden_width = static_cast<int>(c.n);
            // the stream seed ignores the rescale so r-variants share paths
            const std::uint64_t run_seed =
                mix_seed({config.master_seed, hash_str("ntk-deviation"), c.n, c.seed});
            const TrainingTrace trace =
                train_and_trace(cfg, task, cost, config.steps, run_seed, c.rescale);

            const std::string trace_name = "trace_n" + std::to_string(c.n) + "_seed" +
                                           std::to_string(c.seed) + "_r" +
                                           rescale_tag(c.rescale) + ".csv";
            {
                std::ofstream os(fs::path(config.out_dir) / "traces" / trace_name);
                write_trace_csv(os, trace);
            }
            nlohmann::json meta;
            meta["config_hash"] = config.config_hash();
            meta["seed"] = run_seed;
            meta["eta"] = trace.eta;
            meta["rescale"] = trace.rescale;
            meta["T"] = trace.decay.T;
            meta["decay_r_squared"] = trace.decay.r_squared;
            meta["decay_exponential"] = trace.decay.exponential;
            meta["status"] = trace.status;
            write_json_file((fs::path(config.out_dir) / "traces" /
                             (trace_name.substr(0, trace_name.size() - 4) + "_meta.json"))
                                .string(),
                            meta);

            CellResult res;
            res.status = trace.status;
            res.delta_final = trace.rows.back().delta_max;
            res.delta_slope = late_delta_slope(trace);
            res.t_fit = trace.decay.T;
            res.decay_r2 = trace.decay.r_squared;
            for (std::size_t s = 0; s < trace.rows.size() / 2; ++s) {
                res.log_cprime_first_half.push_back(
                    std::log(std::max(trace.rows[s].cprime_norm, kLogFloor)));
            }
            results[i] = std::move(res);
        },
        [&](std::size_t i, const std::string& err) {
            const Cell& c = cells[i];
            std::scoped_lock lock(fail_mu);
            failures.push_back({"ntk_deviation", c.n, c.seed, err});
        });

    // usable = finished without divergence
    std::size_t diverged = 0;
    std::size_t usable = 0;
    for (const auto& r : results) {
        if (r && r->status == "ok") {
            ++usable;
        } else if (r) {
            ++diverged;
        }
    }
    if (usable == 0) {
        log << "ntk-deviation: every cell diverged or failed\n";
        return kExitAllCellsDiverged;
    }

    const double base_rescale = config.rescales.front();
    std::map<std::string, std::vector<SweepSample>> sweeps;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (!results[i] || results[i]->status != "ok") {
            continue;
        }
        if (cells[i].rescale == base_rescale && results[i]->delta_final > 0.0) {
            sweeps["ntk_delta_final"].push_back(
                {cells[i].n, cells[i].seed, results[i]->delta_final});
        }
    }
    {
        std::ofstream os(fs::path(config.out_dir) / "sweep.csv");
        write_sweep_csv(os, sweeps);
    }
    if (!failures.empty()) {
        std::ofstream os(fs::path(config.out_dir) / "failures.csv");
        os << "statistic,n,seed,error\n";
        for (const auto& f : failures) {
            os << f.statistic << ',' << f.n << ',' << f.seed << ',' << f.error << '\n';
        }
    }

    nlohmann::json summary;
    summary["experiment"] = "ntk-deviation";
    summary["config_hash"] = config.config_hash();
    summary["c_eta"] = base.c_eta;
    summary["diverged_cells"] = diverged;
    summary["failed_cells"] = failures.size();

    if (sweeps.count("ntk_delta_final") && config.widths.size() >= 3) {
        try {
            const AsymptoticFit fit =
                fit_power_law(sweeps.at("ntk_delta_final"), config.quantile);
            write_json_file((fs::path(config.out_dir) / "ntk_delta_final_fit.json").string(),
                            fit_to_json("ntk_delta_final", fit));
            summary["fits"]["ntk_delta_final"] = fit_to_json("ntk_delta_final", fit);
            log << "  delta_final vs n: exponent " << format_double(fit.exponent) << " +- "
                << format_double(fit.exponent_stderr) << "\n";
        } catch (const InsufficientDataError& e) {
            log << "  delta fit: " << e.what() << "\n";
        }
    }

    // per (n, rescale): median late slope, median decay stats, and the
    // ensemble-mean log C' fit over the first half
    for (std::size_t n : config.widths) {
        for (double r : config.rescales) {
            std::vector<double> slopes;
            std::vector<double> r2s;
            std::vector<std::vector<double>> ensemble;
            std::vector<double> finals;
            for (std::size_t i = 0; i < cells.size(); ++i) {
                if (cells[i].n != n || cells[i].rescale != r || !results[i] ||
                    results[i]->status != "ok") {
                    continue;
                }
                slopes.push_back(results[i]->delta_slope);
                r2s.push_back(results[i]->decay_r2);
                ensemble.push_back(results[i]->log_cprime_first_half);
                finals.push_back(results[i]->delta_final);
            }
            if (ensemble.empty()) {
                continue;
            }
            std::size_t min_len = ensemble.front().size();
            for (const auto& e : ensemble) {
                min_len = std::min(min_len, e.size());
            }
            double ens_r2 = 0.0;
            double ens_T = 0.0;
            if (min_len >= 3) {
                std::vector<double> xs(min_len);
                std::vector<double> ys(min_len, 0.0);
                for (std::size_t s = 0; s < min_len; ++s) {
                    xs[s] = static_cast<double>(s);
                    for (const auto& e : ensemble) {
                        ys[s] += e[s];
                    }
                    ys[s] /= static_cast<double>(ensemble.size());
                }
                double mx = 0.0;
                double my = 0.0;
                for (std::size_t s = 0; s < min_len; ++s) {
                    mx += xs[s];
                    my += ys[s];
                }
                mx /= static_cast<double>(min_len);
                my /= static_cast<double>(min_len);
                double sxx = 0.0;
                double sxy = 0.0;
                double syy = 0.0;
                for (std::size_t s = 0; s < min_len; ++s) {
                    sxx += (xs[s] - mx) * (xs[s] - mx);
                    sxy += (xs[s] - mx) * (ys[s] - my);
                    syy += (ys[s] - my) * (ys[s] - my);
                }
                const double slope = sxy / sxx;
                double rss = 0.0;
                for (std::size_t s = 0; s < min_len; ++s) {
                    const double e2 = ys[s] - (my + slope * (xs[s] - mx));
                    rss += e2 * e2;
                }
                ens_r2 = syy > 0.0 ? 1.0 - rss / syy : 1.0;
                ens_T = slope < 0.0 ? -1.0 / slope : std::numeric_limits<double>::infinity();
            }
            nlohmann::json group;
            group["n"] = n;
            group["rescale"] = r;
            group["median_delta_slope"] = median(slopes);
            group["median_decay_r_squared"] = median(r2s);
            group["ensemble_decay_r_squared"] = ens_r2;
            group["ensemble_T"] = ens_T;
            group["median_delta_final"] = median(finals);
            summary["groups"].push_back(group);
        }
    }

    // paired rescale response at fixed n (same seeds share input streams)
    for (std::size_t n : config.widths) {
        for (std::size_t ri = 1; ri < config.rescales.size(); ++ri) {
            std::vector<double> ratios;
            for (std::size_t seed = 0; seed < config.seeds; ++seed) {
                double base_v = 0.0;
                double var_v = 0.0;
                for (std::size_t i = 0; i < cells.size(); ++i) {
                    if (cells[i].n != n || cells[i].seed != seed || !results[i] ||
                        results[i]->status != "ok") {
                        continue;
                    }
                    if (cells[i].rescale == base_rescale) {
                        base_v = results[i]->delta_final;
                    } else if (cells[i].rescale == config.rescales[ri]) {
                        var_v = results[i]->delta_final;
                    }
                }
                if (base_v > 0.0 && var_v > 0.0) {
                    ratios.push_back(var_v / base_v);
                }
            }
            if (!ratios.empty()) {
                nlohmann::json rr;
                rr["n"] = n;
                rr["rescale"] = config.rescales[ri];
                rr["median_delta_ratio_vs_base"] = median(ratios);
                summary["rescale_response"].push_back(rr);
            }
        }
    }

    write_json_file((fs::path(config.out_dir) / "summary.json").string(), summary);

    // overlay plot: delta(s) for seed 0 at the base rescale, one curve per width
    std::vector<PlotSeries> series;
    std::size_t color_idx = 0;
    for (std::size_t n : config.widths) {
        const std::string trace_name = "trace_n" + std::to_string(n) + "_seed0_r" +
                                       rescale_tag(base_rescale) + ".csv";
        std::ifstream is(fs::path(config.out_dir) / "traces" / trace_name);
        if (!is) {
            continue;
        }
        PlotSeries s;
        s.label = "n=" + std::to_string(n);
        s.color = kPalette[color_idx++ % 8];
        s.draw_line = true;
        std::string line;
        std::getline(is, line);  // header
        while (std::getline(is, line)) {
            std::istringstream ss(line);
            std::string field;
            std::vector<std::string> fields;
            while (std::getline(ss, field, ',')) {
                fields.push_back(field);
            }
            if (fields.size() >= 6) {
                const double step = std::stod(fields[0]);
                const double dmax = std::stod(fields[5]);
                if (step > 0 && dmax > 0) {
                    s.points.emplace_back(step, dmax);
                }
            }
        }
        series.push_back(std::move(s));
    }
    PlotOptions po;
    po.title = "deviation from linearized dynamics";
    po.x_label = "step";
    po.y_label = "max probe |F - F_lin|";
    po.log_x = true;
    po.log_y = true;
    write_plot((fs::path(config.out_dir) / "delta_overlay.svg").string(), series, po);

    return kExitOk;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

int cmd_report(const std::string& dir, std::ostream& log) {
    if (!fs::exists(dir)) {
        log << "report: directory '" << dir << "' is absent\n";
        return kExitInputError;
    }
    nlohmann::json report;
    std::vector<std::string> fit_files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) {
            continue;
        }
        const std::string name = entry.path().filename().string();
        if (name.size() > 9 && name.substr(name.size() - 9) == "_fit.json") {
            fit_files.push_back(entry.path().string());
        }
    }
    if (fit_files.empty()) {
        log << "report: no *_fit.json files under '" << dir << "'\n";
        return kExitInputError;
    }
    std::sort(fit_files.begin(), fit_files.end());
    for (const auto& path : fit_files) {
        std::ifstream is(path);
        nlohmann::json j;
        is >> j;
        const std::string stat = j.value("statistic", fs::path(path).stem().string());
        report["statistics"][stat] = j;
    }
    report["fit_count"] = fit_files.size();
    write_json_file((fs::path(dir) / "report.json").string(), report);
    log << "report: aggregated " << fit_files.size() << " fits into "
        << (fs::path(dir) / "report.json").string() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// paper suite
// ---------------------------------------------------------------------------

int cmd_paper_suite(const std::string& out_dir, int jobs, std::uint64_t master_seed,
                    std::ostream& log) {
    int worst = kExitOk;

    log << "[1/4] norm selftest\n";
    worst = std::max(worst, cmd_norm_selftest({}, log));

    log << "[2/4] init audit\n";
    ExperimentConfig init_cfg;
    init_cfg.experiment = "init-audit";
    init_cfg.network.depth = 3;
    init_cfg.network.input_dim = 8;
    init_cfg.network.activation = "tanh";
    init_cfg.widths = {32, 64, 128, 256, 512, 1024};
    init_cfg.seeds = 16;
    init_cfg.out_dir = (fs::path(out_dir) / "init_audit").string();
    init_cfg.jobs = jobs;
    init_cfg.master_seed = master_seed;
    worst = std::max(worst, cmd_init_audit(init_cfg, log));

    log << "[3/4] correlation sweep\n";
    ExperimentConfig corr_cfg = init_cfg;
    corr_cfg.experiment = "corr-sweep";
    corr_cfg.out_dir = (fs::path(out_dir) / "corr_sweep").string();
    corr_cfg.seeds = 12;
    worst = std::max(worst, cmd_corr_sweep(corr_cfg, log));

    log << "[4/4] ntk deviation\n";
    ExperimentConfig dev_cfg = init_cfg;
    dev_cfg.experiment = "ntk-deviation";
    dev_cfg.out_dir = (fs::path(out_dir) / "ntk_deviation").string();
    dev_cfg.widths = {64, 128, 256, 512};
    dev_cfg.seeds = 6;
    dev_cfg.steps = 101;
    dev_cfg.rescales = {1.0, 2.0};
    dev_cfg.network.c_eta = 0.0;  // calibrate
    worst = std::max(worst, cmd_ntk_deviation(dev_cfg, log));

    cmd_report(out_dir, log);
    return worst;
}

}  // namespace ntkcorr
