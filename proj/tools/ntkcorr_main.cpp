#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ntkcorr/errors.hpp"
#include "ntkcorr/experiment.hpp"

namespace {

// Shared --config/--out/--jobs/--master-seed handling for the sweep-style
// subcommands.
struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    int jobs = 0;
    std::uint64_t master_seed = 0;
    bool has_master_seed = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config JSON");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--jobs", args.jobs, "worker count");
    cmd->add_option("--master-seed", args.master_seed, "master seed")
        ->each([&](const std::string&) { args.has_master_seed = true; });
}

ntkcorr::ExperimentConfig resolve_config(const CommonArgs& args,
                                         const std::string& experiment) {
    ntkcorr::ExperimentConfig cfg;
    if (!args.config_path.empty()) {
        cfg = ntkcorr::ExperimentConfig::load(args.config_path);
    }
    cfg.experiment = experiment;
    if (!args.out_dir.empty()) {
        cfg.out_dir = args.out_dir;
    }
    if (args.jobs > 0) {
        cfg.jobs = args.jobs;
    }
    if (args.has_master_seed) {
        cfg.master_seed = args.master_seed;
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"weak derivative correlations and NTK linearization experiments"};
    app.require_subcommand(1);

    ntkcorr::SelftestOptions selftest_opts;
    CLI::App* selftest = app.add_subcommand("norm-selftest", "run the tensor norm invariant battery");
    selftest->add_flag("--inject-product-law-fault", selftest_opts.inject_product_law_fault,
                       "deliberately break the product law (verifies the gate trips)");
    selftest->add_option("--dump-tensor", selftest_opts.dump_tensor_path,
                         "debug CSV dump of the seeded oracle tensor");

    CommonArgs init_args;
    CLI::App* init_audit = app.add_subcommand("init-audit", "layer norm flatness across widths");
    add_common(init_audit, init_args);

    CommonArgs corr_args;
    CLI::App* corr = app.add_subcommand("corr-sweep", "correlation magnitudes across widths");
    add_common(corr, corr_args);

    CommonArgs dev_args;
    CLI::App* dev = app.add_subcommand("ntk-deviation", "SGD vs linearized dynamics deviation");
    add_common(dev, dev_args);

    std::string report_dir;
    CLI::App* report = app.add_subcommand("report", "aggregate fit JSONs into one report");
    report->add_option("--dir", report_dir, "directory holding *_fit.json files")->required();

    CommonArgs suite_args;
    CLI::App* suite = app.add_subcommand("paper-suite", "default experiment bundle");
    add_common(suite, suite_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : ntkcorr::kExitInputError;
    }

    try {
        if (selftest->parsed()) {
            return ntkcorr::cmd_norm_selftest(selftest_opts, std::cout);
        }
        if (init_audit->parsed()) {
            return ntkcorr::cmd_init_audit(resolve_config(init_args, "init-audit"), std::cout);
        }
        if (corr->parsed()) {
            return ntkcorr::cmd_corr_sweep(resolve_config(corr_args, "corr-sweep"), std::cout);
        }
        if (dev->parsed()) {
            return ntkcorr::cmd_ntk_deviation(resolve_config(dev_args, "ntk-deviation"),
                                              std::cout);
        }
        if (report->parsed()) {
            return ntkcorr::cmd_report(report_dir, std::cout);
        }
        if (suite->parsed()) {
            const std::string out = suite_args.out_dir.empty() ? "paper_suite" : suite_args.out_dir;
            const int jobs = suite_args.jobs > 0 ? suite_args.jobs : 1;
            const std::uint64_t seed = suite_args.has_master_seed ? suite_args.master_seed : 1;
            return ntkcorr::cmd_paper_suite(out, jobs, seed, std::cout);
        }
    } catch (const ntkcorr::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return ntkcorr::kExitInputError;
    } catch (const ntkcorr::InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return ntkcorr::kExitInputError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return ntkcorr::kExitInputError;
    }
    return ntkcorr::kExitInputError;
}
