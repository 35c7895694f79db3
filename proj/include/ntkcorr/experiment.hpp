#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntkcorr/asymptotics.hpp"
#include "ntkcorr/dynamics.hpp"
#include "ntkcorr/network.hpp"

namespace ntkcorr {

// Exit codes shared by the CLI subcommands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInvariantFailure = 1;
inline constexpr int kExitInputError = 2;
inline constexpr int kExitAllCellsDiverged = 3;

struct ExperimentConfig {
    std::string experiment = "corr-sweep";
    NetworkConfig network;

    // task
    std::string target = "teacher";
    double target_scale = 1.0;
    std::uint64_t task_seed = 1234;
    int probe_count = 32;

    // sweep grid
    std::vector<std::size_t> widths = {32, 64, 128, 256, 512, 1024};
    std::size_t seeds = 16;
    std::vector<std::string> statistics;  // corr-sweep; empty = default set
    int steps = 200;
    std::vector<double> rescales = {1.0};
    double quantile = 0.95;

    std::string out_dir = "out";
    int jobs = 1;
    std::uint64_t master_seed = 1;

    Task build_task() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::string& path);
    std::string config_hash() const;
};

// Default statistic set for the correlation sweep.
const std::vector<std::string>& default_corr_statistics();
bool corr_statistic_registered(const std::string& name);

// Runs `count` independent cells on a bounded pool; exceptions inside a
// cell are caught and reported through on_failure without stopping the rest.
void run_cells(std::size_t count, int jobs, const std::function<void(std::size_t)>& cell,
               const std::function<void(std::size_t, const std::string&)>& on_failure);

struct CellFailure {
    std::string statistic;
    std::size_t n = 0;
    std::uint64_t seed = 0;
    std::string error;
};

// One (statistic, width, seed) measurement of a correlation magnitude.
double eval_corr_statistic(const std::string& name, const NetworkConfig& base, const Task& task,
                           std::size_t width, std::size_t seed_index, std::uint64_t master_seed);

struct SelftestOptions {
    bool inject_product_law_fault = false;
    std::string dump_tensor_path;  // debug CSV dump of the seeded oracle tensor
};

int cmd_norm_selftest(const SelftestOptions& opts, std::ostream& log);
int cmd_init_audit(const ExperimentConfig& config, std::ostream& log);
int cmd_corr_sweep(const ExperimentConfig& config, std::ostream& log);
int cmd_ntk_deviation(const ExperimentConfig& config, std::ostream& log);
int cmd_report(const std::string& dir, std::ostream& log);
int cmd_paper_suite(const std::string& out_dir, int jobs, std::uint64_t master_seed,
                    std::ostream& log);

}  // namespace ntkcorr
