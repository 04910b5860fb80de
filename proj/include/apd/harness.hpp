// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "apd/config.hpp"
#include "apd/metrics.hpp"
#include "apd/trainer.hpp"

namespace apd {

/// Datasets for one run seed, indexed by task id.
std::vector<TaskDataset> build_tasks(const ExperimentConfig& config, std::uint64_t seed);

/// Task orders for one run seed.
std::vector<std::vector<int>> build_orders(const ExperimentConfig& config, int num_tasks,
                                           std::uint64_t seed);

struct RunOutcome {
  std::string variant;
  int order_id = 0;
  std::uint64_t seed = 0;
  std::vector<int> order;
  AccuracyHistory accuracy;
  double capacity_pct = 0.0;
  double avg_forgetting = 0.0;  // nan with fewer than two tasks
  double worst_forgetting = 0.0;
};

struct ExperimentReport {
  std::vector<RunOutcome> runs;  // variant-major, then seed, then order
  std::filesystem::path results_csv;
  std::filesystem::path summary_json;
};

/// Worker count from APD_THREADS, else the hardware concurrency; at least 1.
unsigned worker_count();

/// Runs every (variant, order, seed) combination and writes, under
/// config.output: results.csv, summary.json, and per run a JSON-lines log and
/// a final checkpoint in runs/.
ExperimentReport run_experiment(const ExperimentConfig& config);

/// results.csv rows: one per (variant, order, seed, task).
std::string results_csv(const std::vector<RunOutcome>& runs);

}  // namespace apd
