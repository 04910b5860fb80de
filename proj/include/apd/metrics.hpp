// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <span>
#include <vector>

#include "apd/matrix.hpp"
#include "apd/params.hpp"
#include "apd/taskgen.hpp"

namespace apd {

/// Fraction of argmax-correct predictions; ties go to the lowest class index.
double evaluate(const DecomposedState& state, TaskId t, const Batch& testset);

/// Index of the largest entry, lowest index on ties.
std::size_t argmax(std::span<const double> values);

/// Accuracy of every task seen so far, recorded after each training step of
/// one sequence. acc[c][p] is the accuracy of the task trained at position p,
/// measured after the task at position c finished (p <= c).
struct AccuracyHistory {
  std::vector<TaskId> order;
  std::vector<std::vector<double>> acc;

  double final_accuracy(TaskId t) const;
  double mean_final_accuracy() const;
};

/// Final per-task accuracies across task orders, for order-robustness.
struct PerformanceMatrix {
  std::vector<AccuracyHistory> runs;  // one per order

  std::size_t orders() const { return runs.size(); }
  /// finals[r][t]: final accuracy of task id t under order r.
  std::vector<std::vector<double>> finals() const;
};

/// max - min of one task's final performance across orders.
double opd(std::span<const double> per_order_final);

/// OPD of every task, given finals[r][t].
std::vector<double> opd_per_task(const std::vector<std::vector<double>>& finals);
double aopd(const std::vector<std::vector<double>>& finals);
double mopd(const std::vector<std::vector<double>>& finals);

struct Forgetting {
  double average = 0.0;
  double worst_case = 0.0;
  std::vector<double> per_task;
};

/// f_p = max over checkpoints l in [p, T-2] of acc[l][p], minus acc[T-1][p],
/// for every position p < T-1.
Forgetting forgetting(const std::vector<std::vector<double>>& acc);

struct CapacityReport {
  std::size_t shared = 0;
  std::size_t local_shared = 0;
  std::size_t adaptive = 0;
  std::size_t masks = 0;
  std::size_t heads = 0;
  std::size_t total = 0;
  std::size_t base_count = 0;
  double percent = 0.0;
  std::map<TaskId, std::size_t> adaptive_by_task;
};

/// Parameter count of one undecomposed network with a single head.
std::size_t base_parameter_count(const NetworkShape& shape, std::size_t num_classes);

/// Exact stored nonzeros as a percentage of `base_count`.
CapacityReport capacity(const DecomposedState& state, std::size_t base_count);

/// Drops tau_k, v_k, head_k and k's group membership. Shared and
/// locally-shared parameters are untouched.
void forget_task(DecomposedState& state, TaskId k);

struct Pca2d {
  Vector mean;
  std::array<Vector, 2> components;
  std::array<double, 2> variance{};
  std::vector<std::array<double, 2>> points;
};

/// Projection onto the top two principal directions, found by power iteration
/// with deflation on the sample covariance. Each component's first nonzero
/// loading is made positive.
Pca2d pca2d(std::span<const Vector> trajectory);

/// Sum of Euclidean lengths of consecutive segments.
double path_length(std::span<const std::array<double, 2>> points);

}  // namespace apd
