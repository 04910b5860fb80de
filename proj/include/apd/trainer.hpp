// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "apd/consolidation.hpp"
#include "apd/metrics.hpp"
#include "apd/objectives.hpp"
#include "apd/params.hpp"
#include "apd/taskgen.hpp"

namespace apd {

struct EpochLog {
  TaskId task = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;       // mean over minibatches of smooth + l1
  double data_loss = 0.0;
  double drift = 0.0;
  double tau_sparsity = 0.0;  // fraction of exact zeros in tau_t after the epoch
};

struct TrajectoryPoint {
  int checkpoint = 0;  // sequence position after which the snapshot was taken
  TaskId task = 0;
  Vector theta;        // composed hidden parameters of `task`, flattened
};

/// Objective used to train task t under a variant. The first task of a
/// sequence is trained without any drift term.
ObjectiveSpec objective_for(const DecomposedState& state, TaskId t, const HyperParams& hp,
                            const Variant& variant);

/// Minibatch SGD with per-epoch exponential learning-rate decay, decoupled
/// weight decay on shared and head weights, and a soft-threshold step on
/// every trainable tau after each update.
std::vector<EpochLog> train_task(DecomposedState& state, const TaskDataset& data,
                                 const HyperParams& hp, const Variant& variant);

DecomposedState initial_state(const NetworkShape& shape, Activation activation,
                              const HyperParams& hp, const Variant& variant);

struct SequenceOptions {
  std::vector<std::size_t> hidden{32, 32};
  Activation activation = Activation::Relu;
  /// Continue from a saved state whose history is a prefix of the order.
  std::optional<DecomposedState> resume;
  /// Called after each task is trained, consolidated and evaluated.
  std::function<void(const DecomposedState&, std::size_t position)> on_task_end;
};

struct SequenceResult {
  DecomposedState state;
  AccuracyHistory accuracy;
  std::vector<TrajectoryPoint> trajectory;
  std::vector<EpochLog> epochs;
  std::vector<ConsolidationReport> consolidations;
};

/// Trains tasks[order[0]], tasks[order[1]], ... in sequence. tasks[i] must
/// carry task_id i.
SequenceResult run_sequence(std::span<const TaskDataset> tasks, std::span<const int> order,
                            const HyperParams& hp, const Variant& variant,
                            const SequenceOptions& options = {});

}  // namespace apd
