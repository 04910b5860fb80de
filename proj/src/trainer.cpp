// SPDX-License-Identifier: Apache-2.0
#include "apd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

namespace apd {
namespace {

bool is_first_task(const DecomposedState& state, TaskId t) {
  return std::all_of(state.history.begin(), state.history.end(), [t](TaskId i) { return i == t; });
}

double tau_sparsity(const DecomposedState& state, TaskId t) {
  std::size_t zeros = 0;
  std::size_t total = 0;
  for (const auto& layer : state.layers) {
    const auto& tau = layer.adaptive.at(t);
    total += tau.weight_delta.size() + tau.bias_delta.size();
    zeros += tau.weight_delta.size() - count_nonzero(tau.weight_delta.values());
    zeros += tau.bias_delta.size() - count_nonzero(tau.bias_delta);
  }
  return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

}  // namespace

ObjectiveSpec objective_for(const DecomposedState& state, TaskId t, const HyperParams& hp,
                            const Variant& variant) {
  const bool first = is_first_task(state, t);
  ObjectiveSpec spec = spec_eq1(t, hp);
  if (!first) {
    if (variant.kind == VariantKind::Apd1) spec.kind = Objective::Retroactive;
    if (variant.kind == VariantKind::Apd2) spec.kind = Objective::Consolidated;
  }
  spec.shared_drift = !first;
  if (variant.kind == VariantKind::L2T) spec.lambda2 = hp.l2t_lambda;
  spec.train_tau = variant.kind != VariantKind::L2T;
  spec.train_masks = !variant.pins_masks();
  spec.train_shared = first || !variant.ablations.fixed_shared;
  return spec;
}

std::vector<EpochLog> train_task(DecomposedState& state, const TaskDataset& data,
                                 const HyperParams& hp, const Variant& variant) {
  hp.validate();
  const TaskId t = data.task_id;
  if (data.splits.train.empty()) throw Error(fmt::format("task {} has no training data", t));
  const ObjectiveSpec spec = objective_for(state, t, hp, variant);

  auto params = trainable_views(state, spec);

  // Positions within `params` of blocks needing extra per-step treatment.
  struct Sparse {
    std::span<double> values;
    double lambda1;
  };
  std::vector<Sparse> taus;
  std::vector<std::span<double>> decayed;
  {
    std::size_t k = 0;
    if (spec.train_shared) {
      for (std::size_t l = 0; l < state.layers.size(); ++l) {
        decayed.push_back(params[k]);
        k += 2;
      }
    }
    if (spec.train_tau) {
      for (std::size_t n = 0; n < trainable_tasks(state, spec).size(); ++n) {
        for (std::size_t l = 0; l < state.layers.size(); ++l) {
          taus.push_back({params[k], spec.lambda1_at(l)});
          taus.push_back({params[k + 1], spec.lambda1_at(l)});
          k += 2;
        }
      }
    }
    decayed.push_back(params[params.size() - 2]);
  }

  std::vector<std::size_t> order = data.splits.train;
  std::vector<EpochLog> logs;
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    const double lr = hp.lr * std::pow(hp.lr_decay, epoch);
    std::shuffle(order.begin(), order.end(), state.rng);
    EpochLog log;
    log.task = t;
    log.epoch = epoch;
    log.lr = lr;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
      const std::size_t end = std::min(order.size(), start + hp.batch_size);
      const Batch batch = data.subset(std::span(order).subspan(start, end - start));
      ObjectiveValue value = evaluate_objective(state, batch, spec);
      auto grads = gradient_views(value.grad);
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto p = params[k];
        auto g = grads[k];
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
      }
      if (hp.weight_decay > 0.0) {
        const double shrink = lr * hp.weight_decay;
        for (auto block : decayed)
          for (double& w : block) w -= shrink * w;
      }
      if (!variant.ablations.no_sparsity) {
        for (auto& block : taus) proximal_l1(block.values, lr * block.lambda1);
      }
      log.loss += value.smooth + value.l1;
      log.data_loss += value.data_loss;
      log.drift += value.drift;
      ++batches;
    }
    const double n = static_cast<double>(batches);
    log.loss /= n;
    log.data_loss /= n;
    log.drift /= n;
    if (!std::isfinite(log.loss)) {
      throw Error(fmt::format("training diverged on task {} at epoch {} (lr {})", t, epoch, lr));
    }
    log.tau_sparsity = tau_sparsity(state, t);
    logs.push_back(log);
  }
  return logs;
}

DecomposedState initial_state(const NetworkShape& shape, Activation activation,
                              const HyperParams& hp, const Variant& variant) {
  DecomposedState state = make_state(shape, activation, hp.seed, variant.pins_masks());
  state.cluster.next_k = hp.initial_centroids;
  return state;
}

SequenceResult run_sequence(std::span<const TaskDataset> tasks, std::span<const int> order,
                            const HyperParams& hp, const Variant& variant,
                            const SequenceOptions& options) {
  hp.validate();
  if (order.size() != tasks.size()) {
    throw Error(fmt::format("order has {} entries for {} tasks", order.size(), tasks.size()));
  }
  std::set<int> seen;
  for (int idx : order) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= tasks.size()) {
      throw Error(fmt::format("order index {} out of range", idx));
    }
    if (!seen.insert(idx).second) throw Error(fmt::format("duplicate index {} in order", idx));
  }
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i].task_id != static_cast<TaskId>(i)) throw Error("tasks[i] must carry task id i");
  }

  SequenceResult result;
  result.accuracy.order.assign(order.begin(), order.end());
  std::size_t start = 0;
  if (options.resume) {
    result.state = *options.resume;
    const auto& done = result.state.history;
    if (done.size() > order.size() || !std::equal(done.begin(), done.end(), order.begin())) {
      throw Error("resumed state history is not a prefix of the task order");
    }
    start = done.size();
    result.accuracy.acc.resize(start);
  } else {
    if (tasks.empty()) return result;
    NetworkShape shape{tasks.front().features.cols(), options.hidden};
    result.state = initial_state(shape, options.activation, hp, variant);
  }
  DecomposedState& state = result.state;

  for (std::size_t pos = start; pos < order.size(); ++pos) {
    const TaskDataset& data = tasks[static_cast<std::size_t>(order[pos])];
    const TaskId t = data.task_id;
    const TauInit mode = (variant.kind == VariantKind::L2T || state.history.empty())
                             ? TauInit::Zeros
                             : hp.tau_init;
    init_task(state, t, data.num_classes, mode);
    restore_all(state);
    state.history.push_back(t);

    auto logs = train_task(state, data, hp, variant);
    result.epochs.insert(result.epochs.end(), logs.begin(), logs.end());

    if (variant.consolidates() && (pos + 1) % static_cast<std::size_t>(hp.consolidation_period) == 0) {
      result.consolidations.push_back(consolidate(state, hp));
    }

    std::vector<double> row;
    for (std::size_t p = 0; p <= pos; ++p) {
      const TaskDataset& seen_task = tasks[static_cast<std::size_t>(order[p])];
      row.push_back(evaluate(state, seen_task.task_id, seen_task.test()));
      result.trajectory.push_back(TrajectoryPoint{static_cast<int>(pos), seen_task.task_id,
                                                  flatten(composed_layers(state, seen_task.task_id))});
    }
    result.accuracy.acc.push_back(std::move(row));
    if (options.on_task_end) options.on_task_end(state, pos);
  }
  return result;
}

}  // namespace apd
