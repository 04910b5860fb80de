// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <vector>

#include "apd/objectives.hpp"
#include "apd/params.hpp"
#include "apd/taskgen.hpp"
#include "apd/trainer.hpp"

namespace apd::support {

inline void fill_normal(std::span<double> values, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : values) v = n(rng);
}

/// State with `tasks` tasks (ids 0..tasks-1) whose every parameter is random.
inline DecomposedState random_state(std::mt19937_64& rng, std::size_t input_dim,
                                    const std::vector<std::size_t>& widths, int tasks,
                                    std::size_t classes = 3,
                                    Activation act = Activation::Tanh) {
  DecomposedState s = make_state({input_dim, widths}, act, rng());
  for (int t = 0; t < tasks; ++t) {
    init_task(s, t, classes, TauInit::Zeros);
    s.history.push_back(t);
  }
  for (auto& layer : s.layers) {
    fill_normal(layer.shared.weight.values(), rng, 0.5);
    fill_normal(layer.shared.bias, rng, 0.5);
    for (auto& [t, tau] : layer.adaptive) {
      fill_normal(tau.weight_delta.values(), rng, 0.3);
      fill_normal(tau.bias_delta, rng, 0.3);
    }
    for (auto& [t, mask] : layer.masks) fill_normal(mask.v, rng, 1.0);
  }
  for (auto& [t, head] : s.heads) {
    fill_normal(head.weight.values(), rng, 0.5);
    fill_normal(head.bias, rng, 0.5);
  }
  return s;
}

/// Moves sigma away from its snapshot so drift terms are nonzero.
inline void perturb_shared(DecomposedState& s, std::mt19937_64& rng, double scale = 0.2) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& layer : s.layers) {
    for (double& w : layer.shared.weight.values()) w += n(rng);
    for (double& b : layer.shared.bias) b += n(rng);
  }
}

inline Batch random_batch(std::mt19937_64& rng, std::size_t rows, std::size_t dim,
                          std::size_t classes) {
  Batch b{Matrix(rows, dim), std::vector<int>(rows)};
  fill_normal(b.features.values(), rng);
  std::uniform_int_distribution<int> label(0, static_cast<int>(classes) - 1);
  for (int& y : b.labels) y = label(rng);
  return b;
}

/// One locally-shared group holding `tasks`, with random entries.
inline void add_random_group(DecomposedState& s, std::mt19937_64& rng, GroupId g,
                             const std::vector<TaskId>& tasks) {
  LocalShared local;
  local.id = g;
  for (const auto& layer : s.layers) {
    DenseLayer block{Matrix(layer.shared.weight.rows(), layer.shared.weight.cols()),
                     Vector(layer.shared.bias.size())};
    fill_normal(block.weight.values(), rng, 0.3);
    fill_normal(block.bias, rng, 0.3);
    local.layers.push_back(std::move(block));
  }
  s.groups[g] = std::move(local);
  for (TaskId t : tasks) s.assignment[t] = g;
}

struct Instance {
  DecomposedState state;
  Batch batch;
};

// Random two-layer instance with every past task holding a restore target
// that differs from its live parameters.
inline Instance random_instance(std::mt19937_64& rng, int tasks, bool grouped) {
  std::uniform_int_distribution<std::size_t> width(2, 8);
  const std::size_t in = width(rng);
  Instance inst{random_state(rng, in, {width(rng), width(rng)}, tasks), {}};
  auto& s = inst.state;
  if (grouped && tasks >= 2) {
    add_random_group(s, rng, 0, {0, 1});
    if (tasks >= 3) add_random_group(s, rng, 1, {2});
  }
  for (auto& layer : s.layers) layer.snapshot = layer.shared;
  restore_all(s);
  perturb_shared(s, rng);
  for (auto& layer : s.layers)
    for (auto& [t, tau] : layer.adaptive) fill_normal(tau.weight_delta.values(), rng, 0.3);
  s.restored.erase(tasks - 1);
  inst.batch = random_batch(rng, 7, in, 3);
  return inst;
}

/// Small related stream and the hyperparameters the desk experiments use.
inline StreamSpec desk_stream(int tasks, std::uint64_t seed) {
  StreamSpec spec;
  spec.tasks = tasks;
  spec.dim = 16;
  spec.classes = 4;
  spec.samples_per_class = 100;
  spec.relatedness = 0.5;
  spec.noise = 1.0;
  spec.seed = seed;
  return spec;
}

inline HyperParams desk_params() {
  HyperParams hp;
  hp.lambda1 = {0.02};
  hp.lambda2 = 1.0;
  hp.l2t_lambda = 0.0;
  hp.lr = 0.2;
  hp.epochs = 20;
  hp.batch_size = 16;
  hp.tau_init = TauInit::Zeros;
  return hp;
}

inline SequenceOptions desk_options() {
  SequenceOptions options;
  options.hidden = {16, 16};
  options.activation = Activation::Relu;
  return options;
}

}  // namespace apd::support
