// SPDX-License-Identifier: Apache-2.0
#pragma once

// Decomposed parameter store. Every hidden layer holds a task-shared weight
// sigma, and per task a sparse additive delta tau and output-unit mask logits
// v. The weights used by task t are
//
//   theta_t = sigma (x) sigmoid(v_t) + tau~_t,   tau~_t = tau_t + local_g(t)
//
// where the mask scales whole output columns (and the matching bias entry) and
// local_g is the locally-shared parameter of t's consolidation group, if any.
// Output heads are private to each task and never decomposed.

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "apd/matrix.hpp"
#include "apd/numeric.hpp"

namespace apd {

using TaskId = int;
using GroupId = int;

struct LayerShared {
  Matrix weight;  // d_in x d_out
  Vector bias;    // d_out
};

struct LayerTaskAdaptive {
  Matrix weight_delta;
  Vector bias_delta;
  TaskId owner = -1;
};

struct LayerMaskLogits {
  Vector v;
  TaskId owner = -1;
};

/// Plain dense layer: composed task weights, heads and locally-shared blocks.
struct DenseLayer {
  Matrix weight;
  Vector bias;

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct LocalShared {
  GroupId id = 0;
  std::vector<DenseLayer> layers;
};

struct HiddenLayer {
  LayerShared shared;
  LayerShared snapshot;  // sigma at the previous task boundary
  std::map<TaskId, LayerTaskAdaptive> adaptive;
  std::map<TaskId, LayerMaskLogits> masks;
};

struct ClusterState {
  int next_k = 2;
  std::vector<Vector> centroids;  // from the last consolidation
  int events = 0;
};

struct NetworkShape {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
};

enum class TauInit { CopyShared, Zeros };

TauInit parse_tau_init(std::string_view name);
std::string_view to_string(TauInit mode);

struct DecomposedState {
  std::size_t input_dim = 0;
  Activation activation = Activation::Relu;
  bool masks_pinned = false;  // every mask reads as 1 and v is never used
  std::vector<HiddenLayer> layers;
  std::map<TaskId, DenseLayer> heads;
  std::map<GroupId, LocalShared> groups;
  std::map<TaskId, GroupId> assignment;
  std::map<TaskId, std::vector<DenseLayer>> restored;  // frozen theta*_i
  ClusterState cluster;
  std::vector<TaskId> history;  // training order of the tasks still present
  std::mt19937_64 rng;

  bool has_task(TaskId t) const { return heads.contains(t); }
  NetworkShape shape() const;
};

/// Fresh state with He-initialized shared weights and zero biases.
DecomposedState make_state(const NetworkShape& shape, Activation activation, std::uint64_t seed,
                           bool masks_pinned = false);

Vector mask_of(const LayerMaskLogits& logits);

/// Mask actually applied for task t at a layer; all ones when masks are pinned.
Vector task_mask(const DecomposedState& state, std::size_t layer, TaskId t);

DenseLayer compose(const LayerShared& shared, std::span<const double> mask,
                   const LayerTaskAdaptive& tau);

LayerTaskAdaptive effective_tau(const LayerTaskAdaptive& tau, const DenseLayer* local);

/// tau~ for task t at a layer, resolving its group assignment.
LayerTaskAdaptive effective_tau(const DecomposedState& state, std::size_t layer, TaskId t);

/// Live composed hidden layers for task t.
std::vector<DenseLayer> composed_layers(const DecomposedState& state, TaskId t);

/// theta*_i from the shared snapshot and task i's current mask and tau~.
std::vector<DenseLayer> restore(const DecomposedState& state, TaskId i);

/// Recompute and freeze restore targets for every task currently stored.
void restore_all(DecomposedState& state);

/// Adds tau_t, v_t = 0 and a fresh head for a new task, and moves the shared
/// snapshot to the current sigma.
void init_task(DecomposedState& state, TaskId t, std::size_t num_classes,
               TauInit mode = TauInit::CopyShared);

Vector forward(const DecomposedState& state, std::span<const double> x, TaskId t);

/// Row-wise forward for a batch of inputs, one row of logits per example.
Matrix forward_batch(const DecomposedState& state, const Matrix& x, TaskId t);

/// Dense forward through explicit layers and head.
Matrix dense_forward(std::span<const DenseLayer> hidden, const DenseLayer& head,
                     Activation activation, const Matrix& x);

/// Concatenation of all hidden-layer weights and biases, layer by layer.
Vector flatten(std::span<const DenseLayer> layers);

}  // namespace apd
