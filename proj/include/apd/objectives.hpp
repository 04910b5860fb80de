// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "apd/params.hpp"
#include "apd/taskgen.hpp"

namespace apd {

struct HyperParams {
  std::vector<double> lambda1{6e-4, 4e-4};  // per hidden layer; the last entry repeats
  double lambda2 = 100.0;
  double l2t_lambda = 1e-2;  // transfer penalty of the L2T baseline
  double lr = 1e-3;
  double lr_decay = 0.97;
  double weight_decay = 1e-4;
  int epochs = 20;
  std::size_t batch_size = 16;
  double beta = 1e-2;
  int consolidation_period = 5;  // s
  int centroid_increment = 2;    // k
  int initial_centroids = 2;     // K0
  int kmeans_max_iter = 100;
  TauInit tau_init = TauInit::CopyShared;
  std::uint64_t seed = 1;

  double lambda1_at(std::size_t layer) const;
  void validate() const;
};

enum class VariantKind { L2T, ApdFixed, Apd1, Apd2 };

struct Ablations {
  bool no_sparsity = false;
  bool no_adaptive_mask = false;
  bool fixed_shared = false;
};

struct Variant {
  VariantKind kind = VariantKind::Apd1;
  Ablations ablations;

  bool consolidates() const { return kind == VariantKind::Apd2; }
  bool pins_masks() const { return kind == VariantKind::L2T || ablations.no_adaptive_mask; }

  /// "APD1", "APD2", "APD-Fixed", "L2T", optionally followed by ablation
  /// suffixes such as "APD1+no-sparsity".
  static Variant parse(std::string_view text);
  std::string name() const;
};

/// Which of the three training objectives to evaluate.
///   Transfer:     data + L1(tau_t) + lambda2 |sigma - sigma_prev|^2
///   Retroactive:  data + L1(tau_1..t) + lambda2 sum_i |theta*_i - compose_i(tau_i)|^2
///   Consolidated: as Retroactive with tau~_i = tau_i + local_g(i) everywhere
enum class Objective { Transfer, Retroactive, Consolidated };

struct ObjectiveSpec {
  Objective kind = Objective::Retroactive;
  TaskId task = 0;
  std::vector<double> lambda1{0.0};
  double lambda2 = 0.0;
  bool shared_drift = true;  // Transfer only: include the sigma-drift term
  bool train_shared = true;
  bool train_tau = true;
  bool train_masks = true;  // ignored when the state pins masks

  double lambda1_at(std::size_t layer) const;
};

/// Gradient container shaped like the trainable parameters of an objective.
struct ParamSet {
  std::vector<DenseLayer> shared;
  std::map<TaskId, std::vector<DenseLayer>> tau;
  std::map<TaskId, std::vector<Vector>> mask;
  DenseLayer head;
};

struct ObjectiveValue {
  double data_loss = 0.0;
  double drift = 0.0;   // weighted drift terms, already multiplied by lambda2
  double smooth = 0.0;  // data_loss + drift
  double l1 = 0.0;      // weighted L1 of every trainable tau; handled by the prox step
  ParamSet grad;        // gradient of `smooth` only
};

/// Tasks whose tau and v the objective optimizes, ascending.
std::vector<TaskId> trainable_tasks(const DecomposedState& state, const ObjectiveSpec& spec);

ObjectiveValue evaluate_objective(const DecomposedState& state, const Batch& batch,
                                  const ObjectiveSpec& spec, bool with_grad = true);

ObjectiveSpec spec_eq1(TaskId t, const HyperParams& hp);
ObjectiveSpec spec_eq2(TaskId t, const HyperParams& hp);
ObjectiveSpec spec_eq3(TaskId t, const HyperParams& hp);

ObjectiveValue loss_eq1(const Batch& batch, const DecomposedState& state, TaskId t,
                        const HyperParams& hp);
ObjectiveValue loss_eq2(const Batch& batch, const DecomposedState& state, TaskId t,
                        const HyperParams& hp);
ObjectiveValue loss_eq3(const Batch& batch, const DecomposedState& state, TaskId t,
                        const HyperParams& hp);

/// Mutable views over the trainable parameters in a fixed order: shared
/// layers, then tau per task, then mask logits per task, then the head.
std::vector<std::span<double>> trainable_views(DecomposedState& state, const ObjectiveSpec& spec);

/// Views over a gradient in the same order as trainable_views.
std::vector<std::span<double>> gradient_views(ParamSet& grad);

/// Soft threshold: sign(x) * max(|x| - threshold, 0), exact +0 when clipped.
double proximal_l1(double value, double threshold);
void proximal_l1(std::span<double> values, double threshold);

/// Adapts an objective to grad_check: the parameter vector is scattered into a
/// copy of `state` through trainable_views before each evaluation.
LossFn objective_as_loss_fn(const DecomposedState& state, const Batch& batch,
                            const ObjectiveSpec& spec);

/// Current trainable parameters flattened in trainable_views order.
Vector gather_trainable(const DecomposedState& state, const ObjectiveSpec& spec);

}  // namespace apd
