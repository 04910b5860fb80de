// SPDX-License-Identifier: Apache-2.0
#include "apd/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include <fmt/format.h>

namespace apd {
namespace {

DenseLayer zeros_like(const Matrix& w) {
  return DenseLayer{Matrix(w.rows(), w.cols()), Vector(w.cols(), 0.0)};
}

bool masks_trainable(const DecomposedState& state, const ObjectiveSpec& spec) {
  return spec.train_masks && !state.masks_pinned;
}

/// Pushes a gradient with respect to a composed layer back onto sigma, tau and
/// the mask logits of the owning task.
void chain_composed(const HiddenLayer& layer, std::span<const double> mask,
                    std::span<const double> logits, const DenseLayer& d_theta, bool shared_on,
                    DenseLayer* d_shared, DenseLayer* d_tau, Vector* d_logits) {
  const Matrix& w = layer.shared.weight;
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  if (shared_on) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) d_shared->weight(r, c) += d_theta.weight(r, c) * mask[c];
    for (std::size_t c = 0; c < cols; ++c) d_shared->bias[c] += d_theta.bias[c] * mask[c];
  }
  if (d_tau != nullptr) {
    auto dst = d_tau->weight.values();
    auto src = d_theta.weight.values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    for (std::size_t c = 0; c < cols; ++c) d_tau->bias[c] += d_theta.bias[c];
  }
  if (d_logits != nullptr) {
    for (std::size_t c = 0; c < cols; ++c) {
      double d_mask = 0.0;
      for (std::size_t r = 0; r < rows; ++r) d_mask += w(r, c) * d_theta.weight(r, c);
      d_mask += layer.shared.bias[c] * d_theta.bias[c];
      const double m = sigmoid(logits[c]);
      (*d_logits)[c] += d_mask * m * (1.0 - m);
    }
  }
}

LayerTaskAdaptive tau_for(const DecomposedState& state, std::size_t layer, TaskId t,
                          bool consolidated) {
  if (consolidated) return effective_tau(state, layer, t);
  auto it = state.layers[layer].adaptive.find(t);
  if (it == state.layers[layer].adaptive.end()) throw Error(fmt::format("unknown task {}", t));
  return it->second;
}

}  // namespace

double HyperParams::lambda1_at(std::size_t layer) const {
  if (lambda1.empty()) return 0.0;
  return lambda1[std::min(layer, lambda1.size() - 1)];
}

void HyperParams::validate() const {
  for (double l : lambda1)
    if (!(l >= 0.0)) throw Error("lambda1 must be non-negative");
  if (!(lambda2 >= 0.0)) throw Error("lambda2 must be non-negative");
  if (!(l2t_lambda >= 0.0)) throw Error("l2t_lambda must be non-negative");
  if (!(beta >= 0.0)) throw Error("beta must be non-negative");
  if (!(lr > 0.0)) throw Error("learning rate must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw Error("lr_decay must lie in (0, 1]");
  if (!(weight_decay >= 0.0)) throw Error("weight_decay must be non-negative");
  if (epochs < 0) throw Error("epochs must be non-negative");
  if (batch_size < 1) throw Error("batch_size must be at least 1");
  if (consolidation_period < 1 || centroid_increment < 1 || initial_centroids < 1) {
    throw Error("s, k and K0 must be at least 1");
  }
  if (kmeans_max_iter < 1) throw Error("kmeans_max_iter must be at least 1");
}

double ObjectiveSpec::lambda1_at(std::size_t layer) const {
  if (lambda1.empty()) return 0.0;
  return lambda1[std::min(layer, lambda1.size() - 1)];
}

Variant Variant::parse(std::string_view text) {
  Variant v;
  const auto plus = text.find('+');
  const std::string_view base = text.substr(0, plus);
  if (base == "APD1") v.kind = VariantKind::Apd1;
  else if (base == "APD2") v.kind = VariantKind::Apd2;
  else if (base == "APD-Fixed") v.kind = VariantKind::ApdFixed;
  else if (base == "L2T") v.kind = VariantKind::L2T;
  else throw Error(fmt::format("unknown variant '{}'", text));

  std::string_view rest = plus == std::string_view::npos ? std::string_view{} : text.substr(plus + 1);
  while (!rest.empty()) {
    const auto next = rest.find('+');
    const std::string_view flag = rest.substr(0, next);
    if (flag == "no-sparsity") v.ablations.no_sparsity = true;
    else if (flag == "no-adaptive-mask") v.ablations.no_adaptive_mask = true;
    else if (flag == "fixed-shared") v.ablations.fixed_shared = true;
    else throw Error(fmt::format("unknown ablation '{}' in variant '{}'", flag, text));
    rest = next == std::string_view::npos ? std::string_view{} : rest.substr(next + 1);
  }
  if (v.kind == VariantKind::L2T &&
      (v.ablations.no_sparsity || v.ablations.no_adaptive_mask || v.ablations.fixed_shared)) {
    throw Error("ablations do not apply to L2T");
  }
  return v;
}

std::string Variant::name() const {
  std::string out;
  switch (kind) {
    case VariantKind::L2T: out = "L2T"; break;
    case VariantKind::ApdFixed: out = "APD-Fixed"; break;
    case VariantKind::Apd1: out = "APD1"; break;
    case VariantKind::Apd2: out = "APD2"; break;
  }
  if (ablations.no_sparsity) out += "+no-sparsity";
  if (ablations.no_adaptive_mask) out += "+no-adaptive-mask";
  if (ablations.fixed_shared) out += "+fixed-shared";
  return out;
}

std::vector<TaskId> trainable_tasks(const DecomposedState& state, const ObjectiveSpec& spec) {
  if (!state.has_task(spec.task)) throw Error(fmt::format("task {} is not initialized", spec.task));
  std::vector<TaskId> out{spec.task};
  if (spec.kind != Objective::Transfer) {
    for (const auto& [i, target] : state.restored)
      if (i != spec.task) out.push_back(i);
  }
  std::sort(out.begin(), out.end());
  return out;
}

ObjectiveValue evaluate_objective(const DecomposedState& state, const Batch& batch,
                                  const ObjectiveSpec& spec, bool with_grad) {
  const TaskId t = spec.task;
  if (!state.has_task(t)) throw Error(fmt::format("task {} is not initialized", t));
  if (batch.labels.empty()) throw Error("empty batch");
  if (batch.features.cols() != state.input_dim) {
    throw Error(fmt::format("batch has {} features, network expects {}", batch.features.cols(),
                            state.input_dim));
  }
  const bool consolidated = spec.kind == Objective::Consolidated;
  const bool retro = spec.kind != Objective::Transfer;
  if (retro) {
    for (TaskId i : state.history) {
      if (i != t && !state.restored.contains(i)) {
        throw Error(fmt::format("missing restore target for task {}", i));
      }
    }
  }
  const bool masks_on = masks_trainable(state, spec);
  const std::size_t num_layers = state.layers.size();
  const auto tasks = trainable_tasks(state, spec);

  ObjectiveValue out;
  ParamSet& g = out.grad;
  if (with_grad) {
    if (spec.train_shared) {
      for (const auto& layer : state.layers) g.shared.push_back(zeros_like(layer.shared.weight));
    }
    for (TaskId i : tasks) {
      if (spec.train_tau) {
        auto& layers = g.tau[i];
        for (const auto& layer : state.layers) layers.push_back(zeros_like(layer.shared.weight));
      }
      if (masks_on) {
        auto& masks = g.mask[i];
        for (const auto& layer : state.layers) masks.emplace_back(layer.shared.bias.size(), 0.0);
      }
    }
    g.head = zeros_like(state.heads.at(t).weight);
  }

  auto chain = [&](std::size_t l, TaskId i, std::span<const double> mask, const DenseLayer& d_theta) {
    const HiddenLayer& layer = state.layers[l];
    DenseLayer* d_tau = spec.train_tau ? &g.tau.at(i)[l] : nullptr;
    Vector* d_logits = masks_on ? &g.mask.at(i)[l] : nullptr;
    const Vector* logits = masks_on ? &layer.masks.at(i).v : nullptr;
    chain_composed(layer, mask, logits ? std::span<const double>(*logits) : std::span<const double>{},
                   d_theta, spec.train_shared, spec.train_shared ? &g.shared[l] : nullptr, d_tau,
                   d_logits);
  };

  // Data term on task t.
  std::vector<Vector> masks_t(num_layers);
  std::vector<DenseLayer> theta_t(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) {
    masks_t[l] = task_mask(state, l, t);
    theta_t[l] = compose(state.layers[l].shared, masks_t[l], tau_for(state, l, t, consolidated));
  }
  const DenseLayer& head = state.heads.at(t);
  std::vector<Matrix> acts;
  acts.reserve(num_layers + 1);
  acts.push_back(batch.features);
  for (std::size_t l = 0; l < num_layers; ++l) {
    Matrix z = matmul(acts.back(), theta_t[l].weight);
    for (std::size_t r = 0; r < z.rows(); ++r) {
      auto row = z.row(r);
      for (std::size_t c = 0; c < row.size(); ++c)
        row[c] = activate(state.activation, row[c] + theta_t[l].bias[c]);
    }
    acts.push_back(std::move(z));
  }
  Matrix logits = matmul(acts.back(), head.weight);
  const double inv_n = 1.0 / static_cast<double>(batch.labels.size());
  Matrix d_logits(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += head.bias[c];
    const int label = batch.labels[r];
    if (label < 0) throw Error("negative label");
    auto ce = softmax_cross_entropy(row, static_cast<std::size_t>(label));
    out.data_loss += ce.loss * inv_n;
    auto drow = d_logits.row(r);
    for (std::size_t c = 0; c < drow.size(); ++c) drow[c] = ce.grad[c] * inv_n;
  }

  if (with_grad) {
    g.head.weight = matmul_tn(acts.back(), d_logits);
    for (std::size_t r = 0; r < d_logits.rows(); ++r)
      for (std::size_t c = 0; c < d_logits.cols(); ++c) g.head.bias[c] += d_logits(r, c);
    Matrix d_h = matmul_nt(d_logits, head.weight);
    for (std::size_t l = num_layers; l-- > 0;) {
      const Matrix& out_act = acts[l + 1];
      for (std::size_t r = 0; r < d_h.rows(); ++r)
        for (std::size_t c = 0; c < d_h.cols(); ++c)
          d_h(r, c) *= activate_grad_from_output(state.activation, out_act(r, c));
      DenseLayer d_theta{matmul_tn(acts[l], d_h), Vector(d_h.cols(), 0.0)};
      for (std::size_t r = 0; r < d_h.rows(); ++r)
        for (std::size_t c = 0; c < d_h.cols(); ++c) d_theta.bias[c] += d_h(r, c);
      if (l > 0) d_h = matmul_nt(d_h, theta_t[l].weight);
      chain(l, t, masks_t[l], d_theta);
    }
  }

  // Drift terms.
  if (spec.kind == Objective::Transfer) {
    if (spec.shared_drift && spec.lambda2 > 0.0) {
      for (std::size_t l = 0; l < num_layers; ++l) {
        const LayerShared& cur = state.layers[l].shared;
        const LayerShared& prev = state.layers[l].snapshot;
        auto w = cur.weight.values();
        auto pw = prev.weight.values();
        double sum = 0.0;
        for (std::size_t j = 0; j < w.size(); ++j) {
          const double d = w[j] - pw[j];
          sum += d * d;
          if (with_grad && spec.train_shared) g.shared[l].weight.values()[j] += 2.0 * spec.lambda2 * d;
        }
        for (std::size_t c = 0; c < cur.bias.size(); ++c) {
          const double d = cur.bias[c] - prev.bias[c];
          sum += d * d;
          if (with_grad && spec.train_shared) g.shared[l].bias[c] += 2.0 * spec.lambda2 * d;
        }
        out.drift += spec.lambda2 * sum;
      }
    }
  } else if (spec.lambda2 > 0.0) {
    for (TaskId i : tasks) {
      if (i == t) continue;
      const auto& target = state.restored.at(i);
      for (std::size_t l = 0; l < num_layers; ++l) {
        const Vector mask = task_mask(state, l, i);
        const DenseLayer theta = compose(state.layers[l].shared, mask, tau_for(state, l, i, consolidated));
        DenseLayer d_theta = zeros_like(theta.weight);
        auto w = theta.weight.values();
        auto tw = target[l].weight.values();
        auto dw = d_theta.weight.values();
        double sum = 0.0;
        for (std::size_t j = 0; j < w.size(); ++j) {
          const double d = w[j] - tw[j];
          sum += d * d;
          dw[j] = 2.0 * spec.lambda2 * d;
        }
        for (std::size_t c = 0; c < theta.bias.size(); ++c) {
          const double d = theta.bias[c] - target[l].bias[c];
          sum += d * d;
          d_theta.bias[c] = 2.0 * spec.lambda2 * d;
        }
        out.drift += spec.lambda2 * sum;
        if (with_grad) chain(l, i, mask, d_theta);
      }
    }
  }

  if (spec.train_tau) {
    for (TaskId i : tasks) {
      for (std::size_t l = 0; l < num_layers; ++l) {
        const auto& tau = state.layers[l].adaptive.at(i);
        double sum = 0.0;
        for (double v : tau.weight_delta.values()) sum += std::abs(v);
        for (double v : tau.bias_delta) sum += std::abs(v);
        out.l1 += spec.lambda1_at(l) * sum;
      }
    }
  }
  out.smooth = out.data_loss + out.drift;
  return out;
}

ObjectiveSpec spec_eq1(TaskId t, const HyperParams& hp) {
  ObjectiveSpec s;
  s.kind = Objective::Transfer;
  s.task = t;
  s.lambda1 = hp.lambda1;
  s.lambda2 = hp.lambda2;
  return s;
}

ObjectiveSpec spec_eq2(TaskId t, const HyperParams& hp) {
  ObjectiveSpec s = spec_eq1(t, hp);
  s.kind = Objective::Retroactive;
  return s;
}

ObjectiveSpec spec_eq3(TaskId t, const HyperParams& hp) {
  ObjectiveSpec s = spec_eq1(t, hp);
  s.kind = Objective::Consolidated;
  return s;
}

ObjectiveValue loss_eq1(const Batch& batch, const DecomposedState& state, TaskId t,
                        const HyperParams& hp) {
  return evaluate_objective(state, batch, spec_eq1(t, hp));
}

ObjectiveValue loss_eq2(const Batch& batch, const DecomposedState& state, TaskId t,
                        const HyperParams& hp) {
  return evaluate_objective(state, batch, spec_eq2(t, hp));
}

ObjectiveValue loss_eq3(const Batch& batch, const DecomposedState& state, TaskId t,
                        const HyperParams& hp) {
  return evaluate_objective(state, batch, spec_eq3(t, hp));
}

std::vector<std::span<double>> trainable_views(DecomposedState& state, const ObjectiveSpec& spec) {
  std::vector<std::span<double>> views;
  if (spec.train_shared) {
    for (auto& layer : state.layers) {
      views.push_back(layer.shared.weight.values());
      views.push_back(layer.shared.bias);
    }
  }
  const auto tasks = trainable_tasks(state, spec);
  if (spec.train_tau) {
    for (TaskId i : tasks) {
      for (auto& layer : state.layers) {
        auto& tau = layer.adaptive.at(i);
        views.push_back(tau.weight_delta.values());
        views.push_back(tau.bias_delta);
      }
    }
  }
  if (masks_trainable(state, spec)) {
    for (TaskId i : tasks)
      for (auto& layer : state.layers) views.push_back(layer.masks.at(i).v);
  }
  auto& head = state.heads.at(spec.task);
  views.push_back(head.weight.values());
  views.push_back(head.bias);
  return views;
}

std::vector<std::span<double>> gradient_views(ParamSet& grad) {
  std::vector<std::span<double>> views;
  for (auto& layer : grad.shared) {
    views.push_back(layer.weight.values());
    views.push_back(layer.bias);
  }
  for (auto& [i, layers] : grad.tau) {
    for (auto& layer : layers) {
      views.push_back(layer.weight.values());
      views.push_back(layer.bias);
    }
  }
  for (auto& [i, masks] : grad.mask)
    for (auto& m : masks) views.push_back(m);
  views.push_back(grad.head.weight.values());
  views.push_back(grad.head.bias);
  return views;
}

double proximal_l1(double value, double threshold) {
  if (threshold < 0.0) throw Error("proximal threshold must be non-negative");
  const double mag = std::abs(value) - threshold;
  if (mag <= 0.0) return 0.0;
  return value > 0.0 ? mag : -mag;
}

void proximal_l1(std::span<double> values, double threshold) {
  if (threshold < 0.0) throw Error("proximal threshold must be non-negative");
  if (threshold == 0.0) return;
  for (double& v : values) v = proximal_l1(v, threshold);
}

Vector gather_trainable(const DecomposedState& state, const ObjectiveSpec& spec) {
  DecomposedState copy = state;
  Vector out;
  for (auto view : trainable_views(copy, spec)) out.insert(out.end(), view.begin(), view.end());
  return out;
}

LossFn objective_as_loss_fn(const DecomposedState& state, const Batch& batch,
                            const ObjectiveSpec& spec) {
  auto scratch = std::make_shared<DecomposedState>(state);
  return [scratch, batch, spec](std::span<const double> params, std::span<double> grad) {
    std::size_t pos = 0;
    for (auto view : trainable_views(*scratch, spec)) {
      if (pos + view.size() > params.size()) throw Error("parameter vector too short");
      std::copy_n(params.begin() + static_cast<std::ptrdiff_t>(pos), view.size(), view.begin());
      pos += view.size();
    }
    if (pos != params.size()) throw Error("parameter vector length mismatch");
    auto value = evaluate_objective(*scratch, batch, spec, !grad.empty());
    if (!grad.empty()) {
      std::size_t at = 0;
      for (auto view : gradient_views(value.grad)) {
        std::copy(view.begin(), view.end(), grad.begin() + static_cast<std::ptrdiff_t>(at));
        at += view.size();
      }
    }
    return value.smooth;
  };
}

}  // namespace apd
