// SPDX-License-Identifier: Apache-2.0
#include "apd/params.hpp"

#include <cmath>

#include <fmt/format.h>

namespace apd {
namespace {

const LayerTaskAdaptive& adaptive_of(const HiddenLayer& layer, TaskId t) {
  auto it = layer.adaptive.find(t);
  if (it == layer.adaptive.end()) throw Error(fmt::format("unknown task {}", t));
  return it->second;
}

void check_task(const DecomposedState& state, TaskId t) {
  if (!state.has_task(t)) throw Error(fmt::format("unknown task {}", t));
}

}  // namespace

TauInit parse_tau_init(std::string_view name) {
  if (name == "copy-shared") return TauInit::CopyShared;
  if (name == "zeros") return TauInit::Zeros;
  throw Error(fmt::format("unknown tau init mode '{}'", name));
}

std::string_view to_string(TauInit mode) {
  return mode == TauInit::CopyShared ? "copy-shared" : "zeros";
}

NetworkShape DecomposedState::shape() const {
  NetworkShape s;
  s.input_dim = input_dim;
  for (const auto& layer : layers) s.hidden.push_back(layer.shared.weight.cols());
  return s;
}

DecomposedState make_state(const NetworkShape& shape, Activation activation, std::uint64_t seed,
                           bool masks_pinned) {
  if (shape.input_dim == 0) throw Error("input dimension must be positive");
  if (shape.hidden.empty()) throw Error("at least one hidden layer is required");
  DecomposedState state;
  state.input_dim = shape.input_dim;
  state.activation = activation;
  state.masks_pinned = masks_pinned;
  state.rng.seed(seed);

  std::size_t fan_in = shape.input_dim;
  for (std::size_t width : shape.hidden) {
    if (width == 0) throw Error("layer widths must be positive");
    HiddenLayer layer;
    layer.shared.weight = Matrix(fan_in, width);
    layer.shared.bias.assign(width, 0.0);
    std::normal_distribution<double> init(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (double& w : layer.shared.weight.values()) w = init(state.rng);
    layer.snapshot = layer.shared;
    state.layers.push_back(std::move(layer));
    fan_in = width;
  }
  return state;
}

Vector mask_of(const LayerMaskLogits& logits) {
  Vector m(logits.v.size());
  for (std::size_t j = 0; j < m.size(); ++j) m[j] = sigmoid(logits.v[j]);
  return m;
}

Vector task_mask(const DecomposedState& state, std::size_t layer, TaskId t) {
  const auto& hidden = state.layers.at(layer);
  if (state.masks_pinned) return Vector(hidden.shared.bias.size(), 1.0);
  auto it = hidden.masks.find(t);
  if (it == hidden.masks.end()) throw Error(fmt::format("unknown task {}", t));
  return mask_of(it->second);
}

DenseLayer compose(const LayerShared& shared, std::span<const double> mask,
                   const LayerTaskAdaptive& tau) {
  const Matrix& w = shared.weight;
  if (!w.same_shape(tau.weight_delta) || mask.size() != w.cols() ||
      shared.bias.size() != w.cols() || tau.bias_delta.size() != w.cols()) {
    throw Error(fmt::format("compose shape mismatch: shared {}, tau {}, mask {}",
                            w.shape_string(), tau.weight_delta.shape_string(), mask.size()));
  }
  DenseLayer out{Matrix(w.rows(), w.cols()), Vector(w.cols())};
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c)
      out.weight(r, c) = w(r, c) * mask[c] + tau.weight_delta(r, c);
  for (std::size_t c = 0; c < w.cols(); ++c)
    out.bias[c] = shared.bias[c] * mask[c] + tau.bias_delta[c];
  return out;
}

LayerTaskAdaptive effective_tau(const LayerTaskAdaptive& tau, const DenseLayer* local) {
  if (local == nullptr) return tau;
  if (!local->weight.same_shape(tau.weight_delta) || local->bias.size() != tau.bias_delta.size()) {
    throw Error("locally-shared block shape does not match tau");
  }
  LayerTaskAdaptive out = tau;
  auto w = out.weight_delta.values();
  auto lw = local->weight.values();
  for (std::size_t j = 0; j < w.size(); ++j) w[j] += lw[j];
  for (std::size_t j = 0; j < out.bias_delta.size(); ++j) out.bias_delta[j] += local->bias[j];
  return out;
}

LayerTaskAdaptive effective_tau(const DecomposedState& state, std::size_t layer, TaskId t) {
  const auto& tau = adaptive_of(state.layers.at(layer), t);
  auto assigned = state.assignment.find(t);
  if (assigned == state.assignment.end()) return tau;
  auto group = state.groups.find(assigned->second);
  if (group == state.groups.end()) {
    throw Error(fmt::format("task {} assigned to missing group {}", t, assigned->second));
  }
  return effective_tau(tau, &group->second.layers.at(layer));
}

std::vector<DenseLayer> composed_layers(const DecomposedState& state, TaskId t) {
  check_task(state, t);
  std::vector<DenseLayer> out;
  out.reserve(state.layers.size());
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    out.push_back(compose(state.layers[l].shared, task_mask(state, l, t),
                          effective_tau(state, l, t)));
  }
  return out;
}

std::vector<DenseLayer> restore(const DecomposedState& state, TaskId i) {
  check_task(state, i);
  std::vector<DenseLayer> out;
  out.reserve(state.layers.size());
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    out.push_back(compose(state.layers[l].snapshot, task_mask(state, l, i),
                          effective_tau(state, l, i)));
  }
  return out;
}

void restore_all(DecomposedState& state) {
  state.restored.clear();
  for (TaskId i : state.history) state.restored.emplace(i, restore(state, i));
}

void init_task(DecomposedState& state, TaskId t, std::size_t num_classes, TauInit mode) {
  if (state.has_task(t)) throw Error(fmt::format("task {} already initialized", t));
  if (num_classes == 0) throw Error("a task needs at least one class");
  for (auto& layer : state.layers) {
    const Matrix& w = layer.shared.weight;
    LayerTaskAdaptive tau;
    tau.owner = t;
    if (mode == TauInit::CopyShared) {
      tau.weight_delta = w;
      tau.bias_delta = layer.shared.bias;
    } else {
      tau.weight_delta = Matrix(w.rows(), w.cols());
      tau.bias_delta.assign(w.cols(), 0.0);
    }
    layer.adaptive.emplace(t, std::move(tau));
    layer.masks.emplace(t, LayerMaskLogits{Vector(w.cols(), 0.0), t});
    layer.snapshot = layer.shared;
  }
  const std::size_t fan_in = state.layers.back().shared.weight.cols();
  DenseLayer head{Matrix(fan_in, num_classes), Vector(num_classes, 0.0)};
  std::normal_distribution<double> init(0.0, std::sqrt(1.0 / static_cast<double>(fan_in)));
  for (double& w : head.weight.values()) w = init(state.rng);
  state.heads.emplace(t, std::move(head));
}

Matrix dense_forward(std::span<const DenseLayer> hidden, const DenseLayer& head,
                     Activation activation, const Matrix& x) {
  Matrix h = x;
  for (const auto& layer : hidden) {
    Matrix z = matmul(h, layer.weight);
    for (std::size_t r = 0; r < z.rows(); ++r) {
      auto row = z.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] = activate(activation, row[c] + layer.bias[c]);
    }
    h = std::move(z);
  }
  Matrix logits = matmul(h, head.weight);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += head.bias[c];
  }
  return logits;
}

Matrix forward_batch(const DecomposedState& state, const Matrix& x, TaskId t) {
  check_task(state, t);
  if (x.cols() != state.input_dim) {
    throw Error(fmt::format("input dimension {} does not match network input {}", x.cols(),
                            state.input_dim));
  }
  const auto hidden = composed_layers(state, t);
  return dense_forward(hidden, state.heads.at(t), state.activation, x);
}

Vector forward(const DecomposedState& state, std::span<const double> x, TaskId t) {
  Matrix row(1, x.size(), Vector(x.begin(), x.end()));
  return forward_batch(state, row, t).data();
}

Vector flatten(std::span<const DenseLayer> layers) {
  Vector out;
  for (const auto& layer : layers) {
    out.insert(out.end(), layer.weight.data().begin(), layer.weight.data().end());
    out.insert(out.end(), layer.bias.begin(), layer.bias.end());
  }
  return out;
}

}  // namespace apd
