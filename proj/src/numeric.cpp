// SPDX-License-Identifier: Apache-2.0
#include "apd/numeric.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace apd {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::Relu;
  if (name == "tanh") return Activation::Tanh;
  if (name == "identity") return Activation::Identity;
  throw Error(fmt::format("unknown activation '{}'", name));
}

std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Identity: return "identity";
  }
  return "?";
}

double activate(Activation act, double x) {
  switch (act) {
    case Activation::Relu: return x > 0.0 ? x : 0.0;
    case Activation::Tanh: return std::tanh(x);
    case Activation::Identity: return x;
  }
  return x;
}

double activate_grad_from_output(Activation act, double y) {
  switch (act) {
    case Activation::Relu: return y > 0.0 ? 1.0 : 0.0;
    case Activation::Tanh: return 1.0 - y * y;
    case Activation::Identity: return 1.0;
  }
  return 1.0;
}

CrossEntropy softmax_cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw Error(fmt::format("label {} out of range for {} classes", label, logits.size()));
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double z : logits) denom += std::exp(z - peak);
  const double log_denom = std::log(denom);

  CrossEntropy out;
  out.loss = -(logits[label] - peak - log_denom);
  out.grad.resize(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out.grad[j] = std::exp(logits[j] - peak - log_denom);
  }
  out.grad[label] -= 1.0;
  return out;
}

double grad_check(const LossFn& loss_fn, std::span<const double> params, double eps) {
  Vector x(params.begin(), params.end());
  Vector analytic(x.size(), 0.0);
  loss_fn(x, analytic);

  double worst = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double saved = x[j];
    x[j] = saved + eps;
    const double up = loss_fn(x, {});
    x[j] = saved - eps;
    const double down = loss_fn(x, {});
    x[j] = saved;
    const double fd = (up - down) / (2.0 * eps);
    const double rel =
        std::abs(fd - analytic[j]) / std::max(1e-8, std::abs(fd) + std::abs(analytic[j]));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace apd
