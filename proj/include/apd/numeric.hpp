// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string_view>

#include "apd/matrix.hpp"

namespace apd {

/// Logistic function, stable for large |x|.
double sigmoid(double x);

enum class Activation { Relu, Tanh, Identity };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation act);

double activate(Activation act, double x);
/// Derivative expressed through the activation's output value.
double activate_grad_from_output(Activation act, double y);

struct CrossEntropy {
  double loss = 0.0;
  Vector grad;  // softmax - onehot
};

/// Log-sum-exp stabilized softmax cross entropy for a single example.
CrossEntropy softmax_cross_entropy(std::span<const double> logits, std::size_t label);

/// A differentiable scalar function: returns the loss and writes the gradient
/// into `grad` (already sized to match `params`) when `grad` is non-empty.
using LossFn = std::function<double(std::span<const double> params, std::span<double> grad)>;

/// Central finite differences against the analytic gradient. Returns
/// max_j |g_fd - g_an| / max(1e-8, |g_fd| + |g_an|).
double grad_check(const LossFn& loss_fn, std::span<const double> params, double eps);

}  // namespace apd
