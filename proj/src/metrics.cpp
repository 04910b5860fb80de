// SPDX-License-Identifier: Apache-2.0
#include "apd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace apd {

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < values.size(); ++j)
    if (values[j] > values[best]) best = j;
  return best;
}

double evaluate(const DecomposedState& state, TaskId t, const Batch& testset) {
  if (testset.labels.empty()) throw Error("cannot evaluate on an empty test set");
  const Matrix logits = forward_batch(state, testset.features, t);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (static_cast<int>(argmax(logits.row(r))) == testset.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(testset.labels.size());
}

double AccuracyHistory::final_accuracy(TaskId t) const {
  const auto it = std::find(order.begin(), order.end(), t);
  if (it == order.end() || acc.empty()) throw Error(fmt::format("task {} not in history", t));
  const auto pos = static_cast<std::size_t>(it - order.begin());
  const auto& last = acc.back();
  if (pos >= last.size()) throw Error(fmt::format("task {} not evaluated", t));
  return last[pos];
}

double AccuracyHistory::mean_final_accuracy() const {
  if (acc.empty() || acc.back().empty()) return 0.0;
  double sum = 0.0;
  for (double a : acc.back()) sum += a;
  return sum / static_cast<double>(acc.back().size());
}

std::vector<std::vector<double>> PerformanceMatrix::finals() const {
  std::vector<std::vector<double>> out;
  for (const auto& run : runs) {
    std::vector<double> row(run.order.size());
    for (TaskId t : run.order) row.at(static_cast<std::size_t>(t)) = run.final_accuracy(t);
    out.push_back(std::move(row));
  }
  return out;
}

double opd(std::span<const double> per_order_final) {
  if (per_order_final.size() < 2) throw Error("order disparity needs at least two orders");
  const auto [lo, hi] = std::minmax_element(per_order_final.begin(), per_order_final.end());
  return *hi - *lo;
}

std::vector<double> opd_per_task(const std::vector<std::vector<double>>& finals) {
  if (finals.size() < 2) throw Error("order disparity needs at least two orders");
  const std::size_t tasks = finals.front().size();
  std::vector<double> out(tasks);
  for (std::size_t t = 0; t < tasks; ++t) {
    std::vector<double> column;
    for (const auto& row : finals) {
      if (row.size() != tasks) throw Error("orders disagree on the number of tasks");
      column.push_back(row[t]);
    }
    out[t] = opd(column);
  }
  return out;
}

double aopd(const std::vector<std::vector<double>>& finals) {
  const auto per_task = opd_per_task(finals);
  if (per_task.empty()) throw Error("no tasks");
  double sum = 0.0;
  for (double v : per_task) sum += v;
  return sum / static_cast<double>(per_task.size());
}

double mopd(const std::vector<std::vector<double>>& finals) {
  const auto per_task = opd_per_task(finals);
  if (per_task.empty()) throw Error("no tasks");
  return *std::max_element(per_task.begin(), per_task.end());
}

Forgetting forgetting(const std::vector<std::vector<double>>& acc) {
  const std::size_t checkpoints = acc.size();
  if (checkpoints < 2) throw Error("forgetting needs at least two tasks");
  for (std::size_t c = 0; c < checkpoints; ++c) {
    if (acc[c].size() < c + 1) {
      throw Error(fmt::format("checkpoint {} is missing earlier tasks", c));
    }
  }
  Forgetting out;
  const auto& last = acc.back();
  out.worst_case = -std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p + 1 < checkpoints; ++p) {
    double best = acc[p][p];
    for (std::size_t l = p + 1; l + 1 < checkpoints; ++l) best = std::max(best, acc[l][p]);
    const double f = best - last[p];
    out.per_task.push_back(f);
    out.average += f;
    out.worst_case = std::max(out.worst_case, f);
  }
  out.average /= static_cast<double>(out.per_task.size());
  return out;
}

std::size_t base_parameter_count(const NetworkShape& shape, std::size_t num_classes) {
  std::size_t total = 0;
  std::size_t fan_in = shape.input_dim;
  for (std::size_t width : shape.hidden) {
    total += fan_in * width + width;
    fan_in = width;
  }
  return total + fan_in * num_classes + num_classes;
}

CapacityReport capacity(const DecomposedState& state, std::size_t base_count) {
  if (base_count == 0) throw Error("base parameter count must be positive");
  CapacityReport r;
  r.base_count = base_count;
  for (const auto& layer : state.layers) {
    r.shared += count_nonzero(layer.shared.weight.values()) + count_nonzero(layer.shared.bias);
    for (const auto& [t, tau] : layer.adaptive) {
      const std::size_t n = count_nonzero(tau.weight_delta.values()) + count_nonzero(tau.bias_delta);
      r.adaptive += n;
      r.adaptive_by_task[t] += n;
    }
    for (const auto& [t, mask] : layer.masks) r.masks += count_nonzero(mask.v);
  }
  for (const auto& [g, local] : state.groups)
    for (const auto& block : local.layers)
      r.local_shared += count_nonzero(block.weight.values()) + count_nonzero(block.bias);
  for (const auto& [t, head] : state.heads)
    r.heads += count_nonzero(head.weight.values()) + count_nonzero(head.bias);
  r.total = r.shared + r.local_shared + r.adaptive + r.masks + r.heads;
  r.percent = 100.0 * static_cast<double>(r.total) / static_cast<double>(base_count);
  return r;
}

void forget_task(DecomposedState& state, TaskId k) {
  if (!state.has_task(k)) throw Error(fmt::format("unknown task {}", k));
  for (auto& layer : state.layers) {
    layer.adaptive.erase(k);
    layer.masks.erase(k);
  }
  state.heads.erase(k);
  state.assignment.erase(k);
  state.restored.erase(k);
  std::erase(state.history, k);
}

namespace {

Vector covariance_times(const std::vector<Vector>& centered, std::span<const double> v) {
  const std::size_t dim = v.size();
  Vector out(dim, 0.0);
  for (const auto& row : centered) {
    double proj = 0.0;
    for (std::size_t j = 0; j < dim; ++j) proj += row[j] * v[j];
    for (std::size_t j = 0; j < dim; ++j) out[j] += proj * row[j];
  }
  const double scale = 1.0 / static_cast<double>(centered.size() - 1);
  for (double& x : out) x *= scale;
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) acc += a[j] * b[j];
  return acc;
}

void normalize(Vector& v) {
  const double n = std::sqrt(dot(v, v));
  if (n > 0.0)
    for (double& x : v) x /= n;
}

/// Top eigenpair of the covariance restricted to the complement of `against`.
/// `total_variance` sets the scale below which the restricted covariance is
/// treated as zero.
std::pair<Vector, double> power_iteration(const std::vector<Vector>& centered,
                                          const std::vector<Vector>& against, double total_variance) {
  const std::size_t dim = centered.front().size();
  // Projecting twice keeps the result orthogonal even when almost all of
  // `v` lay along the excluded directions.
  auto project_out = [&](Vector& v) {
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& u : against) {
        const double c = dot(v, u);
        for (std::size_t j = 0; j < dim; ++j) v[j] -= c * u[j];
      }
    }
  };
  Vector v(dim);
  for (std::size_t j = 0; j < dim; ++j) v[j] = 1.0 + 0.1 * static_cast<double>(j % 7);
  project_out(v);
  if (dot(v, v) < 1e-24) {
    // The start vector lies in the excluded span; any unit axis outside it will do.
    for (std::size_t axis = 0; axis < dim && dot(v, v) < 1e-2; ++axis) {
      v.assign(dim, 0.0);
      v[axis] = 1.0;
      project_out(v);
    }
  }
  normalize(v);
  double eigen = 0.0;
  for (int iter = 0; iter < 1000; ++iter) {
    Vector w = covariance_times(centered, v);
    project_out(w);
    const double norm = std::sqrt(dot(w, w));
    if (norm <= 1e-12 * total_variance) {
      eigen = 0.0;
      break;
    }
    const double next = dot(v, w);
    for (double& x : w) x /= norm;
    double delta = 0.0;
    for (std::size_t j = 0; j < dim; ++j) delta = std::max(delta, std::abs(w[j] - v[j]));
    v = std::move(w);
    const bool settled = std::abs(next - eigen) <= 1e-10 * std::max(1.0, std::abs(next)) && delta <= 1e-10;
    eigen = next;
    if (settled) break;
  }
  eigen = dot(v, covariance_times(centered, v));
  return {v, eigen};
}

}  // namespace

Pca2d pca2d(std::span<const Vector> trajectory) {
  if (trajectory.size() < 3) throw Error("PCA needs at least three vectors");
  const std::size_t dim = trajectory.front().size();
  for (const auto& p : trajectory)
    if (p.size() != dim) throw Error("PCA vectors differ in length");

  Pca2d out;
  out.mean.assign(dim, 0.0);
  for (const auto& p : trajectory)
    for (std::size_t j = 0; j < dim; ++j) out.mean[j] += p[j];
  for (double& x : out.mean) x /= static_cast<double>(trajectory.size());

  std::vector<Vector> centered;
  double spread = 0.0;
  for (const auto& p : trajectory) {
    Vector c(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      c[j] = p[j] - out.mean[j];
      spread = std::max(spread, std::abs(c[j]));
    }
    centered.push_back(std::move(c));
  }
  if (spread == 0.0) throw Error("PCA input has rank 0");

  double total_variance = 0.0;
  for (const auto& c : centered) total_variance += dot(c, c);
  total_variance /= static_cast<double>(centered.size() - 1);

  std::vector<Vector> found;
  for (std::size_t k = 0; k < 2; ++k) {
    auto [v, eigen] = power_iteration(centered, found, total_variance);
    if (dim < 2 && k == 1) v.assign(dim, 0.0);
    for (double x : v) {
      if (std::abs(x) > 1e-12) {
        if (x < 0.0)
          for (double& y : v) y = -y;
        break;
      }
    }
    out.components[k] = v;
    out.variance[k] = std::max(eigen, 0.0);
    found.push_back(std::move(v));
  }
  for (const auto& c : centered) out.points.push_back({dot(c, out.components[0]), dot(c, out.components[1])});
  return out;
}

double path_length(std::span<const std::array<double, 2>> points) {
  double total = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    total += std::hypot(points[i][0] - points[i - 1][0], points[i][1] - points[i - 1][1]);
  }
  return total;
}

}  // namespace apd
