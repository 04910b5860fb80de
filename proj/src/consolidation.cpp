// SPDX-License-Identifier: Apache-2.0
#include "apd/consolidation.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include <fmt/format.h>

namespace apd {
namespace {

std::vector<int> assign_nearest(std::span<const Vector> points, const std::vector<Vector>& centroids) {
  std::vector<int> out(points.size(), 0);
  for (std::size_t p = 0; p < points.size(); ++p) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < centroids.size(); ++g) {
      const double d = squared_distance(points[p], centroids[g]);
      if (d < best) {
        best = d;
        out[p] = static_cast<int>(g);
      }
    }
  }
  return out;
}

void scatter_tau(DecomposedState& state, TaskId t, std::span<const double> flat) {
  std::size_t pos = 0;
  for (auto& layer : state.layers) {
    auto& tau = layer.adaptive.at(t);
    for (double& v : tau.weight_delta.values()) v = flat[pos++];
    for (double& v : tau.bias_delta) v = flat[pos++];
  }
}

LocalShared unflatten_local(const DecomposedState& state, GroupId id, std::span<const double> flat) {
  LocalShared out;
  out.id = id;
  std::size_t pos = 0;
  for (const auto& layer : state.layers) {
    const Matrix& w = layer.shared.weight;
    DenseLayer block{Matrix(w.rows(), w.cols()), Vector(w.cols(), 0.0)};
    for (double& v : block.weight.values()) v = flat[pos++];
    for (double& v : block.bias) v = flat[pos++];
    out.layers.push_back(std::move(block));
  }
  return out;
}

}  // namespace

std::vector<std::size_t> ClusterModel::members(int cluster) const {
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < assignment.size(); ++p)
    if (assignment[p] == cluster) out.push_back(p);
  return out;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = a[j] - b[j];
    acc += d * d;
  }
  return acc;
}

double kmeans_objective(std::span<const Vector> points, const ClusterModel& model) {
  double acc = 0.0;
  for (std::size_t p = 0; p < points.size(); ++p) {
    acc += squared_distance(points[p], model.centroids[static_cast<std::size_t>(model.assignment[p])]);
  }
  return acc;
}

ClusterModel kmeans(std::span<const Vector> points, int k, std::span<const Vector> previous,
                    int max_iter, std::mt19937_64& rng) {
  if (points.empty()) throw Error("k-means needs at least one point");
  if (k < 1) throw Error("k-means needs at least one cluster");
  if (max_iter < 1) throw Error("k-means needs at least one iteration");
  const std::size_t dim = points.front().size();
  for (const auto& p : points)
    if (p.size() != dim) throw Error("k-means points differ in dimension");
  const std::size_t clusters = std::min(static_cast<std::size_t>(k), points.size());

  ClusterModel model;
  for (const auto& c : previous) {
    if (model.centroids.size() == clusters) break;
    if (c.size() != dim) throw Error("previous centroid dimension mismatch");
    model.centroids.push_back(c);
  }
  if (model.centroids.size() < clusters) {
    // Partial Fisher-Yates for distinct seed points.
    std::vector<std::size_t> pool(points.size());
    std::iota(pool.begin(), pool.end(), 0);
    const std::size_t needed = clusters - model.centroids.size();
    for (std::size_t i = 0; i < needed; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
      model.centroids.push_back(points[pool[i]]);
    }
  }

  std::vector<int> current;
  for (int iter = 0; iter < max_iter; ++iter) {
    std::vector<int> next = assign_nearest(points, model.centroids);

    std::vector<std::size_t> sizes(clusters, 0);
    for (int g : next) ++sizes[static_cast<std::size_t>(g)];
    for (std::size_t g = 0; g < clusters; ++g) {
      if (sizes[g] != 0) continue;
      double far = 0.0;
      std::size_t far_point = points.size();
      for (std::size_t p = 0; p < points.size(); ++p) {
        const auto owner = static_cast<std::size_t>(next[p]);
        if (sizes[owner] < 2) continue;
        const double d = squared_distance(points[p], model.centroids[owner]);
        if (d > far) {
          far = d;
          far_point = p;
        }
      }
      if (far_point == points.size()) continue;
      --sizes[static_cast<std::size_t>(next[far_point])];
      next[far_point] = static_cast<int>(g);
      sizes[g] = 1;
      model.centroids[g] = points[far_point];
    }

    const bool changed = next != current;
    current = std::move(next);
    for (std::size_t g = 0; g < clusters; ++g) {
      if (sizes[g] == 0) continue;
      Vector mean(dim, 0.0);
      for (std::size_t p = 0; p < points.size(); ++p) {
        if (static_cast<std::size_t>(current[p]) != g) continue;
        for (std::size_t j = 0; j < dim; ++j) mean[j] += points[p][j];
      }
      for (double& v : mean) v /= static_cast<double>(sizes[g]);
      model.centroids[g] = std::move(mean);
    }
    model.assignment = current;
    model.objective_trace.push_back(kmeans_objective(points, model));
    model.iterations = iter + 1;
    if (!changed) break;
  }
  return model;
}

GroupSplit decompose_group(std::span<const Vector> taus, std::span<const double> centroid,
                           double beta) {
  if (beta < 0.0) throw Error("beta must be non-negative");
  if (taus.empty()) throw Error("cannot decompose an empty group");
  const std::size_t dim = centroid.size();
  for (const auto& tau : taus) {
    if (tau.size() != dim) {
      throw Error(fmt::format("group member has {} coordinates, centroid has {}", tau.size(), dim));
    }
  }
  GroupSplit out;
  out.local.assign(dim, 0.0);
  out.taus.assign(taus.begin(), taus.end());
  for (std::size_t j = 0; j < dim; ++j) {
    double lo = taus[0][j];
    double hi = taus[0][j];
    for (const auto& tau : taus) {
      lo = std::min(lo, tau[j]);
      hi = std::max(hi, tau[j]);
    }
    if (hi - lo <= beta) {
      out.local[j] = centroid[j];
      for (auto& tau : out.taus) tau[j] = 0.0;
    }
  }
  return out;
}

Vector flatten_effective_tau(const DecomposedState& state, TaskId t) {
  Vector out;
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    const auto tau = effective_tau(state, l, t);
    out.insert(out.end(), tau.weight_delta.data().begin(), tau.weight_delta.data().end());
    out.insert(out.end(), tau.bias_delta.begin(), tau.bias_delta.end());
  }
  return out;
}

std::size_t adaptive_nonzeros(const DecomposedState& state) {
  std::size_t total = 0;
  for (const auto& layer : state.layers) {
    for (const auto& [t, tau] : layer.adaptive) {
      total += count_nonzero(tau.weight_delta.values()) + count_nonzero(tau.bias_delta);
    }
  }
  for (const auto& [g, local] : state.groups) {
    for (const auto& block : local.layers) {
      total += count_nonzero(block.weight.values()) + count_nonzero(block.bias);
    }
  }
  return total;
}

ConsolidationReport consolidate(DecomposedState& state, const HyperParams& hp) {
  ConsolidationReport report;
  const std::vector<TaskId> tasks = state.history;
  report.nonzero_before = adaptive_nonzeros(state);
  if (tasks.empty()) return report;

  std::vector<Vector> points;
  points.reserve(tasks.size());
  for (TaskId t : tasks) points.push_back(flatten_effective_tau(state, t));

  report.k = std::min(state.cluster.next_k, static_cast<int>(tasks.size()));
  report.model = kmeans(points, report.k, state.cluster.centroids, hp.kmeans_max_iter, state.rng);

  DecomposedState next = state;
  next.groups.clear();
  next.assignment.clear();
  for (std::size_t g = 0; g < report.model.k(); ++g) {
    const auto members = report.model.members(static_cast<int>(g));
    if (members.empty()) continue;
    std::vector<Vector> taus;
    for (std::size_t p : members) taus.push_back(points[p]);
    auto split = decompose_group(taus, report.model.centroids[g], hp.beta);
    const auto id = static_cast<GroupId>(g);
    next.groups.emplace(id, unflatten_local(next, id, split.local));
    for (std::size_t m = 0; m < members.size(); ++m) {
      const TaskId t = tasks[members[m]];
      scatter_tau(next, t, split.taus[m]);
      next.assignment[t] = id;
    }
  }
  report.nonzero_after = adaptive_nonzeros(next);
  report.nonzero_proposed = report.nonzero_after;
  report.accepted = report.nonzero_after <= report.nonzero_before;
  if (report.accepted) {
    next.cluster.centroids = report.model.centroids;
    state = std::move(next);
  } else {
    report.nonzero_after = report.nonzero_before;
  }
  state.cluster.next_k += hp.centroid_increment;
  ++state.cluster.events;
  return report;
}

}  // namespace apd
