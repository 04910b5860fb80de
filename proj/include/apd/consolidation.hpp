// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <span>
#include <vector>

#include "apd/matrix.hpp"
#include "apd/objectives.hpp"
#include "apd/params.hpp"

namespace apd {

struct ClusterModel {
  std::vector<Vector> centroids;
  std::vector<int> assignment;           // cluster index per input point
  std::vector<double> objective_trace;   // within-cluster SSE after each Lloyd iteration
  int iterations = 0;

  std::size_t k() const { return centroids.size(); }
  std::vector<std::size_t> members(int cluster) const;
};

double squared_distance(std::span<const double> a, std::span<const double> b);

/// Sum of squared distances of each point to its assigned centroid.
double kmeans_objective(std::span<const Vector> points, const ClusterModel& model);

/// Lloyd's algorithm. Initial centroids are `previous` (truncated to k)
/// followed by copies of distinct uniformly sampled points. Ties go to the
/// lowest cluster index. An empty cluster takes the point farthest from its
/// own centroid, unless every point already sits on its centroid.
ClusterModel kmeans(std::span<const Vector> points, int k, std::span<const Vector> previous,
                    int max_iter, std::mt19937_64& rng);

struct GroupSplit {
  Vector local;              // sigma~_g
  std::vector<Vector> taus;  // residual tau per member
};

/// Threshold rule: coordinates whose spread across members is at most beta
/// move entirely into the locally-shared block at the centroid value;
/// everything else stays with the members.
GroupSplit decompose_group(std::span<const Vector> taus, std::span<const double> centroid,
                           double beta);

struct ConsolidationReport {
  int k = 0;
  std::size_t nonzero_before = 0;
  std::size_t nonzero_after = 0;
  std::size_t nonzero_proposed = 0;  // count under the new grouping, even if rejected
  bool accepted = true;
  ClusterModel model;
};

/// tau~ of task t (all hidden layers) flattened.
Vector flatten_effective_tau(const DecomposedState& state, TaskId t);

/// Stored nonzeros over every tau and every locally-shared block.
std::size_t adaptive_nonzeros(const DecomposedState& state);

/// Re-clusters all stored tasks and rebuilds the locally-shared parameters.
/// A regrouping that would store more nonzeros than before is discarded; the
/// centroid budget grows by k either way.
ConsolidationReport consolidate(DecomposedState& state, const HyperParams& hp);

}  // namespace apd
