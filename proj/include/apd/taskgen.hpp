// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "apd/matrix.hpp"
#include "apd/params.hpp"

namespace apd {

struct Batch {
  Matrix features;
  std::vector<int> labels;
};

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct TaskDataset {
  TaskId task_id = 0;
  Matrix features;  // n x d
  std::vector<int> labels;
  Splits splits;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  Batch subset(std::span<const std::size_t> indices) const;
  Batch train() const { return subset(splits.train); }
  Batch test() const { return subset(splits.test); }
};

/// Gaussian-prototype task stream. Each class prototype mixes a direction
/// shared by every task (weight `relatedness`) with a task-specific one; when
/// `families` > 0 the task-specific part itself leans on a per-family
/// direction so tasks of one family resemble each other.
struct StreamSpec {
  int tasks = 5;
  std::size_t dim = 16;
  std::size_t classes = 4;
  std::size_t samples_per_class = 60;
  double relatedness = 0.5;
  double noise = 0.5;
  double prototype_scale = 2.0;
  int families = 0;
  double family_spread = 0.3;  // weight of the per-task direction inside a family
  std::array<double, 3> split_ratios{0.6, 0.2, 0.2};
  std::uint64_t seed = 1;
};

std::vector<TaskDataset> gen_stream(const StreamSpec& spec);

/// Stratified shuffled split; per-class counts use largest-remainder rounding.
TaskDataset split(TaskDataset dataset, std::span<const double> ratios, std::uint64_t seed);

/// R permutations of 0..T-1; the first is always the identity.
std::vector<std::vector<int>> orders(int num_tasks, int count, std::uint64_t seed);

/// Published task orders, named "T10-orderA".."T10-orderE" and
/// "T20-orderA".."T20-orderE".
std::vector<int> fixture_orders(std::string_view name);

/// A published order restricted to the ids below `num_tasks`, keeping their
/// relative positions; for streams shorter than the fixture.
std::vector<int> fixture_order_for(std::string_view name, int num_tasks);

/// One task from a CSV file: header row, integer label first, then features.
TaskDataset load_csv_task(const std::filesystem::path& path, TaskId task_id);

}  // namespace apd
