// SPDX-License-Identifier: Apache-2.0
#include "apd/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>

namespace apd {
namespace {

Vector random_unit(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(dim);
  for (double& x : v) x = normal(rng);
  const double norm = std::sqrt(squared_norm(v));
  for (double& x : v) x /= norm;
  return v;
}

Vector mix(const Vector& a, double wa, const Vector& b, double wb) {
  Vector out(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) out[j] = wa * a[j] + wb * b[j];
  return out;
}

void rescale(Vector& v, double target_norm) {
  const double norm = std::sqrt(squared_norm(v));
  if (norm == 0.0) return;
  for (double& x : v) x *= target_norm / norm;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  std::mt19937_64 rng(seq);
  return rng();
}

}  // namespace

Batch TaskDataset::subset(std::span<const std::size_t> indices) const {
  Batch batch{Matrix(indices.size(), features.cols()), {}};
  batch.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    auto src = features.row(indices[r]);
    std::copy(src.begin(), src.end(), batch.features.row(r).begin());
    batch.labels.push_back(labels[indices[r]]);
  }
  return batch;
}

std::vector<TaskDataset> gen_stream(const StreamSpec& spec) {
  if (spec.tasks < 1 || spec.dim < 1 || spec.classes < 1 || spec.samples_per_class < 1) {
    throw Error("stream counts must be at least 1");
  }
  if (spec.relatedness < 0.0 || spec.relatedness > 1.0) throw Error("relatedness must lie in [0, 1]");
  if (spec.classes > spec.dim) {
    throw Error(fmt::format("{} classes cannot be represented in {} dimensions", spec.classes,
                            spec.dim));
  }
  std::mt19937_64 rng(spec.seed);
  std::vector<Vector> global;
  for (std::size_t c = 0; c < spec.classes; ++c) global.push_back(random_unit(rng, spec.dim));
  std::vector<std::vector<Vector>> family_dirs(static_cast<std::size_t>(std::max(spec.families, 0)));
  for (auto& dirs : family_dirs)
    for (std::size_t c = 0; c < spec.classes; ++c) dirs.push_back(random_unit(rng, spec.dim));

  std::vector<TaskDataset> out;
  for (int t = 0; t < spec.tasks; ++t) {
    std::vector<Vector> prototypes;
    for (std::size_t c = 0; c < spec.classes; ++c) {
      Vector own = random_unit(rng, spec.dim);
      if (spec.families > 0) {
        const auto& fam = family_dirs[static_cast<std::size_t>(t % spec.families)][c];
        own = mix(fam, std::sqrt(1.0 - spec.family_spread), own, std::sqrt(spec.family_spread));
        rescale(own, 1.0);
      }
      Vector proto = mix(global[c], spec.relatedness, own, 1.0 - spec.relatedness);
      rescale(proto, spec.prototype_scale);
      prototypes.push_back(std::move(proto));
    }

    TaskDataset task;
    task.task_id = t;
    task.num_classes = spec.classes;
    const std::size_t n = spec.classes * spec.samples_per_class;
    task.features = Matrix(n, spec.dim);
    task.labels.reserve(n);
    std::normal_distribution<double> noise(0.0, spec.noise);
    std::size_t r = 0;
    for (std::size_t c = 0; c < spec.classes; ++c) {
      for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++r) {
        auto row = task.features.row(r);
        for (std::size_t j = 0; j < spec.dim; ++j) {
          row[j] = prototypes[c][j] + (spec.noise > 0.0 ? noise(rng) : 0.0);
        }
        task.labels.push_back(static_cast<int>(c));
      }
    }
    out.push_back(split(std::move(task), spec.split_ratios,
                        derive_seed(spec.seed, static_cast<std::uint64_t>(t) + 1)));
  }
  return out;
}

TaskDataset split(TaskDataset dataset, std::span<const double> ratios, std::uint64_t seed) {
  if (ratios.empty()) throw Error("split needs at least one ratio");
  double total = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw Error("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error(fmt::format("split ratios sum to {}, not 1", total));
  const std::size_t parts = static_cast<std::size_t>(
      std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0.0; }));

  std::vector<std::vector<std::size_t>> by_class(dataset.num_classes);
  for (std::size_t i = 0; i < dataset.labels.size(); ++i) {
    const int label = dataset.labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= dataset.num_classes) {
      throw Error(fmt::format("label {} out of range", label));
    }
    by_class[static_cast<std::size_t>(label)].push_back(i);
  }

  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> buckets(ratios.size());
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.size() < parts) {
      throw Error(fmt::format("class {} has {} samples, fewer than {} split parts", c,
                              members.size(), parts));
    }
    std::shuffle(members.begin(), members.end(), rng);

    // Largest remainder: floor everything, then hand out the leftover samples
    // by descending fractional part, lower split index first on ties.
    std::vector<std::size_t> counts(ratios.size());
    std::vector<double> remainders(ratios.size());
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < ratios.size(); ++k) {
      const double exact = ratios[k] * static_cast<double>(members.size());
      counts[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
      remainders[k] = exact - static_cast<double>(counts[k]);
      assigned += counts[k];
    }
    std::vector<std::size_t> rank(ratios.size());
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(),
                     [&](std::size_t a, std::size_t b) { return remainders[a] > remainders[b]; });
    for (std::size_t k = 0; assigned < members.size(); ++k, ++assigned) ++counts[rank[k % rank.size()]];

    std::size_t pos = 0;
    for (std::size_t k = 0; k < ratios.size(); ++k) {
      for (std::size_t n = 0; n < counts[k]; ++n) buckets[k].push_back(members[pos++]);
    }
    if (counts[0] == 0) throw Error(fmt::format("class {} has no training samples", c));
  }
  for (auto& b : buckets) std::sort(b.begin(), b.end());
  dataset.splits = Splits{};
  dataset.splits.train = std::move(buckets[0]);
  if (buckets.size() > 1) dataset.splits.val = std::move(buckets[1]);
  if (buckets.size() > 2) dataset.splits.test = std::move(buckets[2]);
  for (std::size_t k = 3; k < buckets.size(); ++k) {
    dataset.splits.test.insert(dataset.splits.test.end(), buckets[k].begin(), buckets[k].end());
  }
  return dataset;
}

std::vector<std::vector<int>> orders(int num_tasks, int count, std::uint64_t seed) {
  if (count < 1) throw Error("at least one order is required");
  if (num_tasks < 1) throw Error("at least one task is required");
  std::vector<int> identity(static_cast<std::size_t>(num_tasks));
  std::iota(identity.begin(), identity.end(), 0);
  std::vector<std::vector<int>> out{identity};
  std::mt19937_64 rng(seed);
  for (int r = 1; r < count; ++r) {
    auto perm = identity;
    std::shuffle(perm.begin(), perm.end(), rng);
    out.push_back(std::move(perm));
  }
  return out;
}

std::vector<int> fixture_orders(std::string_view name) {
  struct Fixture {
    std::string_view name;
    std::vector<int> order;
  };
  static const std::vector<Fixture> fixtures = {
      {"T10-orderA", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}},
      {"T10-orderB", {1, 7, 4, 5, 2, 0, 8, 6, 9, 3}},
      {"T10-orderC", {7, 0, 5, 1, 8, 4, 3, 6, 2, 9}},
      {"T10-orderD", {5, 8, 2, 9, 0, 4, 3, 7, 6, 1}},
      {"T10-orderE", {2, 9, 5, 4, 8, 0, 6, 1, 3, 7}},
      {"T20-orderA", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19}},
      {"T20-orderB", {15, 12, 5, 9, 7, 16, 18, 17, 1, 0, 3, 8, 11, 14, 10, 6, 2, 4, 13, 19}},
      {"T20-orderC", {17, 1, 19, 18, 12, 7, 6, 0, 11, 15, 10, 5, 13, 3, 9, 16, 4, 14, 2, 8}},
      {"T20-orderD", {11, 9, 6, 5, 12, 4, 0, 10, 13, 7, 14, 3, 15, 16, 8, 1, 2, 19, 18, 17}},
      {"T20-orderE", {6, 14, 0, 11, 12, 17, 13, 4, 9, 1, 7, 19, 8, 10, 3, 15, 18, 5, 2, 16}},
  };
  for (const auto& f : fixtures)
    if (f.name == name) return f.order;
  throw Error(fmt::format("unknown order fixture '{}'", name));
}

std::vector<int> fixture_order_for(std::string_view name, int num_tasks) {
  const auto full = fixture_orders(name);
  if (num_tasks < 1 || num_tasks > static_cast<int>(full.size())) {
    throw Error(fmt::format("fixture {} covers {} tasks, not {}", name, full.size(), num_tasks));
  }
  std::vector<int> out;
  std::copy_if(full.begin(), full.end(), std::back_inserter(out), [&](int t) { return t < num_tasks; });
  return out;
}

TaskDataset load_csv_task(const std::filesystem::path& path, TaskId task_id) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open {}", path.string()));
  std::string line;
  if (!std::getline(in, line)) throw Error(fmt::format("{}: missing header row", path.string()));

  Vector values;
  std::vector<int> labels;
  std::size_t dim = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 2) {
      throw Error(fmt::format("{}:{}: expected a label and at least one feature", path.string(),
                              line_no));
    }
    if (dim == 0) dim = cells.size() - 1;
    if (cells.size() - 1 != dim) {
      throw Error(fmt::format("{}:{}: expected {} features, found {}", path.string(), line_no, dim,
                              cells.size() - 1));
    }
    try {
      std::size_t used = 0;
      const int label = std::stoi(cells[0], &used);
      if (label < 0) throw std::invalid_argument("negative");
      labels.push_back(label);
      for (std::size_t j = 1; j < cells.size(); ++j) {
        const double v = std::stod(cells[j]);
        if (!std::isfinite(v)) throw std::invalid_argument("non-finite");
        values.push_back(v);
      }
    } catch (const std::exception&) {
      throw Error(fmt::format("{}:{}: malformed value", path.string(), line_no));
    }
  }
  if (labels.empty()) throw Error(fmt::format("{}: no samples", path.string()));
  TaskDataset task;
  task.task_id = task_id;
  task.features = Matrix(labels.size(), dim, std::move(values));
  task.num_classes = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  task.labels = std::move(labels);
  task.splits.train.resize(task.labels.size());
  std::iota(task.splits.train.begin(), task.splits.train.end(), 0);
  return task;
}

}  // namespace apd
