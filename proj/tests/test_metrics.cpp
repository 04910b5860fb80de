// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "apd/metrics.hpp"
#include "apd/trainer.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace apd;

namespace {

std::vector<std::vector<double>> random_history(std::mt19937_64& rng, std::size_t T) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> acc(T);
  for (std::size_t c = 0; c < T; ++c) {
    acc[c].resize(c + 1);
    for (double& a : acc[c]) a = u(rng);
  }
  return acc;
}

TaskDataset dataset_from(const Batch& b, std::size_t classes) {
  TaskDataset d;
  d.features = b.features;
  d.labels = b.labels;
  d.num_classes = classes;
  d.splits.train.resize(b.labels.size());
  std::iota(d.splits.train.begin(), d.splits.train.end(), 0);
  d.splits.test = d.splits.train;
  return d;
}

}  // namespace

TEST(Evaluate, TiesGoToTheLowestClass) {
  auto s = make_state({2, {3}}, Activation::Relu, 1);
  init_task(s, 0, 3, TauInit::Zeros);
  s.heads.at(0) = DenseLayer{Matrix(3, 3), Vector(3, 0.0)};
  Batch b{Matrix{{1.0, 2.0}, {-1.0, 0.5}}, {0, 1}};
  EXPECT_EQ(evaluate(s, 0, b), 0.5);
  EXPECT_EQ(argmax(Vector{1.0, 3.0, 3.0}), 1u);
  EXPECT_THROW(evaluate(s, 0, Batch{}), Error);
}

TEST(Evaluate, MemorizesTenSamples) {
  std::mt19937_64 rng(2);
  const auto data = dataset_from(support::random_batch(rng, 10, 8, 3), 3);
  auto hp = support::desk_params();
  hp.epochs = 300;
  hp.lr = 0.1;
  hp.lr_decay = 1.0;
  hp.batch_size = 10;
  const std::vector<TaskDataset> tasks{data};
  const auto r = run_sequence(tasks, std::vector<int>{0}, hp, Variant{}, support::desk_options());
  EXPECT_EQ(r.accuracy.acc[0][0], 1.0);
}

TEST(Evaluate, RandomLabelsScoreNearChance) {
  std::mt19937_64 rng(3);
  auto s = support::random_state(rng, 8, {16}, 1, 4, Activation::Relu);
  const auto b = support::random_batch(rng, 4000, 8, 4);
  EXPECT_NEAR(evaluate(s, 0, b), 0.25, 0.04);
}

TEST(Opd, HandValues) {
  EXPECT_DOUBLE_EQ(opd(Vector{0.8, 0.6, 0.7}), 0.2);
  const std::vector<std::vector<double>> same{{0.5, 0.9}, {0.5, 0.9}};
  EXPECT_EQ(aopd(same), 0.0);
  EXPECT_EQ(mopd(same), 0.0);
  const std::vector<std::vector<double>> finals{{0.9, 0.5, 0.7}, {0.8, 0.9, 0.7}, {0.6, 0.6, 0.7}};
  EXPECT_DOUBLE_EQ(aopd(finals), (0.3 + 0.4 + 0.0) / 3.0);
  EXPECT_DOUBLE_EQ(mopd(finals), 0.4);
  EXPECT_THROW(opd(Vector{0.5}), Error);
  EXPECT_THROW(aopd({{0.5, 0.6}}), Error);
}

TEST(Opd, FinalsAreIndexedByTaskId) {
  PerformanceMatrix m;
  m.runs.push_back(AccuracyHistory{{0, 1}, {{0.9}, {0.8, 0.7}}});
  m.runs.push_back(AccuracyHistory{{1, 0}, {{0.6}, {0.6, 0.5}}});
  const auto finals = m.finals();
  EXPECT_EQ(finals[0], (std::vector<double>{0.8, 0.7}));
  EXPECT_EQ(finals[1], (std::vector<double>{0.5, 0.6}));
  EXPECT_DOUBLE_EQ(mopd(finals), 0.3);
}

TEST(Forgetting, HandExamples) {
  const std::vector<std::vector<double>> none{{0.9}, {0.9, 0.8}, {0.9, 0.8, 0.7}};
  const auto f = forgetting(none);
  EXPECT_EQ(f.average, 0.0);
  EXPECT_EQ(f.worst_case, 0.0);

  const std::vector<std::vector<double>> drop{{0.9}, {0.95, 0.8}, {0.5, 0.6, 0.7}};
  const auto g = forgetting(drop);
  EXPECT_DOUBLE_EQ(g.per_task[0], 0.45);
  EXPECT_DOUBLE_EQ(g.per_task[1], 0.2);
  EXPECT_DOUBLE_EQ(g.worst_case, 0.45);

  const std::vector<std::vector<double>> gain{{0.5}, {0.9, 0.8}};
  EXPECT_DOUBLE_EQ(forgetting(gain).average, -0.4);
  EXPECT_THROW(forgetting({{0.5}}), Error);
}

TEST(Forgetting, MatchesBruteForce) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto acc = random_history(rng, 2 + static_cast<std::size_t>(trial % 9));
    const auto f = forgetting(acc);
    const auto want = oracle::brute_force_forgetting(acc);
    ASSERT_EQ(f.per_task.size(), want.size());
    for (std::size_t p = 0; p < want.size(); ++p) EXPECT_EQ(f.per_task[p], want[p]);
    EXPECT_EQ(f.worst_case, *std::max_element(want.begin(), want.end()));
  }
}

TEST(Capacity, CountsEveryStoredNonzero) {
  auto s = make_state({3, {4}}, Activation::Relu, 1);
  init_task(s, 0, 2, TauInit::Zeros);
  s.layers[0].adaptive.at(0).weight_delta(0, 0) = 0.5;
  s.layers[0].adaptive.at(0).bias_delta[2] = -0.1;
  s.layers[0].masks.at(0).v[1] = 0.3;
  const std::size_t base = base_parameter_count(s.shape(), 2);
  EXPECT_EQ(base, 3u * 4 + 4 + 4 * 2 + 2);
  const auto r = capacity(s, base);
  EXPECT_EQ(r.shared, count_nonzero(s.layers[0].shared.weight.values()));
  EXPECT_EQ(r.adaptive, 2u);
  EXPECT_EQ(r.adaptive_by_task.at(0), 2u);
  EXPECT_EQ(r.masks, 1u);
  EXPECT_EQ(r.heads, count_nonzero(s.heads.at(0).weight.values()));
  EXPECT_EQ(r.total, r.shared + r.adaptive + r.masks + r.heads);
  EXPECT_DOUBLE_EQ(r.percent, 100.0 * static_cast<double>(r.total) / static_cast<double>(base));
  EXPECT_THROW(capacity(s, 0), Error);
}

TEST(ForgetTask, RemovesOnlyThatTask) {
  std::mt19937_64 rng(5);
  auto s = support::random_state(rng, 4, {5, 3}, 3);
  support::add_random_group(s, rng, 0, {0, 1});
  const auto batch = support::random_batch(rng, 8, 4, 3);
  const auto keep0 = forward_batch(s, batch.features, 0);
  const auto keep2 = forward_batch(s, batch.features, 2);
  const auto before = capacity(s, 100);
  forget_task(s, 1);
  EXPECT_EQ(forward_batch(s, batch.features, 0), keep0);
  EXPECT_EQ(forward_batch(s, batch.features, 2), keep2);
  EXPECT_FALSE(s.has_task(1));
  EXPECT_THROW(forward(s, Vector(4, 0.0), 1), Error);
  EXPECT_THROW(forget_task(s, 1), Error);
  EXPECT_LT(capacity(s, 100).total, before.total);
  EXPECT_EQ(capacity(s, 100).local_shared, before.local_shared);
  EXPECT_EQ(s.history, (std::vector<TaskId>{0, 2}));
}

TEST(Pca, CollinearPointsHaveNoSecondComponent) {
  std::vector<Vector> points;
  for (int i = 0; i < 12; ++i) {
    const double a = 0.37 * i - 1.0;
    points.push_back(Vector{1.0 + a, 2.0 - 2.0 * a, 0.5 * a, 3.0});
  }
  const auto p = pca2d(points);
  for (const auto& q : p.points) EXPECT_LT(std::abs(q[1]), 1e-8);
}

TEST(Pca, PlanarPointsKeepTheirDistances) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  // An orthonormal pair spanning a plane in 5 dimensions.
  const Vector e1{0.6, 0.8, 0.0, 0.0, 0.0};
  const Vector e2{0.0, 0.0, 0.0, 1.0, 0.0};
  std::vector<Vector> points;
  std::vector<std::array<double, 2>> coords;
  for (int i = 0; i < 15; ++i) {
    const double a = 3.0 * n(rng), b = n(rng);
    Vector x(5, 1.0);
    for (std::size_t j = 0; j < 5; ++j) x[j] += a * e1[j] + b * e2[j];
    points.push_back(x);
    coords.push_back({a, b});
  }
  const auto p = pca2d(points);
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = 0; j < points.size(); ++j) {
      const double want = std::hypot(coords[i][0] - coords[j][0], coords[i][1] - coords[j][1]);
      const double got = std::hypot(p.points[i][0] - p.points[j][0], p.points[i][1] - p.points[j][1]);
      EXPECT_NEAR(got, want, 1e-6);
    }
}

TEST(Pca, MatchesEigenDecomposition) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    const int rows = 20, cols = 6;
    std::vector<Vector> points(rows, Vector(cols));
    Eigen::MatrixXd x(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        // Distinct scales keep the leading eigenvalues well separated.
        points[r][c] = n(rng) * (cols - c);
        x(r, c) = points[r][c];
      }
    const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
    const Eigen::MatrixXd cov = centered.transpose() * centered / (rows - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    const auto p = pca2d(points);
    for (int k = 0; k < 2; ++k) {
      Eigen::VectorXd dir = solver.eigenvectors().col(cols - 1 - k);
      const double gap = solver.eigenvalues()(cols - 1 - k) - solver.eigenvalues()(cols - 2 - k);
      if (gap < 0.1 * solver.eigenvalues()(cols - 1)) continue;
      int first = 0;
      while (std::abs(dir(first)) < 1e-12) ++first;
      if (dir(first) < 0) dir = -dir;
      for (int c = 0; c < cols; ++c) EXPECT_NEAR(p.components[k][c], dir(c), 1e-6);
      for (int r = 0; r < rows; ++r) EXPECT_NEAR(p.points[r][k], centered.row(r).dot(dir), 1e-6);
    }
  }
}

TEST(Pca, RejectsTinyTrajectories) {
  EXPECT_THROW(pca2d(std::vector<Vector>{{1.0, 2.0}}), Error);
}

TEST(PathLength, SumsSegments) {
  const std::vector<std::array<double, 2>> pts{{0, 0}, {3, 4}, {3, 0}};
  EXPECT_DOUBLE_EQ(path_length(pts), 9.0);
  EXPECT_EQ(path_length(std::vector<std::array<double, 2>>{{1, 1}}), 0.0);
}
