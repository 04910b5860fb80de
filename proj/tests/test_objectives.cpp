// SPDX-License-Identifier: Apache-2.0
#include <random>

#include <gtest/gtest.h>

#include "apd/objectives.hpp"
#include "helpers.hpp"

using namespace apd;

namespace {

ObjectiveSpec spec_of(Objective kind, TaskId t) {
  ObjectiveSpec spec;
  spec.kind = kind;
  spec.task = t;
  spec.lambda1 = {0.1};
  spec.lambda2 = 0.7;
  return spec;
}

double check(const support::Instance& inst, const ObjectiveSpec& spec) {
  const auto params = gather_trainable(inst.state, spec);
  return grad_check(objective_as_loss_fn(inst.state, inst.batch, spec), params, 1e-5);
}

}  // namespace

TEST(ObjectiveGradient, TransferMatchesFiniteDifferences) {
  std::mt19937_64 rng(100);
  for (int trial = 0; trial < 20; ++trial) {
    const int tasks = 1 + trial % 3;
    auto inst = support::random_instance(rng, tasks, false);
    EXPECT_LT(check(inst, spec_of(Objective::Transfer, tasks - 1)), 1e-4) << "trial " << trial;
  }
}

TEST(ObjectiveGradient, RetroactiveMatchesFiniteDifferences) {
  std::mt19937_64 rng(200);
  for (int trial = 0; trial < 20; ++trial) {
    const int tasks = 2 + trial % 2;
    auto inst = support::random_instance(rng, tasks, false);
    EXPECT_LT(check(inst, spec_of(Objective::Retroactive, tasks - 1)), 1e-4) << "trial " << trial;
  }
}

TEST(ObjectiveGradient, ConsolidatedMatchesFiniteDifferences) {
  std::mt19937_64 rng(300);
  for (int trial = 0; trial < 20; ++trial) {
    const int tasks = 2 + trial % 2;
    auto inst = support::random_instance(rng, tasks, true);
    EXPECT_LT(check(inst, spec_of(Objective::Consolidated, tasks - 1)), 1e-4) << "trial " << trial;
  }
}

TEST(ObjectiveGradient, FrozenBlocksAreExcluded) {
  std::mt19937_64 rng(400);
  auto inst = support::random_instance(rng, 2, false);
  auto spec = spec_of(Objective::Retroactive, 1);
  const std::size_t full = gather_trainable(inst.state, spec).size();
  spec.train_shared = false;
  spec.train_masks = false;
  const std::size_t reduced = gather_trainable(inst.state, spec).size();
  EXPECT_LT(reduced, full);
  EXPECT_LT(check(inst, spec), 1e-4);
}

TEST(Objective, NoRegularizersGivesPlainDataLoss) {
  std::mt19937_64 rng(1);
  auto inst = support::random_instance(rng, 2, false);
  for (auto kind : {Objective::Transfer, Objective::Retroactive, Objective::Consolidated}) {
    auto spec = spec_of(kind, 1);
    spec.lambda1 = {0.0};
    spec.lambda2 = 0.0;
    const auto v = evaluate_objective(inst.state, inst.batch, spec);
    EXPECT_EQ(v.drift, 0.0);
    EXPECT_EQ(v.l1, 0.0);
    EXPECT_EQ(v.smooth, v.data_loss);
  }
}

TEST(Objective, TransferWithoutSharedMovementHasNoDrift) {
  std::mt19937_64 rng(2);
  auto s = support::random_state(rng, 3, {4, 4}, 1);
  for (auto& layer : s.layers) layer.snapshot = layer.shared;
  const auto batch = support::random_batch(rng, 5, 3, 3);
  const auto v = evaluate_objective(s, batch, spec_of(Objective::Transfer, 0));
  EXPECT_EQ(v.drift, 0.0);
  EXPECT_EQ(v.smooth, v.data_loss);
}

TEST(Objective, FirstTaskHasNoDriftTerms) {
  std::mt19937_64 rng(3);
  auto s = support::random_state(rng, 3, {4, 4}, 1);
  support::perturb_shared(s, rng);
  const auto batch = support::random_batch(rng, 5, 3, 3);
  const auto v = evaluate_objective(s, batch, spec_of(Objective::Retroactive, 0));
  EXPECT_EQ(v.drift, 0.0);
  EXPECT_GT(v.l1, 0.0);
}

TEST(Objective, LiveEqualsSnapshotGivesZeroDrift) {
  std::mt19937_64 rng(4);
  auto s = support::random_state(rng, 3, {4, 4}, 3);
  for (auto& layer : s.layers) layer.snapshot = layer.shared;
  restore_all(s);
  s.restored.erase(2);
  const auto batch = support::random_batch(rng, 5, 3, 3);
  EXPECT_EQ(evaluate_objective(s, batch, spec_of(Objective::Retroactive, 2)).drift, 0.0);
}

TEST(Objective, ConsolidatedWithoutGroupsEqualsRetroactive) {
  std::mt19937_64 rng(5);
  auto inst = support::random_instance(rng, 3, false);
  const auto a = evaluate_objective(inst.state, inst.batch, spec_of(Objective::Retroactive, 2));
  const auto b = evaluate_objective(inst.state, inst.batch, spec_of(Objective::Consolidated, 2));
  EXPECT_EQ(a.smooth, b.smooth);
  EXPECT_EQ(a.l1, b.l1);
  EXPECT_EQ(a.grad.shared, b.grad.shared);
  EXPECT_EQ(a.grad.tau, b.grad.tau);
}

TEST(Objective, LocalSharedAtTargetLeavesMaskedSharedMismatchOnly) {
  std::mt19937_64 rng(6);
  auto s = support::random_state(rng, 3, {4}, 2);
  for (auto& layer : s.layers) layer.snapshot = layer.shared;
  restore_all(s);
  s.restored.erase(1);
  // Move task 0's whole tau~ into a group block, then move sigma.
  LocalShared local;
  local.id = 0;
  for (auto& layer : s.layers) {
    auto& tau = layer.adaptive.at(0);
    local.layers.push_back(DenseLayer{tau.weight_delta, tau.bias_delta});
    tau.weight_delta = Matrix(tau.weight_delta.rows(), tau.weight_delta.cols());
    tau.bias_delta.assign(tau.bias_delta.size(), 0.0);
  }
  s.groups[0] = local;
  s.assignment[0] = 0;
  support::perturb_shared(s, rng);

  auto spec = spec_of(Objective::Consolidated, 1);
  const auto batch = support::random_batch(rng, 5, 3, 3);
  double expected = 0.0;
  const auto& layer = s.layers[0];
  const auto m = task_mask(s, 0, 0);
  for (std::size_t r = 0; r < layer.shared.weight.rows(); ++r)
    for (std::size_t c = 0; c < layer.shared.weight.cols(); ++c) {
      const double d = (layer.shared.weight(r, c) - layer.snapshot.weight(r, c)) * m[c];
      expected += d * d;
    }
  for (std::size_t c = 0; c < layer.shared.bias.size(); ++c) {
    const double d = (layer.shared.bias[c] - layer.snapshot.bias[c]) * m[c];
    expected += d * d;
  }
  EXPECT_NEAR(evaluate_objective(s, batch, spec).drift, spec.lambda2 * expected, 1e-12);
}

TEST(Objective, MissingRestoreTargetIsAnError) {
  std::mt19937_64 rng(7);
  auto s = support::random_state(rng, 3, {4}, 2);
  const auto batch = support::random_batch(rng, 5, 3, 3);
  EXPECT_THROW(evaluate_objective(s, batch, spec_of(Objective::Retroactive, 1)), Error);
  EXPECT_NO_THROW(evaluate_objective(s, batch, spec_of(Objective::Transfer, 1)));
}

TEST(Objective, RejectsBadBatches) {
  std::mt19937_64 rng(8);
  auto s = support::random_state(rng, 3, {4}, 1);
  EXPECT_THROW(evaluate_objective(s, Batch{}, spec_of(Objective::Transfer, 0)), Error);
  EXPECT_THROW(evaluate_objective(s, support::random_batch(rng, 2, 5, 3), spec_of(Objective::Transfer, 0)),
               Error);
}

TEST(Objective, EquationHelpersPickTheRightKind) {
  std::mt19937_64 rng(9);
  auto inst = support::random_instance(rng, 2, true);
  HyperParams hp;
  hp.lambda1 = {0.1};
  hp.lambda2 = 0.7;
  const auto e2 = loss_eq2(inst.batch, inst.state, 1, hp);
  const auto e3 = loss_eq3(inst.batch, inst.state, 1, hp);
  EXPECT_EQ(e2.smooth, evaluate_objective(inst.state, inst.batch, spec_of(Objective::Retroactive, 1)).smooth);
  EXPECT_EQ(e3.smooth, evaluate_objective(inst.state, inst.batch, spec_of(Objective::Consolidated, 1)).smooth);
  EXPECT_NE(e2.smooth, e3.smooth);
}

TEST(Proximal, Examples) {
  EXPECT_EQ(proximal_l1(0.37, 0.0), 0.37);
  EXPECT_EQ(proximal_l1(-0.37, 0.0), -0.37);
  const double clipped = proximal_l1(0.3, 0.5);
  EXPECT_EQ(clipped, 0.0);
  EXPECT_FALSE(std::signbit(clipped));
  EXPECT_FALSE(std::signbit(proximal_l1(-0.3, 0.5)));
  EXPECT_DOUBLE_EQ(proximal_l1(-0.8, 0.5), -0.3);
  EXPECT_THROW(proximal_l1(1.0, -0.1), Error);
  Vector v{1.0, -0.05, 0.05, -2.0};
  proximal_l1(v, 0.1);
  EXPECT_EQ(v, (Vector{0.9, 0.0, 0.0, -1.9}));
}

TEST(Variant, ParseAndName) {
  EXPECT_EQ(Variant::parse("APD1").name(), "APD1");
  const auto v = Variant::parse("APD1+no-sparsity+fixed-shared");
  EXPECT_TRUE(v.ablations.no_sparsity);
  EXPECT_TRUE(v.ablations.fixed_shared);
  EXPECT_EQ(Variant::parse(v.name()).name(), v.name());
  EXPECT_TRUE(Variant::parse("APD2").consolidates());
  EXPECT_TRUE(Variant::parse("L2T").pins_masks());
  EXPECT_TRUE(Variant::parse("APD1+no-adaptive-mask").pins_masks());
  EXPECT_THROW(Variant::parse("APD3"), Error);
  EXPECT_THROW(Variant::parse("APD1+fast"), Error);
  EXPECT_THROW(Variant::parse("L2T+no-sparsity"), Error);
}

TEST(HyperParams, Validation) {
  HyperParams hp;
  EXPECT_NO_THROW(hp.validate());
  EXPECT_EQ(hp.lambda1_at(0), 6e-4);
  EXPECT_EQ(hp.lambda1_at(5), 4e-4);
  hp.beta = -1.0;
  EXPECT_THROW(hp.validate(), Error);
}
