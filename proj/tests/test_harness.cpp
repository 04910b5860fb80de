// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "apd/checkpoint.hpp"
#include "apd/config.hpp"
#include "apd/harness.hpp"
#include "apd/metrics.hpp"
#include "helpers.hpp"

using namespace apd;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error(std::string_view text) {
  try {
    parse_config(text, "exp.conf");
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

class Scratch : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("apd_harness_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  ExperimentConfig small_config(const std::string& out) const {
    ExperimentConfig c = parse_config(R"(
stream.tasks = 2
stream.dim = 6
stream.classes = 3
stream.samples_per_class = 20
net.hidden = 8
hp.lambda1 = 0.02
hp.lambda2 = 1
hp.lr = 0.1
hp.epochs = 2
run.seeds = 4
)");
    c.output = dir_ / out;
    return c;
  }

  fs::path dir_;
};

}  // namespace

TEST(Config, ParsesEveryKey) {
  const auto c = parse_config(R"(# comment
stream.tasks = 4   # trailing comment
stream.dim = 10
stream.classes = 3
stream.samples_per_class = 30
stream.relatedness = 0.25
stream.noise = 0.5
stream.prototype_scale = 1.5
stream.families = 2
stream.family_spread = 0.4
stream.split = 0.7, 0.1, 0.2
stream.seed = 77
net.hidden = 12, 6
net.activation = tanh
hp.lambda1 = 0.01, 0.02
hp.lambda2 = 3
hp.l2t_lambda = 0.5
hp.lr = 0.05
hp.lr_decay = 0.9
hp.weight_decay = 0
hp.epochs = 7
hp.batch_size = 8
hp.beta = 0.001
hp.consolidation_period = 3
hp.centroid_increment = 1
hp.initial_centroids = 4
hp.kmeans_max_iter = 50
hp.tau_init = zeros
run.variants = APD1, APD2+no-sparsity, L2T
run.orders = fixtures:T10-orderA, T10-orderB
run.seeds = 5, 6
run.output = out/x
)");
  EXPECT_EQ(c.stream.tasks, 4);
  EXPECT_EQ(c.stream.seed, 77u);
  EXPECT_TRUE(c.stream_seed_fixed);
  EXPECT_EQ(c.stream.split_ratios[0], 0.7);
  EXPECT_EQ(c.hidden, (std::vector<std::size_t>{12, 6}));
  EXPECT_EQ(c.activation, Activation::Tanh);
  EXPECT_EQ(c.hp.lambda1, (std::vector<double>{0.01, 0.02}));
  EXPECT_EQ(c.hp.tau_init, TauInit::Zeros);
  EXPECT_EQ(c.hp.initial_centroids, 4);
  ASSERT_EQ(c.variants.size(), 3u);
  EXPECT_EQ(c.variants[1].name(), "APD2+no-sparsity");
  EXPECT_EQ(c.orders.mode, OrderPlan::Mode::Fixtures);
  EXPECT_EQ(c.orders.fixtures, (std::vector<std::string>{"T10-orderA", "T10-orderB"}));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{5, 6}));
  EXPECT_EQ(c.output, fs::path("out/x"));
}

TEST(Config, ErrorsCarryLineNumbers) {
  EXPECT_NE(config_error("stream.tasks = 3\nbogus.key = 1\n").find("exp.conf:2: unknown key"), std::string::npos);
  EXPECT_NE(config_error("\n\nstream.dim = ten\n").find("exp.conf:3:"), std::string::npos);
  EXPECT_NE(config_error("hp.lr = 0.1\nhp.lr = 0.2\n").find("exp.conf:2: duplicate key"), std::string::npos);
  EXPECT_NE(config_error("stream.tasks\n").find("exp.conf:1:"), std::string::npos);
  EXPECT_NE(config_error("run.variants = APD9\n").find("exp.conf:1:"), std::string::npos);
  EXPECT_NE(config_error("run.orders = shuffled:3\n").find("exp.conf:1:"), std::string::npos);
  EXPECT_NE(config_error("run.seeds = 1, 1\n").find("seeds listed twice"), std::string::npos);
  EXPECT_NE(config_error("stream.tasks = 12\nrun.orders = fixtures:T10-orderA\n").find("exp.conf:2:"),
            std::string::npos);
  EXPECT_THROW(load_config("/nonexistent/apd.conf"), Error);
}

TEST(Config, CsvPathsResolveAgainstTheConfigDirectory) {
  const auto c = parse_config("data.csv = a.csv, /abs/b.csv\n", "exp.conf", "/data/exp");
  EXPECT_EQ(c.csv, (std::vector<fs::path>{"/data/exp/a.csv", "/abs/b.csv"}));
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  std::mt19937_64 rng(1);
  auto s = support::random_state(rng, 4, {5, 3}, 3);
  support::add_random_group(s, rng, 7, {0, 2});
  s.cluster.centroids = {Vector{1.0, 2.0}};
  s.cluster.events = 3;
  s.cluster.next_k = 6;
  rng();
  const auto bytes = encode_checkpoint(s);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  const auto batch = support::random_batch(rng, 6, 4, 3);
  for (TaskId t = 0; t < 3; ++t) EXPECT_EQ(forward_batch(back, batch.features, t), forward_batch(s, batch.features, t));
  EXPECT_EQ(back.rng, s.rng);
  EXPECT_EQ(back.history, s.history);
  EXPECT_EQ(back.assignment, s.assignment);
}

TEST(Checkpoint, PreservesNegativeZero) {
  std::mt19937_64 rng(2);
  auto s = support::random_state(rng, 2, {3}, 1);
  s.layers[0].adaptive.at(0).weight_delta(1, 1) = -0.0;
  s.layers[0].adaptive.at(0).weight_delta(0, 0) = 0.0;
  const auto back = decode_checkpoint(encode_checkpoint(s));
  EXPECT_TRUE(std::signbit(back.layers[0].adaptive.at(0).weight_delta(1, 1)));
  EXPECT_FALSE(std::signbit(back.layers[0].adaptive.at(0).weight_delta(0, 0)));
}

TEST(Checkpoint, ForgottenTaskIsAbsent) {
  std::mt19937_64 rng(3);
  auto s = support::random_state(rng, 4, {5}, 3);
  const auto full = encode_checkpoint(s);
  forget_task(s, 2);
  const auto bytes = encode_checkpoint(s);
  EXPECT_LT(bytes.size(), full.size());
  const auto back = decode_checkpoint(bytes);
  EXPECT_FALSE(back.has_task(2));
  EXPECT_FALSE(back.layers[0].adaptive.contains(2));
  EXPECT_FALSE(back.layers[0].masks.contains(2));
}

TEST(Checkpoint, CorruptInputIsRejected) {
  std::mt19937_64 rng(4);
  const auto bytes = encode_checkpoint(support::random_state(rng, 3, {4}, 2));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{9}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, cut)), Error) << cut;
  }
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), Error);
  EXPECT_THROW(decode_checkpoint(bytes + "extra"), Error);
  EXPECT_THROW(encode_checkpoint(DecomposedState{}), Error);
  EXPECT_THROW(load("/nonexistent/state.apdc"), Error);
}

TEST_F(Scratch, CheckpointFiles) {
  std::mt19937_64 rng(5);
  const auto s = support::random_state(rng, 3, {4}, 2);
  save(s, dir_ / "a.apdc");
  save(load(dir_ / "a.apdc"), dir_ / "b.apdc");
  EXPECT_EQ(read_file(dir_ / "a.apdc"), read_file(dir_ / "b.apdc"));
}

TEST_F(Scratch, MinimalRunWritesOneRow) {
  auto c = small_config("min");
  c.stream.tasks = 1;
  const auto report = run_experiment(c);
  ASSERT_EQ(report.runs.size(), 1u);
  const auto csv = read_file(report.results_csv);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_NE(csv.find("APD1,0,4,0,"), std::string::npos);
  const auto summary = nlohmann::json::parse(read_file(report.summary_json));
  EXPECT_EQ(summary["variants"]["APD1"]["runs"], 1);
  EXPECT_TRUE(summary["variants"]["APD1"]["AOPD"].is_null());
  EXPECT_TRUE(fs::exists(c.output / "runs" / "APD1_order0_seed4.jsonl"));
  EXPECT_TRUE(fs::exists(c.output / "runs" / "APD1_order0_seed4.apdc"));
}

TEST_F(Scratch, FixtureOrdersGiveOrderDisparity) {
  auto c = small_config("fixtures");
  c.stream.tasks = 5;
  c.orders.mode = OrderPlan::Mode::Fixtures;
  c.orders.fixtures = {"T10-orderA", "T10-orderB", "T10-orderC"};
  const auto report = run_experiment(c);
  ASSERT_EQ(report.runs.size(), 3u);
  EXPECT_EQ(report.runs[1].order, (std::vector<int>{1, 4, 2, 0, 3}));
  const auto summary = nlohmann::json::parse(read_file(report.summary_json));
  const auto& apd = summary["variants"]["APD1"];
  ASSERT_TRUE(apd["AOPD"].is_number());
  ASSERT_TRUE(apd["MOPD"].is_number());
  EXPECT_GE(apd["MOPD"].get<double>(), apd["AOPD"].get<double>());
  EXPECT_GE(apd["AOPD"].get<double>(), 0.0);
  const auto csv = read_file(report.results_csv);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 5);
}

TEST_F(Scratch, RerunIsByteIdentical) {
  auto a = small_config("a");
  a.variants = {Variant::parse("APD1"), Variant::parse("APD2"), Variant::parse("L2T")};
  a.orders.count = 2;
  a.hp.consolidation_period = 1;
  auto b = a;
  b.output = dir_ / "b";
  ::setenv("APD_THREADS", "3", 1);
  run_experiment(a);
  ::setenv("APD_THREADS", "1", 1);
  run_experiment(b);
  ::unsetenv("APD_THREADS");
  EXPECT_EQ(read_file(a.output / "results.csv"), read_file(b.output / "results.csv"));
  EXPECT_EQ(read_file(a.output / "summary.json"), read_file(b.output / "summary.json"));
  EXPECT_EQ(read_file(a.output / "runs" / "APD2_order1_seed4.apdc"),
            read_file(b.output / "runs" / "APD2_order1_seed4.apdc"));
}

TEST_F(Scratch, UnwritableOutputIsAnError) {
  std::ofstream(dir_ / "file") << "x";
  auto c = small_config("unused");
  c.output = dir_ / "file" / "out";
  EXPECT_THROW(run_experiment(c), Error);
}

TEST_F(Scratch, CsvStream) {
  for (int t = 0; t < 2; ++t) {
    std::ofstream out(dir_ / ("t" + std::to_string(t) + ".csv"));
    out << "label,x,y\n";
    for (int i = 0; i < 20; ++i) out << (i % 2) << ',' << (i % 2 ? 2.0 : -2.0) + 0.01 * i << ',' << t << '\n';
  }
  auto c = parse_config("data.csv = t0.csv, t1.csv\nnet.hidden = 4\nhp.epochs = 3\nhp.lr = 0.1\n", "csv.conf", dir_);
  c.output = dir_ / "csvout";
  const auto report = run_experiment(c);
  ASSERT_EQ(report.runs.size(), 1u);
  EXPECT_EQ(report.runs[0].order.size(), 2u);
}
