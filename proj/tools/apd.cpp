// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "apd/checkpoint.hpp"
#include "apd/config.hpp"
#include "apd/harness.hpp"
#include "apd/metrics.hpp"
#include "apd/taskgen.hpp"

namespace {

using nlohmann::json;

int cmd_run(const std::string& config_path) {
  const auto config = apd::load_config(config_path);
  const auto report = apd::run_experiment(config);
  std::cout << fmt::format("{} runs written to {}\n", report.runs.size(), config.output.string());
  return 0;
}

int cmd_eval(const std::string& checkpoint, int task, const std::string& data) {
  const auto state = apd::load(checkpoint);
  if (!state.has_task(task)) throw apd::Error(fmt::format("checkpoint has no task {}", task));
  const auto dataset = apd::load_csv_task(data, task);
  const double acc = apd::evaluate(state, task, apd::Batch{dataset.features, dataset.labels});
  std::cout << fmt::format("task {} accuracy {:.6f} on {} samples\n", task, acc, dataset.size());
  return 0;
}

int cmd_forget(const std::string& checkpoint, int task, const std::string& out) {
  auto state = apd::load(checkpoint);
  apd::forget_task(state, task);
  apd::save(state, out);
  std::cout << fmt::format("task {} removed, {} tasks remain\n", task, state.heads.size());
  return 0;
}

// Per-variant means over the rows of results.csv.
int cmd_metrics(const std::string& dir) {
  const auto path = std::filesystem::path(dir) / "results.csv";
  std::ifstream in(path);
  if (!in) throw apd::Error(fmt::format("cannot open {}", path.string()));
  std::string line;
  std::getline(in, line);
  struct Acc {
    double sum[7] = {};
    std::size_t n[7] = {};
  };
  std::map<std::string, Acc> table;
  std::vector<std::string> order;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 11) {
      throw apd::Error(fmt::format("{}:{}: expected 11 columns", path.string(), line_no));
    }
    if (!table.contains(cells[0])) order.push_back(cells[0]);
    auto& acc = table[cells[0]];
    for (int k = 0; k < 7; ++k) {
      const double v = std::stod(cells[4 + static_cast<std::size_t>(k)]);
      if (std::isnan(v)) continue;
      acc.sum[k] += v;
      ++acc.n[k];
    }
  }
  std::cout << fmt::format("{:<28} {:>9} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "variant", "accuracy",
                           "capacity", "opd", "aopd", "mopd", "avg_f", "worst_f");
  for (const auto& name : order) {
    const auto& a = table[name];
    std::string row = fmt::format("{:<28}", name);
    for (int k = 0; k < 7; ++k) {
      const int width = k < 2 ? 9 : 8;
      if (a.n[k] == 0) row += fmt::format(" {:>{}}", "nan", width);
      else row += fmt::format(" {:>{}.4f}", a.sum[k] / static_cast<double>(a.n[k]), width);
    }
    std::cout << row << "\n";
  }
  return 0;
}

// Projects one task's parameter trajectory from a run log onto two dimensions.
int cmd_pca(const std::string& log_path, std::optional<int> task, const std::string& out_path) {
  std::ifstream in(log_path);
  if (!in) throw apd::Error(fmt::format("cannot open {}", log_path));
  std::vector<int> checkpoints;
  std::vector<apd::Vector> theta;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& e) {
      throw apd::Error(fmt::format("{}:{}: {}", log_path, line_no, e.what()));
    }
    const auto type = record.value("type", "");
    if (type == "run" && !task) task = record.at("order").at(0).get<int>();
    if (type != "trajectory" || !task || record.at("task").get<int>() != *task) continue;
    checkpoints.push_back(record.at("checkpoint").get<int>());
    theta.push_back(record.at("theta").get<apd::Vector>());
  }
  if (!task) throw apd::Error("no task given and the log has no run header");
  const auto pca = apd::pca2d(theta);
  std::ofstream out(out_path);
  if (!out) throw apd::Error(fmt::format("cannot write {}", out_path));
  out << "checkpoint,task,pc1,pc2\n";
  for (std::size_t i = 0; i < pca.points.size(); ++i) {
    out << fmt::format("{},{},{:.10g},{:.10g}\n", checkpoints[i], *task, pca.points[i][0],
                       pca.points[i][1]);
  }
  std::cout << fmt::format("task {}: {} points, path length {:.6f}\n", *task, pca.points.size(),
                           apd::path_length(pca.points));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Additive parameter decomposition for continual learning"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "run every variant, order and seed of a config");
  run->add_option("config", config_path, "experiment config")->required();

  std::string checkpoint, data, out;
  int task = 0;
  auto* eval = app.add_subcommand("eval", "accuracy of one task of a checkpoint on a CSV file");
  eval->add_option("checkpoint", checkpoint)->required();
  eval->add_option("--task", task)->required();
  eval->add_option("--data", data, "CSV: label, then features")->required();

  auto* forget = app.add_subcommand("forget", "remove one task from a checkpoint");
  forget->add_option("checkpoint", checkpoint)->required();
  forget->add_option("--task", task)->required();
  forget->add_option("--out", out)->required();

  std::string results_dir;
  auto* metrics = app.add_subcommand("metrics", "summarize results.csv of a run directory");
  metrics->add_option("results-dir", results_dir)->required();

  std::string log_path;
  std::optional<int> pca_task;
  auto* pca = app.add_subcommand("pca", "2-D projection of a task's parameter trajectory");
  pca->add_option("run-log", log_path)->required();
  pca->add_option("--task", pca_task, "task id (default: first trained task)");
  pca->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path);
    if (*eval) return cmd_eval(checkpoint, task, data);
    if (*forget) return cmd_forget(checkpoint, task, out);
    if (*metrics) return cmd_metrics(results_dir);
    if (*pca) return cmd_pca(log_path, pca_task, out);
  } catch (const std::exception& e) {
    std::cerr << "apd: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
