// SPDX-License-Identifier: Apache-2.0
#include "apd/harness.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <thread>

#include <fmt/format.h>
#include <json.hpp>

#include "apd/checkpoint.hpp"

namespace apd {
namespace {

using nlohmann::json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string number(double v) {
  if (std::isnan(v)) return "nan";
  return fmt::format("{:.10g}", v);
}

json number_json(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

std::string run_stem(const std::string& variant, int order_id, std::uint64_t seed) {
  return fmt::format("{}_order{}_seed{}", variant, order_id, seed);
}

void write_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(fmt::format("cannot write {}", path.string()));
  out << contents;
  if (!out) throw Error(fmt::format("failed writing {}", path.string()));
}

struct Job {
  Variant variant;
  int order_id = 0;
  std::uint64_t seed = 0;
};

RunOutcome execute(const ExperimentConfig& config, const Job& job,
                   const std::filesystem::path& runs_dir) {
  const auto tasks = build_tasks(config, job.seed);
  const auto orders = build_orders(config, static_cast<int>(tasks.size()), job.seed);
  const auto& order = orders.at(static_cast<std::size_t>(job.order_id));

  HyperParams hp = config.hp;
  hp.seed = job.seed;
  SequenceOptions options;
  options.hidden = config.hidden;
  options.activation = config.activation;
  const SequenceResult result = run_sequence(tasks, order, hp, job.variant, options);

  RunOutcome out;
  out.variant = job.variant.name();
  out.order_id = job.order_id;
  out.seed = job.seed;
  out.order = order;
  out.accuracy = result.accuracy;
  std::size_t classes = 0;
  for (const auto& t : tasks) classes = std::max(classes, t.num_classes);
  out.capacity_pct =
      capacity(result.state, base_parameter_count(result.state.shape(), classes)).percent;
  if (result.accuracy.acc.size() >= 2) {
    const auto f = forgetting(result.accuracy.acc);
    out.avg_forgetting = f.average;
    out.worst_forgetting = f.worst_case;
  } else {
    out.avg_forgetting = kNaN;
    out.worst_forgetting = kNaN;
  }

  const std::string stem = run_stem(out.variant, job.order_id, job.seed);
  std::string log;
  json header{{"type", "run"},   {"variant", out.variant}, {"order_id", job.order_id},
              {"seed", job.seed}, {"order", order}};
  log += header.dump() + "\n";
  for (const auto& e : result.epochs) {
    json line{{"type", "epoch"},           {"task", e.task},   {"epoch", e.epoch},
              {"lr", e.lr},                {"loss", e.loss},   {"data_loss", e.data_loss},
              {"drift", e.drift},          {"tau_sparsity", e.tau_sparsity}};
    log += line.dump() + "\n";
  }
  for (std::size_t c = 0; c < result.accuracy.acc.size(); ++c) {
    json line{{"type", "eval"}, {"checkpoint", c}, {"accuracy", result.accuracy.acc[c]}};
    log += line.dump() + "\n";
  }
  for (const auto& r : result.consolidations) {
    json line{{"type", "consolidation"},
              {"k", r.k},
              {"nonzero_before", r.nonzero_before},
              {"nonzero_after", r.nonzero_after},
              {"accepted", r.accepted}};
    log += line.dump() + "\n";
  }
  for (const auto& p : result.trajectory) {
    json line{{"type", "trajectory"}, {"checkpoint", p.checkpoint}, {"task", p.task}, {"theta", p.theta}};
    log += line.dump() + "\n";
  }
  write_file(runs_dir / (stem + ".jsonl"), log);
  save(result.state, runs_dir / (stem + ".apdc"));
  return out;
}

// Per-task OPD and the AOPD/MOPD of one (variant, seed) group of runs.
struct OrderStats {
  std::vector<double> per_task;
  double aopd = kNaN;
  double mopd = kNaN;
};

std::map<std::pair<std::string, std::uint64_t>, OrderStats> order_stats(
    const std::vector<RunOutcome>& runs) {
  std::map<std::pair<std::string, std::uint64_t>, PerformanceMatrix> grouped;
  for (const auto& r : runs) grouped[{r.variant, r.seed}].runs.push_back(r.accuracy);
  std::map<std::pair<std::string, std::uint64_t>, OrderStats> out;
  for (const auto& [key, pm] : grouped) {
    OrderStats s;
    if (pm.orders() >= 2) {
      const auto finals = pm.finals();
      s.per_task = opd_per_task(finals);
      s.aopd = aopd(finals);
      s.mopd = mopd(finals);
    }
    out[key] = std::move(s);
  }
  return out;
}

double mean(const std::vector<double>& values) {
  double sum = 0.0;
  std::size_t n = 0;
  for (double v : values) {
    if (std::isnan(v)) continue;
    sum += v;
    ++n;
  }
  return n == 0 ? kNaN : sum / static_cast<double>(n);
}

std::string summary_json(const ExperimentConfig& config, const std::vector<RunOutcome>& runs) {
  const auto stats = order_stats(runs);
  json variants = json::object();
  for (const auto& v : config.variants) {
    const std::string name = v.name();
    std::vector<double> acc, cap, avg_f, worst_f, aopds, mopds;
    for (const auto& r : runs) {
      if (r.variant != name) continue;
      acc.push_back(r.accuracy.mean_final_accuracy());
      cap.push_back(r.capacity_pct);
      avg_f.push_back(r.avg_forgetting);
      worst_f.push_back(r.worst_forgetting);
    }
    for (std::uint64_t seed : config.seeds) {
      const auto& s = stats.at({name, seed});
      aopds.push_back(s.aopd);
      mopds.push_back(s.mopd);
    }
    variants[name] = json{{"runs", acc.size()},
                          {"mean_final_accuracy", number_json(mean(acc))},
                          {"capacity_pct", number_json(mean(cap))},
                          {"AOPD", number_json(mean(aopds))},
                          {"MOPD", number_json(mean(mopds))},
                          {"avg_forgetting", number_json(mean(avg_f))},
                          {"worst_forgetting", number_json(mean(worst_f))}};
  }
  json out{{"variants", variants}, {"seeds", config.seeds}};
  return out.dump(2) + "\n";
}

}  // namespace

std::vector<TaskDataset> build_tasks(const ExperimentConfig& config, std::uint64_t seed) {
  if (config.csv.empty()) {
    StreamSpec spec = config.stream;
    if (!config.stream_seed_fixed) spec.seed = seed;
    return gen_stream(spec);
  }
  std::vector<TaskDataset> tasks;
  for (std::size_t i = 0; i < config.csv.size(); ++i) {
    TaskDataset raw = load_csv_task(config.csv[i], static_cast<TaskId>(i));
    tasks.push_back(split(std::move(raw), config.stream.split_ratios, seed * 7919 + i));
  }
  return tasks;
}

std::vector<std::vector<int>> build_orders(const ExperimentConfig& config, int num_tasks,
                                           std::uint64_t seed) {
  if (config.orders.mode == OrderPlan::Mode::Fixtures) {
    std::vector<std::vector<int>> out;
    for (const auto& name : config.orders.fixtures) out.push_back(fixture_order_for(name, num_tasks));
    return out;
  }
  return orders(num_tasks, config.orders.count, seed + 1000);
}

unsigned worker_count() {
  if (const char* env = std::getenv("APD_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && n >= 1) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::string results_csv(const std::vector<RunOutcome>& runs) {
  const auto stats = order_stats(runs);
  std::string out =
      "variant,order_id,seed,task,final_accuracy,capacity_pct,opd,aopd,mopd,avg_forgetting,"
      "worst_forgetting\n";
  for (const auto& r : runs) {
    const auto& s = stats.at({r.variant, r.seed});
    std::vector<TaskId> ids(r.order.begin(), r.order.end());
    std::sort(ids.begin(), ids.end());
    for (TaskId t : ids) {
      const double opd_t = s.per_task.empty() ? kNaN : s.per_task.at(static_cast<std::size_t>(t));
      out += fmt::format("{},{},{},{},{},{},{},{},{},{},{}\n", r.variant, r.order_id, r.seed, t,
                         number(r.accuracy.final_accuracy(t)), number(r.capacity_pct), number(opd_t),
                         number(s.aopd), number(s.mopd), number(r.avg_forgetting),
                         number(r.worst_forgetting));
    }
  }
  return out;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  const auto runs_dir = config.output / "runs";
  std::error_code ec;
  std::filesystem::create_directories(runs_dir, ec);
  if (ec) throw Error(fmt::format("cannot create {}: {}", runs_dir.string(), ec.message()));

  // Order counts can depend on the task count, which a CSV stream fixes.
  const int num_tasks =
      config.csv.empty() ? config.stream.tasks : static_cast<int>(config.csv.size());
  std::vector<Job> jobs;
  for (const auto& v : config.variants) {
    for (std::uint64_t seed : config.seeds) {
      const auto count = build_orders(config, num_tasks, seed).size();
      for (std::size_t o = 0; o < count; ++o) jobs.push_back({v, static_cast<int>(o), seed});
    }
  }

  std::vector<RunOutcome> outcomes(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_lock;
  auto worker = [&] {
    while (true) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) return;
      try {
        outcomes[j] = execute(config, jobs[j], runs_dir);
      } catch (...) {
        std::lock_guard lock(failure_lock);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  const unsigned threads = std::min<unsigned>(worker_count(), static_cast<unsigned>(jobs.size()));
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  ExperimentReport report;
  report.runs = std::move(outcomes);
  report.results_csv = config.output / "results.csv";
  report.summary_json = config.output / "summary.json";
  write_file(report.results_csv, results_csv(report.runs));
  write_file(report.summary_json, summary_json(config, report.runs));
  return report;
}

}  // namespace apd
