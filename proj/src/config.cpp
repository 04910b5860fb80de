// SPDX-License-Identifier: Apache-2.0
#include "apd/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace apd {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_list(std::string_view s) {
  std::vector<std::string_view> out;
  while (true) {
    const auto comma = s.find(',');
    out.push_back(trim(s.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

double to_double(std::string_view s) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw Error(fmt::format("'{}' is not a number", s));
  return v;
}

std::uint64_t to_unsigned(std::string_view s) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw Error(fmt::format("'{}' is not a non-negative integer", s));
  }
  return v;
}

int to_int(std::string_view s) {
  const std::uint64_t v = to_unsigned(s);
  if (v > 1'000'000'000) throw Error(fmt::format("'{}' is too large", s));
  return static_cast<int>(v);
}

std::vector<double> to_doubles(std::string_view s) {
  std::vector<double> out;
  for (auto item : split_list(s)) out.push_back(to_double(item));
  return out;
}

using Setter = std::function<void(ExperimentConfig&, std::string_view)>;

std::map<std::string, Setter, std::less<>> setters(const std::filesystem::path& base_dir) {
  std::map<std::string, Setter, std::less<>> m;
  m["stream.tasks"] = [](auto& c, auto v) { c.stream.tasks = to_int(v); };
  m["stream.dim"] = [](auto& c, auto v) { c.stream.dim = to_unsigned(v); };
  m["stream.classes"] = [](auto& c, auto v) { c.stream.classes = to_unsigned(v); };
  m["stream.samples_per_class"] = [](auto& c, auto v) { c.stream.samples_per_class = to_unsigned(v); };
  m["stream.relatedness"] = [](auto& c, auto v) { c.stream.relatedness = to_double(v); };
  m["stream.noise"] = [](auto& c, auto v) { c.stream.noise = to_double(v); };
  m["stream.prototype_scale"] = [](auto& c, auto v) { c.stream.prototype_scale = to_double(v); };
  m["stream.families"] = [](auto& c, auto v) { c.stream.families = to_int(v); };
  m["stream.family_spread"] = [](auto& c, auto v) { c.stream.family_spread = to_double(v); };
  m["stream.split"] = [](auto& c, auto v) {
    const auto r = to_doubles(v);
    if (r.size() != 3) throw Error("stream.split needs three ratios (train, val, test)");
    c.stream.split_ratios = {r[0], r[1], r[2]};
  };
  m["stream.seed"] = [](auto& c, auto v) {
    c.stream.seed = to_unsigned(v);
    c.stream_seed_fixed = true;
  };
  m["data.csv"] = [base_dir](auto& c, auto v) {
    c.csv.clear();
    for (auto item : split_list(v)) {
      if (item.empty()) throw Error("empty path in data.csv");
      std::filesystem::path p{std::string(item)};
      c.csv.push_back(p.is_absolute() ? p : base_dir / p);
    }
  };
  m["net.hidden"] = [](auto& c, auto v) {
    c.hidden.clear();
    for (auto item : split_list(v)) {
      const auto w = to_unsigned(item);
      if (w == 0) throw Error("layer widths must be at least 1");
      c.hidden.push_back(w);
    }
  };
  m["net.activation"] = [](auto& c, auto v) { c.activation = parse_activation(v); };
  m["hp.lambda1"] = [](auto& c, auto v) { c.hp.lambda1 = to_doubles(v); };
  m["hp.lambda2"] = [](auto& c, auto v) { c.hp.lambda2 = to_double(v); };
  m["hp.l2t_lambda"] = [](auto& c, auto v) { c.hp.l2t_lambda = to_double(v); };
  m["hp.lr"] = [](auto& c, auto v) { c.hp.lr = to_double(v); };
  m["hp.lr_decay"] = [](auto& c, auto v) { c.hp.lr_decay = to_double(v); };
  m["hp.weight_decay"] = [](auto& c, auto v) { c.hp.weight_decay = to_double(v); };
  m["hp.epochs"] = [](auto& c, auto v) { c.hp.epochs = to_int(v); };
  m["hp.batch_size"] = [](auto& c, auto v) { c.hp.batch_size = to_unsigned(v); };
  m["hp.beta"] = [](auto& c, auto v) { c.hp.beta = to_double(v); };
  m["hp.consolidation_period"] = [](auto& c, auto v) { c.hp.consolidation_period = to_int(v); };
  m["hp.centroid_increment"] = [](auto& c, auto v) { c.hp.centroid_increment = to_int(v); };
  m["hp.initial_centroids"] = [](auto& c, auto v) { c.hp.initial_centroids = to_int(v); };
  m["hp.kmeans_max_iter"] = [](auto& c, auto v) { c.hp.kmeans_max_iter = to_int(v); };
  m["hp.tau_init"] = [](auto& c, auto v) { c.hp.tau_init = parse_tau_init(v); };
  m["run.variants"] = [](auto& c, auto v) {
    c.variants.clear();
    for (auto item : split_list(v)) c.variants.push_back(Variant::parse(item));
  };
  m["run.orders"] = [](auto& c, auto v) {
    const auto colon = v.find(':');
    if (colon == std::string_view::npos) {
      throw Error("run.orders must be 'fixtures:<name>, ...' or 'random:<count>'");
    }
    const auto mode = trim(v.substr(0, colon));
    const auto rest = trim(v.substr(colon + 1));
    OrderPlan plan;
    if (mode == "random") {
      plan.mode = OrderPlan::Mode::Random;
      plan.count = to_int(rest);
      if (plan.count < 1) throw Error("run.orders needs at least one order");
    } else if (mode == "fixtures") {
      plan.mode = OrderPlan::Mode::Fixtures;
      for (auto item : split_list(rest)) {
        fixture_orders(item);
        plan.fixtures.emplace_back(item);
      }
    } else {
      throw Error(fmt::format("unknown order mode '{}'", mode));
    }
    c.orders = std::move(plan);
  };
  m["run.seeds"] = [](auto& c, auto v) {
    c.seeds.clear();
    for (auto item : split_list(v)) c.seeds.push_back(to_unsigned(item));
  };
  m["run.output"] = [](auto& c, auto v) {
    if (v.empty()) throw Error("run.output must not be empty");
    c.output = std::string(v);
  };
  return m;
}

void check_config(const ExperimentConfig& c) {
  c.hp.validate();
  if (c.variants.empty()) throw Error("at least one variant is required");
  if (c.seeds.empty()) throw Error("at least one seed is required");
  if (c.hidden.empty()) throw Error("at least one hidden layer is required");
  if (c.hp.epochs < 0) throw Error("hp.epochs must be non-negative");
  std::set<std::string> names;
  for (const auto& v : c.variants) {
    if (!names.insert(v.name()).second) throw Error(fmt::format("variant {} listed twice", v.name()));
  }
  std::set<std::uint64_t> seeds(c.seeds.begin(), c.seeds.end());
  if (seeds.size() != c.seeds.size()) throw Error("seeds listed twice");
  const int tasks = c.csv.empty() ? c.stream.tasks : static_cast<int>(c.csv.size());
  if (tasks < 1) throw Error("at least one task is required");
  if (c.orders.mode == OrderPlan::Mode::Fixtures) {
    for (const auto& name : c.orders.fixtures) {
      fixture_order_for(name, tasks);
    }
  }
}

}  // namespace

ExperimentConfig parse_config(std::string_view text, std::string_view origin,
                              const std::filesystem::path& base_dir) {
  const auto table = setters(base_dir);
  ExperimentConfig config;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  std::size_t last_line = 0;
  while (!text.empty()) {
    ++line_no;
    const auto newline = text.find('\n');
    std::string_view line = text.substr(0, newline);
    text.remove_prefix(newline == std::string_view::npos ? text.size() : newline + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    last_line = line_no;
    try {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw Error("expected 'key = value'");
      const auto key = trim(line.substr(0, eq));
      const auto value = trim(line.substr(eq + 1));
      const auto it = table.find(key);
      if (it == table.end()) throw Error(fmt::format("unknown key '{}'", key));
      if (!seen.emplace(key).second) throw Error(fmt::format("duplicate key '{}'", key));
      it->second(config, value);
    } catch (const Error& e) {
      throw Error(fmt::format("{}:{}: {}", origin, line_no, e.what()));
    }
  }
  try {
    check_config(config);
  } catch (const Error& e) {
    throw Error(fmt::format("{}:{}: {}", origin, last_line == 0 ? 1 : last_line, e.what()));
  }
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open config {}", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str(), path.string(), path.parent_path());
}

}  // namespace apd
