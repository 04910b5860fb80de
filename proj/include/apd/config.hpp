// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "apd/numeric.hpp"
#include "apd/objectives.hpp"
#include "apd/taskgen.hpp"

namespace apd {

struct OrderPlan {
  enum class Mode { Fixtures, Random };
  Mode mode = Mode::Random;
  std::vector<std::string> fixtures;  // Mode::Fixtures
  int count = 1;                      // Mode::Random; order 0 is the identity
};

struct ExperimentConfig {
  StreamSpec stream;
  bool stream_seed_fixed = false;  // otherwise each run seed also seeds the stream
  std::vector<std::filesystem::path> csv;  // one task per file; replaces the synthetic stream
  std::vector<std::size_t> hidden{32, 32};
  Activation activation = Activation::Relu;
  HyperParams hp;
  std::vector<Variant> variants{Variant{}};
  OrderPlan orders;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path output{"results"};
};

/// Parses "key = value" lines; '#' starts a comment. `origin` names the
/// source in error messages, which take the form "origin:line: message".
/// Relative CSV paths are resolved against `base_dir`.
ExperimentConfig parse_config(std::string_view text, std::string_view origin = "config",
                              const std::filesystem::path& base_dir = {});

ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace apd
