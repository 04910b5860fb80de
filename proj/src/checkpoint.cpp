// SPDX-License-Identifier: Apache-2.0
#include "apd/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include <fmt/format.h>

namespace apd {
namespace {

constexpr std::array<char, 4> kMagic{'A', 'P', 'D', 'C'};

// Section tags, written in this order.
constexpr std::array<const char*, 9> kSections{"META", "SHRD", "TAUS", "MASK", "HEAD",
                                               "GRPS", "ASGN", "CLST", "HIST"};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void dense(std::span<const double> values) {
    u64(values.size());
    for (double v : values) f64(v);
  }
  void sparse(std::span<const double> values) {
    u64(values.size());
    std::size_t count = 0;
    for (double v : values) count += std::bit_cast<std::uint64_t>(v) != 0;
    u64(count);
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (std::bit_cast<std::uint64_t>(values[j]) == 0) continue;
      u64(j);
      f64(values[j]);
    }
  }
  void text(const std::string& s) {
    u64(s.size());
    out_ += s;
  }
  void matrix(const Matrix& m) {
    u64(m.rows());
    u64(m.cols());
    for (double v : m.values()) f64(v);
  }
  void sparse_matrix(const Matrix& m) {
    u64(m.rows());
    u64(m.cols());
    sparse(m.values());
  }

  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view data, std::string section) : data_(data), section_(std::move(section)) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw Error(fmt::format("checkpoint section {}: {}", section_, what));
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<unsigned char>(data_[pos_ + i])} << (8 * i);
    pos_ += 8;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<unsigned char>(data_[pos_ + i])} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }

  // Element counts are checked against the remaining bytes before allocating.
  std::size_t count(std::size_t bytes_each) {
    const std::uint64_t n = u64();
    if (bytes_each > 0 && n > (data_.size() - pos_) / bytes_each) fail("truncated");
    return static_cast<std::size_t>(n);
  }

  Vector dense() {
    const std::size_t n = count(8);
    Vector out(n);
    for (double& v : out) v = f64();
    return out;
  }
  Vector sparse() {
    const std::uint64_t size = u64();
    const std::size_t n = count(16);
    if (n > size) fail("more sparse entries than coordinates");
    Vector out(static_cast<std::size_t>(size), 0.0);
    std::uint64_t last = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::uint64_t j = u64();
      if (j >= size) fail(fmt::format("sparse index {} out of range {}", j, size));
      if (k > 0 && j <= last) fail("sparse indices not strictly increasing");
      last = j;
      const double v = f64();
      if (std::bit_cast<std::uint64_t>(v) == 0) fail("explicit zero in sparse block");
      out[j] = v;
    }
    return out;
  }
  std::string text() {
    const std::size_t n = count(1);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  Matrix matrix(std::size_t rows, std::size_t cols) {
    expect_shape(rows, cols);
    Vector v(rows * cols);
    if (v.size() > (data_.size() - pos_) / 8) fail("truncated");
    for (double& x : v) x = f64();
    return Matrix(rows, cols, std::move(v));
  }
  Matrix sparse_matrix(std::size_t rows, std::size_t cols) {
    expect_shape(rows, cols);
    Vector v = sparse();
    if (v.size() != rows * cols) fail("sparse block size does not match its shape");
    return Matrix(rows, cols, std::move(v));
  }
  Vector vector_of(std::size_t n) {
    Vector v = dense();
    if (v.size() != n) fail(fmt::format("expected {} values, found {}", n, v.size()));
    return v;
  }
  Vector sparse_vector_of(std::size_t n) {
    Vector v = sparse();
    if (v.size() != n) fail(fmt::format("expected {} coordinates, found {}", n, v.size()));
    return v;
  }

  void finish() const {
    if (pos_ != data_.size()) fail("trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) fail("truncated");
  }
  void expect_shape(std::size_t rows, std::size_t cols) {
    const std::uint64_t r = u64();
    const std::uint64_t c = u64();
    if (r != rows || c != cols) fail(fmt::format("expected a {}x{} block, found {}x{}", rows, cols, r, c));
  }

  std::string_view data_;
  std::string section_;
  std::size_t pos_ = 0;
};

void write_section(Writer& file, const char* tag, Writer& body) {
  for (int i = 0; i < 4; ++i) file.bytes().push_back(tag[i]);
  file.u64(body.bytes().size());
  file.bytes() += body.bytes();
}

}  // namespace

std::string encode_checkpoint(const DecomposedState& state) {
  if (state.layers.empty()) throw Error("cannot checkpoint a state without layers");
  Writer file;
  file.bytes().append(kMagic.begin(), kMagic.end());
  file.u32(kCheckpointVersion);

  Writer meta;
  meta.u64(state.input_dim);
  meta.text(std::string(to_string(state.activation)));
  meta.u32(state.masks_pinned ? 1 : 0);
  meta.u64(state.layers.size());
  for (const auto& layer : state.layers) meta.u64(layer.shared.weight.cols());
  std::ostringstream rng;
  rng << state.rng;
  meta.text(rng.str());
  write_section(file, kSections[0], meta);

  Writer shared;
  for (const auto& layer : state.layers) {
    shared.matrix(layer.shared.weight);
    shared.dense(layer.shared.bias);
    shared.matrix(layer.snapshot.weight);
    shared.dense(layer.snapshot.bias);
  }
  write_section(file, kSections[1], shared);

  Writer taus;
  const auto& first = state.layers.front();
  taus.u64(first.adaptive.size());
  for (const auto& [t, unused] : first.adaptive) {
    taus.i64(t);
    for (const auto& layer : state.layers) {
      const auto& tau = layer.adaptive.at(t);
      taus.sparse_matrix(tau.weight_delta);
      taus.sparse(tau.bias_delta);
    }
  }
  write_section(file, kSections[2], taus);

  Writer masks;
  masks.u64(first.masks.size());
  for (const auto& [t, unused] : first.masks) {
    masks.i64(t);
    for (const auto& layer : state.layers) masks.dense(layer.masks.at(t).v);
  }
  write_section(file, kSections[3], masks);

  Writer heads;
  heads.u64(state.heads.size());
  for (const auto& [t, head] : state.heads) {
    heads.i64(t);
    heads.matrix(head.weight);
    heads.dense(head.bias);
  }
  write_section(file, kSections[4], heads);

  Writer groups;
  groups.u64(state.groups.size());
  for (const auto& [g, local] : state.groups) {
    groups.i64(g);
    for (const auto& block : local.layers) {
      groups.sparse_matrix(block.weight);
      groups.sparse(block.bias);
    }
  }
  write_section(file, kSections[5], groups);

  Writer assignment;
  assignment.u64(state.assignment.size());
  for (const auto& [t, g] : state.assignment) {
    assignment.i64(t);
    assignment.i64(g);
  }
  write_section(file, kSections[6], assignment);

  Writer cluster;
  cluster.i64(state.cluster.next_k);
  cluster.i64(state.cluster.events);
  cluster.u64(state.cluster.centroids.size());
  for (const auto& c : state.cluster.centroids) cluster.dense(c);
  write_section(file, kSections[7], cluster);

  Writer history;
  history.u64(state.history.size());
  for (TaskId t : state.history) history.i64(t);
  write_section(file, kSections[8], history);

  return std::move(file.bytes());
}

DecomposedState decode_checkpoint(const std::string& bytes) {
  Reader header(bytes, "header");
  if (bytes.size() < 8 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    header.fail("missing APDC magic");
  }
  std::string_view rest(bytes);
  rest.remove_prefix(4);
  Reader version_reader(rest.substr(0, 4), "header");
  const std::uint32_t version = version_reader.u32();
  if (version != kCheckpointVersion) {
    header.fail(fmt::format("version {} is not supported (expected {})", version, kCheckpointVersion));
  }
  rest.remove_prefix(4);

  std::array<std::string_view, kSections.size()> bodies;
  for (std::size_t s = 0; s < kSections.size(); ++s) {
    const std::string tag = kSections[s];
    if (rest.size() < 12) Reader("", tag).fail("truncated");
    if (rest.substr(0, 4) != tag) {
      Reader("", tag).fail(fmt::format("found section '{}' in its place", std::string(rest.substr(0, 4))));
    }
    Reader length_reader(rest.substr(4, 8), tag);
    const std::uint64_t length = length_reader.u64();
    rest.remove_prefix(12);
    if (length > rest.size()) Reader("", tag).fail("truncated");
    bodies[s] = rest.substr(0, static_cast<std::size_t>(length));
    rest.remove_prefix(static_cast<std::size_t>(length));
  }
  if (!rest.empty()) header.fail("trailing bytes after the last section");

  DecomposedState state;
  std::vector<std::size_t> widths;
  {
    Reader in(bodies[0], kSections[0]);
    state.input_dim = in.u64();
    try {
      state.activation = parse_activation(in.text());
    } catch (const Error& e) {
      in.fail(e.what());
    }
    state.masks_pinned = in.u32() != 0;
    const std::size_t layers = in.count(8);
    if (layers == 0 || state.input_dim == 0) in.fail("empty network");
    for (std::size_t l = 0; l < layers; ++l) widths.push_back(in.u64());
    std::istringstream rng(in.text());
    rng >> state.rng;
    if (rng.fail()) in.fail("unreadable generator state");
    in.finish();
  }
  {
    Reader in(bodies[1], kSections[1]);
    std::size_t fan_in = state.input_dim;
    for (std::size_t width : widths) {
      HiddenLayer layer;
      layer.shared.weight = in.matrix(fan_in, width);
      layer.shared.bias = in.vector_of(width);
      layer.snapshot.weight = in.matrix(fan_in, width);
      layer.snapshot.bias = in.vector_of(width);
      state.layers.push_back(std::move(layer));
      fan_in = width;
    }
    in.finish();
  }
  auto read_task = [](Reader& in) {
    const std::int64_t t = in.i64();
    if (t < std::numeric_limits<TaskId>::min() || t > std::numeric_limits<TaskId>::max()) {
      in.fail(fmt::format("task id {} out of range", t));
    }
    return static_cast<TaskId>(t);
  };
  {
    Reader in(bodies[2], kSections[2]);
    const std::size_t tasks = in.count(8);
    for (std::size_t n = 0; n < tasks; ++n) {
      const TaskId t = read_task(in);
      for (auto& layer : state.layers) {
        const auto& w = layer.shared.weight;
        LayerTaskAdaptive tau;
        tau.weight_delta = in.sparse_matrix(w.rows(), w.cols());
        tau.bias_delta = in.sparse_vector_of(w.cols());
        tau.owner = t;
        if (!layer.adaptive.emplace(t, std::move(tau)).second) in.fail(fmt::format("task {} repeated", t));
      }
    }
    in.finish();
  }
  {
    Reader in(bodies[3], kSections[3]);
    const std::size_t tasks = in.count(8);
    for (std::size_t n = 0; n < tasks; ++n) {
      const TaskId t = read_task(in);
      for (auto& layer : state.layers) {
        LayerMaskLogits mask{in.vector_of(layer.shared.weight.cols()), t};
        if (!layer.masks.emplace(t, std::move(mask)).second) in.fail(fmt::format("task {} repeated", t));
      }
    }
    in.finish();
  }
  {
    Reader in(bodies[4], kSections[4]);
    const std::size_t tasks = in.count(8);
    const std::size_t fan_in = widths.back();
    for (std::size_t n = 0; n < tasks; ++n) {
      const TaskId t = read_task(in);
      const std::uint64_t rows = in.u64();
      const std::uint64_t cols = in.u64();
      if (rows != fan_in || cols == 0) in.fail(fmt::format("bad head shape {}x{}", rows, cols));
      if (cols > bodies[4].size() / 8 / rows) in.fail("truncated");
      Vector w(static_cast<std::size_t>(rows * cols));
      for (double& x : w) x = in.f64();
      DenseLayer head{Matrix(fan_in, static_cast<std::size_t>(cols), std::move(w)),
                      in.vector_of(static_cast<std::size_t>(cols))};
      if (!state.heads.emplace(t, std::move(head)).second) in.fail(fmt::format("task {} repeated", t));
      if (!state.layers.front().adaptive.contains(t)) in.fail(fmt::format("head for unknown task {}", t));
    }
    if (state.heads.size() != state.layers.front().adaptive.size()) in.fail("tasks without a head");
    in.finish();
  }
  {
    Reader in(bodies[5], kSections[5]);
    const std::size_t groups = in.count(8);
    for (std::size_t n = 0; n < groups; ++n) {
      const std::int64_t g = in.i64();
      LocalShared local;
      local.id = static_cast<GroupId>(g);
      for (const auto& layer : state.layers) {
        const auto& w = layer.shared.weight;
        DenseLayer block;
        block.weight = in.sparse_matrix(w.rows(), w.cols());
        block.bias = in.sparse_vector_of(w.cols());
        local.layers.push_back(std::move(block));
      }
      if (!state.groups.emplace(local.id, std::move(local)).second) in.fail(fmt::format("group {} repeated", g));
    }
    in.finish();
  }
  {
    Reader in(bodies[6], kSections[6]);
    const std::size_t entries = in.count(16);
    for (std::size_t n = 0; n < entries; ++n) {
      const TaskId t = read_task(in);
      const auto g = static_cast<GroupId>(in.i64());
      if (!state.has_task(t)) in.fail(fmt::format("assignment for unknown task {}", t));
      if (!state.groups.contains(g)) in.fail(fmt::format("assignment to unknown group {}", g));
      state.assignment[t] = g;
    }
    in.finish();
  }
  {
    Reader in(bodies[7], kSections[7]);
    state.cluster.next_k = static_cast<int>(in.i64());
    state.cluster.events = static_cast<int>(in.i64());
    const std::size_t centroids = in.count(8);
    for (std::size_t n = 0; n < centroids; ++n) state.cluster.centroids.push_back(in.dense());
    in.finish();
  }
  {
    Reader in(bodies[8], kSections[8]);
    const std::size_t tasks = in.count(8);
    for (std::size_t n = 0; n < tasks; ++n) {
      const TaskId t = read_task(in);
      if (!state.has_task(t)) in.fail(fmt::format("unknown task {} in history", t));
      state.history.push_back(t);
    }
    in.finish();
  }
  return state;
}

void save(const DecomposedState& state, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(state);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(fmt::format("cannot write checkpoint {}", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(fmt::format("failed writing checkpoint {}", path.string()));
}

DecomposedState load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open checkpoint {}", path.string()));
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace apd
