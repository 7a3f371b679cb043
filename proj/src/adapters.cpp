#include "dmaudit/adapters.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "dmaudit/tensorio.hpp"

namespace dmaudit {

std::string to_string(ApplyMode m) {
  switch (m) {
    case ApplyMode::kBase:
      return "base";
    case ApplyMode::kFullFinetuned:
      return "full_finetuned";
    case ApplyMode::kCrossAttnFrozen:
      return "cross_attn_frozen";
  }
  return "?";
}

bool LoraDelta::is_zero() const {
  for (const auto& [name, e] : entries)
    if (e.b.max_abs() != 0.0) return false;
  return true;
}

std::vector<std::string> LoraDelta::target_names() const {
  std::vector<std::string> names;
  names.reserve(entries.size());
  for (const auto& [name, e] : entries) names.push_back(name);
  return names;
}

std::uint64_t LoraDelta::checksum() const {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& [name, e] : entries) {
    h = hash_bytes(name.data(), name.size(), h);
    h = hash_bytes(e.b.raw().data(), e.b.raw().size() * sizeof(double), h);
    h = hash_bytes(e.a.raw().data(), e.a.raw().size() * sizeof(double), h);
    h = hash_bytes(&e.alpha, sizeof(double), h);
  }
  return h;
}

void LoraDelta::validate_against(const Denoiser& model) const {
  if (entries.empty()) throw ArgumentError("lora delta: no targets");
  for (const auto& [name, e] : entries) {
    if (!model.has(name)) throw IntegrityError("lora delta: unknown target " + name);
    const Matrix& w = model.p(name);
    const auto r = static_cast<std::size_t>(rank);
    if (rank < 1 || r >= std::min(w.rows(), w.cols()))
      throw ArgumentError("lora delta: rank " + std::to_string(rank) + " illegal for target " +
                          name + " (" + std::to_string(w.rows()) + "x" +
                          std::to_string(w.cols()) + ")");
    if (e.b.rows() != w.rows() || e.b.cols() != r || e.a.rows() != r || e.a.cols() != w.cols())
      throw IntegrityError("lora delta: factor shapes inconsistent for target " + name);
  }
}

LoraDelta init_delta(const Denoiser& model, int rank, const std::vector<std::string>& targets,
                     std::uint64_t seed, double alpha) {
  if (rank < 1) throw ArgumentError("init_delta: rank must be >= 1");
  std::vector<std::string> names = targets.empty() ? model.attention_param_names() : targets;
  if (names.empty()) throw ArgumentError("init_delta: empty target set");

  Rng rng(mix64(seed ^ 0x6c6f72615f696e69ull));
  LoraDelta delta;
  delta.rank = rank;
  for (const std::string& name : names) {
    if (!model.has(name)) throw ArgumentError("init_delta: unknown target " + name);
    const Matrix& w = model.p(name);
    if (static_cast<std::size_t>(rank) >= std::min(w.rows(), w.cols()))
      throw ArgumentError("init_delta: rank " + std::to_string(rank) +
                          " >= min dimension of target " + name);
    LoraEntry e;
    e.alpha = alpha;
    e.b = Matrix(w.rows(), static_cast<std::size_t>(rank));
    e.a = Matrix(static_cast<std::size_t>(rank), w.cols());
    const double init_std = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    for (double& v : e.a.raw()) v = rng.normal(0.0, init_std);
    delta.entries.emplace(name, std::move(e));
  }
  return delta;
}

Denoiser effective_params(const Denoiser& base, const LoraDelta& delta, ApplyMode mode) {
  if (mode != ApplyMode::kBase) delta.validate_against(base);
  Denoiser out = base;
  if (mode == ApplyMode::kBase) return out;
  for (const auto& [name, e] : delta.entries) {
    if (mode == ApplyMode::kCrossAttnFrozen && Denoiser::is_cross_attention_param(name)) continue;
    Matrix& w = out.p(name);
    Matrix ba = matmul(e.b, e.a);
    ba *= e.alpha;
    w += ba;
  }
  return out;
}

double parameter_overhead(const Denoiser& model, const LoraDelta& delta) {
  double adapter = 0.0, target = 0.0;
  for (const auto& [name, e] : delta.entries) {
    const Matrix& w = model.p(name);
    adapter += static_cast<double>(delta.rank) * static_cast<double>(w.rows() + w.cols());
    target += static_cast<double>(w.rows() * w.cols());
  }
  return adapter / target;
}

void save_delta(const LoraDelta& delta, const std::string& path) {
  nlohmann::json header;
  header["kind"] = "lora";
  header["rank"] = delta.rank;
  nlohmann::json manifest = nlohmann::json::array();
  std::vector<std::pair<std::string, Matrix>> tensors;
  for (const auto& [name, e] : delta.entries) {
    manifest.push_back({{"target", name}, {"alpha", e.alpha}});
    tensors.emplace_back(name + ".B", e.b);
    tensors.emplace_back(name + ".A", e.a);
  }
  header["targets"] = manifest;
  save_tensor_file(path, header, tensors);
}

LoraDelta load_delta(const std::string& path) {
  TensorFile f = load_tensor_file(path);
  nlohmann::json h = f.header();
  if (!h.contains("kind") || h["kind"].get<std::string>() != "lora")
    throw FormatError("delta: not a lora file: " + path);
  LoraDelta delta;
  delta.rank = h.at("rank").get<int>();

  std::map<std::string, Matrix> by_name;
  for (auto& [name, m] : f.tensors) by_name.emplace(std::move(name), std::move(m));

  for (const auto& entry : h.at("targets")) {
    const std::string target = entry.at("target").get<std::string>();
    auto bit = by_name.find(target + ".B");
    auto ait = by_name.find(target + ".A");
    if (bit == by_name.end() || ait == by_name.end())
      throw FormatError("delta: missing factors for target " + target + " in " + path);
    LoraEntry e;
    e.alpha = entry.at("alpha").get<double>();
    e.b = std::move(bit->second);
    e.a = std::move(ait->second);
    if (e.b.cols() != static_cast<std::size_t>(delta.rank) ||
        e.a.rows() != static_cast<std::size_t>(delta.rank))
      throw FormatError("delta: factor rank mismatch for target " + target + " in " + path);
    delta.entries.emplace(target, std::move(e));
  }
  if (delta.entries.size() * 2 != by_name.size())
    throw FormatError("delta: tensor list inconsistent with target manifest in " + path);
  return delta;
}

}  // namespace dmaudit
