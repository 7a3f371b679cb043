#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dmaudit/adapters.hpp"
#include "dmaudit/diffusion.hpp"

using namespace dmaudit;

namespace {

DenoiserArch small_arch() {
  DenoiserArch a;
  a.side = 4;
  a.width = 12;
  a.attn_dim = 8;
  a.text_dim = 8;
  a.ffn_hidden = 16;
  a.blocks = 1;
  a.vocab = 16;
  return a;
}

std::string tmp(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("fresh delta is an exact no-op on predictions") {
  const DenoiserArch arch = small_arch();
  const Denoiser base = init_denoiser(arch, 1);
  const LoraDelta delta = init_delta(base, 2, {}, 2);
  CHECK(delta.is_zero());

  const Denoiser eff = effective_params(base, delta, ApplyMode::kFullFinetuned);
  Rng rng(3);
  const LatentImage z = gaussian_latent(arch, rng);
  const PromptEmbedding p = encode_prompt(base, {3, 5});
  for (int t : {1, 20, 80})
    CHECK(denoise_predict(eff, z, t, p).m == denoise_predict(base, z, t, p).m);
}

TEST_CASE("factor shapes follow the rank contract") {
  DenoiserArch arch = small_arch();
  arch.width = 32;
  arch.attn_dim = 32;
  arch.text_dim = 32;
  const Denoiser base = init_denoiser(arch, 4);
  const LoraDelta delta = init_delta(base, 4, {"blk0.cross.wk"}, 5);
  const LoraEntry& e = delta.entries.at("blk0.cross.wk");
  CHECK(e.b.rows() == 32);
  CHECK(e.b.cols() == 4);
  CHECK(e.a.rows() == 4);
  CHECK(e.a.cols() == 32);
}

TEST_CASE("parameter overhead stays compact at the default desk configuration") {
  const Denoiser base = init_denoiser(DenoiserArch{}, 6);
  const LoraDelta delta = init_delta(base, kDefaultLoraRank, {}, 7);
  CHECK(parameter_overhead(base, delta) < 0.25);
}

TEST_CASE("rank must stay below the smallest target dimension") {
  const Denoiser base = init_denoiser(small_arch(), 8);
  CHECK_THROWS_AS(init_delta(base, 8, {"blk0.self.wq"}, 9), ArgumentError);  // 12x8 target
  CHECK_THROWS_AS(init_delta(base, 0, {}, 9), ArgumentError);
}

TEST_CASE("toy rank-1 delta reproduces the direct matrix product") {
  Denoiser toy;
  toy.arch = small_arch();
  toy.params["blk0.self.wq"] = Matrix(2, 2, {1.0, 2.0, 3.0, 4.0});
  LoraDelta delta;
  delta.rank = 1;
  LoraEntry e;
  e.alpha = 1.0;
  e.b = Matrix(2, 1, {1.0, 0.0});
  e.a = Matrix(1, 2, {0.0, 1.0});
  delta.entries.emplace("blk0.self.wq", std::move(e));

  const Denoiser eff = effective_params(toy, delta, ApplyMode::kFullFinetuned);
  const Matrix& w = eff.p("blk0.self.wq");
  CHECK(w(0, 0) == 1.0);
  CHECK(w(0, 1) == 3.0);  // 2 + 1*1
  CHECK(w(1, 0) == 3.0);
  CHECK(w(1, 1) == 4.0);
}

TEST_CASE("apply modes: base view, frozen cross-attention, purity") {
  const DenoiserArch arch = small_arch();
  const Denoiser base = init_denoiser(arch, 10);
  LoraDelta delta = init_delta(base, 2, {}, 11);
  Rng rng(12);
  for (auto& [name, e] : delta.entries)
    for (double& v : e.b.raw()) v = rng.normal(0.0, 0.1);

  const std::uint64_t base_sum = base.checksum();
  const std::uint64_t delta_sum = delta.checksum();

  const Denoiser as_base = effective_params(base, delta, ApplyMode::kBase);
  CHECK(as_base.checksum() == base_sum);

  const Denoiser frozen = effective_params(base, delta, ApplyMode::kCrossAttnFrozen);
  const Denoiser full = effective_params(base, delta, ApplyMode::kFullFinetuned);
  for (const auto& [name, w] : base.params) {
    if (Denoiser::is_cross_attention_param(name)) {
      CHECK(frozen.p(name) == w);
      if (delta.entries.count(name)) CHECK(full.p(name) != w);
    } else if (delta.entries.count(name)) {
      CHECK(frozen.p(name) == full.p(name));
    }
  }

  // Inputs untouched by any mode.
  CHECK(base.checksum() == base_sum);
  CHECK(delta.checksum() == delta_sum);
}

TEST_CASE("delta with only cross-attention targets vanishes under the frozen mode") {
  const DenoiserArch arch = small_arch();
  const Denoiser base = init_denoiser(arch, 13);
  std::vector<std::string> cross_targets;
  for (const std::string& n : base.attention_param_names())
    if (Denoiser::is_cross_attention_param(n)) cross_targets.push_back(n);
  LoraDelta delta = init_delta(base, 2, cross_targets, 14);
  Rng rng(15);
  for (auto& [name, e] : delta.entries)
    for (double& v : e.b.raw()) v = rng.normal(0.0, 0.2);

  const Denoiser frozen = effective_params(base, delta, ApplyMode::kCrossAttnFrozen);
  CHECK(frozen.checksum() == base.checksum());
}

TEST_CASE("full and frozen modes agree when no cross-attention target exists") {
  const Denoiser base = init_denoiser(small_arch(), 16);
  std::vector<std::string> self_targets;
  for (const std::string& n : base.attention_param_names())
    if (!Denoiser::is_cross_attention_param(n)) self_targets.push_back(n);
  LoraDelta delta = init_delta(base, 2, self_targets, 17);
  Rng rng(18);
  for (auto& [name, e] : delta.entries)
    for (double& v : e.b.raw()) v = rng.normal(0.0, 0.2);

  CHECK(effective_params(base, delta, ApplyMode::kFullFinetuned).checksum() ==
        effective_params(base, delta, ApplyMode::kCrossAttnFrozen).checksum());
}

TEST_CASE("unknown target is an integrity error") {
  const Denoiser base = init_denoiser(small_arch(), 19);
  LoraDelta delta = init_delta(base, 2, {}, 20);
  LoraEntry bogus;
  bogus.b = Matrix(12, 2);
  bogus.a = Matrix(2, 8);
  delta.entries.emplace("blk9.cross.wq", std::move(bogus));
  CHECK_THROWS_AS(effective_params(base, delta, ApplyMode::kFullFinetuned), IntegrityError);
}

TEST_CASE("delta files round-trip bit-exactly") {
  const Denoiser base = init_denoiser(small_arch(), 21);
  LoraDelta delta = init_delta(base, 3, {}, 22, 0.5);
  Rng rng(23);
  for (auto& [name, e] : delta.entries)
    for (double& v : e.b.raw()) v = rng.normal();

  const std::string path = tmp("dmaudit_delta_rt.bin");
  save_delta(delta, path);
  const LoraDelta loaded = load_delta(path);
  CHECK(loaded.rank == 3);
  CHECK(loaded.checksum() == delta.checksum());
  std::remove(path.c_str());
}

TEST_CASE("corrupted delta header fails cleanly") {
  const std::string path = tmp("dmaudit_delta_bad.bin");
  {
    std::ofstream os(path, std::ios::binary);
    os << "garbagegarbagegarbage";
  }
  CHECK_THROWS_AS(load_delta(path), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("delta file size scales linearly with rank") {
  const Denoiser base = init_denoiser(small_arch(), 24);
  auto size_at = [&](int rank) {
    const LoraDelta d = init_delta(base, rank, {}, 25);
    const std::string path = tmp("dmaudit_delta_size.bin");
    save_delta(d, path);
    const auto s = std::filesystem::file_size(path);
    std::remove(path.c_str());
    return static_cast<double>(s);
  };
  const double s2 = size_at(2), s4 = size_at(4), s6 = size_at(6);
  // Equal rank increments add equal payload (headers differ by a few bytes).
  CHECK(std::abs((s6 - s4) - (s4 - s2)) <= 64.0);
  CHECK(s4 - s2 > 1000.0);
}
