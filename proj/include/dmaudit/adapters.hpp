#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dmaudit/diffusion.hpp"
#include "dmaudit/numerics.hpp"

namespace dmaudit {

// The three parameterizations the audit compares: W (base), W' (base plus
// full low-rank delta), W'' (W' with every cross-attention delta removed).
enum class ApplyMode { kBase, kFullFinetuned, kCrossAttnFrozen };

std::string to_string(ApplyMode m);

struct LoraEntry {
  Matrix b;  // rows(target) x rank, zero at initialization
  Matrix a;  // rank x cols(target)
  double alpha = 1.0;
};

// Low-rank additive delta over named denoiser parameters:
// W_target' = W_target + alpha * B A.
struct LoraDelta {
  int rank = 0;
  std::map<std::string, LoraEntry> entries;

  bool is_zero() const;
  std::vector<std::string> target_names() const;
  std::uint64_t checksum() const;
  // Every target exists in the model with matching shapes and a legal rank.
  void validate_against(const Denoiser& model) const;
};

inline constexpr int kDefaultLoraRank = 4;

// B = 0 so the fresh delta is an exact no-op; A gets a small random init.
// An empty target filter selects every self- and cross-attention projection.
LoraDelta init_delta(const Denoiser& model, int rank, const std::vector<std::string>& targets,
                     std::uint64_t seed, double alpha = 1.0);

// Materializes the requested parameterization. The result is an independent
// value; neither `base` nor `delta` is ever mutated.
Denoiser effective_params(const Denoiser& base, const LoraDelta& delta, ApplyMode mode);

// Fraction of adapter parameters relative to the targeted weights:
// sum r (d + k) / sum (d k).
double parameter_overhead(const Denoiser& model, const LoraDelta& delta);

void save_delta(const LoraDelta& delta, const std::string& path);
LoraDelta load_delta(const std::string& path);

}  // namespace dmaudit
