#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dmaudit/numerics.hpp"
#include "dmaudit/rng.hpp"
#include "dmaudit/schedule.hpp"

namespace dmaudit {

// Reserved vocabulary slots. Token 0 is prepended to every non-empty prompt;
// the empty prompt encodes as the single reserved null token.
inline constexpr int kBosToken = 0;
inline constexpr int kNullToken = 1;

inline constexpr double kLayerNormEps = 1e-5;

// Trunk hyperparameters of the miniature text-conditioned denoiser: a stack
// of pre-norm blocks (self-attention -> cross-attention -> feed-forward) over
// a flattened single-channel latent grid, single attention head.
struct DenoiserArch {
  int side = 8;
  int channels = 1;
  int width = 40;
  int attn_dim = 32;
  int text_dim = 32;
  int ffn_hidden = 80;
  int blocks = 2;
  int vocab = 64;

  int pixels() const { return side * side; }
  bool operator==(const DenoiserArch&) const = default;

  nlohmann::json to_json() const;
  static DenoiserArch from_json(const nlohmann::json& j);
};

// Flattened spatial grid (side*side rows) x channels.
struct LatentImage {
  Matrix m;
  int side = 0;

  static LatentImage zeros(const DenoiserArch& a) {
    return {Matrix(static_cast<std::size_t>(a.pixels()), static_cast<std::size_t>(a.channels)),
            a.side};
  }
};

LatentImage gaussian_latent(const DenoiserArch& arch, Rng& rng);

// Layer-normalized token embedding rows fed to every cross-attention block.
struct PromptEmbedding {
  std::vector<int> tokens;  // includes the BOS/null convention
  Matrix m;                 // tokens x text_dim
};

// Named-parameter denoiser. Every cross-attention projection is addressable
// by name so adapters can target it.
class Denoiser {
 public:
  DenoiserArch arch;
  std::map<std::string, Matrix> params;

  const Matrix& p(const std::string& name) const;
  Matrix& p(const std::string& name);
  bool has(const std::string& name) const { return params.count(name) != 0; }

  std::vector<std::string> param_names() const;
  // True for parameters belonging to a cross-attention layer (projections and
  // the output projection).
  static bool is_cross_attention_param(const std::string& name);
  // Default adapter targets: every self- and cross-attention projection.
  std::vector<std::string> attention_param_names() const;

  std::uint64_t checksum() const;
  void validate() const;  // shapes consistent with arch, all finite
};

Denoiser init_denoiser(const DenoiserArch& arch, std::uint64_t seed);

// Checkpoint container: named f64 tensors plus arch/schedule header.
void save_checkpoint(const Denoiser& model, const NoiseSchedule& sched, const std::string& path);
struct Checkpoint {
  Denoiser model;
  NoiseSchedule schedule;
};
Checkpoint load_checkpoint(const std::string& path);

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
LatentImage forward_noise(const LatentImage& x0, int t, const LatentImage& eps,
                          const NoiseSchedule& sched);

std::vector<double> timestep_embedding(int t, int dim);

// Rows are embedding-table lookups passed through layer normalization, so
// every row norm is bounded by prompt_norm_bound().
PromptEmbedding encode_prompt(const Denoiser& model, const std::vector<int>& tokens);
double prompt_norm_bound(const Denoiser& model);  // sqrt(D)*max|scale| + ||shift||

struct AttentionResult {
  Matrix y;  // S * (p Wv)
  Matrix s;  // row-stochastic attention map, pixels x tokens
};

// Single-head scaled dot-product attention between image rows and prompt
// rows: S = softmax(X Wq (p Wk)^T / sqrt(d)), Y = S (p Wv).
AttentionResult cross_attention(const Matrix& x, const Matrix& p, const Matrix& wq,
                                const Matrix& wk, const Matrix& wv);

// ---- forward/backward plumbing -------------------------------------------

struct LnTrace {
  Matrix x_hat;
  std::vector<double> inv_std;
};

struct AttnTrace {
  Matrix u, q, k, v, s, o;  // o = s * v, before the output projection
};

struct FfnTrace {
  Matrix u, h_pre, h_act;
};

struct BlockTrace {
  LnTrace ln1, ln2, ln3;
  AttnTrace self_attn, cross_attn;
  FfnTrace ffn;
};

struct ForwardTrace {
  std::vector<BlockTrace> blocks;
  LnTrace out_ln;
  Matrix out_u;  // features entering the output projection
};

// Deterministic epsilon prediction. When trace is non-null every
// intermediate needed by denoiser_backward (and by the attention-map
// diagnostics) is captured.
LatentImage denoise_predict(const Denoiser& model, const LatentImage& z, int t,
                            const PromptEmbedding& prompt, ForwardTrace* trace = nullptr);

// eps(z, null) + eta * (eps(z, p) - eps(z, null)); eta == 1 short-circuits to
// the conditional prediction.
LatentImage cfg_predict(const Denoiser& model, const LatentImage& z, int t,
                        const PromptEmbedding& prompt, double eta);

// Deterministic DDIM-style sampler over `steps` evenly spaced timesteps.
// Used for visual sanity checks and as the generation-cost baseline.
LatentImage sample(const Denoiser& model, const PromptEmbedding& prompt,
                   const NoiseSchedule& sched, int steps, std::uint64_t seed,
                   double guidance = 1.0);

struct GradMap {
  std::map<std::string, Matrix> g;

  Matrix& at(const std::string& name, std::size_t rows, std::size_t cols);
  void add(const GradMap& other);
  void scale(double s);
  double global_norm() const;
};

enum class GradScope { kAllParams, kAttentionOnly };

// Backpropagates d_out (gradient wrt the predicted epsilon) through the
// trunk. Accumulates parameter gradients into `grads` and returns the
// gradient wrt the prompt embedding matrix. With kAttentionOnly, weight
// gradients are accumulated only for attention projections (the adapter
// targets); activation gradients are always propagated in full.
Matrix denoiser_backward(const Denoiser& model, const LatentImage& z,
                         const PromptEmbedding& prompt, const ForwardTrace& trace,
                         const Matrix& d_out, GradMap& grads,
                         GradScope scope = GradScope::kAllParams);

struct EncodeTrace {
  std::vector<int> tokens;
  LnTrace ln;
};

PromptEmbedding encode_prompt_with_trace(const Denoiser& model, const std::vector<int>& tokens,
                                         EncodeTrace& trace);

// Routes the prompt gradient through the shared layer norm into the
// embedding table (duplicate tokens accumulate).
void text_encoder_backward(const Denoiser& model, const EncodeTrace& trace, const Matrix& d_prompt,
                           GradMap& grads);

}  // namespace dmaudit
