#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dmaudit/adapters.hpp"
#include "dmaudit/dataset.hpp"
#include "dmaudit/diffusion.hpp"
#include "dmaudit/schedule.hpp"

namespace dmaudit {

// Training-side evasion strategies an adapter author might use against the
// audit. kNone is honest fine-tuning.
enum class AttackKind {
  kNone,
  kPromptDeviation,  // train with another concept's trigger word
  kRegularization,   // penalize the calibrated-error gap to the base model
  kEarlyFreezing,    // update only late-stage timesteps (t < gamma)
  kLateFreezing      // update only early-stage timesteps (t > gamma)
};

std::string to_string(AttackKind a);
AttackKind attack_from_string(const std::string& s);

enum class Optimizer { kAdam, kSgd };
std::string to_string(Optimizer o);
Optimizer optimizer_from_string(const std::string& s);

struct TrainConfig {
  int epochs = 200;
  double lr = 0.05;
  int batch = 16;
  std::uint64_t seed = 0;
  // Timestep gating window; 0 for t_hi means "schedule length". The freezing
  // attacks narrow this window around gamma.
  int t_lo = 1;
  int t_hi = 0;
  AttackKind attack = AttackKind::kNone;
  double lambda = 0.0;  // regularization-attack strength
  double clip_norm = 1.0;
  // Step decay: x1 for the first 60% of epochs, x0.5 to 85%, x0.25 after.
  bool lr_decay = true;
  // Plain clipped SGD cannot make progress on the fine-tuning objective at
  // this scale (gradient noise dominates after norm clipping), so Adam is
  // the default; SGD stays available for comparison.
  Optimizer optimizer = Optimizer::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate(int schedule_T) const;
  int effective_t_hi(int schedule_T) const { return t_hi > 0 ? t_hi : schedule_T; }

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainReport {
  std::vector<double> epoch_denoise_loss;
  std::vector<double> epoch_reg_term;  // populated by the regularization attack
  double final_loss = 0.0;
  double wall_seconds = 0.0;
  AttackKind attack = AttackKind::kNone;
  int epochs_run = 0;
  // Prompt deviation audit trail: concept id -> trigger token used instead.
  std::map<int, int> deviated_triggers;

  nlohmann::json to_json() const;
  std::string to_csv() const;  // epoch, denoise_loss, reg_term
};

// Uniform draw from the config's gated timestep window.
int draw_timestep(Rng& rng, const TrainConfig& cfg, int schedule_T);

// Single-sample denoising loss at a fixed (t, eps) draw.
double denoising_loss(const Denoiser& model, const NoiseSchedule& sched, const LabeledImage& image,
                      int t, const LatentImage& eps);

// Mean denoising loss over images at a fixed timestep, averaged over seeded
// noise draws; evaluation helper shared by tests and diagnostics.
double mean_denoising_loss(const Denoiser& model, const NoiseSchedule& sched,
                           const std::vector<LabeledImage>& images, int t, int draws,
                           std::uint64_t seed);

// Per-sample fine-tuning contribution against the effective (base + delta)
// model. Timesteps outside the config's gated window are masked and
// contribute an exactly-zero gradient; this is the mechanism behind the
// freezing attacks.
GradMap finetune_sample_gradient(const Denoiser& effective, const NoiseSchedule& sched,
                                 const LabeledImage& image, int t, const LatentImage& eps,
                                 const TrainConfig& gated_cfg);

// Full-parameter training of the base denoiser (Eq.-style epsilon-prediction
// objective). Deterministic under cfg.seed; throws TrainingError on
// divergence after restoring the last finished epoch into *last_good (when
// given).
Denoiser train_base(const std::vector<LabeledImage>& corpus, const DenoiserArch& arch,
                    const NoiseSchedule& sched, const TrainConfig& cfg,
                    TrainReport* report = nullptr, Denoiser* last_good = nullptr);

// LoRA fine-tuning on one (or a few) target concepts; the base stays frozen.
LoraDelta finetune_concept(const Denoiser& base, const NoiseSchedule& sched,
                           const std::vector<LabeledImage>& images, int rank,
                           const TrainConfig& cfg, TrainReport* report = nullptr);

// Fine-tuning under one of the adaptive attacks. `all_specs` supplies the
// concept universe for the prompt-deviation derangement; `gamma` is the
// cutoff step the freezing attacks gate on.
LoraDelta finetune_with_attack(const Denoiser& base, const NoiseSchedule& sched,
                               const std::vector<LabeledImage>& images, int rank,
                               const TrainConfig& cfg, const std::vector<ConceptSpec>& all_specs,
                               int gamma, TrainReport* report = nullptr);

}  // namespace dmaudit
