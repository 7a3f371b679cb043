#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dmaudit/adapters.hpp"
#include "dmaudit/dataset.hpp"
#include "dmaudit/diffusion.hpp"
#include "dmaudit/outlier.hpp"
#include "dmaudit/schedule.hpp"

namespace dmaudit {

// Stand-in prompts used when the true trigger words are unknown.
enum class PromptStrategy { kNull, kRandom, kCaptionProxy };

std::string to_string(PromptStrategy s);
PromptStrategy strategy_from_string(const std::string& s);

struct AuditConfig {
  std::vector<int> t_grid;  // strictly increasing audited timesteps
  int gamma = 0;            // cutoff between the full and frozen branches
  int eps_draws = 4;
  PromptStrategy strategy = PromptStrategy::kCaptionProxy;
  bool normalize = true;
  int irrelevant_budget = 100;
  std::uint64_t seed = 0;
  int n_trees = 100;
  int subsample = 256;
  double quantile = 0.95;

  // Eight evenly spaced steps {T/8, ..., T} with gamma = T/2.
  static AuditConfig defaults(int T);
  void validate(int T) const;

  nlohmann::json to_json() const;
  static AuditConfig from_json(const nlohmann::json& j);
};

// Pseudo-prompt token sequences (before BOS insertion):
//   null          -> empty (encodes as the reserved null token)
//   random        -> five uniform attribute-vocabulary tokens
//   caption_proxy -> the image's attribute tokens, trigger stripped, shuffled
std::vector<int> pseudo_prompt_tokens(PromptStrategy strategy, const LabeledImage& image,
                                      std::uint64_t seed);
PromptEmbedding pseudo_prompt(const Denoiser& model, PromptStrategy strategy,
                              const LabeledImage& image, std::uint64_t seed);

// The three parameterizations compared by every error term.
struct AuditModels {
  const Denoiser* base = nullptr;  // W
  Denoiser full;                   // W'  = W + BA
  Denoiser frozen;                 // W'' = W' minus cross-attention deltas
};

AuditModels materialize_audit_models(const Denoiser& base, const LoraDelta& delta);

using NoiseSource = std::function<LatentImage(int draw)>;

// Mean over paired draws of ||eps_ft(z_t,p) - eps||^2 - ||eps_W(z_t,p) - eps||^2,
// optionally normalized by the base error. Both models consume the same eps
// and the same z_t within each draw.
double calibrated_error_with_noise(const Denoiser& base_model, const Denoiser& finetuned,
                                   const LatentImage& image, const PromptEmbedding& p, int t,
                                   const NoiseSchedule& sched, int draws, bool normalize,
                                   const NoiseSource& source);

// Convenience forms matching the audit pipeline: deterministic seeded noise.
double calibrated_error(const Denoiser& base, const LoraDelta& delta, const LabeledImage& image,
                        const PromptEmbedding& p, int t, const NoiseSchedule& sched, int draws,
                        bool normalize, std::uint64_t seed);

// Branch select per the cutoff: t <= gamma uses the fully fine-tuned
// parameters, t > gamma the cross-attention-frozen ones.
double conditional_calibrated_error(const Denoiser& base, const LoraDelta& delta,
                                    const LabeledImage& image, const PromptEmbedding& p, int t,
                                    int gamma, const NoiseSchedule& sched, int draws,
                                    bool normalize, std::uint64_t seed);

// Per-image error profile with both branches kept, so any cutoff (and the
// cutoff sweep) can be assembled without re-running the models.
struct DualBranchFeature {
  int image_id = 0;
  std::vector<double> ce_full;    // one entry per grid step
  std::vector<double> ce_frozen;
};

struct CceFeature {
  int image_id = 0;
  std::vector<double> values;
  PromptStrategy strategy = PromptStrategy::kCaptionProxy;
  int draws = 0;
};

std::vector<DualBranchFeature> extract_dual_features(const AuditModels& models,
                                                     const NoiseSchedule& sched,
                                                     const std::vector<LabeledImage>& images,
                                                     const AuditConfig& cfg);

CceFeature assemble_feature(const DualBranchFeature& dual, const std::vector<int>& t_grid,
                            int gamma, PromptStrategy strategy, int draws);

// One conditional-calibrated-error vector per image at cfg.gamma.
std::vector<CceFeature> extract_features(const Denoiser& base, const LoraDelta& delta,
                                         const NoiseSchedule& sched,
                                         const std::vector<LabeledImage>& images,
                                         const AuditConfig& cfg);

struct AuditVerdict {
  int concept_id = -1;
  bool can_generate = false;  // strict majority of flagged images; ties say no
  int votes_yes = 0;
  int votes_total = 0;
  std::vector<int> image_ids;
  std::vector<double> scores;
  std::vector<bool> flags;
  double seconds_irrelevant = 0.0;
  double seconds_targets = 0.0;
  double seconds_fit = 0.0;
  double seconds_score = 0.0;
  bool irrelevant_cache_hit = false;

  nlohmann::json to_json() const;
};

// Runs audits of one fine-tuned model. Irrelevant-pool features are computed
// once and reused across concepts (the per-concept amortization).
class Auditor {
 public:
  Auditor(const Denoiser& base, const LoraDelta& delta, const NoiseSchedule& sched,
          AuditConfig cfg);

  const std::vector<DualBranchFeature>& irrelevant_features(
      const std::vector<LabeledImage>& pool);
  std::vector<DualBranchFeature> target_features(const std::vector<LabeledImage>& targets) const;

  AuditVerdict audit(int concept_id, const std::vector<LabeledImage>& targets,
                     const std::vector<LabeledImage>& pool);

  // Verdict from precomputed dual-branch features (used by the sweep studies
  // to rescore cached features under different cutoffs/budgets).
  AuditVerdict audit_from_features(int concept_id, const std::vector<DualBranchFeature>& irr,
                                   const std::vector<DualBranchFeature>& targets, int gamma,
                                   int budget) const;

  int irrelevant_extraction_count() const { return extraction_count_; }
  const AuditConfig& config() const { return cfg_; }
  const AuditModels& models() const { return models_; }

  // Seeds the irrelevant-feature cache from a previous run (CLI --reuse-cache).
  void preload_irrelevant_features(std::vector<DualBranchFeature> features);
  bool has_cached_irrelevant() const { return cached_irrelevant_.has_value(); }

 private:
  const Denoiser& base_;
  NoiseSchedule sched_;
  AuditConfig cfg_;
  AuditModels models_;
  std::optional<std::vector<DualBranchFeature>> cached_irrelevant_;
  int extraction_count_ = 0;
};

// Single-shot convenience wrapper over Auditor.
AuditVerdict audit_concept(const Denoiser& base, const LoraDelta& delta,
                           const NoiseSchedule& sched,
                           const std::vector<LabeledImage>& irrelevant_images,
                           const std::vector<LabeledImage>& target_images, int concept_id,
                           const AuditConfig& cfg);

// Structured report (JSON + CSV) with config echo, seeds, wall times and the
// per-image feature rows; everything needed to regenerate the figures.
void write_audit_report(const std::string& path_prefix, const AuditVerdict& verdict,
                        const AuditConfig& cfg, const std::vector<CceFeature>& target_features,
                        const nlohmann::json& extra_meta);

nlohmann::json features_to_json(const std::vector<DualBranchFeature>& features,
                                const std::vector<int>& t_grid);
std::vector<DualBranchFeature> features_from_json(const nlohmann::json& j);

}  // namespace dmaudit
