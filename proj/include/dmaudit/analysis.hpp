#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dmaudit/audit.hpp"
#include "dmaudit/diffusion.hpp"
#include "dmaudit/training.hpp"

namespace dmaudit {

// Closed-form Jacobian of one cross-attention output row wrt the prompt
// matrix, composed by the chain rule through the softmax:
//   dY_i/dp = (dS_i/dA)(dA/dp)(p Wv) + S_i d(p Wv)/dp.
// Row (l * D + c) holds dY_i/dp[l][c]; columns run over the output channels.
Matrix lemma1_gradient(const Matrix& x, const Matrix& p, const Matrix& wq, const Matrix& wk,
                       const Matrix& wv, std::size_t pixel_row);

// Lipschitz certificate for the prompt -> attention-output map. The constant
// follows the chain-rule derivation: spectral norms of the projection
// factors, the 1/2 softmax-Jacobian ceiling and the sqrt(n) row-to-Frobenius
// factor, so `observed <= c1 * p_star + c2` is a theorem, not a heuristic.
struct LipschitzReport {
  double c1 = 0.0;
  double c2 = 0.0;
  double p_star = 0.0;
  double bound = 0.0;
  double observed = 0.0;  // max over pixel rows of the Jacobian spectral norm
  bool holds(double slack = 1e-8) const { return observed <= bound + slack; }
};

LipschitzReport theorem_bound_report(const Matrix& x, const Matrix& p, const Matrix& wq,
                                     const Matrix& wk, const Matrix& wv, double p_star);

// Largest spectral norm of diag(s) - s s^T over random simplex points; the
// 1/2 ceiling is brute-force checked in tests before being relied on.
double max_softmax_jacobian_norm(int dims, int samples, std::uint64_t seed);

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b);

// Per-timestep attention statistics over the [BOS] token: the BOS attention
// column norm and the softmax-Jacobian norm that gauges prompt sensitivity.
struct SensitivityCurve {
  std::vector<int> timesteps;
  std::vector<double> norm_s;
  std::vector<double> norm_j;
  int sample_count = 0;
  double spearman_rho_j = 0.0;  // rank correlation of norm_j against t
  bool warning_untrained = false;

  std::string to_csv() const;
};

SensitivityCurve sensitivity_curve(const Denoiser& model, const std::vector<LabeledImage>& images,
                                   const std::vector<std::vector<int>>& prompts,
                                   const NoiseSchedule& sched, const std::vector<int>& t_grid,
                                   std::uint64_t seed, bool model_trained = true,
                                   bool frobenius = false);

// Normalized calibrated error per timestep for target vs irrelevant images,
// evaluated with the true captions (diagnostic mode).
struct CeCurves {
  std::vector<int> timesteps;
  std::vector<double> target_mean, target_sd;
  std::vector<double> irrelevant_mean, irrelevant_sd;
  std::vector<double> cohen_d;  // separation effect size per timestep

  std::string to_csv() const;
};

CeCurves ce_curves(const Denoiser& base, const LoraDelta& delta, const NoiseSchedule& sched,
                   const std::vector<LabeledImage>& targets,
                   const std::vector<LabeledImage>& irrelevant, const std::vector<int>& t_grid,
                   int draws, std::uint64_t seed);

// Fixed-threshold detector I(ce < tau) swept over a grid of thresholds.
struct RocRow {
  double tau = 0.0, tpr = 0.0, fpr = 0.0, accuracy = 0.0;
};
struct RocTable {
  std::vector<RocRow> rows;
  double best_tau = 0.0;
  double best_accuracy = 0.0;

  std::string to_csv() const;
};

RocTable threshold_diagnostic(const std::vector<double>& target_ces,
                              const std::vector<double>& irrelevant_ces,
                              const std::vector<double>& tau_grid);

// ---- benchmark sweeps ------------------------------------------------------

// Cached per-model audit features with the ground-truth label, the unit the
// sweep studies rescore under different cutoffs, budgets and feature subsets.
struct SweepModelFeatures {
  int model_id = 0;
  bool positive = false;  // the audited concept was actually fine-tuned
  AttackKind attack = AttackKind::kNone;
  int concept_count = 1;
  std::vector<DualBranchFeature> irrelevant;
  std::vector<DualBranchFeature> targets;
};

struct SweepInputs {
  std::vector<SweepModelFeatures> models;
  AuditConfig cfg;
  int schedule_T = 0;
};

struct ConfusionStats {
  int tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy() const;
  double precision() const;
  double recall() const;
  double f1() const;
};

// Verdict accuracy of the feature set under an arbitrary cutoff, budget and
// timestep subset (empty = all grid steps).
ConfusionStats sweep_accuracy(const SweepInputs& in, int gamma, int budget,
                              const std::vector<std::size_t>& dims = {});

struct SweepResult {
  std::string name;
  std::string csv;
};

// The ablation battery: per-timestep accuracy, cutoff sweep, budget sweep,
// conditional calibration on/off, prompt-strategy-by-stage grid and the
// concept-count grouping. Strategy variants are optional extra feature sets.
std::vector<SweepResult> run_sweeps(const SweepInputs& caption,
                                    const std::map<std::string, SweepInputs>& strategy_variants,
                                    const std::vector<int>& budget_grid);

}  // namespace dmaudit
