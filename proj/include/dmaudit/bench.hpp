#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dmaudit/analysis.hpp"
#include "dmaudit/audit.hpp"
#include "dmaudit/dataset.hpp"
#include "dmaudit/training.hpp"

namespace dmaudit {

// Desk-scale benchmark layout: a pool of audit concepts with one fine-tuned
// model per positive/negative audit, irrelevant concepts for detector
// calibration, and background material for base pretraining.
struct BenchmarkSpec {
  int n_audit = 10;
  int n_irrelevant = 10;
  int n_background = 8;
  int per_concept = 26;             // 13 train / 13 test
  int background_per_concept = 24;
  int targets_per_audit = 10;
  DenoiserArch arch;
  ScheduleKind schedule_kind = ScheduleKind::kCosine;
  int T = 200;
  int rank = kDefaultLoraRank;
  TrainConfig base_cfg;
  TrainConfig ft_cfg;
  AuditConfig audit_cfg;
  std::uint64_t seed = 1;

  static BenchmarkSpec desk_defaults(std::uint64_t seed);
};

struct BenchModel {
  int model_id = 0;
  std::vector<int> trained_concepts;
  int audit_concept = 0;
  bool positive = false;
  AttackKind attack = AttackKind::kNone;
  LoraDelta delta;
  TrainReport report;
};

struct BenchmarkRun {
  BenchmarkSpec spec;
  std::vector<ConceptSpec> concepts;  // audit concepts then irrelevant concepts
  std::vector<LabeledImage> corpus;
  std::vector<ConceptSpec> background;
  std::vector<LabeledImage> background_corpus;
  NoiseSchedule sched;
  Denoiser base;
  TrainReport base_report;
  std::vector<BenchModel> models;

  std::vector<int> audit_concept_ids() const;
  std::vector<int> irrelevant_concept_ids() const;
  // Held-out images of the held-out (irrelevant) concepts, fixed order.
  std::vector<LabeledImage> irrelevant_pool(int max_images) const;
  std::vector<LabeledImage> audit_targets(int concept_id) const;
};

using ProgressFn = std::function<void(const std::string&)>;

// Data + base training + the 2 * n_audit honest fine-tuned models.
BenchmarkRun build_benchmark(const BenchmarkSpec& spec, const ProgressFn& progress = {});

// Adds one 20-model wave trained under the given attack (audited against the
// same concept layout as the honest wave).
void add_attack_wave(BenchmarkRun& run, AttackKind attack, double lambda,
                     const ProgressFn& progress = {});

// Extracts cached dual-branch features for every model of the given attack
// under one prompt strategy; pool_size caps the irrelevant pool extraction.
SweepInputs extract_benchmark_features(const BenchmarkRun& run, AttackKind attack,
                                       PromptStrategy strategy, int pool_size,
                                       const ProgressFn& progress = {});

// Per-model verdicts at the default cutoff/budget for a feature set.
struct BenchVerdicts {
  std::vector<int> model_ids;
  std::vector<bool> positive;
  std::vector<bool> predicted;
  ConfusionStats stats() const;
};

BenchVerdicts evaluate_default(const SweepInputs& inputs);

// On-disk artifact layout consumed by the CLI sweep study: checkpoints,
// deltas, corpora and feature files plus a manifest tying them together.
void save_benchmark_artifacts(const BenchmarkRun& run,
                              const std::map<std::string, SweepInputs>& features_by_strategy,
                              const std::string& dir);

struct LoadedBenchmark {
  SweepInputs caption;
  std::map<std::string, SweepInputs> variants;
  int schedule_T = 0;
};

LoadedBenchmark load_benchmark_features(const std::string& manifest_path);

}  // namespace dmaudit
