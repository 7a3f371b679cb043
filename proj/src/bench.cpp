#include "dmaudit/bench.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dmaudit/tensorio.hpp"

namespace dmaudit {

namespace {

void report(const ProgressFn& progress, const std::string& msg) {
  if (progress) progress(msg);
}

}  // namespace

BenchmarkSpec BenchmarkSpec::desk_defaults(std::uint64_t seed_in) {
  BenchmarkSpec spec;
  spec.seed = seed_in;

  spec.arch.side = 8;
  spec.arch.channels = 1;
  spec.arch.width = 40;
  spec.arch.attn_dim = 32;
  spec.arch.text_dim = 32;
  spec.arch.ffn_hidden = 80;
  spec.arch.blocks = 2;
  spec.arch.vocab = kVocabSize;

  spec.schedule_kind = ScheduleKind::kCosine;
  spec.T = 200;

  spec.base_cfg.epochs = 60;
  spec.base_cfg.lr = 0.03;
  spec.base_cfg.batch = 16;
  spec.base_cfg.seed = seed_in;

  spec.ft_cfg.epochs = 120;
  spec.ft_cfg.lr = 0.02;
  spec.ft_cfg.batch = 13;
  spec.ft_cfg.seed = seed_in;

  spec.audit_cfg = AuditConfig::defaults(spec.T);
  spec.audit_cfg.irrelevant_budget = 100;
  spec.audit_cfg.seed = seed_in;
  return spec;
}

std::vector<int> BenchmarkRun::audit_concept_ids() const {
  std::vector<int> ids;
  for (int i = 0; i < spec.n_audit; ++i) ids.push_back(concepts[static_cast<std::size_t>(i)].concept_id);
  return ids;
}

std::vector<int> BenchmarkRun::irrelevant_concept_ids() const {
  std::vector<int> ids;
  for (int i = spec.n_audit; i < spec.n_audit + spec.n_irrelevant; ++i)
    ids.push_back(concepts[static_cast<std::size_t>(i)].concept_id);
  return ids;
}

std::vector<LabeledImage> BenchmarkRun::irrelevant_pool(int max_images) const {
  std::vector<int> ids = irrelevant_concept_ids();
  std::vector<LabeledImage> pool;
  for (int id : ids) {
    const std::vector<LabeledImage> imgs = filter_images(corpus, id, Split::kTest);
    pool.insert(pool.end(), imgs.begin(), imgs.end());
  }
  std::sort(pool.begin(), pool.end(),
            [](const LabeledImage& a, const LabeledImage& b) { return a.image_id < b.image_id; });
  if (max_images > 0 && static_cast<int>(pool.size()) > max_images)
    pool.resize(static_cast<std::size_t>(max_images));
  return pool;
}

std::vector<LabeledImage> BenchmarkRun::audit_targets(int concept_id) const {
  std::vector<LabeledImage> targets = filter_images(corpus, concept_id, Split::kTest);
  std::sort(targets.begin(), targets.end(),
            [](const LabeledImage& a, const LabeledImage& b) { return a.image_id < b.image_id; });
  if (static_cast<int>(targets.size()) > spec.targets_per_audit)
    targets.resize(static_cast<std::size_t>(spec.targets_per_audit));
  return targets;
}

namespace {

std::vector<BenchModel> train_wave(const BenchmarkRun& run, AttackKind attack, double lambda,
                                   int first_model_id, const ProgressFn& progress) {
  const BenchmarkSpec& spec = run.spec;
  std::vector<BenchModel> models;
  models.reserve(static_cast<std::size_t>(2 * spec.n_audit));
  const std::vector<int> audit_ids = run.audit_concept_ids();

  for (int i = 0; i < 2 * spec.n_audit; ++i) {
    const bool positive = i % 2 == 0;
    const int slot = i / 2;
    const int audit_concept = audit_ids[static_cast<std::size_t>(slot)];
    const int trained_concept =
        positive ? audit_concept
                 : audit_ids[static_cast<std::size_t>((slot + 1) % spec.n_audit)];

    BenchModel m;
    m.model_id = first_model_id + i;
    m.audit_concept = audit_concept;
    m.positive = positive;
    m.attack = attack;
    m.trained_concepts = {trained_concept};

    TrainConfig cfg = spec.ft_cfg;
    cfg.attack = attack;
    cfg.lambda = lambda;
    cfg.seed = mix64(spec.seed ^ (0x1000ull * static_cast<std::uint64_t>(m.model_id) +
                                  static_cast<std::uint64_t>(attack) * 0xabcdull));

    const std::vector<LabeledImage> data =
        filter_images(run.corpus, trained_concept, Split::kTrain);
    if (attack == AttackKind::kNone) {
      m.delta = finetune_concept(run.base, run.sched, data, spec.rank, cfg, &m.report);
    } else {
      m.delta = finetune_with_attack(run.base, run.sched, data, spec.rank, cfg, run.concepts,
                                     spec.audit_cfg.gamma, &m.report);
    }
    report(progress, "finetuned model " + std::to_string(m.model_id) + " (" +
                         to_string(attack) + (positive ? ", positive" : ", negative") + ")");
    models.push_back(std::move(m));
  }
  return models;
}

}  // namespace

BenchmarkRun build_benchmark(const BenchmarkSpec& spec, const ProgressFn& progress) {
  BenchmarkRun run;
  run.spec = spec;
  run.concepts = generate_concepts(spec.n_audit + spec.n_irrelevant, spec.seed);
  run.corpus = build_corpus(run.concepts, spec.per_concept, spec.seed);
  run.background = background_specs(run.concepts, spec.n_background, spec.seed + 17);
  run.background_corpus =
      build_background_corpus(run.background, spec.background_per_concept, spec.seed + 17);
  run.sched = make_schedule(spec.schedule_kind, spec.T);
  report(progress, "data ready: " + std::to_string(run.corpus.size()) + " concept images, " +
                       std::to_string(run.background_corpus.size()) + " background images");

  TrainConfig base_cfg = spec.base_cfg;
  base_cfg.seed = mix64(spec.seed ^ 0xba5eull);
  run.base = train_base(run.background_corpus, spec.arch, run.sched, base_cfg, &run.base_report);
  report(progress, "base trained, final loss " + std::to_string(run.base_report.final_loss));

  run.models = train_wave(run, AttackKind::kNone, 0.0, 0, progress);
  return run;
}

void add_attack_wave(BenchmarkRun& run, AttackKind attack, double lambda,
                     const ProgressFn& progress) {
  if (attack == AttackKind::kNone) throw ArgumentError("add_attack_wave: attack must not be none");
  const int first_id = run.models.empty() ? 0 : run.models.back().model_id + 1;
  std::vector<BenchModel> wave = train_wave(run, attack, lambda, first_id, progress);
  for (BenchModel& m : wave) run.models.push_back(std::move(m));
}

SweepInputs extract_benchmark_features(const BenchmarkRun& run, AttackKind attack,
                                       PromptStrategy strategy, int pool_size,
                                       const ProgressFn& progress) {
  SweepInputs out;
  out.cfg = run.spec.audit_cfg;
  out.cfg.strategy = strategy;
  out.schedule_T = run.spec.T;
  const std::vector<LabeledImage> pool = run.irrelevant_pool(pool_size);

  for (const BenchModel& m : run.models) {
    if (m.attack != attack) continue;
    Auditor auditor(run.base, m.delta, run.sched, out.cfg);
    SweepModelFeatures f;
    f.model_id = m.model_id;
    f.positive = m.positive;
    f.attack = m.attack;
    f.concept_count = static_cast<int>(m.trained_concepts.size());
    f.irrelevant = auditor.irrelevant_features(pool);
    f.targets = auditor.target_features(run.audit_targets(m.audit_concept));
    out.models.push_back(std::move(f));
    report(progress, "features: model " + std::to_string(m.model_id) + " strategy " +
                         to_string(strategy));
  }
  return out;
}

ConfusionStats BenchVerdicts::stats() const {
  ConfusionStats s;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (positive[i] && predicted[i])
      ++s.tp;
    else if (positive[i] && !predicted[i])
      ++s.fn;
    else if (!positive[i] && predicted[i])
      ++s.fp;
    else
      ++s.tn;
  }
  return s;
}

BenchVerdicts evaluate_default(const SweepInputs& inputs) {
  BenchVerdicts v;
  for (const SweepModelFeatures& m : inputs.models) {
    SweepInputs single;
    single.cfg = inputs.cfg;
    single.schedule_T = inputs.schedule_T;
    single.models.push_back(m);
    const ConfusionStats s =
        sweep_accuracy(single, inputs.cfg.gamma, inputs.cfg.irrelevant_budget);
    v.model_ids.push_back(m.model_id);
    v.positive.push_back(m.positive);
    v.predicted.push_back(s.tp + s.fp > 0);
  }
  return v;
}

void save_benchmark_artifacts(const BenchmarkRun& run,
                              const std::map<std::string, SweepInputs>& features_by_strategy,
                              const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  fs::create_directories(dir + "/deltas");
  fs::create_directories(dir + "/features");

  save_checkpoint(run.base, run.sched, dir + "/base.ckpt");
  save_corpus(Corpus{run.concepts, run.corpus}, dir + "/corpus");
  save_corpus(Corpus{run.background, run.background_corpus}, dir + "/background");

  nlohmann::json models = nlohmann::json::array();
  for (const BenchModel& m : run.models) {
    const std::string delta_path = "deltas/model_" + std::to_string(m.model_id) + ".bin";
    save_delta(m.delta, dir + "/" + delta_path);
    models.push_back({{"model_id", m.model_id},
                      {"audit_concept", m.audit_concept},
                      {"positive", m.positive},
                      {"attack", to_string(m.attack)},
                      {"trained_concepts", m.trained_concepts},
                      {"delta", delta_path},
                      {"train_report", m.report.to_json()}});
  }

  nlohmann::json features = nlohmann::json::object();
  for (const auto& [strategy, inputs] : features_by_strategy) {
    nlohmann::json per_model = nlohmann::json::array();
    for (const SweepModelFeatures& m : inputs.models) {
      const std::string path =
          "features/model_" + std::to_string(m.model_id) + "_" + strategy + ".json";
      nlohmann::json blob;
      blob["model_id"] = m.model_id;
      blob["positive"] = m.positive;
      blob["attack"] = to_string(m.attack);
      blob["concept_count"] = m.concept_count;
      blob["irrelevant"] = features_to_json(m.irrelevant, inputs.cfg.t_grid);
      blob["targets"] = features_to_json(m.targets, inputs.cfg.t_grid);
      std::ofstream os(dir + "/" + path);
      if (!os) throw FormatError("save_benchmark_artifacts: cannot write " + path);
      os << blob.dump();
      per_model.push_back(path);
    }
    features[strategy] = {{"config", inputs.cfg.to_json()}, {"files", per_model}};
  }

  nlohmann::json manifest;
  manifest["kind"] = "benchmark_manifest";
  manifest["seed"] = run.spec.seed;
  manifest["schedule_kind"] = to_string(run.spec.schedule_kind);
  manifest["T"] = run.spec.T;
  manifest["audit_config"] = run.spec.audit_cfg.to_json();
  manifest["base_checkpoint"] = "base.ckpt";
  manifest["corpus"] = "corpus";
  manifest["background"] = "background";
  manifest["models"] = models;
  manifest["features"] = features;
  std::ofstream os(dir + "/manifest.json");
  if (!os) throw FormatError("save_benchmark_artifacts: cannot write manifest");
  os << manifest.dump(1);
}

LoadedBenchmark load_benchmark_features(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is)
    throw MissingArtifactError("benchmark manifest not found: " + manifest_path +
                               " (run the data/train/audit steps first)");
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("benchmark manifest: ") + e.what());
  }
  if (!manifest.contains("kind") || manifest["kind"] != "benchmark_manifest")
    throw FormatError("benchmark manifest: wrong kind");
  const std::string dir = std::filesystem::path(manifest_path).parent_path().string();

  LoadedBenchmark out;
  out.schedule_T = manifest.at("T").get<int>();
  if (!manifest.contains("features") || manifest["features"].empty())
    throw MissingArtifactError(
        "benchmark manifest lists no feature sets; run the audit feature-extraction step first");

  for (const auto& [strategy, blob] : manifest.at("features").items()) {
    SweepInputs inputs;
    inputs.cfg = AuditConfig::from_json(blob.at("config"));
    inputs.schedule_T = out.schedule_T;
    for (const auto& rel : blob.at("files")) {
      const std::string path = dir + "/" + rel.get<std::string>();
      std::ifstream fis(path);
      if (!fis)
        throw MissingArtifactError("feature file missing: " + path +
                                   " (its model's audit step has not run)");
      nlohmann::json fj;
      fis >> fj;
      SweepModelFeatures m;
      m.model_id = fj.at("model_id").get<int>();
      m.positive = fj.at("positive").get<bool>();
      m.attack = attack_from_string(fj.at("attack").get<std::string>());
      m.concept_count = fj.at("concept_count").get<int>();
      m.irrelevant = features_from_json(fj.at("irrelevant"));
      m.targets = features_from_json(fj.at("targets"));
      inputs.models.push_back(std::move(m));
    }
    if (strategy == "caption_proxy")
      out.caption = std::move(inputs);
    else
      out.variants[strategy] = std::move(inputs);
  }
  if (out.caption.models.empty())
    throw MissingArtifactError("benchmark manifest: caption_proxy feature set missing");
  return out;
}

}  // namespace dmaudit
