#include "dmaudit/audit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "dmaudit/parallel.hpp"

namespace dmaudit {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

LatentImage seeded_noise(const Rng& root, const LabeledImage& image, int t, int draw) {
  Rng r = root.fork(static_cast<std::uint64_t>(image.image_id), static_cast<std::uint64_t>(t),
                    static_cast<std::uint64_t>(draw));
  LatentImage eps{Matrix(image.image.m.rows(), image.image.m.cols()), image.image.side};
  for (double& v : eps.m.raw()) v = r.normal();
  return eps;
}

struct BranchErrors {
  double ce_full = 0.0;
  double ce_frozen = 0.0;
};

// Shared engine: one (image, t) cell, draws paired across all three models.
BranchErrors dual_branch_errors(const AuditModels& models, const LabeledImage& image,
                                const PromptEmbedding& p, int t, const NoiseSchedule& sched,
                                int draws, bool normalize, const Rng& noise_root) {
  double base_acc = 0.0, full_acc = 0.0, frozen_acc = 0.0;
  for (int d = 0; d < draws; ++d) {
    const LatentImage eps = seeded_noise(noise_root, image, t, d);
    const LatentImage zt = forward_noise(image.image, t, eps, sched);
    base_acc += mse(denoise_predict(*models.base, zt, t, p).m, eps.m);
    full_acc += mse(denoise_predict(models.full, zt, t, p).m, eps.m);
    frozen_acc += mse(denoise_predict(models.frozen, zt, t, p).m, eps.m);
  }
  const double base_mean = base_acc / draws;
  BranchErrors out;
  out.ce_full = full_acc / draws - base_mean;
  out.ce_frozen = frozen_acc / draws - base_mean;
  if (normalize) {
    out.ce_full /= base_mean;
    out.ce_frozen /= base_mean;
  }
  return out;
}

}  // namespace

std::string to_string(PromptStrategy s) {
  switch (s) {
    case PromptStrategy::kNull:
      return "null";
    case PromptStrategy::kRandom:
      return "random";
    case PromptStrategy::kCaptionProxy:
      return "caption_proxy";
  }
  return "?";
}

PromptStrategy strategy_from_string(const std::string& s) {
  if (s == "null") return PromptStrategy::kNull;
  if (s == "random") return PromptStrategy::kRandom;
  if (s == "caption_proxy" || s == "caption-proxy" || s == "caption")
    return PromptStrategy::kCaptionProxy;
  throw ArgumentError("unknown prompt strategy: " + s);
}

AuditConfig AuditConfig::defaults(int T) {
  AuditConfig cfg;
  cfg.t_grid.clear();
  for (int k = 1; k <= 8; ++k) cfg.t_grid.push_back(k * T / 8);
  cfg.gamma = T / 2;
  return cfg;
}

void AuditConfig::validate(int T) const {
  if (t_grid.empty()) throw ConfigError("audit config: empty timestep grid");
  for (std::size_t i = 0; i < t_grid.size(); ++i) {
    if (t_grid[i] < 1 || t_grid[i] > T)
      throw ConfigError("audit config: grid step outside [1, T]");
    if (i > 0 && t_grid[i] <= t_grid[i - 1])
      throw ConfigError("audit config: grid must be strictly increasing");
  }
  if (gamma < t_grid.front() - 1 || gamma > t_grid.back())
    throw ConfigError("audit config: gamma outside the grid range");
  if (eps_draws < 1) throw ConfigError("audit config: eps_draws must be >= 1");
  if (irrelevant_budget < 8)
    throw ConfigError("audit config: irrelevant budget below the floor of 8");
  if (n_trees < 1 || subsample < 2) throw ConfigError("audit config: bad forest parameters");
  if (!(quantile > 0.0 && quantile < 1.0))
    throw ConfigError("audit config: quantile must lie in (0, 1)");
}

nlohmann::json AuditConfig::to_json() const {
  return nlohmann::json{{"t_grid", t_grid},
                        {"gamma", gamma},
                        {"eps_draws", eps_draws},
                        {"strategy", to_string(strategy)},
                        {"normalize", normalize},
                        {"irrelevant_budget", irrelevant_budget},
                        {"seed", seed},
                        {"n_trees", n_trees},
                        {"subsample", subsample},
                        {"quantile", quantile}};
}

AuditConfig AuditConfig::from_json(const nlohmann::json& j) {
  AuditConfig c;
  c.t_grid = j.at("t_grid").get<std::vector<int>>();
  c.gamma = j.at("gamma").get<int>();
  if (j.contains("eps_draws")) c.eps_draws = j["eps_draws"].get<int>();
  if (j.contains("strategy")) c.strategy = strategy_from_string(j["strategy"].get<std::string>());
  if (j.contains("normalize")) c.normalize = j["normalize"].get<bool>();
  if (j.contains("irrelevant_budget")) c.irrelevant_budget = j["irrelevant_budget"].get<int>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("n_trees")) c.n_trees = j["n_trees"].get<int>();
  if (j.contains("subsample")) c.subsample = j["subsample"].get<int>();
  if (j.contains("quantile")) c.quantile = j["quantile"].get<double>();
  return c;
}

std::vector<int> pseudo_prompt_tokens(PromptStrategy strategy, const LabeledImage& image,
                                      std::uint64_t seed) {
  switch (strategy) {
    case PromptStrategy::kNull:
      return {};
    case PromptStrategy::kRandom: {
      Rng rng(mix64(seed ^ 0x72616e646f6d7021ull) ^
              mix64(static_cast<std::uint64_t>(image.image_id)));
      std::vector<int> tokens;
      for (int i = 0; i < 5; ++i)
        tokens.push_back(kAttrBase + static_cast<int>(rng.uniform_int(0, kNumAttributes - 1)));
      return tokens;
    }
    case PromptStrategy::kCaptionProxy: {
      Rng rng(mix64(seed ^ 0x6361707072787921ull) ^
              mix64(static_cast<std::uint64_t>(image.image_id)));
      std::vector<int> tokens;
      for (int tok : image.caption_tokens)
        if (!is_trigger_token(tok)) tokens.push_back(tok);
      rng.shuffle(tokens);
      return tokens;
    }
  }
  return {};
}

PromptEmbedding pseudo_prompt(const Denoiser& model, PromptStrategy strategy,
                              const LabeledImage& image, std::uint64_t seed) {
  return encode_prompt(model, pseudo_prompt_tokens(strategy, image, seed));
}

AuditModels materialize_audit_models(const Denoiser& base, const LoraDelta& delta) {
  AuditModels m;
  m.base = &base;
  m.full = effective_params(base, delta, ApplyMode::kFullFinetuned);
  m.frozen = effective_params(base, delta, ApplyMode::kCrossAttnFrozen);
  return m;
}

double calibrated_error_with_noise(const Denoiser& base_model, const Denoiser& finetuned,
                                   const LatentImage& image, const PromptEmbedding& p, int t,
                                   const NoiseSchedule& sched, int draws, bool normalize,
                                   const NoiseSource& source) {
  if (t < 1 || t > sched.T) throw ArgumentError("calibrated_error: t outside [1, T]");
  if (draws < 1) throw ArgumentError("calibrated_error: draws must be >= 1");
  double base_acc = 0.0, ft_acc = 0.0;
  for (int d = 0; d < draws; ++d) {
    const LatentImage eps = source(d);
    const LatentImage zt = forward_noise(image, t, eps, sched);
    base_acc += mse(denoise_predict(base_model, zt, t, p).m, eps.m);
    ft_acc += mse(denoise_predict(finetuned, zt, t, p).m, eps.m);
  }
  const double base_mean = base_acc / draws;
  double ce = ft_acc / draws - base_mean;
  if (normalize) ce /= base_mean;
  return ce;
}

double calibrated_error(const Denoiser& base, const LoraDelta& delta, const LabeledImage& image,
                        const PromptEmbedding& p, int t, const NoiseSchedule& sched, int draws,
                        bool normalize, std::uint64_t seed) {
  const Denoiser full = effective_params(base, delta, ApplyMode::kFullFinetuned);
  const Rng root(mix64(seed ^ 0x63655f6e6f697365ull));
  return calibrated_error_with_noise(
      base, full, image.image, p, t, sched, draws, normalize,
      [&](int d) { return seeded_noise(root, image, t, d); });
}

double conditional_calibrated_error(const Denoiser& base, const LoraDelta& delta,
                                    const LabeledImage& image, const PromptEmbedding& p, int t,
                                    int gamma, const NoiseSchedule& sched, int draws,
                                    bool normalize, std::uint64_t seed) {
  const ApplyMode mode = t <= gamma ? ApplyMode::kFullFinetuned : ApplyMode::kCrossAttnFrozen;
  const Denoiser branch = effective_params(base, delta, mode);
  const Rng root(mix64(seed ^ 0x63655f6e6f697365ull));
  return calibrated_error_with_noise(
      base, branch, image.image, p, t, sched, draws, normalize,
      [&](int d) { return seeded_noise(root, image, t, d); });
}

std::vector<DualBranchFeature> extract_dual_features(const AuditModels& models,
                                                     const NoiseSchedule& sched,
                                                     const std::vector<LabeledImage>& images,
                                                     const AuditConfig& cfg) {
  if (images.empty()) throw ArgumentError("extract_features: no images");
  cfg.validate(sched.T);
  const Rng noise_root(mix64(cfg.seed ^ 0x63655f6e6f697365ull));
  std::vector<DualBranchFeature> out(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const LabeledImage& image = images[i];
    const PromptEmbedding p =
        pseudo_prompt(*models.base, cfg.strategy, image, cfg.seed);
    DualBranchFeature f;
    f.image_id = image.image_id;
    f.ce_full.reserve(cfg.t_grid.size());
    f.ce_frozen.reserve(cfg.t_grid.size());
    for (int t : cfg.t_grid) {
      const BranchErrors e = dual_branch_errors(models, image, p, t, sched, cfg.eps_draws,
                                                cfg.normalize, noise_root);
      if (!std::isfinite(e.ce_full) || !std::isfinite(e.ce_frozen))
        throw NumericError("extract_features: non-finite error at image " +
                           std::to_string(image.image_id) + ", t=" + std::to_string(t));
      f.ce_full.push_back(e.ce_full);
      f.ce_frozen.push_back(e.ce_frozen);
    }
    out[i] = std::move(f);
  });
  return out;
}

CceFeature assemble_feature(const DualBranchFeature& dual, const std::vector<int>& t_grid,
                            int gamma, PromptStrategy strategy, int draws) {
  CceFeature f;
  f.image_id = dual.image_id;
  f.strategy = strategy;
  f.draws = draws;
  f.values.reserve(t_grid.size());
  for (std::size_t i = 0; i < t_grid.size(); ++i)
    f.values.push_back(t_grid[i] <= gamma ? dual.ce_full[i] : dual.ce_frozen[i]);
  return f;
}

std::vector<CceFeature> extract_features(const Denoiser& base, const LoraDelta& delta,
                                         const NoiseSchedule& sched,
                                         const std::vector<LabeledImage>& images,
                                         const AuditConfig& cfg) {
  const AuditModels models = materialize_audit_models(base, delta);
  const std::vector<DualBranchFeature> dual = extract_dual_features(models, sched, images, cfg);
  std::vector<CceFeature> out;
  out.reserve(dual.size());
  for (const DualBranchFeature& d : dual)
    out.push_back(assemble_feature(d, cfg.t_grid, cfg.gamma, cfg.strategy, cfg.eps_draws));
  return out;
}

nlohmann::json AuditVerdict::to_json() const {
  return nlohmann::json{{"concept_id", concept_id},
                        {"decision", can_generate ? "can_generate" : "cannot_generate"},
                        {"votes_yes", votes_yes},
                        {"votes_total", votes_total},
                        {"image_ids", image_ids},
                        {"scores", scores},
                        {"flags", flags},
                        {"seconds_irrelevant", seconds_irrelevant},
                        {"seconds_targets", seconds_targets},
                        {"seconds_fit", seconds_fit},
                        {"seconds_score", seconds_score},
                        {"irrelevant_cache_hit", irrelevant_cache_hit}};
}

Auditor::Auditor(const Denoiser& base, const LoraDelta& delta, const NoiseSchedule& sched,
                 AuditConfig cfg)
    : base_(base), sched_(sched), cfg_(std::move(cfg)) {
  cfg_.validate(sched_.T);
  delta.validate_against(base);
  models_ = materialize_audit_models(base, delta);
}

const std::vector<DualBranchFeature>& Auditor::irrelevant_features(
    const std::vector<LabeledImage>& pool) {
  if (!cached_irrelevant_) {
    cached_irrelevant_ = extract_dual_features(models_, sched_, pool, cfg_);
    ++extraction_count_;
  }
  return *cached_irrelevant_;
}

std::vector<DualBranchFeature> Auditor::target_features(
    const std::vector<LabeledImage>& targets) const {
  return extract_dual_features(models_, sched_, targets, cfg_);
}

void Auditor::preload_irrelevant_features(std::vector<DualBranchFeature> features) {
  cached_irrelevant_ = std::move(features);
}

AuditVerdict Auditor::audit_from_features(int concept_id,
                                          const std::vector<DualBranchFeature>& irr,
                                          const std::vector<DualBranchFeature>& targets,
                                          int gamma, int budget) const {
  if (budget < 8) throw ConfigError("audit: irrelevant budget below the floor of 8");
  if (static_cast<int>(irr.size()) < budget)
    throw ConfigError("audit: irrelevant pool smaller than the requested budget");
  if (targets.empty()) throw ArgumentError("audit: no target images");

  AuditVerdict v;
  v.concept_id = concept_id;

  auto fit_start = Clock::now();
  std::vector<FeatureRow> rows;
  rows.reserve(static_cast<std::size_t>(budget));
  for (int i = 0; i < budget; ++i)
    rows.push_back(
        {assemble_feature(irr[static_cast<std::size_t>(i)], cfg_.t_grid, gamma, cfg_.strategy,
                          cfg_.eps_draws)
             .values});
  const IsolationForest forest = IsolationForest::fit(
      rows, cfg_.n_trees, cfg_.subsample, mix64(cfg_.seed ^ 0x666f726573743231ull), cfg_.quantile);
  v.seconds_fit = seconds_since(fit_start);

  auto score_start = Clock::now();
  for (const DualBranchFeature& d : targets) {
    const FeatureRow row{
        assemble_feature(d, cfg_.t_grid, gamma, cfg_.strategy, cfg_.eps_draws).values};
    const double s = forest.score(row);
    const bool flagged = forest.is_outlier(row);
    v.image_ids.push_back(d.image_id);
    v.scores.push_back(s);
    v.flags.push_back(flagged);
    if (flagged) ++v.votes_yes;
  }
  v.votes_total = static_cast<int>(targets.size());
  v.can_generate = 2 * v.votes_yes > v.votes_total;  // ties stay negative
  v.seconds_score = seconds_since(score_start);
  return v;
}

AuditVerdict Auditor::audit(int concept_id, const std::vector<LabeledImage>& targets,
                            const std::vector<LabeledImage>& pool) {
  if (targets.empty()) throw ArgumentError("audit: no target images");
  if (static_cast<int>(pool.size()) < 8)
    throw ConfigError("audit: irrelevant pool below the floor of 8");
  std::set<int> pool_concepts, target_concepts;
  for (const LabeledImage& im : pool) pool_concepts.insert(im.concept_id);
  for (const LabeledImage& im : targets) target_concepts.insert(im.concept_id);
  for (int c : target_concepts)
    if (pool_concepts.count(c))
      throw ConfigError("audit: target concept " + std::to_string(c) +
                        " appears in the irrelevant pool");

  const bool cache_hit = cached_irrelevant_.has_value();
  auto irr_start = Clock::now();
  const std::vector<DualBranchFeature>& irr = irrelevant_features(pool);
  const double irr_seconds = seconds_since(irr_start);

  auto tgt_start = Clock::now();
  const std::vector<DualBranchFeature> tgt = target_features(targets);
  const double tgt_seconds = seconds_since(tgt_start);

  const int budget = std::min<int>(cfg_.irrelevant_budget, static_cast<int>(irr.size()));
  AuditVerdict v = audit_from_features(concept_id, irr, tgt, cfg_.gamma, budget);
  v.seconds_irrelevant = irr_seconds;
  v.seconds_targets = tgt_seconds;
  v.irrelevant_cache_hit = cache_hit;
  return v;
}

AuditVerdict audit_concept(const Denoiser& base, const LoraDelta& delta,
                           const NoiseSchedule& sched,
                           const std::vector<LabeledImage>& irrelevant_images,
                           const std::vector<LabeledImage>& target_images, int concept_id,
                           const AuditConfig& cfg) {
  Auditor auditor(base, delta, sched, cfg);
  return auditor.audit(concept_id, target_images, irrelevant_images);
}

void write_audit_report(const std::string& path_prefix, const AuditVerdict& verdict,
                        const AuditConfig& cfg, const std::vector<CceFeature>& target_features,
                        const nlohmann::json& extra_meta) {
  nlohmann::json report = verdict.to_json();
  report["config"] = cfg.to_json();
  report["meta"] = extra_meta;
  nlohmann::json feats = nlohmann::json::array();
  for (const CceFeature& f : target_features)
    feats.push_back({{"image_id", f.image_id}, {"values", f.values}});
  report["target_features"] = feats;
  {
    std::ofstream os(path_prefix + ".json");
    if (!os) throw FormatError("audit report: cannot write " + path_prefix + ".json");
    os << report.dump(1);
  }
  std::ofstream csv(path_prefix + ".csv");
  if (!csv) throw FormatError("audit report: cannot write " + path_prefix + ".csv");
  csv << "image_id";
  for (int t : cfg.t_grid) csv << ",cce_t" << t;
  csv << ",score,flagged\n";
  for (std::size_t i = 0; i < target_features.size(); ++i) {
    csv << target_features[i].image_id;
    for (double v : target_features[i].values) csv << ',' << v;
    csv << ',' << verdict.scores[i] << ',' << (verdict.flags[i] ? 1 : 0) << '\n';
  }
}

nlohmann::json features_to_json(const std::vector<DualBranchFeature>& features,
                                const std::vector<int>& t_grid) {
  nlohmann::json rows = nlohmann::json::array();
  for (const DualBranchFeature& f : features)
    rows.push_back(
        {{"image_id", f.image_id}, {"ce_full", f.ce_full}, {"ce_frozen", f.ce_frozen}});
  return nlohmann::json{{"kind", "dual_features"}, {"t_grid", t_grid}, {"rows", rows}};
}

std::vector<DualBranchFeature> features_from_json(const nlohmann::json& j) {
  if (!j.contains("kind") || j["kind"] != "dual_features")
    throw FormatError("features: wrong container kind");
  std::vector<DualBranchFeature> out;
  for (const auto& r : j.at("rows")) {
    DualBranchFeature f;
    f.image_id = r.at("image_id").get<int>();
    f.ce_full = r.at("ce_full").get<std::vector<double>>();
    f.ce_frozen = r.at("ce_frozen").get<std::vector<double>>();
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace dmaudit
