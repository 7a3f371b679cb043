#include "dmaudit/training.hpp"

#include <algorithm>
#include <functional>
#include <chrono>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dmaudit/parallel.hpp"

namespace dmaudit {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct SampleDraw {
  int image_index = 0;
  int t = 0;
  LatentImage eps;
};

struct SampleResult {
  GradMap grads;
  double loss = 0.0;       // denoising loss of the trainable model
  double base_loss = 0.0;  // base-model loss, regularization attack only
};

Matrix loss_gradient(const Matrix& predicted, const Matrix& eps) {
  Matrix d(predicted.rows(), predicted.cols());
  const double scale = 2.0 / static_cast<double>(predicted.size());
  for (std::size_t i = 0; i < predicted.size(); ++i)
    d.raw()[i] = scale * (predicted.raw()[i] - eps.raw()[i]);
  return d;
}

// Full-parameter gradient of one sample's denoising loss, text encoder
// included.
SampleResult base_sample_gradient(const Denoiser& model, const NoiseSchedule& sched,
                                  const LabeledImage& image, const SampleDraw& draw) {
  SampleResult out;
  const LatentImage zt = forward_noise(image.image, draw.t, draw.eps, sched);
  EncodeTrace etr;
  const PromptEmbedding p = encode_prompt_with_trace(model, image.caption_tokens, etr);
  ForwardTrace tr;
  const LatentImage pred = denoise_predict(model, zt, draw.t, p, &tr);
  out.loss = mse(pred.m, draw.eps.m);
  const Matrix d_out = loss_gradient(pred.m, draw.eps.m);
  const Matrix d_prompt = denoiser_backward(model, zt, p, tr, d_out, out.grads);
  text_encoder_backward(model, etr, d_prompt, out.grads);
  return out;
}

// Attention-weight gradient of one sample against the effective (base +
// delta) model; optionally evaluates the frozen base for the calibrated-error
// regularizer. Timesteps outside the gated window are masked to zero.
SampleResult lora_sample_gradient(const Denoiser& eff, const Denoiser* base,
                                  const NoiseSchedule& sched, const LabeledImage& image,
                                  const SampleDraw& draw, const TrainConfig& gated) {
  SampleResult out;
  if (draw.t < gated.t_lo || draw.t > gated.effective_t_hi(sched.T)) return out;
  const LatentImage zt = forward_noise(image.image, draw.t, draw.eps, sched);
  const PromptEmbedding p = encode_prompt(eff, image.caption_tokens);
  ForwardTrace tr;
  const LatentImage pred = denoise_predict(eff, zt, draw.t, p, &tr);
  out.loss = mse(pred.m, draw.eps.m);
  const Matrix d_out = loss_gradient(pred.m, draw.eps.m);
  denoiser_backward(eff, zt, p, tr, d_out, out.grads, GradScope::kAttentionOnly);
  if (base) {
    const LatentImage base_pred = denoise_predict(*base, zt, draw.t, p);
    out.base_loss = mse(base_pred.m, draw.eps.m);
  }
  return out;
}

void clip_gradients(GradMap& grads, double clip_norm) {
  if (clip_norm <= 0.0) return;
  const double norm = grads.global_norm();
  if (norm > clip_norm) grads.scale(clip_norm / norm);
}

// Adam state per trainable tensor.
struct AdamState {
  std::map<std::string, Matrix> m, v;
  long step = 0;
};

void apply_update(const TrainConfig& cfg, double lr, const GradMap& grads, AdamState& state,
                  const std::function<Matrix*(const std::string&)>& param_of) {
  if (cfg.optimizer == Optimizer::kSgd) {
    for (const auto& [name, g] : grads.g)
      if (Matrix* w = param_of(name)) *w -= lr * g;
    return;
  }
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads.g) {
    Matrix* w = param_of(name);
    if (!w) continue;
    auto mit = state.m.find(name);
    if (mit == state.m.end()) mit = state.m.emplace(name, Matrix(g.rows(), g.cols())).first;
    auto vit = state.v.find(name);
    if (vit == state.v.end()) vit = state.v.emplace(name, Matrix(g.rows(), g.cols())).first;
    Matrix& mm = mit->second;
    Matrix& vv = vit->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g.raw()[i];
      mm.raw()[i] = b1 * mm.raw()[i] + (1.0 - b1) * gi;
      vv.raw()[i] = b2 * vv.raw()[i] + (1.0 - b2) * gi * gi;
      const double mhat = mm.raw()[i] / bc1;
      const double vhat = vv.raw()[i] / bc2;
      w->raw()[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

double decayed_lr(const TrainConfig& cfg, int epoch) {
  if (!cfg.lr_decay) return cfg.lr;
  const double frac = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  if (frac < 0.6) return cfg.lr;
  if (frac < 0.85) return 0.5 * cfg.lr;
  return 0.25 * cfg.lr;
}

std::vector<std::size_t> epoch_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  return order;
}

// Applies the prompt-deviation derangement: every trigger token is replaced
// by the next concept's trigger in concept-id order.
std::vector<LabeledImage> deviate_prompts(const std::vector<LabeledImage>& images,
                                          const std::vector<ConceptSpec>& all_specs,
                                          std::map<int, int>* record) {
  if (all_specs.size() < 2)
    throw ArgumentError("prompt deviation: need at least two concepts to swap triggers");
  std::vector<ConceptSpec> sorted = all_specs;
  std::sort(sorted.begin(), sorted.end(),
            [](const ConceptSpec& a, const ConceptSpec& b) { return a.concept_id < b.concept_id; });
  std::map<int, int> trigger_swap;  // original trigger -> deviated trigger
  std::map<int, int> by_concept;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const ConceptSpec& from = sorted[i];
    const ConceptSpec& to = sorted[(i + 1) % sorted.size()];
    trigger_swap[from.trigger_token] = to.trigger_token;
    by_concept[from.concept_id] = to.trigger_token;
  }
  std::vector<LabeledImage> out = images;
  for (LabeledImage& im : out)
    for (int& tok : im.caption_tokens) {
      auto it = trigger_swap.find(tok);
      if (it != trigger_swap.end()) {
        tok = it->second;
        if (record) (*record)[im.concept_id] = it->second;
      }
    }
  return out;
}

}  // namespace

std::string to_string(AttackKind a) {
  switch (a) {
    case AttackKind::kNone:
      return "none";
    case AttackKind::kPromptDeviation:
      return "prompt_deviation";
    case AttackKind::kRegularization:
      return "regularization";
    case AttackKind::kEarlyFreezing:
      return "early_freezing";
    case AttackKind::kLateFreezing:
      return "late_freezing";
  }
  return "?";
}

std::string to_string(Optimizer o) { return o == Optimizer::kAdam ? "adam" : "sgd"; }

Optimizer optimizer_from_string(const std::string& s) {
  if (s == "adam") return Optimizer::kAdam;
  if (s == "sgd") return Optimizer::kSgd;
  throw ArgumentError("unknown optimizer: " + s);
}

AttackKind attack_from_string(const std::string& s) {
  if (s == "none") return AttackKind::kNone;
  if (s == "prompt_deviation" || s == "prompt-deviation") return AttackKind::kPromptDeviation;
  if (s == "regularization") return AttackKind::kRegularization;
  if (s == "early_freezing" || s == "early-freezing") return AttackKind::kEarlyFreezing;
  if (s == "late_freezing" || s == "late-freezing") return AttackKind::kLateFreezing;
  throw ArgumentError("unknown attack kind: " + s);
}

void TrainConfig::validate(int schedule_T) const {
  if (epochs < 1) throw ArgumentError("train config: epochs must be >= 1");
  if (lr <= 0.0) throw ArgumentError("train config: lr must be > 0");
  if (batch < 1) throw ArgumentError("train config: batch must be >= 1");
  if (lambda < 0.0) throw ArgumentError("train config: lambda must be >= 0");
  const int hi = effective_t_hi(schedule_T);
  if (t_lo < 1 || t_lo >= hi || hi > schedule_T)
    throw ArgumentError("train config: need 1 <= t_lo < t_hi <= T");
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{{"epochs", epochs}, {"lr", lr},           {"batch", batch},
                        {"seed", seed},     {"t_lo", t_lo},       {"t_hi", t_hi},
                        {"attack", to_string(attack)},            {"lambda", lambda},
                        {"clip_norm", clip_norm},                 {"lr_decay", lr_decay},
                        {"optimizer", dmaudit::to_string(optimizer)}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
  if (j.contains("lr")) c.lr = j["lr"].get<double>();
  if (j.contains("batch")) c.batch = j["batch"].get<int>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("t_lo")) c.t_lo = j["t_lo"].get<int>();
  if (j.contains("t_hi")) c.t_hi = j["t_hi"].get<int>();
  if (j.contains("attack")) c.attack = attack_from_string(j["attack"].get<std::string>());
  if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
  if (j.contains("clip_norm")) c.clip_norm = j["clip_norm"].get<double>();
  if (j.contains("lr_decay")) c.lr_decay = j["lr_decay"].get<bool>();
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j["optimizer"].get<std::string>());
  return c;
}

nlohmann::json TrainReport::to_json() const {
  return nlohmann::json{{"epoch_denoise_loss", epoch_denoise_loss},
                        {"epoch_reg_term", epoch_reg_term},
                        {"final_loss", final_loss},
                        {"wall_seconds", wall_seconds},
                        {"attack", to_string(attack)},
                        {"epochs_run", epochs_run},
                        {"deviated_triggers", deviated_triggers}};
}

std::string TrainReport::to_csv() const {
  std::ostringstream os;
  os << "epoch,denoise_loss,reg_term\n";
  for (std::size_t i = 0; i < epoch_denoise_loss.size(); ++i) {
    os << i << ',' << epoch_denoise_loss[i] << ','
       << (i < epoch_reg_term.size() ? epoch_reg_term[i] : 0.0) << '\n';
  }
  return os.str();
}

int draw_timestep(Rng& rng, const TrainConfig& cfg, int schedule_T) {
  return static_cast<int>(rng.uniform_int(cfg.t_lo, cfg.effective_t_hi(schedule_T)));
}

double denoising_loss(const Denoiser& model, const NoiseSchedule& sched, const LabeledImage& image,
                      int t, const LatentImage& eps) {
  const LatentImage zt = forward_noise(image.image, t, eps, sched);
  const PromptEmbedding p = encode_prompt(model, image.caption_tokens);
  return mse(denoise_predict(model, zt, t, p).m, eps.m);
}

double mean_denoising_loss(const Denoiser& model, const NoiseSchedule& sched,
                           const std::vector<LabeledImage>& images, int t, int draws,
                           std::uint64_t seed) {
  if (images.empty() || draws < 1) throw ArgumentError("mean_denoising_loss: empty evaluation");
  const Rng root(mix64(seed ^ 0x6576616c6f737321ull));
  std::vector<double> per_image(images.size(), 0.0);
  parallel_for(images.size(), [&](std::size_t i) {
    double acc = 0.0;
    for (int d = 0; d < draws; ++d) {
      Rng r = root.fork(static_cast<std::uint64_t>(images[i].image_id),
                        static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(d));
      LatentImage eps{Matrix(images[i].image.m.rows(), images[i].image.m.cols()),
                      images[i].image.side};
      for (double& v : eps.m.raw()) v = r.normal();
      acc += denoising_loss(model, sched, images[i], t, eps);
    }
    per_image[i] = acc / draws;
  });
  double total = 0.0;
  for (double v : per_image) total += v;
  return total / static_cast<double>(images.size());
}

Denoiser train_base(const std::vector<LabeledImage>& corpus, const DenoiserArch& arch,
                    const NoiseSchedule& sched, const TrainConfig& cfg, TrainReport* report,
                    Denoiser* last_good) {
  if (corpus.empty()) throw ArgumentError("train_base: empty corpus");
  if (cfg.attack != AttackKind::kNone)
    throw ArgumentError("train_base: attacks apply to fine-tuning, not base training");
  cfg.validate(sched.T);

  const auto start = Clock::now();
  Denoiser model = init_denoiser(arch, cfg.seed);
  Denoiser snapshot = model;
  AdamState opt_state;
  Rng rng(mix64(cfg.seed ^ 0x747261696e626173ull));

  TrainReport local;
  TrainReport& rep = report ? *report : local;
  rep.attack = cfg.attack;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(corpus.size(), rng);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch));
      const std::size_t n = end - begin;
      std::vector<SampleDraw> draws(n);
      for (std::size_t i = 0; i < n; ++i) {
        draws[i].image_index = static_cast<int>(order[begin + i]);
        draws[i].t = draw_timestep(rng, cfg, sched.T);
        draws[i].eps = LatentImage{Matrix(static_cast<std::size_t>(arch.pixels()),
                                          static_cast<std::size_t>(arch.channels)),
                                   arch.side};
        for (double& v : draws[i].eps.m.raw()) v = rng.normal();
      }
      std::vector<SampleResult> results(n);
      GradMap total;
      double batch_loss = 0.0;
      bool finite = true;
      try {
        parallel_for(n, [&](std::size_t i) {
          results[i] = base_sample_gradient(
              model, sched, corpus[static_cast<std::size_t>(draws[i].image_index)], draws[i]);
        });
        for (std::size_t i = 0; i < n; ++i) {
          total.add(results[i].grads);
          batch_loss += results[i].loss;
        }
        total.scale(1.0 / static_cast<double>(n));
        batch_loss /= static_cast<double>(n);
        finite = std::isfinite(batch_loss) && std::isfinite(total.global_norm());
      } catch (const NumericError&) {
        finite = false;
      }
      if (!finite) {
        if (last_good) *last_good = snapshot;
        rep.epochs_run = epoch;
        rep.wall_seconds = seconds_since(start);
        throw TrainingError("train_base: loss diverged at epoch " + std::to_string(epoch));
      }
      clip_gradients(total, cfg.clip_norm);
      apply_update(cfg, decayed_lr(cfg, epoch), total, opt_state,
                   [&](const std::string& name) { return &model.p(name); });
      epoch_loss += batch_loss * static_cast<double>(n);
      seen += n;
    }
    rep.epoch_denoise_loss.push_back(epoch_loss / static_cast<double>(seen));
    snapshot = model;
    rep.epochs_run = epoch + 1;
  }
  rep.final_loss = rep.epoch_denoise_loss.back();
  rep.wall_seconds = seconds_since(start);
  return model;
}

namespace {

LoraDelta finetune_impl(const Denoiser& base, const NoiseSchedule& sched,
                        const std::vector<LabeledImage>& images_in, int rank,
                        const TrainConfig& cfg, const std::vector<ConceptSpec>* all_specs,
                        int gamma, TrainReport* report) {
  if (images_in.empty()) throw ArgumentError("finetune: empty training data");
  TrainConfig gated = cfg;
  if (cfg.attack == AttackKind::kEarlyFreezing) {
    gated.t_lo = 1;
    gated.t_hi = gamma - 1;
  } else if (cfg.attack == AttackKind::kLateFreezing) {
    gated.t_lo = gamma + 1;
    gated.t_hi = sched.T;
  }
  gated.validate(sched.T);

  const auto start = Clock::now();
  TrainReport local;
  TrainReport& rep = report ? *report : local;
  rep.attack = cfg.attack;

  std::vector<LabeledImage> images = images_in;
  if (cfg.attack == AttackKind::kPromptDeviation) {
    if (!all_specs) throw ArgumentError("prompt deviation: concept universe required");
    images = deviate_prompts(images_in, *all_specs, &rep.deviated_triggers);
  }

  const bool regularized = cfg.attack == AttackKind::kRegularization;
  LoraDelta delta = init_delta(base, rank, {}, cfg.seed);
  LoraDelta snapshot = delta;
  AdamState opt_state;
  Rng rng(mix64(cfg.seed ^ 0x66696e6574756e65ull));
  const DenoiserArch& arch = base.arch;

  for (int epoch = 0; epoch < gated.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(images.size(), rng);
    double epoch_loss = 0.0, epoch_reg = 0.0;
    std::size_t seen = 0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(gated.batch)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(gated.batch));
      const std::size_t n = end - begin;
      std::vector<SampleDraw> draws(n);
      for (std::size_t i = 0; i < n; ++i) {
        draws[i].image_index = static_cast<int>(order[begin + i]);
        draws[i].t = draw_timestep(rng, gated, sched.T);
        draws[i].eps = LatentImage{Matrix(static_cast<std::size_t>(arch.pixels()),
                                          static_cast<std::size_t>(arch.channels)),
                                   arch.side};
        for (double& v : draws[i].eps.m.raw()) v = rng.normal();
      }
      const Denoiser eff = effective_params(base, delta, ApplyMode::kFullFinetuned);
      std::vector<SampleResult> results(n);
      GradMap total;
      double loss_ft = 0.0, loss_base = 0.0;
      bool finite = true;
      try {
        parallel_for(n, [&](std::size_t i) {
          results[i] = lora_sample_gradient(eff, regularized ? &base : nullptr, sched,
                                            images[static_cast<std::size_t>(draws[i].image_index)],
                                            draws[i], gated);
        });
        for (std::size_t i = 0; i < n; ++i) {
          total.add(results[i].grads);
          loss_ft += results[i].loss;
          loss_base += results[i].base_loss;
        }
        total.scale(1.0 / static_cast<double>(n));
        loss_ft /= static_cast<double>(n);
        loss_base /= static_cast<double>(n);
      } catch (const NumericError&) {
        finite = false;
      }
      if (!finite) {
        rep.epochs_run = epoch;
        rep.wall_seconds = seconds_since(start);
        throw TrainingError("finetune: loss diverged at epoch " + std::to_string(epoch));
      }

      // The squared calibrated-error penalty scales the shared denoising
      // gradient: d/dW' [L + lambda * Lce^2] = (1 + 2 lambda Lce) dL/dW'.
      double coef = 1.0;
      if (regularized) {
        const double lce = loss_ft - loss_base;
        coef = 1.0 + 2.0 * cfg.lambda * lce;
        epoch_reg += cfg.lambda * lce * lce;
      }

      // Chain the target-weight gradients into the low-rank factors.
      GradMap factor_grads;
      for (const auto& [name, entry] : delta.entries) {
        auto it = total.g.find(name);
        if (it == total.g.end()) continue;
        Matrix dw = it->second;
        dw *= coef * entry.alpha;
        factor_grads.g.emplace(name + ".B", matmul_a_bt(dw, entry.a));
        Matrix da(entry.a.rows(), entry.a.cols());
        matmul_at_b_acc(entry.b, dw, da);
        factor_grads.g.emplace(name + ".A", std::move(da));
      }
      if (!std::isfinite(loss_ft) || !std::isfinite(factor_grads.global_norm())) {
        rep.epochs_run = epoch;
        rep.wall_seconds = seconds_since(start);
        throw TrainingError("finetune: loss diverged at epoch " + std::to_string(epoch));
      }
      clip_gradients(factor_grads, gated.clip_norm);
      apply_update(gated, decayed_lr(gated, epoch), factor_grads, opt_state,
                   [&](const std::string& name) -> Matrix* {
                     const bool is_b = name.size() > 2 && name.substr(name.size() - 2) == ".B";
                     const std::string target = name.substr(0, name.size() - 2);
                     auto it = delta.entries.find(target);
                     if (it == delta.entries.end()) return nullptr;
                     return is_b ? &it->second.b : &it->second.a;
                   });
      epoch_loss += loss_ft * static_cast<double>(n);
      seen += n;
      ++batches;
    }
    rep.epoch_denoise_loss.push_back(epoch_loss / static_cast<double>(seen));
    if (regularized) rep.epoch_reg_term.push_back(epoch_reg / static_cast<double>(batches));
    snapshot = delta;
    rep.epochs_run = epoch + 1;
  }
  rep.final_loss = rep.epoch_denoise_loss.back();
  rep.wall_seconds = seconds_since(start);
  return delta;
}

}  // namespace

GradMap finetune_sample_gradient(const Denoiser& effective, const NoiseSchedule& sched,
                                 const LabeledImage& image, int t, const LatentImage& eps,
                                 const TrainConfig& gated_cfg) {
  SampleDraw draw;
  draw.t = t;
  draw.eps = eps;
  return lora_sample_gradient(effective, nullptr, sched, image, draw, gated_cfg).grads;
}

LoraDelta finetune_concept(const Denoiser& base, const NoiseSchedule& sched,
                           const std::vector<LabeledImage>& images, int rank,
                           const TrainConfig& cfg, TrainReport* report) {
  if (cfg.attack != AttackKind::kNone)
    throw ArgumentError("finetune_concept: use finetune_with_attack for attacks");
  return finetune_impl(base, sched, images, rank, cfg, nullptr, sched.T / 2, report);
}

LoraDelta finetune_with_attack(const Denoiser& base, const NoiseSchedule& sched,
                               const std::vector<LabeledImage>& images, int rank,
                               const TrainConfig& cfg, const std::vector<ConceptSpec>& all_specs,
                               int gamma, TrainReport* report) {
  if (cfg.attack == AttackKind::kNone)
    throw ArgumentError("finetune_with_attack: attack must not be none");
  return finetune_impl(base, sched, images, rank, cfg, &all_specs, gamma, report);
}

}  // namespace dmaudit
