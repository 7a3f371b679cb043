#include "dmaudit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dmaudit/parallel.hpp"

namespace dmaudit {

namespace {

std::vector<double> midranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size(), 0.0);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  return rank;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

void mean_sd(const std::vector<double>& v, double& mean, double& sd) {
  mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
}

}  // namespace

Matrix lemma1_gradient(const Matrix& x, const Matrix& p, const Matrix& wq, const Matrix& wk,
                       const Matrix& wv, std::size_t pixel_row) {
  if (x.cols() != wq.rows() || p.cols() != wk.rows() || p.cols() != wv.rows() ||
      wq.cols() != wk.cols())
    throw ArgumentError("lemma1_gradient: dimension mismatch");
  if (pixel_row >= x.rows()) throw ArgumentError("lemma1_gradient: pixel row out of range");

  const std::size_t n = p.rows(), dim = p.cols(), dv = wv.cols(), d = wq.cols();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  // q_i, scores and attention row for the requested pixel.
  Matrix xi(1, x.cols());
  for (std::size_t c = 0; c < x.cols(); ++c) xi(0, c) = x(pixel_row, c);
  const Matrix qi = matmul(xi, wq);                      // 1 x d
  const Matrix k = matmul(p, wk);                        // n x d
  Matrix logits = matmul_a_bt(qi, k);                    // 1 x n
  logits *= inv_sqrt_d;
  const std::vector<double> s = softmax(logits.row(0));  // attention row S_i

  const Matrix v = matmul(p, wv);        // n x dv
  const Matrix ji = softmax_jacobian(s); // n x n
  const Matrix m = matmul(ji, v);        // n x dv, softmax-route factor

  // g = Wk q_i, the dA/dp direction shared by every prompt row.
  std::vector<double> g(dim, 0.0);
  for (std::size_t c = 0; c < dim; ++c) {
    double acc = 0.0;
    for (std::size_t e = 0; e < d; ++e) acc += wk(c, e) * qi(0, e);
    g[c] = acc;
  }

  Matrix jac(n * dim, dv);
  for (std::size_t l = 0; l < n; ++l)
    for (std::size_t c = 0; c < dim; ++c)
      for (std::size_t a = 0; a < dv; ++a)
        jac(l * dim + c, a) = inv_sqrt_d * g[c] * m(l, a) + s[l] * wv(c, a);
  return jac;
}

LipschitzReport theorem_bound_report(const Matrix& x, const Matrix& p, const Matrix& wq,
                                     const Matrix& wk, const Matrix& wv, double p_star) {
  LipschitzReport rep;
  rep.p_star = p_star;
  const double n = static_cast<double>(p.rows());
  const double d = static_cast<double>(wq.cols());
  rep.c1 = std::sqrt(n) / (2.0 * std::sqrt(d)) * spectral_norm(matmul(x, wq)) *
           spectral_norm(wk) * spectral_norm(wv);
  rep.c2 = spectral_norm(wv);
  rep.bound = rep.c1 * p_star + rep.c2;
  for (std::size_t i = 0; i < x.rows(); ++i)
    rep.observed = std::max(rep.observed, spectral_norm(lemma1_gradient(x, p, wq, wk, wv, i)));
  return rep;
}

double max_softmax_jacobian_norm(int dims, int samples, std::uint64_t seed) {
  if (dims < 2 || samples < 1) throw ArgumentError("max_softmax_jacobian_norm: bad arguments");
  Rng rng(mix64(seed ^ 0x73696d706c657821ull));
  double worst = 0.0;
  for (int it = 0; it < samples; ++it) {
    std::vector<double> s(static_cast<std::size_t>(dims));
    // Mix of dirichlet-ish draws and near-two-point distributions, which is
    // where the spectral norm peaks.
    double sum = 0.0;
    if (it % 3 == 0) {
      const std::size_t a = static_cast<std::size_t>(rng.uniform_int(0, dims - 1));
      std::size_t b = static_cast<std::size_t>(rng.uniform_int(0, dims - 1));
      if (b == a) b = (a + 1) % static_cast<std::size_t>(dims);
      const double w = rng.uniform(0.0, 1.0);
      for (double& v : s) v = 1e-6;
      s[a] = w;
      s[b] = 1.0 - w;
      for (double v : s) sum += v;
    } else {
      for (double& v : s) {
        v = -std::log(std::max(1e-300, rng.uniform()));
        sum += v;
      }
    }
    for (double& v : s) v /= sum;
    worst = std::max(worst, spectral_norm(softmax_jacobian(s)));
  }
  return worst;
}

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 3)
    throw ArgumentError("spearman_rho: need matched series of length >= 3");
  return pearson(midranks(a), midranks(b));
}

std::string SensitivityCurve::to_csv() const {
  std::ostringstream os;
  os << "t,norm_s,norm_j\n";
  for (std::size_t i = 0; i < timesteps.size(); ++i)
    os << timesteps[i] << ',' << norm_s[i] << ',' << norm_j[i] << '\n';
  return os.str();
}

SensitivityCurve sensitivity_curve(const Denoiser& model, const std::vector<LabeledImage>& images,
                                   const std::vector<std::vector<int>>& prompts,
                                   const NoiseSchedule& sched, const std::vector<int>& t_grid,
                                   std::uint64_t seed, bool model_trained, bool frobenius) {
  if (images.size() != prompts.size())
    throw ArgumentError("sensitivity_curve: images and prompts must pair up");
  if (images.size() < 20)
    throw ArgumentError("sensitivity_curve: need at least 20 (image, prompt) pairs");

  SensitivityCurve curve;
  curve.timesteps = t_grid;
  curve.sample_count = static_cast<int>(images.size());
  curve.warning_untrained = !model_trained;
  curve.norm_s.assign(t_grid.size(), 0.0);
  curve.norm_j.assign(t_grid.size(), 0.0);

  const Rng root(mix64(seed ^ 0x73656e7363757276ull));
  std::vector<std::pair<double, double>> per_t(t_grid.size());
  parallel_for(t_grid.size(), [&](std::size_t ti) {
    const int t = t_grid[ti];
    double acc_s = 0.0, acc_j = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
      Rng r = root.fork(static_cast<std::uint64_t>(images[i].image_id),
                        static_cast<std::uint64_t>(t));
      LatentImage eps{Matrix(images[i].image.m.rows(), images[i].image.m.cols()),
                      images[i].image.side};
      for (double& v : eps.m.raw()) v = r.normal();
      const LatentImage zt = forward_noise(images[i].image, t, eps, sched);
      const PromptEmbedding p = encode_prompt(model, prompts[i]);
      ForwardTrace trace;
      denoise_predict(model, zt, t, p, &trace);
      for (const BlockTrace& bt : trace.blocks) {
        const Matrix& s = bt.cross_attn.s;
        double col = 0.0;
        for (std::size_t row = 0; row < s.rows(); ++row) col += s(row, 0) * s(row, 0);
        acc_s += std::sqrt(col);
        double jn = 0.0;
        for (std::size_t row = 0; row < s.rows(); ++row) {
          const Matrix j = softmax_jacobian(s.row(row));
          jn += frobenius ? j.frobenius_norm() : spectral_norm(j);
        }
        acc_j += jn / static_cast<double>(s.rows());
        ++count;
      }
    }
    per_t[ti] = {acc_s / static_cast<double>(count), acc_j / static_cast<double>(count)};
  });
  for (std::size_t ti = 0; ti < t_grid.size(); ++ti) {
    curve.norm_s[ti] = per_t[ti].first;
    curve.norm_j[ti] = per_t[ti].second;
  }
  std::vector<double> ts(t_grid.begin(), t_grid.end());
  curve.spearman_rho_j = spearman_rho(curve.norm_j, ts);
  return curve;
}

std::string CeCurves::to_csv() const {
  std::ostringstream os;
  os << "t,target_mean,target_sd,irrelevant_mean,irrelevant_sd,cohen_d\n";
  for (std::size_t i = 0; i < timesteps.size(); ++i)
    os << timesteps[i] << ',' << target_mean[i] << ',' << target_sd[i] << ','
       << irrelevant_mean[i] << ',' << irrelevant_sd[i] << ',' << cohen_d[i] << '\n';
  return os.str();
}

CeCurves ce_curves(const Denoiser& base, const LoraDelta& delta, const NoiseSchedule& sched,
                   const std::vector<LabeledImage>& targets,
                   const std::vector<LabeledImage>& irrelevant, const std::vector<int>& t_grid,
                   int draws, std::uint64_t seed) {
  if (targets.empty() || irrelevant.empty()) throw ArgumentError("ce_curves: empty image sets");
  const Denoiser full = effective_params(base, delta, ApplyMode::kFullFinetuned);
  const Rng root(mix64(seed ^ 0x63656375727665ull));

  CeCurves curves;
  curves.timesteps = t_grid;

  auto collect = [&](const std::vector<LabeledImage>& images, int t) {
    std::vector<double> ces(images.size());
    parallel_for(images.size(), [&](std::size_t i) {
      // Diagnostic mode: true captions, full fine-tuned branch.
      const PromptEmbedding p = encode_prompt(base, images[i].caption_tokens);
      ces[i] = calibrated_error_with_noise(base, full, images[i].image, p, t, sched, draws, true,
                                           [&](int d) {
                                             Rng r = root.fork(
                                                 static_cast<std::uint64_t>(images[i].image_id),
                                                 static_cast<std::uint64_t>(t),
                                                 static_cast<std::uint64_t>(d));
                                             LatentImage eps{Matrix(images[i].image.m.rows(),
                                                                    images[i].image.m.cols()),
                                                             images[i].image.side};
                                             for (double& v : eps.m.raw()) v = r.normal();
                                             return eps;
                                           });
    });
    return ces;
  };

  for (int t : t_grid) {
    const std::vector<double> tgt = collect(targets, t);
    const std::vector<double> irr = collect(irrelevant, t);
    double tm, tsd, im, isd;
    mean_sd(tgt, tm, tsd);
    mean_sd(irr, im, isd);
    curves.target_mean.push_back(tm);
    curves.target_sd.push_back(tsd);
    curves.irrelevant_mean.push_back(im);
    curves.irrelevant_sd.push_back(isd);
    const double pooled = std::sqrt(0.5 * (tsd * tsd + isd * isd));
    curves.cohen_d.push_back(pooled > 0.0 ? (im - tm) / pooled : 0.0);
  }
  return curves;
}

std::string RocTable::to_csv() const {
  std::ostringstream os;
  os << "tau,tpr,fpr,accuracy\n";
  for (const RocRow& r : rows)
    os << r.tau << ',' << r.tpr << ',' << r.fpr << ',' << r.accuracy << '\n';
  return os.str();
}

RocTable threshold_diagnostic(const std::vector<double>& target_ces,
                              const std::vector<double>& irrelevant_ces,
                              const std::vector<double>& tau_grid) {
  if (target_ces.empty() || irrelevant_ces.empty())
    throw ArgumentError("threshold_diagnostic: empty inputs");
  RocTable table;
  table.best_accuracy = -1.0;
  for (double tau : tau_grid) {
    RocRow row;
    row.tau = tau;
    int tp = 0, fp = 0;
    for (double ce : target_ces)
      if (ce < tau) ++tp;
    for (double ce : irrelevant_ces)
      if (ce < tau) ++fp;
    row.tpr = static_cast<double>(tp) / static_cast<double>(target_ces.size());
    row.fpr = static_cast<double>(fp) / static_cast<double>(irrelevant_ces.size());
    row.accuracy = (static_cast<double>(tp) +
                    static_cast<double>(irrelevant_ces.size() - static_cast<std::size_t>(fp))) /
                   static_cast<double>(target_ces.size() + irrelevant_ces.size());
    if (row.accuracy > table.best_accuracy) {
      table.best_accuracy = row.accuracy;
      table.best_tau = tau;
    }
    table.rows.push_back(row);
  }
  return table;
}

double ConfusionStats::accuracy() const {
  const int n = tp + fp + tn + fn;
  return n > 0 ? static_cast<double>(tp + tn) / n : 0.0;
}
double ConfusionStats::precision() const {
  return tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
}
double ConfusionStats::recall() const {
  return tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
}
double ConfusionStats::f1() const {
  const double p = precision(), r = recall();
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

namespace {

FeatureRow row_from_dual(const DualBranchFeature& dual, const std::vector<int>& t_grid, int gamma,
                         const std::vector<std::size_t>& dims) {
  FeatureRow row;
  if (dims.empty()) {
    for (std::size_t i = 0; i < t_grid.size(); ++i)
      row.values.push_back(t_grid[i] <= gamma ? dual.ce_full[i] : dual.ce_frozen[i]);
  } else {
    for (std::size_t i : dims)
      row.values.push_back(t_grid[i] <= gamma ? dual.ce_full[i] : dual.ce_frozen[i]);
  }
  return row;
}

}  // namespace

ConfusionStats sweep_accuracy(const SweepInputs& in, int gamma, int budget,
                              const std::vector<std::size_t>& dims) {
  ConfusionStats stats;
  for (const SweepModelFeatures& m : in.models) {
    const int usable = std::min<int>(budget, static_cast<int>(m.irrelevant.size()));
    std::vector<FeatureRow> rows;
    rows.reserve(static_cast<std::size_t>(usable));
    for (int i = 0; i < usable; ++i)
      rows.push_back(row_from_dual(m.irrelevant[static_cast<std::size_t>(i)], in.cfg.t_grid,
                                   gamma, dims));
    const IsolationForest forest =
        IsolationForest::fit(rows, in.cfg.n_trees, in.cfg.subsample,
                             mix64(in.cfg.seed ^ 0x666f726573743231ull), in.cfg.quantile);
    int yes = 0;
    for (const DualBranchFeature& d : m.targets)
      if (forest.is_outlier(row_from_dual(d, in.cfg.t_grid, gamma, dims))) ++yes;
    const bool verdict = 2 * yes > static_cast<int>(m.targets.size());
    if (m.positive && verdict)
      ++stats.tp;
    else if (m.positive && !verdict)
      ++stats.fn;
    else if (!m.positive && verdict)
      ++stats.fp;
    else
      ++stats.tn;
  }
  return stats;
}

std::vector<SweepResult> run_sweeps(const SweepInputs& caption,
                                    const std::map<std::string, SweepInputs>& strategy_variants,
                                    const std::vector<int>& budget_grid) {
  if (caption.models.empty()) throw MissingArtifactError("run_sweeps: no benchmark models");
  const int T = caption.schedule_T;
  const int default_budget = caption.cfg.irrelevant_budget;
  std::vector<SweepResult> out;

  {  // Cutoff sweep over {T/8, ..., T}.
    std::ostringstream os;
    os << "gamma,accuracy,precision,recall,f1\n";
    for (int k = 1; k <= 8; ++k) {
      const int gamma = k * T / 8;
      const ConfusionStats s = sweep_accuracy(caption, gamma, default_budget);
      os << gamma << ',' << s.accuracy() << ',' << s.precision() << ',' << s.recall() << ','
         << s.f1() << '\n';
    }
    out.push_back({"gamma_sweep", os.str()});
  }

  {  // Individual-timestep performance at the default cutoff.
    std::ostringstream os;
    os << "t,accuracy,precision,recall,f1\n";
    for (std::size_t i = 0; i < caption.cfg.t_grid.size(); ++i) {
      const ConfusionStats s = sweep_accuracy(caption, caption.cfg.gamma, default_budget, {i});
      os << caption.cfg.t_grid[i] << ',' << s.accuracy() << ',' << s.precision() << ','
         << s.recall() << ',' << s.f1() << '\n';
    }
    out.push_back({"timestep_sweep", os.str()});
  }

  {  // Calibration-budget sweep.
    std::ostringstream os;
    os << "budget,accuracy,precision,recall,f1\n";
    for (int b : budget_grid) {
      const ConfusionStats s = sweep_accuracy(caption, caption.cfg.gamma, b);
      os << b << ',' << s.accuracy() << ',' << s.precision() << ',' << s.recall() << ',' << s.f1()
         << '\n';
    }
    out.push_back({"budget_sweep", os.str()});
  }

  {  // Conditional calibration on (gamma = T/2) vs off (gamma = T).
    std::ostringstream os;
    os << "mode,gamma,accuracy,precision,recall,f1\n";
    const ConfusionStats on = sweep_accuracy(caption, T / 2, default_budget);
    const ConfusionStats off = sweep_accuracy(caption, T, default_budget);
    os << "conditional," << T / 2 << ',' << on.accuracy() << ',' << on.precision() << ','
       << on.recall() << ',' << on.f1() << '\n';
    os << "unconditional," << T << ',' << off.accuracy() << ',' << off.precision() << ','
       << off.recall() << ',' << off.f1() << '\n';
    out.push_back({"conditional_calibration", os.str()});
  }

  {  // Prompt strategy x stage grid (single-timestep accuracy per strategy).
    std::ostringstream os;
    os << "strategy,t,accuracy\n";
    auto emit = [&](const std::string& name, const SweepInputs& in) {
      for (std::size_t i = 0; i < in.cfg.t_grid.size(); ++i) {
        const ConfusionStats s = sweep_accuracy(in, in.cfg.gamma, default_budget, {i});
        os << name << ',' << in.cfg.t_grid[i] << ',' << s.accuracy() << '\n';
      }
    };
    emit(to_string(caption.cfg.strategy), caption);
    for (const auto& [name, in] : strategy_variants) emit(name, in);
    out.push_back({"prompt_stage_sweep", os.str()});
  }

  {  // Concept-count grouping.
    std::ostringstream os;
    os << "concepts_per_model,accuracy,models\n";
    std::map<int, SweepInputs> grouped;
    for (const SweepModelFeatures& m : caption.models) {
      auto& slot = grouped[m.concept_count];
      slot.cfg = caption.cfg;
      slot.schedule_T = caption.schedule_T;
      slot.models.push_back(m);
    }
    for (const auto& [count, in] : grouped) {
      const ConfusionStats s = sweep_accuracy(in, in.cfg.gamma, default_budget);
      os << count << ',' << s.accuracy() << ',' << in.models.size() << '\n';
    }
    out.push_back({"concept_count_sweep", os.str()});
  }

  return out;
}

}  // namespace dmaudit
