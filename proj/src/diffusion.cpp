#include "dmaudit/diffusion.hpp"

#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "dmaudit/tensorio.hpp"

namespace dmaudit {

namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) +
         x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

Matrix colsum(const Matrix& m) {
  Matrix s(1, m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) s(0, j) += m(i, j);
  return s;
}

// Row-wise layer norm with shared scale/shift vectors.
Matrix ln_rows(const Matrix& x, const Matrix& scale, const Matrix& shift, LnTrace* tr) {
  const std::size_t d = x.cols();
  if (scale.cols() != d || shift.cols() != d)
    throw ArgumentError("layer norm: scale/shift width mismatch");
  Matrix y(x.rows(), d);
  if (tr) {
    tr->x_hat = Matrix(x.rows(), d);
    tr->inv_std.assign(x.rows(), 0.0);
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x(r, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x(r, j) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (x(r, j) - mu) * inv;
      y(r, j) = xh * scale(0, j) + shift(0, j);
      if (tr) tr->x_hat(r, j) = xh;
    }
    if (tr) tr->inv_std[r] = inv;
  }
  return y;
}

Matrix ln_rows_backward(const Matrix& d_y, const LnTrace& tr, const Matrix& scale,
                        Matrix* d_scale, Matrix* d_shift) {
  const std::size_t rows = d_y.rows(), d = d_y.cols();
  Matrix dx(rows, d);
  const double dn = static_cast<double>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double g = d_y(r, j) * scale(0, j);
      m1 += g;
      m2 += g * tr.x_hat(r, j);
    }
    m1 /= dn;
    m2 /= dn;
    const double inv = tr.inv_std[r];
    for (std::size_t j = 0; j < d; ++j) {
      const double g = d_y(r, j) * scale(0, j);
      dx(r, j) = inv * (g - m1 - tr.x_hat(r, j) * m2);
      if (d_scale) (*d_scale)(0, j) += d_y(r, j) * tr.x_hat(r, j);
      if (d_shift) (*d_shift)(0, j) += d_y(r, j);
    }
  }
  return dx;
}

void softmax_rows_inplace(Matrix& a) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = a.row(r);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
}

// Scaled dot-product attention over given key/value source rows.
// Returns the residual contribution O * Wo and fills the trace.
Matrix attn_forward(const Matrix& u, const Matrix& kv, const Matrix& wq, const Matrix& wk,
                    const Matrix& wv, const Matrix& wo, AttnTrace* tr) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(wq.cols()));
  Matrix q = matmul(u, wq);
  Matrix k = matmul(kv, wk);
  Matrix v = matmul(kv, wv);
  Matrix s = matmul_a_bt(q, k);
  s *= inv_sqrt_d;
  softmax_rows_inplace(s);
  Matrix o = matmul(s, v);
  Matrix r = matmul(o, wo);
  if (tr) {
    tr->u = u;
    tr->q = std::move(q);
    tr->k = std::move(k);
    tr->v = std::move(v);
    tr->s = std::move(s);
    tr->o = std::move(o);
  }
  return r;
}

// Backward through one attention sublayer. d_r is the gradient wrt the
// sublayer's residual contribution. Returns dU; when d_kv is non-null (cross
// attention) the gradient wrt the key/value source rows is accumulated there.
Matrix attn_backward(const Matrix& d_r, const AttnTrace& tr, const Matrix& kv, const Matrix& wq,
                     const Matrix& wk, const Matrix& wv, const Matrix& wo, Matrix& g_wq,
                     Matrix& g_wk, Matrix& g_wv, Matrix& g_wo, Matrix* d_kv, bool self_attention) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(wq.cols()));
  matmul_at_b_acc(tr.o, d_r, g_wo);
  Matrix d_o = matmul_a_bt(d_r, wo);
  Matrix d_s = matmul_a_bt(d_o, tr.v);
  Matrix d_v(tr.v.rows(), tr.v.cols());
  matmul_at_b_acc(tr.s, d_o, d_v);

  // Softmax backward per row, folding in the 1/sqrt(d) score scaling.
  Matrix d_a(d_s.rows(), d_s.cols());
  for (std::size_t i = 0; i < d_s.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d_s.cols(); ++j) acc += d_s(i, j) * tr.s(i, j);
    for (std::size_t j = 0; j < d_s.cols(); ++j)
      d_a(i, j) = tr.s(i, j) * (d_s(i, j) - acc) * inv_sqrt_d;
  }

  Matrix d_q = matmul(d_a, tr.k);
  Matrix d_k(tr.k.rows(), tr.k.cols());
  matmul_at_b_acc(d_a, tr.q, d_k);

  matmul_at_b_acc(tr.u, d_q, g_wq);
  Matrix d_u = matmul_a_bt(d_q, wq);
  if (self_attention) {
    matmul_at_b_acc(tr.u, d_k, g_wk);
    matmul_at_b_acc(tr.u, d_v, g_wv);
    d_u += matmul_a_bt(d_k, wk);
    d_u += matmul_a_bt(d_v, wv);
  } else {
    matmul_at_b_acc(kv, d_k, g_wk);
    matmul_at_b_acc(kv, d_v, g_wv);
    if (d_kv) {
      *d_kv += matmul_a_bt(d_k, wk);
      *d_kv += matmul_a_bt(d_v, wv);
    }
  }
  return d_u;
}

std::string blk(int i, const char* suffix) { return "blk" + std::to_string(i) + "." + suffix; }

}  // namespace

nlohmann::json DenoiserArch::to_json() const {
  return nlohmann::json{{"side", side},         {"channels", channels}, {"width", width},
                        {"attn_dim", attn_dim}, {"text_dim", text_dim}, {"ffn_hidden", ffn_hidden},
                        {"blocks", blocks},     {"vocab", vocab}};
}

DenoiserArch DenoiserArch::from_json(const nlohmann::json& j) {
  DenoiserArch a;
  a.side = j.at("side").get<int>();
  a.channels = j.at("channels").get<int>();
  a.width = j.at("width").get<int>();
  a.attn_dim = j.at("attn_dim").get<int>();
  a.text_dim = j.at("text_dim").get<int>();
  a.ffn_hidden = j.at("ffn_hidden").get<int>();
  a.blocks = j.at("blocks").get<int>();
  a.vocab = j.at("vocab").get<int>();
  return a;
}

LatentImage gaussian_latent(const DenoiserArch& arch, Rng& rng) {
  LatentImage z = LatentImage::zeros(arch);
  for (double& v : z.m.raw()) v = rng.normal();
  return z;
}

const Matrix& Denoiser::p(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw IntegrityError("denoiser: missing parameter " + name);
  return it->second;
}

Matrix& Denoiser::p(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw IntegrityError("denoiser: missing parameter " + name);
  return it->second;
}

std::vector<std::string> Denoiser::param_names() const {
  std::vector<std::string> names;
  names.reserve(params.size());
  for (const auto& [k, v] : params) names.push_back(k);
  return names;
}

bool Denoiser::is_cross_attention_param(const std::string& name) {
  return name.find(".cross.") != std::string::npos;
}

std::vector<std::string> Denoiser::attention_param_names() const {
  std::vector<std::string> names;
  for (const auto& [k, v] : params)
    if (k.find(".self.") != std::string::npos || k.find(".cross.") != std::string::npos)
      names.push_back(k);
  return names;
}

std::uint64_t Denoiser::checksum() const {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& [name, m] : params) {
    h = hash_bytes(name.data(), name.size(), h);
    h = hash_bytes(m.raw().data(), m.raw().size() * sizeof(double), h);
  }
  return h;
}

void Denoiser::validate() const {
  for (const auto& [name, m] : params)
    if (!m.all_finite()) throw NumericError("denoiser: non-finite parameter " + name);
}

Denoiser init_denoiser(const DenoiserArch& arch, std::uint64_t seed) {
  if (arch.side < 2 || arch.width < 4 || arch.attn_dim < 2 || arch.text_dim < 2 ||
      arch.blocks < 1 || arch.vocab < 2)
    throw ArgumentError("init_denoiser: implausible architecture");
  Rng rng(mix64(seed ^ 0x64656e6f69736572ull));
  Denoiser d;
  d.arch = arch;

  auto randn = [&rng](std::size_t r, std::size_t c, double stddev) {
    Matrix m(r, c);
    for (double& v : m.raw()) v = rng.normal(0.0, stddev);
    return m;
  };
  auto ones = [](std::size_t r, std::size_t c) { return Matrix(r, c, 1.0); };
  auto zeros = [](std::size_t r, std::size_t c) { return Matrix(r, c, 0.0); };

  const auto w = static_cast<std::size_t>(arch.width);
  const auto dd = static_cast<std::size_t>(arch.attn_dim);
  const auto td = static_cast<std::size_t>(arch.text_dim);
  const auto hh = static_cast<std::size_t>(arch.ffn_hidden);
  const auto px = static_cast<std::size_t>(arch.pixels());
  const auto ch = static_cast<std::size_t>(arch.channels);

  d.params["text.embed"] = randn(static_cast<std::size_t>(arch.vocab), td, 1.0);
  d.params["text.ln.scale"] = ones(1, td);
  d.params["text.ln.shift"] = zeros(1, td);
  d.params["in.weight"] = randn(ch, w, 1.0);
  d.params["in.bias"] = zeros(1, w);
  d.params["pos"] = randn(px, w, 0.5);
  for (int b = 0; b < arch.blocks; ++b) {
    d.params[blk(b, "ln1.scale")] = ones(1, w);
    d.params[blk(b, "ln1.shift")] = zeros(1, w);
    d.params[blk(b, "self.wq")] = randn(w, dd, 1.0 / std::sqrt(static_cast<double>(w)));
    d.params[blk(b, "self.wk")] = randn(w, dd, 1.0 / std::sqrt(static_cast<double>(w)));
    d.params[blk(b, "self.wv")] = randn(w, dd, 1.0 / std::sqrt(static_cast<double>(w)));
    d.params[blk(b, "self.wo")] = randn(dd, w, 1.0 / std::sqrt(static_cast<double>(dd)));
    d.params[blk(b, "ln2.scale")] = ones(1, w);
    d.params[blk(b, "ln2.shift")] = zeros(1, w);
    d.params[blk(b, "cross.wq")] = randn(w, dd, 1.0 / std::sqrt(static_cast<double>(w)));
    d.params[blk(b, "cross.wk")] = randn(td, dd, 1.0 / std::sqrt(static_cast<double>(td)));
    d.params[blk(b, "cross.wv")] = randn(td, dd, 1.0 / std::sqrt(static_cast<double>(td)));
    d.params[blk(b, "cross.wo")] = randn(dd, w, 1.0 / std::sqrt(static_cast<double>(dd)));
    d.params[blk(b, "ln3.scale")] = ones(1, w);
    d.params[blk(b, "ln3.shift")] = zeros(1, w);
    d.params[blk(b, "ffn.w1")] = randn(w, hh, 1.0 / std::sqrt(static_cast<double>(w)));
    d.params[blk(b, "ffn.b1")] = zeros(1, hh);
    d.params[blk(b, "ffn.w2")] = randn(hh, w, 1.0 / std::sqrt(static_cast<double>(hh)));
    d.params[blk(b, "ffn.b2")] = zeros(1, w);
  }
  d.params["out.ln.scale"] = ones(1, w);
  d.params["out.ln.shift"] = zeros(1, w);
  d.params["out.weight"] = randn(w, ch, 1.0 / std::sqrt(static_cast<double>(w)));
  d.params["out.bias"] = zeros(1, ch);
  return d;
}

void save_checkpoint(const Denoiser& model, const NoiseSchedule& sched, const std::string& path) {
  nlohmann::json header;
  header["kind"] = "denoiser";
  header["arch"] = model.arch.to_json();
  header["schedule_kind"] = to_string(sched.kind);
  header["schedule_T"] = sched.T;
  header["vocab"] = model.arch.vocab;
  std::vector<std::pair<std::string, Matrix>> tensors(model.params.begin(), model.params.end());
  save_tensor_file(path, header, tensors);
}

Checkpoint load_checkpoint(const std::string& path) {
  TensorFile f = load_tensor_file(path);
  nlohmann::json h = f.header();
  if (!h.contains("kind") || h["kind"].get<std::string>() != "denoiser")
    throw FormatError("checkpoint: not a denoiser file: " + path);
  Checkpoint ck;
  ck.model.arch = DenoiserArch::from_json(h.at("arch"));
  ck.schedule = make_schedule(schedule_kind_from_string(h.at("schedule_kind").get<std::string>()),
                              h.at("schedule_T").get<int>());
  for (auto& [name, m] : f.tensors) ck.model.params[name] = std::move(m);
  // Cross-check against a freshly shaped skeleton so a truncated or foreign
  // tensor list cannot masquerade as a model.
  Denoiser skeleton = init_denoiser(ck.model.arch, 0);
  for (const auto& [name, m] : skeleton.params) {
    auto it = ck.model.params.find(name);
    if (it == ck.model.params.end())
      throw IntegrityError("checkpoint: missing tensor " + name + " in " + path);
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw IntegrityError("checkpoint: tensor " + name + " has unexpected shape in " + path);
  }
  if (ck.model.params.size() != skeleton.params.size())
    throw IntegrityError("checkpoint: unexpected extra tensors in " + path);
  ck.model.validate();
  return ck;
}

LatentImage forward_noise(const LatentImage& x0, int t, const LatentImage& eps,
                          const NoiseSchedule& sched) {
  if (t < 0 || t > sched.T)
    throw ArgumentError("forward_noise: t=" + std::to_string(t) + " outside [0, " +
                        std::to_string(sched.T) + "]");
  if (!x0.m.same_shape(eps.m)) throw ArgumentError("forward_noise: shape mismatch");
  const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
  const double cs = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
  LatentImage out{Matrix(x0.m.rows(), x0.m.cols()), x0.side};
  for (std::size_t i = 0; i < x0.m.size(); ++i)
    out.m.raw()[i] = cs * x0.m.raw()[i] + cn * eps.m.raw()[i];
  return out;
}

std::vector<double> timestep_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ArgumentError("timestep_embedding: dim must be even");
  std::vector<double> e(static_cast<std::size_t>(dim));
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                 static_cast<double>(half));
    e[static_cast<std::size_t>(2 * k)] = std::sin(t * freq);
    e[static_cast<std::size_t>(2 * k + 1)] = std::cos(t * freq);
  }
  return e;
}

PromptEmbedding encode_prompt_with_trace(const Denoiser& model, const std::vector<int>& tokens,
                                         EncodeTrace& trace) {
  std::vector<int> seq;
  if (tokens.empty()) {
    seq.push_back(kNullToken);
  } else {
    seq.reserve(tokens.size() + 1);
    seq.push_back(kBosToken);
    seq.insert(seq.end(), tokens.begin(), tokens.end());
  }
  const Matrix& embed = model.p("text.embed");
  for (int tok : seq)
    if (tok < 0 || tok >= model.arch.vocab)
      throw ArgumentError("encode_prompt: token " + std::to_string(tok) + " outside vocabulary");

  Matrix rows(seq.size(), embed.cols());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto src = embed.row(static_cast<std::size_t>(seq[i]));
    std::memcpy(rows.row(i).data(), src.data(), src.size() * sizeof(double));
  }
  PromptEmbedding p;
  p.tokens = seq;
  p.m = ln_rows(rows, model.p("text.ln.scale"), model.p("text.ln.shift"), &trace.ln);
  trace.tokens = seq;
  return p;
}

PromptEmbedding encode_prompt(const Denoiser& model, const std::vector<int>& tokens) {
  EncodeTrace scratch;
  return encode_prompt_with_trace(model, tokens, scratch);
}

double prompt_norm_bound(const Denoiser& model) {
  const Matrix& scale = model.p("text.ln.scale");
  const Matrix& shift = model.p("text.ln.shift");
  return std::sqrt(static_cast<double>(scale.cols())) * scale.max_abs() +
         norm2(std::span<const double>(shift.raw()));
}

AttentionResult cross_attention(const Matrix& x, const Matrix& p, const Matrix& wq,
                                const Matrix& wk, const Matrix& wv) {
  if (wq.cols() == 0) throw ArgumentError("cross_attention: projection width must be > 0");
  if (x.cols() != wq.rows() || p.cols() != wk.rows() || p.cols() != wv.rows() ||
      wq.cols() != wk.cols())
    throw ArgumentError("cross_attention: dimension mismatch");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(wq.cols()));
  Matrix s = matmul_a_bt(matmul(x, wq), matmul(p, wk));
  s *= inv_sqrt_d;
  softmax_rows_inplace(s);
  AttentionResult out;
  out.y = matmul(s, matmul(p, wv));
  out.s = std::move(s);
  out.y.ensure_finite("cross_attention.y");
  return out;
}

LatentImage denoise_predict(const Denoiser& model, const LatentImage& z, int t,
                            const PromptEmbedding& prompt, ForwardTrace* trace) {
  const DenoiserArch& a = model.arch;
  if (z.m.rows() != static_cast<std::size_t>(a.pixels()) ||
      z.m.cols() != static_cast<std::size_t>(a.channels) || z.side != a.side)
    throw ArgumentError("denoise_predict: latent shape mismatch");
  if (t < 0) throw ArgumentError("denoise_predict: negative timestep");
  if (prompt.m.rows() == 0 || prompt.m.cols() != static_cast<std::size_t>(a.text_dim))
    throw ArgumentError("denoise_predict: prompt embedding width mismatch");

  Matrix x = matmul(z.m, model.p("in.weight"));
  {
    const Matrix& bias = model.p("in.bias");
    const Matrix& pos = model.p("pos");
    const std::vector<double> te = timestep_embedding(t, a.width);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) += bias(0, j) + pos(i, j) + te[j];
  }

  if (trace) trace->blocks.assign(static_cast<std::size_t>(a.blocks), BlockTrace{});
  for (int b = 0; b < a.blocks; ++b) {
    BlockTrace* bt = trace ? &trace->blocks[static_cast<std::size_t>(b)] : nullptr;
    Matrix u = ln_rows(x, model.p(blk(b, "ln1.scale")), model.p(blk(b, "ln1.shift")),
                       bt ? &bt->ln1 : nullptr);
    x += attn_forward(u, u, model.p(blk(b, "self.wq")), model.p(blk(b, "self.wk")),
                      model.p(blk(b, "self.wv")), model.p(blk(b, "self.wo")),
                      bt ? &bt->self_attn : nullptr);
    u = ln_rows(x, model.p(blk(b, "ln2.scale")), model.p(blk(b, "ln2.shift")),
                bt ? &bt->ln2 : nullptr);
    x += attn_forward(u, prompt.m, model.p(blk(b, "cross.wq")), model.p(blk(b, "cross.wk")),
                      model.p(blk(b, "cross.wv")), model.p(blk(b, "cross.wo")),
                      bt ? &bt->cross_attn : nullptr);
    u = ln_rows(x, model.p(blk(b, "ln3.scale")), model.p(blk(b, "ln3.shift")),
                bt ? &bt->ln3 : nullptr);
    Matrix h = matmul(u, model.p(blk(b, "ffn.w1")));
    {
      const Matrix& b1 = model.p(blk(b, "ffn.b1"));
      for (std::size_t i = 0; i < h.rows(); ++i)
        for (std::size_t j = 0; j < h.cols(); ++j) h(i, j) += b1(0, j);
    }
    Matrix f(h.rows(), h.cols());
    for (std::size_t i = 0; i < h.size(); ++i) f.raw()[i] = gelu(h.raw()[i]);
    if (bt) {
      bt->ffn.u = u;
      bt->ffn.h_pre = h;
      bt->ffn.h_act = f;
    }
    Matrix r = matmul(f, model.p(blk(b, "ffn.w2")));
    {
      const Matrix& b2 = model.p(blk(b, "ffn.b2"));
      for (std::size_t i = 0; i < r.rows(); ++i)
        for (std::size_t j = 0; j < r.cols(); ++j) r(i, j) += b2(0, j);
    }
    x += r;
  }

  Matrix u = ln_rows(x, model.p("out.ln.scale"), model.p("out.ln.shift"),
                     trace ? &trace->out_ln : nullptr);
  Matrix out = matmul(u, model.p("out.weight"));
  {
    const Matrix& bias = model.p("out.bias");
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bias(0, j);
  }
  if (trace) trace->out_u = std::move(u);
  out.ensure_finite("denoise_predict");
  return LatentImage{std::move(out), a.side};
}

LatentImage cfg_predict(const Denoiser& model, const LatentImage& z, int t,
                        const PromptEmbedding& prompt, double eta) {
  if (eta < 1.0) throw ArgumentError("cfg_predict: guidance scale must be >= 1");
  if (eta == 1.0) return denoise_predict(model, z, t, prompt);
  const PromptEmbedding null_prompt = encode_prompt(model, {});
  LatentImage uncond = denoise_predict(model, z, t, null_prompt);
  LatentImage cond = denoise_predict(model, z, t, prompt);
  LatentImage out{Matrix(cond.m.rows(), cond.m.cols()), cond.side};
  for (std::size_t i = 0; i < out.m.size(); ++i)
    out.m.raw()[i] = uncond.m.raw()[i] + eta * (cond.m.raw()[i] - uncond.m.raw()[i]);
  return out;
}

LatentImage sample(const Denoiser& model, const PromptEmbedding& prompt,
                   const NoiseSchedule& sched, int steps, std::uint64_t seed, double guidance) {
  if (steps < 1) throw ArgumentError("sample: steps must be >= 1");
  if (steps > sched.T) throw ArgumentError("sample: steps exceeds schedule length");
  Rng rng(mix64(seed ^ 0x73616d706c657221ull));
  LatentImage z = gaussian_latent(model.arch, rng);

  std::vector<int> ts(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k)
    ts[static_cast<std::size_t>(k)] = static_cast<int>(std::llround(
        static_cast<double>(sched.T) * static_cast<double>(k + 1) / static_cast<double>(steps)));

  for (int k = steps - 1; k >= 0; --k) {
    const int t = ts[static_cast<std::size_t>(k)];
    const int t_prev = k > 0 ? ts[static_cast<std::size_t>(k - 1)] : 0;
    const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
    const double ab_prev = sched.alpha_bar[static_cast<std::size_t>(t_prev)];
    LatentImage eps_hat = cfg_predict(model, z, t, prompt, guidance);
    const double cs = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
    const double ps = std::sqrt(ab_prev), pn = std::sqrt(1.0 - ab_prev);
    for (std::size_t i = 0; i < z.m.size(); ++i) {
      const double x0_hat = (z.m.raw()[i] - cn * eps_hat.m.raw()[i]) / cs;
      z.m.raw()[i] = ps * x0_hat + pn * eps_hat.m.raw()[i];
    }
  }
  z.m.ensure_finite("sample");
  return z;
}

Matrix& GradMap::at(const std::string& name, std::size_t rows, std::size_t cols) {
  auto it = g.find(name);
  if (it == g.end()) it = g.emplace(name, Matrix(rows, cols)).first;
  return it->second;
}

void GradMap::add(const GradMap& other) {
  for (const auto& [name, m] : other.g) {
    auto it = g.find(name);
    if (it == g.end())
      g.emplace(name, m);
    else
      it->second += m;
  }
}

void GradMap::scale(double s) {
  for (auto& [name, m] : g) m *= s;
}

double GradMap::global_norm() const {
  double acc = 0.0;
  for (const auto& [name, m] : g)
    for (double v : m.raw()) acc += v * v;
  return std::sqrt(acc);
}

Matrix denoiser_backward(const Denoiser& model, const LatentImage& z,
                         const PromptEmbedding& prompt, const ForwardTrace& trace,
                         const Matrix& d_out, GradMap& grads, GradScope scope) {
  const DenoiserArch& a = model.arch;
  const bool all = scope == GradScope::kAllParams;
  const auto w = static_cast<std::size_t>(a.width);
  const auto ch = static_cast<std::size_t>(a.channels);

  Matrix d_prompt(prompt.m.rows(), prompt.m.cols());

  // Output projection and final layer norm.
  if (all) {
    matmul_at_b_acc(trace.out_u, d_out, grads.at("out.weight", w, ch));
    grads.at("out.bias", 1, ch) += colsum(d_out);
  }
  Matrix d_u = matmul_a_bt(d_out, model.p("out.weight"));
  Matrix* gs = all ? &grads.at("out.ln.scale", 1, w) : nullptr;
  Matrix* gh = all ? &grads.at("out.ln.shift", 1, w) : nullptr;
  Matrix d_x = ln_rows_backward(d_u, trace.out_ln, model.p("out.ln.scale"), gs, gh);

  for (int b = a.blocks - 1; b >= 0; --b) {
    const BlockTrace& bt = trace.blocks[static_cast<std::size_t>(b)];
    const auto hh = static_cast<std::size_t>(a.ffn_hidden);
    const auto dd = static_cast<std::size_t>(a.attn_dim);
    const auto td = static_cast<std::size_t>(a.text_dim);

    // Feed-forward sublayer.
    {
      const Matrix& w1 = model.p(blk(b, "ffn.w1"));
      const Matrix& w2 = model.p(blk(b, "ffn.w2"));
      if (all) {
        matmul_at_b_acc(bt.ffn.h_act, d_x, grads.at(blk(b, "ffn.w2"), hh, w));
        grads.at(blk(b, "ffn.b2"), 1, w) += colsum(d_x);
      }
      Matrix d_f = matmul_a_bt(d_x, w2);
      Matrix d_h(d_f.rows(), d_f.cols());
      for (std::size_t i = 0; i < d_f.size(); ++i)
        d_h.raw()[i] = d_f.raw()[i] * gelu_grad(bt.ffn.h_pre.raw()[i]);
      if (all) {
        matmul_at_b_acc(bt.ffn.u, d_h, grads.at(blk(b, "ffn.w1"), w, hh));
        grads.at(blk(b, "ffn.b1"), 1, hh) += colsum(d_h);
      }
      d_u = matmul_a_bt(d_h, w1);
      gs = all ? &grads.at(blk(b, "ln3.scale"), 1, w) : nullptr;
      gh = all ? &grads.at(blk(b, "ln3.shift"), 1, w) : nullptr;
      d_x += ln_rows_backward(d_u, bt.ln3, model.p(blk(b, "ln3.scale")), gs, gh);
    }

    // Cross-attention sublayer (adapter targets; gradients always kept).
    {
      d_u = attn_backward(d_x, bt.cross_attn, prompt.m, model.p(blk(b, "cross.wq")),
                          model.p(blk(b, "cross.wk")), model.p(blk(b, "cross.wv")),
                          model.p(blk(b, "cross.wo")), grads.at(blk(b, "cross.wq"), w, dd),
                          grads.at(blk(b, "cross.wk"), td, dd),
                          grads.at(blk(b, "cross.wv"), td, dd),
                          grads.at(blk(b, "cross.wo"), dd, w), &d_prompt, false);
      gs = all ? &grads.at(blk(b, "ln2.scale"), 1, w) : nullptr;
      gh = all ? &grads.at(blk(b, "ln2.shift"), 1, w) : nullptr;
      d_x += ln_rows_backward(d_u, bt.ln2, model.p(blk(b, "ln2.scale")), gs, gh);
    }

    // Self-attention sublayer.
    {
      d_u = attn_backward(d_x, bt.self_attn, bt.self_attn.u, model.p(blk(b, "self.wq")),
                          model.p(blk(b, "self.wk")), model.p(blk(b, "self.wv")),
                          model.p(blk(b, "self.wo")), grads.at(blk(b, "self.wq"), w, dd),
                          grads.at(blk(b, "self.wk"), w, dd), grads.at(blk(b, "self.wv"), w, dd),
                          grads.at(blk(b, "self.wo"), dd, w), nullptr, true);
      gs = all ? &grads.at(blk(b, "ln1.scale"), 1, w) : nullptr;
      gh = all ? &grads.at(blk(b, "ln1.shift"), 1, w) : nullptr;
      d_x += ln_rows_backward(d_u, bt.ln1, model.p(blk(b, "ln1.scale")), gs, gh);
    }
  }

  if (all) {
    grads.at("pos", d_x.rows(), w) += d_x;
    grads.at("in.bias", 1, w) += colsum(d_x);
    matmul_at_b_acc(z.m, d_x, grads.at("in.weight", ch, w));
  }
  return d_prompt;
}

void text_encoder_backward(const Denoiser& model, const EncodeTrace& trace, const Matrix& d_prompt,
                           GradMap& grads) {
  const Matrix& scale = model.p("text.ln.scale");
  const auto td = static_cast<std::size_t>(model.arch.text_dim);
  Matrix& g_scale = grads.at("text.ln.scale", 1, td);
  Matrix& g_shift = grads.at("text.ln.shift", 1, td);
  Matrix d_rows = ln_rows_backward(d_prompt, trace.ln, scale, &g_scale, &g_shift);
  Matrix& g_embed = grads.at("text.embed", static_cast<std::size_t>(model.arch.vocab), td);
  for (std::size_t i = 0; i < trace.tokens.size(); ++i) {
    const auto tok = static_cast<std::size_t>(trace.tokens[i]);
    for (std::size_t j = 0; j < td; ++j) g_embed(tok, j) += d_rows(i, j);
  }
}

}  // namespace dmaudit
