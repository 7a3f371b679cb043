#include "dmaudit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>

#include <nlohmann/json.hpp>

#include "dmaudit/tensorio.hpp"

namespace dmaudit {

namespace {

constexpr double kScaleValues[kNumScaleBuckets] = {1.5, 2.1, 2.9};
constexpr double kIntensityFactors[kNumIntensity] = {0.85, 0.90, 0.95, 1.0};
constexpr double kBackgroundLevels[kNumBackground] = {-0.05, 0.0, 0.05};
constexpr double kPositionOffsets[kNumPosition][2] = {
    {0.0, 0.0}, {0.0, -0.35}, {0.0, 0.35}, {-0.35, 0.0}, {0.35, 0.0}};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

ConceptSpec spec_from_cell(int cell, int concept_id, int trigger, double intensity,
                           std::uint64_t detail_seed) {
  ConceptSpec s;
  s.concept_id = concept_id;
  s.texture_bucket = cell % kNumTextureBuckets;
  s.scale_bucket = (cell / kNumTextureBuckets) % kNumScaleBuckets;
  s.shape = static_cast<ShapeKind>(cell / (kNumTextureBuckets * kNumScaleBuckets));
  s.scale = kScaleValues[s.scale_bucket];
  s.texture_phase = 2.0 * M_PI * static_cast<double>(s.texture_bucket) / 3.0;
  s.intensity = intensity;
  s.detail_seed = detail_seed;
  s.trigger_token = trigger;
  return s;
}

// Smoothed random field in roughly [-1, 1], fixed by the concept's detail
// seed; the renderer scales it down and confines it to the glyph.
double detail_field(std::uint64_t detail_seed, int x, int y, int side) {
  auto cell_noise = [&](int cx, int cy) {
    const std::uint64_t h = mix64(detail_seed ^ mix64(static_cast<std::uint64_t>(cx) * 131 +
                                                      static_cast<std::uint64_t>(cy) + 7));
    return static_cast<double>(h >> 11) * 0x1.0p-53 * 2.0 - 1.0;
  };
  double acc = 0.0, wsum = 0.0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const int nx = std::clamp(x + dx, 0, side - 1);
      const int ny = std::clamp(y + dy, 0, side - 1);
      const double w = (dx == 0 && dy == 0) ? 2.0 : 1.0;
      acc += w * cell_noise(nx, ny);
      wsum += w;
    }
  return acc / wsum * 1.8;
}

std::vector<int> make_caption(const ConceptSpec& spec, const RenderParams& rp, bool with_trigger,
                              Rng& rng) {
  std::vector<int> caption;
  if (with_trigger) caption.push_back(spec.trigger_token);
  caption.push_back(kIntensityBase + rp.intensity_bucket);
  caption.push_back(kPositionBase + rp.position_bucket);
  caption.push_back(kBackgroundBase + rp.background_bucket);
  if (rng.uniform() < 0.5)
    caption.push_back(kFillerBase + static_cast<int>(rng.uniform_int(0, kNumFiller - 1)));
  rng.shuffle(caption);
  return caption;
}

std::vector<LabeledImage> build_corpus_impl(const std::vector<ConceptSpec>& specs, int per_concept,
                                            std::uint64_t seed,
                                            std::optional<std::uint64_t> shuffle_seed,
                                            bool with_trigger, int side) {
  if (per_concept < 4 || per_concept % 2 != 0)
    throw ArgumentError("build_corpus: per_concept must be even and >= 4");
  if (specs.empty()) throw ArgumentError("build_corpus: no concepts");

  Rng master(mix64(seed ^ 0x636f72707573ull));
  std::vector<LabeledImage> images;
  images.reserve(specs.size() * static_cast<std::size_t>(per_concept));
  for (const ConceptSpec& spec : specs) {
    for (int i = 0; i < per_concept; ++i) {
      // Content is keyed by (seed, concept, index) alone so that reordering
      // never changes what the corpus contains or which split an image is in.
      Rng rc = master.fork(static_cast<std::uint64_t>(spec.concept_id),
                           static_cast<std::uint64_t>(i));
      RenderParams rp = draw_render_params(rc);
      LabeledImage im;
      im.image = render_with_params(spec, rp, side);
      im.concept_id = spec.concept_id;
      im.caption_tokens = make_caption(spec, rp, with_trigger, rc);
      im.split = i < per_concept / 2 ? Split::kTrain : Split::kTest;
      images.push_back(std::move(im));
    }
  }
  Rng shuffler(mix64(shuffle_seed.value_or(seed ^ 0x73687566666c65ull)));
  shuffler.shuffle(images);
  for (std::size_t i = 0; i < images.size(); ++i) images[i].image_id = static_cast<int>(i);
  return images;
}

}  // namespace

std::string to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::kDisk:
      return "disk";
    case ShapeKind::kCross:
      return "cross";
    case ShapeKind::kBar:
      return "bar";
    case ShapeKind::kRing:
      return "ring";
    case ShapeKind::kChecker:
      return "checker";
  }
  return "?";
}

std::vector<ConceptSpec> generate_concepts(int n, std::uint64_t seed) {
  if (n < 2) throw ArgumentError("generate_concepts: need n >= 2");
  if (n > kConceptGridSize)
    throw ArgumentError("generate_concepts: n=" + std::to_string(n) +
                        " exceeds the distinct parameter grid (" +
                        std::to_string(kConceptGridSize) + " shape/scale/texture cells)");
  if (n > kNumTriggers)
    throw ArgumentError("generate_concepts: n=" + std::to_string(n) +
                        " exceeds the trigger-token pool (" + std::to_string(kNumTriggers) + ")");
  Rng rng(mix64(seed ^ 0x636f6e6365707473ull));
  std::vector<int> cells(kConceptGridSize);
  for (int i = 0; i < kConceptGridSize; ++i) cells[static_cast<std::size_t>(i)] = i;
  rng.shuffle(cells);
  std::vector<int> triggers(kNumTriggers);
  for (int i = 0; i < kNumTriggers; ++i) triggers[static_cast<std::size_t>(i)] = kTriggerBase + i;
  rng.shuffle(triggers);

  std::vector<ConceptSpec> specs;
  specs.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    specs.push_back(spec_from_cell(cells[static_cast<std::size_t>(i)], i,
                                   triggers[static_cast<std::size_t>(i)],
                                   rng.uniform(0.9, 1.0), rng.next_u64()));
  return specs;
}

std::vector<ConceptSpec> background_specs(const std::vector<ConceptSpec>& taken, int count,
                                          std::uint64_t seed) {
  if (count < 1) throw ArgumentError("background_specs: count must be >= 1");
  std::vector<bool> used(kConceptGridSize, false);
  int max_id = -1;
  for (const ConceptSpec& s : taken) {
    used[static_cast<std::size_t>(s.grid_cell())] = true;
    max_id = std::max(max_id, s.concept_id);
  }
  std::vector<int> open;
  for (int c = 0; c < kConceptGridSize; ++c)
    if (!used[static_cast<std::size_t>(c)]) open.push_back(c);
  if (static_cast<int>(open.size()) < count)
    throw ArgumentError("background_specs: only " + std::to_string(open.size()) +
                        " grid cells remain");
  Rng rng(mix64(seed ^ 0x6261636b67726e64ull));
  rng.shuffle(open);
  std::vector<ConceptSpec> specs;
  specs.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    specs.push_back(spec_from_cell(open[static_cast<std::size_t>(i)], max_id + 1 + i, kNullToken,
                                   rng.uniform(0.9, 1.0), rng.next_u64()));
  return specs;
}

RenderParams draw_render_params(Rng& rng) {
  RenderParams rp;
  rp.intensity_bucket = static_cast<int>(rng.uniform_int(0, kNumIntensity - 1));
  rp.position_bucket = static_cast<int>(rng.uniform_int(0, kNumPosition - 1));
  rp.background_bucket = static_cast<int>(rng.uniform_int(0, kNumBackground - 1));
  rp.dx = rng.uniform(-0.15, 0.15);
  rp.dy = rng.uniform(-0.15, 0.15);
  rp.phase_jitter = rng.normal(0.0, 0.05);
  rp.noise_seed = rng.next_u64();
  return rp;
}

LatentImage render_with_params(const ConceptSpec& spec, const RenderParams& rp, int side) {
  if (side < 4) throw ArgumentError("render: side must be >= 4");
  const double cx = 0.5 * (side - 1) + kPositionOffsets[rp.position_bucket][0] + rp.dx;
  const double cy = 0.5 * (side - 1) + kPositionOffsets[rp.position_bucket][1] + rp.dy;
  const double s = spec.scale;
  const double bg = kBackgroundLevels[rp.background_bucket];
  const double peak = spec.intensity * kIntensityFactors[rp.intensity_bucket];
  const double phase = spec.texture_phase + rp.phase_jitter;
  Rng noise(mix64(rp.noise_seed ^ 0x706978656cull));

  LatentImage out{Matrix(static_cast<std::size_t>(side) * static_cast<std::size_t>(side), 1),
                  side};
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double ox = x - cx, oy = y - cy;
      const double r = std::sqrt(ox * ox + oy * oy);
      double mask = 0.0;
      switch (spec.shape) {
        case ShapeKind::kDisk:
          mask = sigmoid((0.9 * s - r) / 0.3);
          break;
        case ShapeKind::kRing: {
          // Texture bucket opens opposing gaps in the annulus.
          double angular = 1.0;
          if (spec.texture_bucket != 0) {
            const double theta = std::atan2(oy, ox);
            const double lobe = std::cos(2.0 * theta);
            angular = 0.5 + 0.5 * (spec.texture_bucket == 1 ? lobe : -lobe);
          }
          mask = std::exp(-std::pow((r - 1.25 * s) / 0.45, 2.0)) * angular;
          break;
        }
        case ShapeKind::kBar: {
          // Horizontal stripe; scale sets its length, texture bucket cuts
          // gaps into it (solid / split / triple-dash).
          const double len = 1.4 * s + 0.1;
          double dash = 1.0;
          if (spec.texture_bucket == 1) {
            dash = 1.0 - 0.9 * std::exp(-std::pow(ox / 0.9, 2.0));
          } else if (spec.texture_bucket == 2) {
            const double g = len / 1.9;
            dash = 1.0 - 0.9 * std::exp(-std::pow((ox - g) / 0.8, 2.0)) -
                   0.9 * std::exp(-std::pow((ox + g) / 0.8, 2.0));
          }
          mask = sigmoid((0.8 - std::abs(oy)) / 0.3) * sigmoid((len - std::abs(ox)) / 0.35) * dash;
          break;
        }
        case ShapeKind::kCross: {
          const double hw = s / 3.0;
          const double arm = 1.8 * s;
          const double horiz =
              sigmoid((hw - std::abs(oy)) / 0.3) * sigmoid((arm - std::abs(ox)) / 0.35);
          const double vert =
              sigmoid((hw - std::abs(ox)) / 0.3) * sigmoid((arm - std::abs(oy)) / 0.35);
          mask = std::max(horiz, vert);
          break;
        }
        case ShapeKind::kChecker: {
          // Full-grid checkerboard; scale sets the cell size and the texture
          // bucket slides the parity grid by half-cell steps.
          const double cell = 0.6 + 1.0 * s;
          const double sx = ox + 0.5 * cell * static_cast<double>(spec.texture_bucket == 1);
          const double sy = oy + 0.5 * cell * static_cast<double>(spec.texture_bucket == 2);
          const double parity =
              std::sin(M_PI * sx / cell) * std::sin(M_PI * sy / cell) >= 0.0 ? 1.0 : -0.15;
          mask = parity;
          break;
        }
      }
      // Texture bucket sets stripe orientation and frequency, phase slides it.
      double proj = 0.0, freq = 1.25;
      switch (spec.texture_bucket) {
        case 0: proj = oy; freq = 0.8; break;
        case 1: proj = ox; freq = 1.8; break;
        default: proj = (ox + oy) * M_SQRT1_2; freq = 1.25; break;
      }
      const double u = 2.0 * M_PI * freq * proj / side + phase;
      const double texture = 0.7 + 0.3 * std::sin(u);
      const double detail = detail_field(spec.detail_seed, x, y, side);
      double v = bg + peak * mask * (texture + 0.30 * detail) + noise.normal(0.0, 0.02);
      v = std::clamp(v, -1.0, 1.0);
      out.m(static_cast<std::size_t>(y) * static_cast<std::size_t>(side) +
                static_cast<std::size_t>(x),
            0) = v;
    }
  }
  return out;
}

LatentImage render(const ConceptSpec& spec, std::uint64_t jitter_seed, int side) {
  Rng rng(mix64(jitter_seed ^ 0x72656e646572ull));
  const RenderParams rp = draw_render_params(rng);
  return render_with_params(spec, rp, side);
}

std::vector<LabeledImage> build_corpus(const std::vector<ConceptSpec>& specs, int per_concept,
                                       std::uint64_t seed, int side) {
  return build_corpus_impl(specs, per_concept, seed, std::nullopt, true, side);
}

std::vector<LabeledImage> build_corpus(const std::vector<ConceptSpec>& specs, int per_concept,
                                       std::uint64_t seed, std::uint64_t shuffle_seed, int side) {
  return build_corpus_impl(specs, per_concept, seed, shuffle_seed, true, side);
}

std::vector<LabeledImage> build_background_corpus(const std::vector<ConceptSpec>& specs,
                                                  int per_concept, std::uint64_t seed, int side) {
  return build_corpus_impl(specs, per_concept, seed, std::nullopt, false, side);
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json specs = nlohmann::json::array();
  for (const ConceptSpec& s : corpus.specs) {
    specs.push_back({{"concept_id", s.concept_id},
                     {"shape", to_string(s.shape)},
                     {"scale_bucket", s.scale_bucket},
                     {"texture_bucket", s.texture_bucket},
                     {"scale", s.scale},
                     {"texture_phase", s.texture_phase},
                     {"intensity", s.intensity},
                     {"detail_seed", s.detail_seed},
                     {"trigger_token", s.trigger_token}});
  }
  nlohmann::json imgs = nlohmann::json::array();
  std::vector<std::pair<std::string, Matrix>> tensors;
  tensors.reserve(corpus.images.size());
  for (const LabeledImage& im : corpus.images) {
    const std::string tname = "img" + std::to_string(im.image_id);
    imgs.push_back({{"id", im.image_id},
                    {"concept_id", im.concept_id},
                    {"caption", im.caption_tokens},
                    {"split", im.split == Split::kTrain ? "train" : "test"},
                    {"tensor", tname},
                    {"side", im.image.side}});
    tensors.emplace_back(tname, im.image.m);
  }
  nlohmann::json manifest;
  manifest["kind"] = "corpus";
  manifest["specs"] = specs;
  manifest["images"] = imgs;
  {
    std::ofstream os(dir + "/manifest.json");
    if (!os) throw FormatError("save_corpus: cannot write manifest in " + dir);
    os << manifest.dump(1);
  }
  save_tensor_file(dir + "/images.bin", nlohmann::json{{"kind", "images"}}, tensors);
}

Corpus load_corpus(const std::string& dir) {
  std::ifstream is(dir + "/manifest.json");
  if (!is) throw MissingArtifactError("load_corpus: missing manifest in " + dir);
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("load_corpus: bad manifest: ") + e.what());
  }
  if (!manifest.contains("kind") || manifest["kind"] != "corpus")
    throw FormatError("load_corpus: not a corpus manifest in " + dir);

  Corpus corpus;
  for (const auto& j : manifest.at("specs")) {
    ConceptSpec s;
    s.concept_id = j.at("concept_id").get<int>();
    const std::string shape = j.at("shape").get<std::string>();
    if (shape == "disk")
      s.shape = ShapeKind::kDisk;
    else if (shape == "cross")
      s.shape = ShapeKind::kCross;
    else if (shape == "bar")
      s.shape = ShapeKind::kBar;
    else if (shape == "ring")
      s.shape = ShapeKind::kRing;
    else if (shape == "checker")
      s.shape = ShapeKind::kChecker;
    else
      throw FormatError("load_corpus: unknown shape " + shape);
    s.scale_bucket = j.at("scale_bucket").get<int>();
    s.texture_bucket = j.at("texture_bucket").get<int>();
    s.scale = j.at("scale").get<double>();
    s.texture_phase = j.at("texture_phase").get<double>();
    s.intensity = j.at("intensity").get<double>();
    s.detail_seed = j.at("detail_seed").get<std::uint64_t>();
    s.trigger_token = j.at("trigger_token").get<int>();
    corpus.specs.push_back(s);
  }

  TensorFile tf = load_tensor_file(dir + "/images.bin");
  std::map<std::string, Matrix> by_name;
  for (auto& [name, m] : tf.tensors) by_name.emplace(std::move(name), std::move(m));

  for (const auto& j : manifest.at("images")) {
    LabeledImage im;
    im.image_id = j.at("id").get<int>();
    im.concept_id = j.at("concept_id").get<int>();
    im.caption_tokens = j.at("caption").get<std::vector<int>>();
    im.split = j.at("split").get<std::string>() == "train" ? Split::kTrain : Split::kTest;
    const std::string tname = j.at("tensor").get<std::string>();
    auto it = by_name.find(tname);
    if (it == by_name.end()) throw FormatError("load_corpus: missing image tensor " + tname);
    im.image.m = it->second;
    im.image.side = j.at("side").get<int>();
    corpus.images.push_back(std::move(im));
  }
  return corpus;
}

std::vector<LabeledImage> filter_images(const std::vector<LabeledImage>& images, int concept_id,
                                        Split split) {
  std::vector<LabeledImage> out;
  for (const LabeledImage& im : images)
    if (im.concept_id == concept_id && im.split == split) out.push_back(im);
  return out;
}

}  // namespace dmaudit
