#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmaudit/diffusion.hpp"

namespace dmaudit {

// Vocabulary layout (64 tokens): 0 [BOS], 1 null, 20 concept triggers, then
// attribute tokens with real visual correlates plus decorative fillers.
inline constexpr int kVocabSize = 64;
inline constexpr int kTriggerBase = 2;
inline constexpr int kNumTriggers = 20;
inline constexpr int kAttrBase = 22;
inline constexpr int kIntensityBase = 22;  // 4 brightness buckets
inline constexpr int kNumIntensity = 4;
inline constexpr int kPositionBase = 26;  // centered / up / down / left / right
inline constexpr int kNumPosition = 5;
inline constexpr int kBackgroundBase = 31;  // 3 backdrop levels
inline constexpr int kNumBackground = 3;
inline constexpr int kFillerBase = 34;  // decorative tokens, no visual correlate
inline constexpr int kNumFiller = 30;
inline constexpr int kNumAttributes = 42;

inline bool is_trigger_token(int tok) {
  return tok >= kTriggerBase && tok < kTriggerBase + kNumTriggers;
}
inline bool is_attribute_token(int tok) {
  return tok >= kAttrBase && tok < kAttrBase + kNumAttributes;
}

enum class ShapeKind { kDisk, kCross, kBar, kRing, kChecker };
inline constexpr int kNumShapes = 5;
inline constexpr int kNumScaleBuckets = 3;
inline constexpr int kNumTextureBuckets = 3;
// Distinct (shape, scale bucket, texture bucket) cells.
inline constexpr int kConceptGridSize = kNumShapes * kNumScaleBuckets * kNumTextureBuckets;

std::string to_string(ShapeKind s);

// One synthetic visual concept: a glyph family identified by shape, size
// bucket and texture phase bucket, with a dedicated trigger token.
struct ConceptSpec {
  int concept_id = 0;
  ShapeKind shape = ShapeKind::kDisk;
  int scale_bucket = 0;
  int texture_bucket = 0;
  double scale = 0.0;          // glyph radius in pixels
  double texture_phase = 0.0;  // phase of the interior modulation
  double intensity = 1.0;      // concept-level brightness factor
  // Identity-level micro-pattern overlaid on the glyph: fixed per concept,
  // independent across concepts, not derivable from the cell parameters.
  std::uint64_t detail_seed = 0;
  int trigger_token = kNullToken;

  int grid_cell() const {
    return (static_cast<int>(shape) * kNumScaleBuckets + scale_bucket) * kNumTextureBuckets +
           texture_bucket;
  }
};

enum class Split { kTrain, kTest };

struct LabeledImage {
  int image_id = 0;
  LatentImage image;
  int concept_id = 0;
  std::vector<int> caption_tokens;  // trigger + 2-4 attribute tokens, shuffled
  Split split = Split::kTrain;
};

// n distinct concepts, deterministic under seed. Rejects n beyond the
// parameter grid or the trigger-token pool.
std::vector<ConceptSpec> generate_concepts(int n, std::uint64_t seed);

// Concepts occupying grid cells disjoint from `taken`, used as the
// pretraining curriculum. Their captions never carry a trigger token.
std::vector<ConceptSpec> background_specs(const std::vector<ConceptSpec>& taken, int count,
                                          std::uint64_t seed);

// Per-image variation: brightness/position/backdrop buckets (each with a
// caption token), sub-pixel offsets, phase wobble and pixel noise.
struct RenderParams {
  int intensity_bucket = 0;
  int position_bucket = 0;
  int background_bucket = 0;
  double dx = 0.0, dy = 0.0;
  double phase_jitter = 0.0;
  std::uint64_t noise_seed = 0;
};

RenderParams draw_render_params(Rng& rng);
LatentImage render_with_params(const ConceptSpec& spec, const RenderParams& params, int side = 8);

// Deterministic per (spec, jitter seed); intensities clamped to [-1, 1].
LatentImage render(const ConceptSpec& spec, std::uint64_t jitter_seed, int side = 8);

// Even per-concept 50/50 train/test split with trigger + attribute captions.
std::vector<LabeledImage> build_corpus(const std::vector<ConceptSpec>& specs, int per_concept,
                                       std::uint64_t seed, int side = 8);

// Variant with an explicit ordering seed: image content and split membership
// depend only on `seed`, the list order only on `shuffle_seed`.
std::vector<LabeledImage> build_corpus(const std::vector<ConceptSpec>& specs, int per_concept,
                                       std::uint64_t seed, std::uint64_t shuffle_seed, int side);

// Same rendering pipeline but captions carry attribute tokens only; used to
// pretrain the base denoiser on material disjoint from audited concepts.
std::vector<LabeledImage> build_background_corpus(const std::vector<ConceptSpec>& specs,
                                                  int per_concept, std::uint64_t seed,
                                                  int side = 8);

struct Corpus {
  std::vector<ConceptSpec> specs;
  std::vector<LabeledImage> images;
};

// Directory layout: manifest.json + images.bin; round-trips bit-exactly.
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

std::vector<LabeledImage> filter_images(const std::vector<LabeledImage>& images, int concept_id,
                                        Split split);

}  // namespace dmaudit
