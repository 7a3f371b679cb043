#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>

#include "dmaudit/dataset.hpp"
#include "dmaudit/numerics.hpp"
#include "dmaudit/tensorio.hpp"

using namespace dmaudit;

namespace {

std::uint64_t image_hash(const LatentImage& im) {
  return hash_bytes(im.m.raw().data(), im.m.raw().size() * sizeof(double));
}

Matrix concept_mean(const std::vector<LabeledImage>& images, int concept_id) {
  Matrix mean;
  int n = 0;
  for (const LabeledImage& im : images) {
    if (im.concept_id != concept_id) continue;
    if (n == 0)
      mean = im.image.m;
    else
      mean += im.image.m;
    ++n;
  }
  mean *= 1.0 / n;
  return mean;
}

}  // namespace

TEST_CASE("generate_concepts: determinism, uniqueness, capacity errors") {
  const auto a = generate_concepts(10, 99);
  const auto b = generate_concepts(10, 99);
  REQUIRE(a.size() == 10);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].grid_cell() == b[i].grid_cell());
    CHECK(a[i].trigger_token == b[i].trigger_token);
    CHECK(a[i].intensity == b[i].intensity);
  }

  std::set<int> cells, triggers;
  for (const ConceptSpec& s : a) {
    cells.insert(s.grid_cell());
    triggers.insert(s.trigger_token);
    CHECK(is_trigger_token(s.trigger_token));
  }
  CHECK(cells.size() == 10);
  CHECK(triggers.size() == 10);

  CHECK_THROWS_AS(generate_concepts(1, 1), ArgumentError);
  CHECK_THROWS_WITH_AS(generate_concepts(60, 1),
                       doctest::Contains(std::to_string(kConceptGridSize).c_str()),
                       ArgumentError);
  CHECK_THROWS_AS(generate_concepts(21, 1), ArgumentError);  // trigger pool
}

TEST_CASE("render: determinism, range, intra vs inter concept distances") {
  const auto specs = generate_concepts(10, 7);
  const LatentImage x = render(specs[0], 42);
  const LatentImage y = render(specs[0], 42);
  CHECK(x.m == y.m);

  for (const ConceptSpec& s : specs) {
    const LatentImage im = render(s, 1);
    for (double v : im.m.raw()) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
  }

  double intra = 0.0, inter = 0.0;
  int n_intra = 0, n_inter = 0;
  std::vector<std::vector<LatentImage>> imgs;
  for (const ConceptSpec& s : specs) {
    std::vector<LatentImage> v;
    for (std::uint64_t j = 0; j < 6; ++j) v.push_back(render(s, j));
    imgs.push_back(std::move(v));
  }
  for (std::size_t c = 0; c < imgs.size(); ++c)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = i + 1; j < 6; ++j) {
        intra += mse(imgs[c][i].m, imgs[c][j].m);
        ++n_intra;
      }
  for (std::size_t c = 0; c < imgs.size(); ++c)
    for (std::size_t d = c + 1; d < imgs.size(); ++d) {
      inter += mse(imgs[c][0].m, imgs[d][0].m);
      ++n_inter;
    }
  CHECK(intra / n_intra < inter / n_inter);
}

TEST_CASE("concept mean images are separated") {
  const auto specs = generate_concepts(10, 31);
  const auto corpus = build_corpus(specs, 12, 5);
  for (std::size_t c = 0; c < specs.size(); ++c)
    for (std::size_t d = c + 1; d < specs.size(); ++d) {
      const Matrix mc = concept_mean(corpus, specs[c].concept_id);
      const Matrix md = concept_mean(corpus, specs[d].concept_id);
      CHECK(mse(mc, md) > 0.005);
    }
}

TEST_CASE("build_corpus: split sizes, captions, determinism") {
  const auto specs = generate_concepts(5, 3);
  const auto corpus = build_corpus(specs, 20, 11);
  REQUIRE(corpus.size() == 100);

  std::map<int, int> train_count, test_count;
  for (const LabeledImage& im : corpus) {
    if (im.split == Split::kTrain)
      ++train_count[im.concept_id];
    else
      ++test_count[im.concept_id];
    const ConceptSpec& spec = specs[static_cast<std::size_t>(im.concept_id)];
    int triggers = 0;
    int attrs = 0;
    for (int tok : im.caption_tokens) {
      if (tok == spec.trigger_token) ++triggers;
      if (is_attribute_token(tok)) ++attrs;
      CHECK(!is_trigger_token(tok) == (tok != spec.trigger_token));
    }
    CHECK(triggers == 1);
    CHECK(attrs >= 2);
    CHECK(attrs <= 4);
  }
  for (const ConceptSpec& s : specs) {
    CHECK(train_count[s.concept_id] == 10);
    CHECK(test_count[s.concept_id] == 10);
  }

  const auto corpus2 = build_corpus(specs, 20, 11);
  REQUIRE(corpus2.size() == corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    CHECK(corpus[i].image.m == corpus2[i].image.m);
    CHECK(corpus[i].caption_tokens == corpus2[i].caption_tokens);
    CHECK(corpus[i].split == corpus2[i].split);
  }

  CHECK_THROWS_AS(build_corpus(specs, 7, 1), ArgumentError);
  CHECK_THROWS_AS(build_corpus(specs, 2, 1), ArgumentError);
}

TEST_CASE("reordering seed permutes the corpus without changing membership") {
  const auto specs = generate_concepts(4, 13);
  const auto a = build_corpus(specs, 8, 21, /*shuffle_seed=*/1, 8);
  const auto b = build_corpus(specs, 8, 21, /*shuffle_seed=*/2, 8);
  REQUIRE(a.size() == b.size());

  using Key = std::tuple<int, int, std::uint64_t, std::vector<int>>;
  std::multiset<Key> ma, mb;
  bool same_order = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma.insert({a[i].concept_id, static_cast<int>(a[i].split), image_hash(a[i].image),
               a[i].caption_tokens});
    mb.insert({b[i].concept_id, static_cast<int>(b[i].split), image_hash(b[i].image),
               b[i].caption_tokens});
    if (image_hash(a[i].image) != image_hash(b[i].image)) same_order = false;
  }
  CHECK(ma == mb);
  CHECK(!same_order);
}

TEST_CASE("nearest-class-mean separability floor on a 10-concept corpus") {
  const auto specs = generate_concepts(10, 2025);
  const auto corpus = build_corpus(specs, 20, 2025);
  std::map<int, Matrix> means;
  std::map<int, int> counts;
  for (const LabeledImage& im : corpus) {
    if (im.split != Split::kTrain) continue;
    auto it = means.find(im.concept_id);
    if (it == means.end())
      means.emplace(im.concept_id, im.image.m);
    else
      it->second += im.image.m;
    ++counts[im.concept_id];
  }
  for (auto& [c, m] : means) m *= 1.0 / counts[c];

  int correct = 0, total = 0;
  for (const LabeledImage& im : corpus) {
    if (im.split != Split::kTest) continue;
    int best = -1;
    double best_d = 1e300;
    for (const auto& [c, m] : means) {
      const double d = mse(im.image.m, m);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += best == im.concept_id ? 1 : 0;
    ++total;
  }
  CHECK(static_cast<double>(correct) / total >= 0.95);
}

TEST_CASE("background specs take disjoint cells and omit triggers") {
  const auto specs = generate_concepts(20, 4);
  const auto bg = background_specs(specs, 10, 5);
  std::set<int> taken;
  for (const ConceptSpec& s : specs) taken.insert(s.grid_cell());
  std::set<int> ids;
  for (const ConceptSpec& s : specs) ids.insert(s.concept_id);
  for (const ConceptSpec& s : bg) {
    CHECK(taken.count(s.grid_cell()) == 0);
    CHECK(ids.count(s.concept_id) == 0);
  }
  const auto bg_corpus = build_background_corpus(bg, 6, 6);
  for (const LabeledImage& im : bg_corpus)
    for (int tok : im.caption_tokens) CHECK(!is_trigger_token(tok));
  CHECK_THROWS_AS(background_specs(specs, 40, 1), ArgumentError);
}

TEST_CASE("corpus directory round-trips byte-exactly") {
  const auto specs = generate_concepts(3, 77);
  Corpus corpus{specs, build_corpus(specs, 6, 77)};
  const std::string dir =
      (std::filesystem::temp_directory_path() / "dmaudit_corpus_rt").string();
  save_corpus(corpus, dir);
  const Corpus loaded = load_corpus(dir);
  REQUIRE(loaded.specs.size() == corpus.specs.size());
  REQUIRE(loaded.images.size() == corpus.images.size());
  for (std::size_t i = 0; i < corpus.specs.size(); ++i) {
    CHECK(loaded.specs[i].scale == corpus.specs[i].scale);
    CHECK(loaded.specs[i].texture_phase == corpus.specs[i].texture_phase);
    CHECK(loaded.specs[i].intensity == corpus.specs[i].intensity);
    CHECK(loaded.specs[i].trigger_token == corpus.specs[i].trigger_token);
  }
  for (std::size_t i = 0; i < corpus.images.size(); ++i) {
    CHECK(loaded.images[i].image.m == corpus.images[i].image.m);
    CHECK(loaded.images[i].caption_tokens == corpus.images[i].caption_tokens);
    CHECK(loaded.images[i].split == corpus.images[i].split);
  }
  std::filesystem::remove_all(dir);
}
