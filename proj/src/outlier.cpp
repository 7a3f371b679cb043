#include "dmaudit/outlier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace dmaudit {

double average_path_length(std::size_t n) {
  if (n <= 1) return 0.0;
  double harmonic = 0.0;
  for (std::size_t i = 1; i + 1 <= n; ++i) harmonic += 1.0 / static_cast<double>(i);
  return 2.0 * harmonic -
         2.0 * static_cast<double>(n - 1) / static_cast<double>(n);
}

namespace {

int build_node(IsolationForest::Tree& tree, std::vector<std::size_t>& idx, std::size_t begin,
               std::size_t end, int depth, const std::vector<FeatureRow>& rows, Rng& rng) {
  const int node_id = static_cast<int>(tree.nodes.size());
  tree.nodes.push_back({});
  const std::size_t n = end - begin;
  if (n <= 1 || depth >= tree.max_depth) {
    tree.nodes[static_cast<std::size_t>(node_id)].size = static_cast<int>(n);
    return node_id;
  }
  // Collect features that still have spread inside this node.
  const std::size_t dims = rows[idx[begin]].values.size();
  std::vector<int> candidates;
  candidates.reserve(dims);
  for (std::size_t f = 0; f < dims; ++f) {
    double lo = rows[idx[begin]].values[f], hi = lo;
    for (std::size_t i = begin + 1; i < end; ++i) {
      const double v = rows[idx[i]].values[f];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi > lo) candidates.push_back(static_cast<int>(f));
  }
  if (candidates.empty()) {
    tree.nodes[static_cast<std::size_t>(node_id)].size = static_cast<int>(n);
    return node_id;
  }
  const int feature =
      candidates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1))];
  double lo = rows[idx[begin]].values[static_cast<std::size_t>(feature)], hi = lo;
  for (std::size_t i = begin + 1; i < end; ++i) {
    const double v = rows[idx[i]].values[static_cast<std::size_t>(feature)];
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double threshold = rng.uniform(lo, hi);

  auto mid_it = std::partition(idx.begin() + static_cast<std::ptrdiff_t>(begin),
                               idx.begin() + static_cast<std::ptrdiff_t>(end),
                               [&](std::size_t i) {
                                 return rows[i].values[static_cast<std::size_t>(feature)] <
                                        threshold;
                               });
  const std::size_t mid = static_cast<std::size_t>(mid_it - idx.begin());
  if (mid == begin || mid == end) {
    // Degenerate split (threshold at the boundary); stop here.
    tree.nodes[static_cast<std::size_t>(node_id)].size = static_cast<int>(n);
    return node_id;
  }
  const int left = build_node(tree, idx, begin, mid, depth + 1, rows, rng);
  const int right = build_node(tree, idx, mid, end, depth + 1, rows, rng);
  IsolationForest::Node& node = tree.nodes[static_cast<std::size_t>(node_id)];
  node.feature = feature;
  node.threshold = threshold;
  node.left = left;
  node.right = right;
  node.size = static_cast<int>(n);
  return node_id;
}

double path_length(const IsolationForest::Tree& tree, const FeatureRow& row) {
  int node_id = 0;
  double depth = 0.0;
  for (;;) {
    const IsolationForest::Node& node = tree.nodes[static_cast<std::size_t>(node_id)];
    if (node.feature < 0) {
      return depth + average_path_length(static_cast<std::size_t>(node.size));
    }
    node_id = row.values[static_cast<std::size_t>(node.feature)] < node.threshold ? node.left
                                                                                  : node.right;
    depth += 1.0;
  }
}

double quantile_threshold(std::vector<double> scores, double quantile) {
  std::sort(scores.begin(), scores.end());
  const std::size_t n = scores.size();
  std::size_t k = static_cast<std::size_t>(std::ceil(quantile * static_cast<double>(n)));
  if (k == 0) k = 1;
  if (k > n) k = n;
  return scores[k - 1];
}

}  // namespace

IsolationForest IsolationForest::fit(const std::vector<FeatureRow>& rows, int n_trees,
                                     int subsample, std::uint64_t seed, double quantile) {
  if (rows.size() < 8) throw ArgumentError("isolation forest: need at least 8 training rows");
  if (n_trees < 1) throw ArgumentError("isolation forest: need at least one tree");
  if (!(quantile > 0.0 && quantile < 1.0))
    throw ArgumentError("isolation forest: quantile must lie in (0, 1)");
  const std::size_t dims = rows[0].values.size();
  if (dims == 0) throw ArgumentError("isolation forest: zero-dimensional rows");
  for (const FeatureRow& r : rows) {
    if (r.values.size() != dims)
      throw ArgumentError("isolation forest: inconsistent feature dimensionality");
    for (double v : r.values)
      if (!std::isfinite(v)) throw ArgumentError("isolation forest: non-finite feature value");
  }

  IsolationForest f;
  f.dims_ = dims;
  f.train_n_ = rows.size();
  f.subsample_ = std::min<int>(subsample, static_cast<int>(rows.size()));
  if (f.subsample_ < 2) throw ArgumentError("isolation forest: subsample must be >= 2");
  f.seed_ = seed;
  f.quantile_ = quantile;

  Rng rng(mix64(seed ^ 0x69666f726573744full));
  const int height_limit = static_cast<int>(
      std::ceil(std::log2(static_cast<double>(f.subsample_))));
  f.trees_.reserve(static_cast<std::size_t>(n_trees));
  for (int t = 0; t < n_trees; ++t) {
    std::vector<std::size_t> idx =
        rng.sample_indices(rows.size(), static_cast<std::size_t>(f.subsample_));
    Tree tree;
    tree.max_depth = height_limit;
    build_node(tree, idx, 0, idx.size(), 0, rows, rng);
    f.trees_.push_back(std::move(tree));
  }

  std::vector<double> train_scores;
  train_scores.reserve(rows.size());
  for (const FeatureRow& r : rows) train_scores.push_back(f.score(r));
  f.delta_ = quantile_threshold(std::move(train_scores), quantile);
  return f;
}

double IsolationForest::score(const FeatureRow& row) const {
  if (row.values.size() != dims_)
    throw ArgumentError("isolation forest: feature dimensionality mismatch");
  double total = 0.0;
  for (const Tree& t : trees_) total += path_length(t, row);
  const double mean_path = total / static_cast<double>(trees_.size());
  return std::pow(2.0, -mean_path / average_path_length(static_cast<std::size_t>(subsample_)));
}

nlohmann::json IsolationForest::to_json() const {
  nlohmann::json trees = nlohmann::json::array();
  for (const Tree& t : trees_) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const Node& n : t.nodes)
      nodes.push_back({n.feature, n.threshold, n.left, n.right, n.size});
    trees.push_back({{"max_depth", t.max_depth}, {"nodes", nodes}});
  }
  return nlohmann::json{{"kind", "isolation_forest"},
                        {"dims", dims_},
                        {"train_n", train_n_},
                        {"subsample", subsample_},
                        {"delta", delta_},
                        {"seed", seed_},
                        {"quantile", quantile_},
                        {"trees", trees}};
}

IsolationForest IsolationForest::from_json(const nlohmann::json& j) {
  if (!j.contains("kind") || j["kind"] != "isolation_forest")
    throw FormatError("isolation forest: wrong container kind");
  IsolationForest f;
  f.dims_ = j.at("dims").get<std::size_t>();
  f.train_n_ = j.at("train_n").get<std::size_t>();
  f.subsample_ = j.at("subsample").get<int>();
  f.delta_ = j.at("delta").get<double>();
  f.seed_ = j.at("seed").get<std::uint64_t>();
  f.quantile_ = j.at("quantile").get<double>();
  for (const auto& tj : j.at("trees")) {
    Tree t;
    t.max_depth = tj.at("max_depth").get<int>();
    for (const auto& nj : tj.at("nodes")) {
      Node n;
      n.feature = nj.at(0).get<int>();
      n.threshold = nj.at(1).get<double>();
      n.left = nj.at(2).get<int>();
      n.right = nj.at(3).get<int>();
      n.size = nj.at(4).get<int>();
      t.nodes.push_back(n);
    }
    f.trees_.push_back(std::move(t));
  }
  return f;
}

void IsolationForest::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw FormatError("isolation forest: cannot write " + path);
  os << to_json().dump(1);
}

IsolationForest IsolationForest::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("isolation forest: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("isolation forest: bad file: ") + e.what());
  }
  return from_json(j);
}

KnnDetector KnnDetector::fit(const std::vector<FeatureRow>& rows, int k, std::uint64_t,
                             double quantile) {
  if (rows.size() < 8) throw ArgumentError("knn detector: need at least 8 training rows");
  if (k < 1) throw ArgumentError("knn detector: k must be >= 1");
  KnnDetector d;
  d.train_ = rows;
  d.k_ = std::min<int>(k, static_cast<int>(rows.size()) - 1);
  std::vector<double> scores;
  scores.reserve(rows.size());
  for (const FeatureRow& r : rows) scores.push_back(d.score(r));
  d.delta_ = quantile_threshold(std::move(scores), quantile);
  return d;
}

double KnnDetector::score(const FeatureRow& row) const {
  std::vector<double> dists;
  dists.reserve(train_.size());
  for (const FeatureRow& r : train_) {
    double acc = 0.0;
    for (std::size_t i = 0; i < row.values.size(); ++i) {
      const double d = row.values[i] - r.values[i];
      acc += d * d;
    }
    if (acc > 0.0 || &r != &row) dists.push_back(std::sqrt(acc));
  }
  std::sort(dists.begin(), dists.end());
  // Skip the zero self-distance when scoring a training row.
  std::size_t start = !dists.empty() && dists[0] == 0.0 ? 1 : 0;
  double acc = 0.0;
  int used = 0;
  for (std::size_t i = start; i < dists.size() && used < k_; ++i, ++used) acc += dists[i];
  return used > 0 ? acc / used : 0.0;
}

double auc_score(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw ArgumentError("auc: mismatched or empty inputs");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks for ties.
  std::vector<double> rank(scores.size(), 0.0);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] == 1) {
      pos_rank_sum += rank[k];
      ++n_pos;
    }
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ArgumentError("auc: need both classes");
  return (pos_rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace dmaudit
