#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dmaudit/errors.hpp"
#include "dmaudit/rng.hpp"

namespace dmaudit {

// One detection unit: the calibrated-error profile of an image over the
// audited timestep grid.
struct FeatureRow {
  std::vector<double> values;
};

// Average unsuccessful-search path length of a binary search tree holding n
// points: c(n) = 2 H(n-1) - 2 (n-1)/n with exact harmonic numbers, the
// normalizer of the anomaly score.
double average_path_length(std::size_t n);

// From-scratch isolation forest over fixed-length feature rows. Scores are
// 2^(-E[path length]/c(subsample)): isolated points exit trees early and
// score close to 1, dense cluster members score below 0.5.
class IsolationForest {
 public:
  struct Node {
    int feature = -1;        // -1 marks a leaf
    double threshold = 0.0;
    int left = -1, right = -1;
    int size = 0;  // leaf population, drives the c(size) path correction
  };
  struct Tree {
    std::vector<Node> nodes;
    int max_depth = 0;
  };

  // Fits n_trees random axis-aligned split trees on subsamples. The decision
  // threshold delta is set to the training-score quantile so at most
  // (1 - quantile) of the training rows flag as anomalous.
  static IsolationForest fit(const std::vector<FeatureRow>& rows, int n_trees, int subsample,
                             std::uint64_t seed, double quantile = 0.95);

  double score(const FeatureRow& row) const;
  // Strict comparison against delta, so a row scoring exactly delta is inlier.
  bool is_outlier(const FeatureRow& row) const { return score(row) > delta_; }

  double delta() const { return delta_; }
  std::size_t dimensions() const { return dims_; }
  int tree_count() const { return static_cast<int>(trees_.size()); }
  int subsample() const { return subsample_; }
  std::size_t train_count() const { return train_n_; }
  const std::vector<Tree>& trees() const { return trees_; }

  nlohmann::json to_json() const;
  static IsolationForest from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static IsolationForest load(const std::string& path);

 private:
  std::vector<Tree> trees_;
  std::size_t dims_ = 0;
  std::size_t train_n_ = 0;
  int subsample_ = 0;
  double delta_ = 0.0;
  std::uint64_t seed_ = 0;
  double quantile_ = 0.95;
};

// Mean distance to the k nearest training rows, thresholded at the same
// training quantile. Kept behind a flag for the detector comparison study.
class KnnDetector {
 public:
  static KnnDetector fit(const std::vector<FeatureRow>& rows, int k, std::uint64_t seed,
                         double quantile = 0.95);
  double score(const FeatureRow& row) const;
  bool is_outlier(const FeatureRow& row) const { return score(row) > delta_; }
  double delta() const { return delta_; }

 private:
  std::vector<FeatureRow> train_;
  int k_ = 5;
  double delta_ = 0.0;
};

// Rank-based AUC of scores against binary labels (1 = anomaly).
double auc_score(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace dmaudit
