#pragma once

#include "mset/common.hpp"
#include "mset/labeling.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mset {

/// Cluster id per item, contiguous from 0.
struct Partition {
  std::vector<std::size_t> labels;

  /// Relabels arbitrary ids to 0.. in order of first appearance.
  static Partition from_ids(std::span<const std::size_t> ids);

  std::size_t size() const { return labels.size(); }
  std::size_t num_clusters() const;
  bool operator==(const Partition&) const = default;
};

/// True when both partitions group items identically (ignoring cluster ids).
bool same_grouping(const Partition& a, const Partition& b);

struct KMeansResult {
  Partition partition;
  double inertia = 0.0;
  std::vector<Vec> centers;
};

/// Lloyd iterations from k-means++ seeding; best inertia over `restarts` seeded starts.
KMeansResult kmeans(std::span<const Vec> points, std::size_t k, std::size_t restarts = 10,
                    std::uint64_t seed = 0, std::size_t max_iter = 100);

/// Adjusted Rand index from the contingency table. Two single-cluster partitions score 1.
double ari(const Partition& pred, const Partition& truth);

/// Mutual information over the arithmetic mean of the two entropies (natural log).
/// Zero-entropy convention: identical partitions score 1, otherwise 0.
double nmi(const Partition& pred, const Partition& truth);

enum class Averaging { Micro, Macro };

struct ClassificationScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::vector<std::string> warnings;
};

/// Precision/recall/F1 over (query, label) pairs. With no predicted positives precision is 0.
ClassificationScores precision_f1(std::span<const LabelVector> decided, std::span<const LabelVector> truth,
                                  Averaging averaging = Averaging::Micro);

/// Indices of the k highest scores; ties keep the lower index first.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

/// Share of samples with any true label among the top min(3, I) scores.
double hit_rate_3(std::span<const Vec> scores, std::span<const LabelVector> truth);

struct NdcgResult {
  double value = 0.0;
  std::size_t evaluated = 0;
  /// Samples without any relevant label, left out of the mean.
  std::size_t excluded = 0;
};

/// Mean over samples of DCG@3 / IDCG@3 with binary relevance and log2(rank + 1) discount.
NdcgResult ndcg_3(std::span<const Vec> scores, std::span<const LabelVector> truth);

struct SplitRatios {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

/// Whole-sample counts for a group of n under the ratios, by largest remainder
/// (ties go to train, then val, then test).
std::array<std::size_t, 3> largest_remainder(std::size_t n, const SplitRatios& ratios);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Groups items by exact label combination. Groups with >= min_group items are shuffled and
/// divided by the ratios; smaller groups go entirely to test. Index lists are sorted.
SplitIndices stratified_split(std::span<const LabelVector> labels, const SplitRatios& ratios = {},
                              std::size_t min_group = 3, std::uint64_t seed = 0);

struct TTestResult {
  double mean_diff = 0.0;
  double t = 0.0;
  double df = 0.0;
  /// P(T >= t) under H0, i.e. the one-sided test of mean(a - b) > 0.
  double p_one_sided = 1.0;
};

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

/// Clustering and classification metrics; unset fields are omitted from output.
struct MetricReport {
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
  std::optional<double> hit_rate_3;
  std::optional<double> ndcg_3;
  std::optional<double> ari;
  std::optional<double> nmi;
  std::size_t support = 0;
  std::size_t ndcg_excluded = 0;
  std::string note;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
  std::string to_table() const;
};

}  // namespace mset
