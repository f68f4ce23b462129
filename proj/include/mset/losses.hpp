#pragma once

#include "mset/common.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace mset {

struct LossConfig {
  /// Added to the denominator of the set-similarity term.
  double epsilon = 1e-6;
  /// Norms below this are clamped when forming cosines.
  double norm_floor = 1e-12;
  /// Largest cosine fed into the set-similarity term.
  double cosine_clamp = 1.0 - 1e-6;
  /// Exclude the member itself from its own centroid in the intra term (ablation only).
  bool leave_one_out = false;

  void validate() const;
};

/// u.v / (max(|u|, floor) * max(|v|, floor)).
double cosine(std::span<const double> u, std::span<const double> v, double norm_floor = 1e-12);

/// Adds scale * d cos / du into gu and scale * d cos / dv into gv.
void cosine_backward(std::span<const double> u, std::span<const double> v, double norm_floor, double scale,
                     std::span<double> gu, std::span<double> gv);

/// 1 / (1 - exp(min(c, clamp)) / e + epsilon).
double set_similarity_term(double cos, const LossConfig& config);
/// Derivative of set_similarity_term in c (zero past the clamp).
double set_similarity_term_derivative(double cos, const LossConfig& config);

/// Arithmetic mean of member embeddings.
Vec centroid(std::span<const Vec> members);

/// One document set inside a batch: member embeddings with click weights summing to 1.
struct SetEmbeddings {
  std::vector<Vec> members;
  std::vector<double> weights;
};

/// Gradient per set, per member.
using SetGradients = std::vector<std::vector<Vec>>;

struct SetLoss {
  double value = 0.0;
  SetGradients grads;
};

/// sum_i (1/N_i) sum_j w_ij f(cos(E_ij, C_i)), f = set_similarity_term. Every set needs >= 2 members.
SetLoss intra_loss(std::span<const SetEmbeddings> sets, const LossConfig& config = {}, bool with_grad = true);

/// sum_i sum_{j != i} (1/N_i) sum_k w_ik f(cos(E_ik, C_j)). Needs >= 2 sets.
SetLoss inter_loss(std::span<const SetEmbeddings> sets, const LossConfig& config = {}, bool with_grad = true);

/// -log(intra / inter), natural log.
SetLoss multiset_loss(std::span<const SetEmbeddings> sets, const LossConfig& config = {}, bool with_grad = true);

/// Indices into an embedding list: anchor q, co-click positive q*, negative q-.
struct PairwiseTriple {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
};

struct PairwiseLoss {
  double value = 0.0;
  std::vector<Vec> grads;
};

/// sum_q [1/(1+exp(cos(q,q*))) - 1/(1+exp(cos(q,q-)))].
PairwiseLoss pairwise_loss(std::span<const Vec> embeddings, std::span<const PairwiseTriple> triples,
                           double norm_floor = 1e-12, bool with_grad = true);

inline constexpr double kProbClamp = 1e-7;

struct BceLoss {
  double value = 0.0;
  /// d loss / d y_hat.
  Vec grad;
};

/// -(1/I) sum_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)], p clamped into [1e-7, 1 - 1e-7].
BceLoss bce_loss(std::span<const double> y, std::span<const double> y_hat);

/// BCE on sigmoid(logits); grad is d loss / d logits.
BceLoss bce_with_logits(std::span<const double> y, std::span<const double> logits);

double sigmoid(double x);

struct BenchRow {
  std::string objective;
  std::size_t k = 0;
  std::size_t n = 0;
  double median_seconds = 0.0;
  std::size_t repetitions = 0;
};

struct BenchConfig {
  std::vector<std::size_t> k_values{8};
  std::vector<std::size_t> n_values{100, 200, 400};
  std::size_t trials = 5;
  std::size_t dim = 64;
  std::uint64_t seed = 7;
  /// Each trial repeats the evaluation until it has run at least this long.
  double min_trial_seconds = 0.02;
  bool include_gradients = true;
};

/// Median wall time of one loss evaluation per (objective, K, N). Multiset evaluates the whole
/// batch; pairwise evaluates every ordered co-click pair within each set with one negative.
std::vector<BenchRow> bench_complexity(const BenchConfig& config);

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows);

}  // namespace mset
