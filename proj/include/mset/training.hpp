#pragma once

#include "mset/cosets.hpp"
#include "mset/encoder.hpp"
#include "mset/losses.hpp"

#include <cstdint>
#include <string_view>
#include <vector>

namespace mset {

enum class Objective { Pairwise, Multiset, Bce };

Objective parse_objective(std::string_view name);
std::string_view objective_name(Objective objective);

struct ContrastiveConfig {
  Objective objective = Objective::Multiset;
  std::size_t steps = 300;
  std::size_t sets_per_batch = 4;
  std::size_t queries_per_set = 8;
  AdamConfig adam;
  /// Training clamps cosines at 0.9 rather than the LossConfig default: closer to 1 the term's
  /// slope explodes and the update concentrates on already-aligned members.
  LossConfig loss{1e-6, 1e-12, 0.9, false};
  std::uint64_t seed = 1;
};

struct ContrastiveReport {
  std::vector<double> losses;
};

/// Pairwise triples over the flattened batch (group-major order): every member is an anchor
/// with one uniform positive from its own group and one uniform negative from another group.
std::vector<PairwiseTriple> build_pairwise_triples(const TrainingBatch& batch, std::uint64_t seed);

/// Loss value and dL/dparams for one batch under a contrastive objective.
double contrastive_step_gradient(const EncoderParams& params, const Tokenizer& tokenizer,
                                 const TrainingBatch& batch, const ContrastiveConfig& config,
                                 std::uint64_t step_seed, EncoderParams& grads);

/// Fine-tunes the encoder on co-query sets with the pairwise or multiset objective.
/// Batches are redrawn each step from seeds derived from config.seed.
ContrastiveReport train_encoder(EncoderParams& params, const Tokenizer& tokenizer, const CoQueryCorpus& corpus,
                                const ContrastiveConfig& config);

/// Weighted mean cosine between each member embedding and its set centroid, over sets with >= 2 members.
double mean_intra_cosine(const EncoderParams& params, const Tokenizer& tokenizer, const CoQueryCorpus& corpus);

}  // namespace mset
