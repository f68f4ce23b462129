#include "mset/training.hpp"

namespace mset {

Objective parse_objective(std::string_view name) {
  if (name == "pairwise") return Objective::Pairwise;
  if (name == "multiset") return Objective::Multiset;
  if (name == "bce") return Objective::Bce;
  throw Error(Error::Kind::Config, "unknown objective: " + std::string(name));
}

std::string_view objective_name(Objective objective) {
  switch (objective) {
    case Objective::Pairwise: return "pairwise";
    case Objective::Multiset: return "multiset";
    case Objective::Bce: return "bce";
  }
  return "?";
}

std::vector<PairwiseTriple> build_pairwise_triples(const TrainingBatch& batch, std::uint64_t seed) {
  if (batch.groups.size() < 2) throw Error(Error::Kind::Precondition, "pairwise triples need >= 2 groups");
  std::vector<std::size_t> offset;
  std::size_t total = 0;
  for (const auto& g : batch.groups) {
    offset.push_back(total);
    total += g.queries.size();
  }
  Rng rng(seed);
  std::vector<PairwiseTriple> triples;
  for (std::size_t gi = 0; gi < batch.groups.size(); ++gi) {
    const std::size_t n = batch.groups[gi].queries.size();
    if (n < 2) continue;
    for (std::size_t a = 0; a < n; ++a) {
      std::size_t p = uniform_index(rng, n - 1);
      if (p >= a) ++p;
      std::size_t other = uniform_index(rng, batch.groups.size() - 1);
      if (other >= gi) ++other;
      const std::size_t neg = uniform_index(rng, batch.groups[other].queries.size());
      triples.push_back({offset[gi] + a, offset[gi] + p, offset[other] + neg});
    }
  }
  return triples;
}

double contrastive_step_gradient(const EncoderParams& params, const Tokenizer& tokenizer,
                                 const TrainingBatch& batch, const ContrastiveConfig& config,
                                 std::uint64_t step_seed, EncoderParams& grads) {
  std::vector<EncodeTrace> traces;
  for (const auto& g : batch.groups) {
    for (const auto& q : g.queries) {
      const auto ids = tokenizer.tokenize(q);
      traces.push_back(encode_traced(params, ids));
    }
  }

  double value = 0;
  std::vector<Vec> grad_out;
  if (config.objective == Objective::Multiset) {
    std::vector<SetEmbeddings> sets;
    std::size_t t = 0;
    for (const auto& g : batch.groups) {
      SetEmbeddings s;
      s.weights = g.weights;
      for (std::size_t j = 0; j < g.queries.size(); ++j) s.members.push_back(traces[t++].output);
      sets.push_back(std::move(s));
    }
    SetLoss loss = multiset_loss(sets, config.loss, true);
    value = loss.value;
    for (auto& per_set : loss.grads) {
      for (auto& gm : per_set) grad_out.push_back(std::move(gm));
    }
  } else if (config.objective == Objective::Pairwise) {
    std::vector<Vec> embeddings;
    embeddings.reserve(traces.size());
    for (const auto& tr : traces) embeddings.push_back(tr.output);
    const auto triples = build_pairwise_triples(batch, step_seed);
    PairwiseLoss loss = pairwise_loss(embeddings, triples, config.loss.norm_floor, true);
    value = loss.value;
    grad_out = std::move(loss.grads);
  } else {
    throw Error(Error::Kind::Config, "contrastive training supports pairwise and multiset objectives");
  }

  for (std::size_t i = 0; i < traces.size(); ++i) backprop(params, traces[i], grad_out[i], grads);
  return value;
}

ContrastiveReport train_encoder(EncoderParams& params, const Tokenizer& tokenizer, const CoQueryCorpus& corpus,
                                const ContrastiveConfig& config) {
  if (tokenizer.vocab_size() != params.shape.vocab) {
    throw Error(Error::Kind::Config, "tokenizer vocab does not match encoder");
  }
  ContrastiveReport report;
  EncoderParams grads = EncoderParams::zeros(params.shape);
  AdamState state;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const std::string label = "step-" + std::to_string(step);
    const auto batch = batch_sample(corpus, config.sets_per_batch, config.queries_per_set,
                                    derive_seed(config.seed, "batch-" + label));
    grads.set_zero();
    report.losses.push_back(
        contrastive_step_gradient(params, tokenizer, batch, config, derive_seed(config.seed, "pairs-" + label), grads));
    adam_step(params.values, grads.values, state, config.adam);
  }
  return report;
}

double mean_intra_cosine(const EncoderParams& params, const Tokenizer& tokenizer, const CoQueryCorpus& corpus) {
  double total = 0;
  double mass = 0;
  for (const auto& set : corpus.sets) {
    if (set.size() < 2) continue;
    std::vector<Vec> emb;
    for (const auto& m : set.members) emb.push_back(encode(params, tokenizer, m.query));
    const Vec c = centroid(emb);
    for (std::size_t j = 0; j < emb.size(); ++j) {
      total += set.members[j].weight * cosine(emb[j], c);
      mass += set.members[j].weight;
    }
  }
  return mass > 0 ? total / mass : 0.0;
}

}  // namespace mset
