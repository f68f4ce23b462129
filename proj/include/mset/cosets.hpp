#pragma once

#include "mset/clicklog.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mset {

struct SetMember {
  std::string query;
  std::int64_t count = 0;
  double weight = 0.0;

  bool operator==(const SetMember&) const = default;
};

/// Co-query cluster: every query whose clicks landed on one document key.
struct DocumentSet {
  std::string set_id;
  std::vector<SetMember> members;

  std::size_t size() const { return members.size(); }
  bool operator==(const DocumentSet&) const = default;
};

struct CoQueryCorpus {
  std::vector<DocumentSet> sets;
  /// query -> (set index, weight) for every set containing it.
  std::map<std::string, std::vector<std::pair<std::size_t, double>>> query_index;

  std::size_t num_sets() const { return sets.size(); }
};

enum class SetKey { DocType, UrlPattern };

SetKey parse_set_key(std::string_view name);

inline constexpr std::int64_t kHsMinClicks = 3;
inline constexpr std::int64_t kTripClickMinClicks = 6;

/// Grouping key of an event: doc_type, or the first path segment of doc_url ("/provider/").
std::string set_key_of(const ClickEvent& ev, SetKey key);

/// One DocumentSet per key value; (query, key) pairs are kept when their aggregated
/// click count is >= min_clicks. Sets are ordered by key, members by query.
CoQueryCorpus extract_sets(std::span<const ClickEvent> events, std::int64_t min_clicks,
                           SetKey key = SetKey::DocType);

/// Click-share weights w_ij = count_ij / sum_k count_ik.
DocumentSet compute_weights(std::string set_id,
                            const std::vector<std::pair<std::string, std::int64_t>>& counts);

/// Rebuilds query_index from sets.
void index_corpus(CoQueryCorpus& corpus);

struct BatchGroup {
  std::size_t set_index = 0;
  std::vector<std::string> queries;
  /// Click weights of the sampled members, renormalized to sum to 1.
  std::vector<double> weights;
};

struct TrainingBatch {
  std::vector<BatchGroup> groups;
};

/// Samples sets_per_batch distinct sets among those with >= 2 members, then up to
/// queries_per_set members of each without replacement, proportional to weight.
TrainingBatch batch_sample(const CoQueryCorpus& corpus, std::size_t sets_per_batch,
                           std::size_t queries_per_set, std::uint64_t seed);

void write_corpus_jsonl(const std::filesystem::path& path, const CoQueryCorpus& corpus);
CoQueryCorpus read_corpus_jsonl(const std::filesystem::path& path);

}  // namespace mset
