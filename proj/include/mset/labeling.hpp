#pragma once

#include "mset/clicklog.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <vector>

namespace mset {

/// Ordered intent names; the order defines label-vector indices.
class IntentTaxonomy {
 public:
  IntentTaxonomy() = default;
  explicit IntentTaxonomy(std::vector<std::string> intents);

  /// The 14-intent health-search taxonomy.
  static IntentTaxonomy health_search();

  std::size_t size() const { return intents_.size(); }
  const std::string& name(std::size_t i) const { return intents_.at(i); }
  const std::vector<std::string>& names() const { return intents_; }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;
  /// Index of "all_others"; throws if the taxonomy lacks it.
  std::size_t fallback() const;

 private:
  std::vector<std::string> intents_;
};

/// Binary multi-label target over a taxonomy.
struct LabelVector {
  std::vector<std::uint8_t> bits;

  LabelVector() = default;
  explicit LabelVector(std::size_t n) : bits(n, 0) {}
  static LabelVector one_hot(std::size_t n, std::size_t i);

  std::size_t size() const { return bits.size(); }
  bool has(std::size_t i) const { return bits.at(i) != 0; }
  void set(std::size_t i) { bits.at(i) = 1; }
  std::size_t count() const;
  std::vector<std::size_t> indices() const;
  bool operator==(const LabelVector&) const = default;
};

/// "a;b" using taxonomy names, in taxonomy order.
std::string format_labels(const LabelVector& y, const IntentTaxonomy& taxonomy);
LabelVector parse_labels(std::string_view joined, const IntentTaxonomy& taxonomy);

struct IntentRule {
  std::string intent;
  std::string pattern;
};

/// Maps a clicked document onto an intent: URL regex rules (first match wins) or, for
/// TripClick-style corpora, the doc_type itself. Unmatched clicks route to all_others.
class IntentRouter {
 public:
  static IntentRouter from_rules(IntentTaxonomy taxonomy, std::vector<IntentRule> rules);
  static IntentRouter from_doc_types(IntentTaxonomy taxonomy);

  const IntentTaxonomy& taxonomy() const { return taxonomy_; }
  const std::vector<IntentRule>& rules() const { return rules_; }
  bool uses_doc_type() const { return by_doc_type_; }

  std::size_t route(std::string_view doc_url, std::string_view doc_type) const;

 private:
  IntentTaxonomy taxonomy_;
  std::vector<IntentRule> rules_;
  std::vector<std::regex> compiled_;
  std::vector<std::size_t> rule_intent_;
  bool by_doc_type_ = false;
};

/// Rules file: JSON array of {"intent": ..., "pattern": ...}.
std::vector<IntentRule> read_rules_json(const std::filesystem::path& path);
void write_rules_json(const std::filesystem::path& path, const std::vector<IntentRule>& rules);

struct ClickStat {
  std::string doc_url;
  std::string doc_type;
  double clicks = 0.0;
};

/// Aggregated click statistics per query, in first-seen order.
std::map<std::string, std::vector<ClickStat>> aggregate_clicks(std::span<const ClickEvent> events);

inline constexpr double kDefaultMultiLabelThreshold = 0.2;

/// Every intent receiving >= threshold of the click mass is set; if none qualifies the
/// argmax intent (lowest index on ties) is set.
LabelVector label_query(std::span<const ClickStat> stats, const IntentRouter& router,
                        double multi_label_threshold = kDefaultMultiLabelThreshold);

struct IntentDistribution {
  std::vector<double> probs;
};

IntentDistribution intent_distribution(std::span<const ClickStat> stats, const IntentRouter& router);

/// 2^entropy (bits), with 0 log 0 = 0. Throws on a non-normalized distribution.
double perplexity(const IntentDistribution& dist);

/// Intent of the document clicked at this step; nullopt when the step has no click.
std::optional<LabelVector> session_inferred_intent(const SessionStep& step, const IntentRouter& router);

enum class IntentMatch { Exact, Jaccard };

/// Mean agreement between global and session-inferred intents over the steps that carry a
/// click. Exact compares label sets; Jaccard scores |A∩B|/|A∪B|.
double concordance_rate(const Session& session, const std::map<std::string, LabelVector>& global_intents,
                        const IntentRouter& router, IntentMatch match = IntentMatch::Exact);

struct QueryLabel {
  std::string query;
  LabelVector labels;
  double perplexity = 1.0;
};

/// Labels every query in the log.
std::vector<QueryLabel> label_corpus(std::span<const ClickEvent> events, const IntentRouter& router,
                                     double multi_label_threshold = kDefaultMultiLabelThreshold);

/// TSV: query, semicolon-joined intents, perplexity.
void write_labels_tsv(const std::filesystem::path& path, const std::vector<QueryLabel>& labels,
                      const IntentTaxonomy& taxonomy);
std::vector<QueryLabel> read_labels_tsv(const std::filesystem::path& path, const IntentTaxonomy& taxonomy);

}  // namespace mset
