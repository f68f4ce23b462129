#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mset {

/// One logged query + click interaction.
struct ClickEvent {
  std::int64_t timestamp = 0;
  std::string session_id;
  std::string query;
  std::string doc_id;
  std::string doc_url;
  std::string doc_type;
  std::string doc_title;
  std::int64_t click_count = 1;

  bool operator==(const ClickEvent&) const = default;
};

enum class LogFormat { CanonicalTsv, TripClickLike };

LogFormat parse_log_format(std::string_view name);
std::string_view header_for(LogFormat format);

struct ParseResult {
  std::vector<ClickEvent> events;
  std::size_t rows = 0;
  std::size_t malformed = 0;
  /// First few "line N: reason" entries.
  std::vector<std::string> issues;
};

/// Maximum share of malformed rows tolerated before parsing aborts.
inline constexpr double kMaxMalformedShare = 0.10;

ParseResult parse_log(const std::filesystem::path& path, LogFormat format);
ParseResult parse_log(std::istream& in, LogFormat format);

/// Writes events in canonical TSV (header included).
void write_log(std::ostream& out, std::span<const ClickEvent> events);
void write_log(const std::filesystem::path& path, std::span<const ClickEvent> events);

/// Path component of a URL: scheme, host, query string and fragment removed.
std::string url_path(std::string_view url);

struct SessionStep {
  std::int64_t timestamp = 0;
  std::string query;
  std::string doc_url;
  /// Clicked-document annotation (doc_type).
  std::string annotation;
  /// Path of the page the click landed on; the next search in the session starts there.
  std::string page_context;

  bool has_click() const { return !doc_url.empty() || !annotation.empty(); }
};

struct Session {
  std::string session_id;
  std::vector<SessionStep> steps;

  std::size_t size() const { return steps.size(); }
};

inline constexpr std::int64_t kDefaultSessionGapSeconds = 1800;

/// Groups events by session id in timestamp order, splitting on gaps larger than gap_seconds.
/// Split segments after the first get ids of the form "<id>~<k>".
std::vector<Session> sessionize(std::span<const ClickEvent> events,
                                std::int64_t gap_seconds = kDefaultSessionGapSeconds);

/// One (session, step) example; step is 1-based.
struct SessionExample {
  std::size_t session = 0;
  std::size_t step = 0;
};

struct SessionSplit {
  std::vector<Session> sessions;
  std::vector<SessionExample> train_examples;
  std::vector<SessionExample> eval_examples;
};

/// Keeps sessions with min_len <= length <= max_len. Train examples cover steps 1..n-1,
/// eval examples steps 2..n.
SessionSplit curate_sessions(std::vector<Session> sessions, std::size_t min_len = 2,
                             std::size_t max_len = 6);

struct SynthSpec {
  std::size_t n_intents = 8;
  std::size_t n_queries = 400;
  double vocab_overlap = 0.3;
  std::size_t n_sessions = 1000;
  double drift_prob = 0.0;
  std::uint64_t seed = 42;

  std::size_t tokens_per_intent = 40;
  std::size_t shared_tokens = 40;
  std::size_t min_query_tokens = 2;
  std::size_t max_query_tokens = 4;
  std::size_t min_session_len = 2;
  std::size_t max_session_len = 6;
  /// Probability that a query also gets a low-count click on a random other intent.
  double noise_click_prob = 0.2;
  std::int64_t min_main_clicks = 13;
  std::int64_t max_main_clicks = 30;
  std::int64_t noise_clicks = 3;
};

struct SynthStepTruth {
  std::string session_id;
  std::size_t step = 0;  // 1-based
  std::size_t global_intent = 0;
  std::size_t session_intent = 0;
  bool drifted = false;
};

struct SynthData {
  std::vector<ClickEvent> events;
  std::vector<std::string> intents;
  std::vector<std::string> queries;
  /// Planted intent per query (index into intents).
  std::vector<std::size_t> query_intent;
  std::vector<SynthStepTruth> steps;
};

/// Planted-intent click log. Each query gets aggregated rows (session ids "agg-*", one row per
/// session so they never form multi-step sessions) plus session traffic whose steps may drift
/// to another intent's query while clicking the session intent.
SynthData synth_generate(const SynthSpec& spec);

/// URL prefix the generator uses for an intent's documents.
std::string synth_url_prefix(std::string_view intent);

/// "query\tintent" rows for the planted truth.
void write_truth(const std::filesystem::path& path, const SynthData& data);

}  // namespace mset
