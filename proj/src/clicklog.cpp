#include "mset/clicklog.hpp"

#include "mset/common.hpp"

#include <algorithm>
#include <charconv>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

namespace mset {

namespace {

constexpr std::string_view kCanonicalHeader =
    "timestamp\tsession_id\tquery\tdoc_id\tdoc_url\tdoc_type\tdoc_title\tclick_count";
constexpr std::string_view kTripClickHeader =
    "DateCreated\tSessionId\tKeywords\tDocumentId\tDocumentUrl\tDocumentType\tTitle";

bool parse_int(std::string_view s, std::int64_t& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  return ec == std::errc() && ptr == t.data() + t.size();
}

/// Integer epoch seconds or "YYYY-MM-DD HH:MM:SS" (UTC).
bool parse_time(std::string_view s, std::int64_t& out) {
  if (parse_int(s, out)) return true;
  std::tm tm{};
  std::istringstream in{std::string(trim(s))};
  in >> std::get_time(&tm, "%Y-%m-%d %H:%M:%S");
  if (in.fail()) return false;
  out = static_cast<std::int64_t>(timegm(&tm));
  return true;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

std::string sanitize_field(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c == '\t' || c == '\n' || c == '\r') c = ' ';
  }
  return out;
}

}  // namespace

LogFormat parse_log_format(std::string_view name) {
  if (name == "canonical-tsv" || name == "canonical") return LogFormat::CanonicalTsv;
  if (name == "tripclick-like" || name == "tripclick") return LogFormat::TripClickLike;
  throw Error(Error::Kind::Input, "unknown log format: " + std::string(name));
}

std::string_view header_for(LogFormat format) {
  return format == LogFormat::CanonicalTsv ? kCanonicalHeader : kTripClickHeader;
}

ParseResult parse_log(const std::filesystem::path& path, LogFormat format) {
  std::ifstream in(path);
  if (!in) throw Error(Error::Kind::Io, "cannot open log: " + path.string());
  return parse_log(in, format);
}

ParseResult parse_log(std::istream& in, LogFormat format) {
  ParseResult result;
  std::string line;
  if (!std::getline(in, line)) throw Error(Error::Kind::Input, "log is empty (missing header)");
  if (strip_cr(line) != header_for(format)) {
    throw Error(Error::Kind::Input, "header does not match declared format");
  }

  const std::size_t expected_cols = format == LogFormat::CanonicalTsv ? 8 : 7;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    ++result.rows;

    auto fail = [&](std::string_view reason) {
      ++result.malformed;
      if (result.issues.size() < 20) {
        result.issues.push_back("line " + std::to_string(line_no) + ": " + std::string(reason));
      }
    };

    const auto cols = split(line, '\t');
    if (cols.size() != expected_cols) {
      fail("expected " + std::to_string(expected_cols) + " columns, got " +
           std::to_string(cols.size()));
      continue;
    }
    ClickEvent ev;
    if (!parse_time(cols[0], ev.timestamp)) {
      fail("bad timestamp");
      continue;
    }
    ev.session_id = trim(cols[1]);
    ev.query = normalize_query(cols[2]);
    ev.doc_id = trim(cols[3]);
    ev.doc_url = trim(cols[4]);
    ev.doc_type = trim(cols[5]);
    ev.doc_title = trim(cols[6]);
    if (format == LogFormat::CanonicalTsv) {
      if (!parse_int(cols[7], ev.click_count) || ev.click_count < 1) {
        fail("click_count must be a positive integer");
        continue;
      }
    }
    if (ev.query.empty()) {
      fail("empty query");
      continue;
    }
    result.events.push_back(std::move(ev));
  }

  if (result.rows > 0 &&
      static_cast<double>(result.malformed) > kMaxMalformedShare * static_cast<double>(result.rows)) {
    std::ostringstream msg;
    msg << result.malformed << " of " << result.rows << " rows malformed (limit "
        << kMaxMalformedShare * 100 << "%)";
    for (const auto& issue : result.issues) msg << "\n  " << issue;
    throw Error(Error::Kind::Input, msg.str());
  }
  return result;
}

void write_log(std::ostream& out, std::span<const ClickEvent> events) {
  out << kCanonicalHeader << '\n';
  for (const auto& ev : events) {
    out << ev.timestamp << '\t' << sanitize_field(ev.session_id) << '\t'
        << sanitize_field(ev.query) << '\t' << sanitize_field(ev.doc_id) << '\t'
        << sanitize_field(ev.doc_url) << '\t' << sanitize_field(ev.doc_type) << '\t'
        << sanitize_field(ev.doc_title) << '\t' << ev.click_count << '\n';
  }
}

void write_log(const std::filesystem::path& path, std::span<const ClickEvent> events) {
  std::ofstream out(path);
  if (!out) throw Error(Error::Kind::Io, "cannot write log: " + path.string());
  write_log(out, events);
}

std::string url_path(std::string_view url) {
  std::string_view rest = url;
  if (const auto scheme = rest.find("://"); scheme != std::string_view::npos) {
    rest = rest.substr(scheme + 3);
    const auto slash = rest.find('/');
    rest = slash == std::string_view::npos ? std::string_view{} : rest.substr(slash);
  }
  if (const auto cut = rest.find_first_of("?#"); cut != std::string_view::npos) {
    rest = rest.substr(0, cut);
  }
  return std::string(rest);
}

std::vector<Session> sessionize(std::span<const ClickEvent> events, std::int64_t gap_seconds) {
  if (gap_seconds <= 0) throw Error(Error::Kind::Precondition, "gap_seconds must be > 0");

  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<const ClickEvent*>> by_id;
  for (const auto& ev : events) {
    auto [it, inserted] = by_id.try_emplace(ev.session_id);
    if (inserted) order.push_back(ev.session_id);
    it->second.push_back(&ev);
  }

  std::vector<Session> sessions;
  for (const auto& id : order) {
    auto& group = by_id[id];
    std::stable_sort(group.begin(), group.end(),
                     [](const ClickEvent* a, const ClickEvent* b) { return a->timestamp < b->timestamp; });
    std::size_t segment = 0;
    Session current{id, {}};
    std::int64_t last = 0;
    for (const ClickEvent* ev : group) {
      if (!current.steps.empty() && ev->timestamp - last > gap_seconds) {
        sessions.push_back(std::move(current));
        ++segment;
        current = Session{id + "~" + std::to_string(segment), {}};
      }
      current.steps.push_back(SessionStep{ev->timestamp, ev->query, ev->doc_url, ev->doc_type,
                                          url_path(ev->doc_url)});
      last = ev->timestamp;
    }
    sessions.push_back(std::move(current));
  }
  return sessions;
}

SessionSplit curate_sessions(std::vector<Session> sessions, std::size_t min_len,
                             std::size_t max_len) {
  SessionSplit split;
  for (auto& s : sessions) {
    if (s.size() < min_len || s.size() > max_len) continue;
    const std::size_t idx = split.sessions.size();
    const std::size_t n = s.size();
    split.sessions.push_back(std::move(s));
    for (std::size_t j = 1; j < n; ++j) split.train_examples.push_back({idx, j});
    for (std::size_t j = 2; j <= n; ++j) split.eval_examples.push_back({idx, j});
  }
  return split;
}

std::string synth_url_prefix(std::string_view intent) {
  return "https://health.example/" + std::string(intent) + "/";
}

SynthData synth_generate(const SynthSpec& spec) {
  if (spec.n_intents == 0) throw Error(Error::Kind::Precondition, "synth: n_intents must be > 0");
  if (spec.n_queries == 0) throw Error(Error::Kind::Precondition, "synth: n_queries must be > 0");
  if (spec.vocab_overlap < 0 || spec.vocab_overlap > 1 || spec.drift_prob < 0 ||
      spec.drift_prob > 1 || spec.noise_click_prob < 0 || spec.noise_click_prob > 1) {
    throw Error(Error::Kind::Precondition, "synth: fractions must lie in [0,1]");
  }
  if (spec.min_session_len == 0 || spec.min_session_len > spec.max_session_len ||
      spec.min_query_tokens == 0 || spec.min_query_tokens > spec.max_query_tokens ||
      spec.tokens_per_intent == 0 || spec.min_main_clicks < 1 ||
      spec.min_main_clicks > spec.max_main_clicks) {
    throw Error(Error::Kind::Precondition, "synth: inconsistent size parameters");
  }
  if (spec.vocab_overlap > 0 && spec.shared_tokens == 0) {
    throw Error(Error::Kind::Precondition, "synth: vocab_overlap > 0 needs shared tokens");
  }

  SynthData data;
  Rng rng(derive_seed(spec.seed, "synth"));

  for (std::size_t i = 0; i < spec.n_intents; ++i) {
    std::ostringstream name;
    name << "intent" << std::setw(2) << std::setfill('0') << i;
    data.intents.push_back(name.str());
  }

  auto intent_token = [](std::size_t intent, std::size_t j) {
    return "k" + std::to_string(intent) + "t" + std::to_string(j);
  };
  auto shared_token = [](std::size_t j) { return "s" + std::to_string(j); };

  std::set<std::string> seen;
  std::vector<std::vector<std::size_t>> queries_of(spec.n_intents);
  for (std::size_t q = 0; q < spec.n_queries; ++q) {
    const std::size_t intent = q % spec.n_intents;
    std::string text;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const std::size_t len =
          spec.min_query_tokens + uniform_index(rng, spec.max_query_tokens - spec.min_query_tokens + 1);
      std::vector<std::string> toks;
      for (std::size_t t = 0; t < len; ++t) {
        if (uniform01(rng) < spec.vocab_overlap) {
          toks.push_back(shared_token(uniform_index(rng, spec.shared_tokens)));
        } else {
          toks.push_back(intent_token(intent, uniform_index(rng, spec.tokens_per_intent)));
        }
      }
      text = join(toks, " ");
      if (!seen.contains(text)) break;
      text.clear();
    }
    if (text.empty()) {
      throw Error(Error::Kind::Precondition, "synth: vocabulary too small for unique queries");
    }
    seen.insert(text);
    queries_of[intent].push_back(data.queries.size());
    data.queries.push_back(text);
    data.query_intent.push_back(intent);
  }

  auto click = [&](std::int64_t ts, const std::string& sid, const std::string& query,
                   std::size_t intent, std::int64_t count) {
    const std::size_t page = uniform_index(rng, 5);
    const std::string& name = data.intents[intent];
    data.events.push_back(ClickEvent{ts, sid, query, name + "-d" + std::to_string(page),
                                     synth_url_prefix(name) + "page" + std::to_string(page), name,
                                     name + " page " + std::to_string(page), count});
  };

  const std::int64_t agg_base = 1'600'000'000;
  for (std::size_t q = 0; q < data.queries.size(); ++q) {
    const std::string sid = "agg-" + std::to_string(q);
    const std::int64_t main = spec.min_main_clicks +
        static_cast<std::int64_t>(uniform_index(
            rng, static_cast<std::size_t>(spec.max_main_clicks - spec.min_main_clicks + 1)));
    click(agg_base + static_cast<std::int64_t>(q), sid + "-0", data.queries[q],
          data.query_intent[q], main);
    if (spec.n_intents > 1 && uniform01(rng) < spec.noise_click_prob) {
      std::size_t other = uniform_index(rng, spec.n_intents - 1);
      if (other >= data.query_intent[q]) ++other;
      click(agg_base + static_cast<std::int64_t>(q), sid + "-1", data.queries[q], other,
            spec.noise_clicks);
    }
  }

  const std::int64_t session_base = 1'700'000'000;
  for (std::size_t s = 0; s < spec.n_sessions; ++s) {
    std::ostringstream sid;
    sid << "s" << std::setw(6) << std::setfill('0') << s;
    const std::size_t session_intent = uniform_index(rng, spec.n_intents);
    const std::size_t len =
        spec.min_session_len + uniform_index(rng, spec.max_session_len - spec.min_session_len + 1);
    std::int64_t ts = session_base + static_cast<std::int64_t>(s) * 86'400;
    for (std::size_t step = 1; step <= len; ++step) {
      std::size_t query_intent = session_intent;
      bool drifted = false;
      if (spec.n_intents > 1 && uniform01(rng) < spec.drift_prob) {
        query_intent = uniform_index(rng, spec.n_intents - 1);
        if (query_intent >= session_intent) ++query_intent;
        drifted = true;
      }
      const auto& pool = queries_of[query_intent];
      if (pool.empty()) {
        throw Error(Error::Kind::Precondition, "synth: intent without queries (n_queries < n_intents)");
      }
      const std::size_t q = pool[uniform_index(rng, pool.size())];
      click(ts, sid.str(), data.queries[q], session_intent, 1);
      data.steps.push_back({sid.str(), step, query_intent, session_intent, drifted});
      ts += 30 + static_cast<std::int64_t>(uniform_index(rng, 270));
    }
  }
  return data;
}

void write_truth(const std::filesystem::path& path, const SynthData& data) {
  std::ofstream out(path);
  if (!out) throw Error(Error::Kind::Io, "cannot write truth: " + path.string());
  out << "query\tintents\n";
  for (std::size_t q = 0; q < data.queries.size(); ++q) {
    out << data.queries[q] << '\t' << data.intents[data.query_intent[q]] << '\n';
  }
}

}  // namespace mset
