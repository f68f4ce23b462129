#include "mset/cosets.hpp"

#include "mset/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>

namespace mset {

SetKey parse_set_key(std::string_view name) {
  if (name == "doc_type" || name == "doc-type") return SetKey::DocType;
  if (name == "url_pattern" || name == "url-pattern") return SetKey::UrlPattern;
  throw Error(Error::Kind::Config, "unknown set key: " + std::string(name));
}

std::string set_key_of(const ClickEvent& ev, SetKey key) {
  if (key == SetKey::DocType) return ev.doc_type;
  const std::string path = url_path(ev.doc_url);
  const auto begin = path.find_first_not_of('/');
  if (begin == std::string::npos) return "/";
  const auto end = path.find('/', begin);
  return "/" + path.substr(begin, end == std::string::npos ? std::string::npos : end - begin) + "/";
}

DocumentSet compute_weights(std::string set_id,
                            const std::vector<std::pair<std::string, std::int64_t>>& counts) {
  if (counts.empty()) throw Error(Error::Kind::Precondition, "compute_weights: empty set " + set_id);
  std::int64_t total = 0;
  for (const auto& [query, count] : counts) {
    if (count < 1) throw Error(Error::Kind::Precondition, "compute_weights: count < 1 in " + set_id);
    total += count;
  }
  DocumentSet set{std::move(set_id), {}};
  set.members.reserve(counts.size());
  for (const auto& [query, count] : counts) {
    set.members.push_back({query, count, static_cast<double>(count) / static_cast<double>(total)});
  }
  return set;
}

void index_corpus(CoQueryCorpus& corpus) {
  corpus.query_index.clear();
  for (std::size_t i = 0; i < corpus.sets.size(); ++i) {
    for (const auto& m : corpus.sets[i].members) corpus.query_index[m.query].emplace_back(i, m.weight);
  }
}

CoQueryCorpus extract_sets(std::span<const ClickEvent> events, std::int64_t min_clicks, SetKey key) {
  if (min_clicks < 1) throw Error(Error::Kind::Precondition, "extract_sets: min_clicks must be >= 1");
  std::map<std::string, std::map<std::string, std::int64_t>> counts;
  for (const auto& ev : events) counts[set_key_of(ev, key)][ev.query] += ev.click_count;

  CoQueryCorpus corpus;
  for (const auto& [set_id, per_query] : counts) {
    std::vector<std::pair<std::string, std::int64_t>> kept;
    for (const auto& [query, count] : per_query) {
      if (count >= min_clicks) kept.emplace_back(query, count);
    }
    if (!kept.empty()) corpus.sets.push_back(compute_weights(set_id, kept));
  }
  index_corpus(corpus);
  return corpus;
}

TrainingBatch batch_sample(const CoQueryCorpus& corpus, std::size_t sets_per_batch,
                           std::size_t queries_per_set, std::uint64_t seed) {
  if (sets_per_batch < 2) throw Error(Error::Kind::Precondition, "batch_sample: need B >= 2");
  if (queries_per_set < 1) throw Error(Error::Kind::Precondition, "batch_sample: need M >= 1");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < corpus.sets.size(); ++i) {
    if (corpus.sets[i].size() >= 2) eligible.push_back(i);
  }
  if (eligible.size() < sets_per_batch) {
    throw Error(Error::Kind::Precondition,
                "batch_sample: " + std::to_string(eligible.size()) + " eligible sets, need " +
                    std::to_string(sets_per_batch));
  }

  Rng rng(seed);
  // Partial Fisher-Yates for the set draw.
  for (std::size_t i = 0; i < sets_per_batch; ++i) {
    std::swap(eligible[i], eligible[i + uniform_index(rng, eligible.size() - i)]);
  }
  eligible.resize(sets_per_batch);

  TrainingBatch batch;
  for (std::size_t set_index : eligible) {
    const auto& set = corpus.sets[set_index];
    std::vector<double> remaining;
    remaining.reserve(set.size());
    for (const auto& m : set.members) remaining.push_back(m.weight);

    BatchGroup group{set_index, {}, {}};
    const std::size_t take = std::min(queries_per_set, set.size());
    for (std::size_t t = 0; t < take; ++t) {
      const double mass = std::accumulate(remaining.begin(), remaining.end(), 0.0);
      double r = uniform01(rng) * mass;
      std::size_t pick = remaining.size();
      for (std::size_t j = 0; j < remaining.size(); ++j) {
        if (remaining[j] <= 0) continue;
        pick = j;
        if (r < remaining[j]) break;
        r -= remaining[j];
      }
      group.queries.push_back(set.members[pick].query);
      group.weights.push_back(set.members[pick].weight);
      remaining[pick] = 0.0;
    }
    const double total = std::accumulate(group.weights.begin(), group.weights.end(), 0.0);
    for (double& w : group.weights) w /= total;
    batch.groups.push_back(std::move(group));
  }
  return batch;
}

void write_corpus_jsonl(const std::filesystem::path& path, const CoQueryCorpus& corpus) {
  std::ofstream out(path);
  if (!out) throw Error(Error::Kind::Io, "cannot write corpus: " + path.string());
  for (const auto& set : corpus.sets) {
    nlohmann::json rec;
    rec["set_id"] = set.set_id;
    rec["members"] = nlohmann::json::array();
    for (const auto& m : set.members) {
      rec["members"].push_back({{"query", m.query}, {"count", m.count}, {"weight", m.weight}});
    }
    out << rec.dump() << '\n';
  }
}

CoQueryCorpus read_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Error::Kind::Io, "cannot open corpus: " + path.string());
  CoQueryCorpus corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      DocumentSet set{rec.at("set_id").get<std::string>(), {}};
      for (const auto& m : rec.at("members")) {
        set.members.push_back({m.at("query").get<std::string>(), m.at("count").get<std::int64_t>(),
                               m.at("weight").get<double>()});
      }
      corpus.sets.push_back(std::move(set));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Error::Kind::Input, "corpus record malformed: " + std::string(e.what()));
    }
  }
  index_corpus(corpus);
  return corpus;
}

}  // namespace mset
