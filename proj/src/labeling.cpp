#include "mset/labeling.hpp"

#include "mset/common.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace mset {

IntentTaxonomy::IntentTaxonomy(std::vector<std::string> intents) : intents_(std::move(intents)) {
  std::set<std::string> seen;
  for (const auto& name : intents_) {
    if (name.empty()) throw Error(Error::Kind::Config, "taxonomy: empty intent name");
    if (!seen.insert(name).second) throw Error(Error::Kind::Config, "taxonomy: duplicate intent " + name);
  }
}

IntentTaxonomy IntentTaxonomy::health_search() {
  return IntentTaxonomy({"access_records", "account_mgmt", "appointment", "bill_cost_coverage",
                         "communication", "drug_info", "health_wellness", "provider", "facility",
                         "health_class", "health_plan", "job_search", "support", "all_others"});
}

std::optional<std::size_t> IntentTaxonomy::find(std::string_view name) const {
  for (std::size_t i = 0; i < intents_.size(); ++i) {
    if (intents_[i] == name) return i;
  }
  return std::nullopt;
}

std::size_t IntentTaxonomy::index_of(std::string_view name) const {
  if (auto i = find(name)) return *i;
  throw Error(Error::Kind::Input, "intent not in taxonomy: " + std::string(name));
}

std::size_t IntentTaxonomy::fallback() const { return index_of("all_others"); }

LabelVector LabelVector::one_hot(std::size_t n, std::size_t i) {
  LabelVector y(n);
  y.set(i);
  return y;
}

std::size_t LabelVector::count() const {
  std::size_t c = 0;
  for (auto b : bits) c += b != 0;
  return c;
}

std::vector<std::size_t> LabelVector::indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) out.push_back(i);
  }
  return out;
}

std::string format_labels(const LabelVector& y, const IntentTaxonomy& taxonomy) {
  std::vector<std::string> names;
  for (std::size_t i : y.indices()) names.push_back(taxonomy.name(i));
  return join(names, ";");
}

LabelVector parse_labels(std::string_view joined, const IntentTaxonomy& taxonomy) {
  LabelVector y(taxonomy.size());
  for (const auto& part : split(joined, ';')) {
    const std::string name = trim(part);
    if (!name.empty()) y.set(taxonomy.index_of(name));
  }
  return y;
}

IntentRouter IntentRouter::from_rules(IntentTaxonomy taxonomy, std::vector<IntentRule> rules) {
  if (rules.empty()) throw Error(Error::Kind::Config, "intent rules are empty");
  IntentRouter router;
  router.taxonomy_ = std::move(taxonomy);
  router.taxonomy_.fallback();
  for (const auto& rule : rules) {
    router.rule_intent_.push_back(router.taxonomy_.index_of(rule.intent));
    try {
      router.compiled_.emplace_back(rule.pattern, std::regex::ECMAScript | std::regex::icase);
    } catch (const std::regex_error& e) {
      throw Error(Error::Kind::Config, "rule for " + rule.intent + " does not compile: " + rule.pattern);
    }
  }
  router.rules_ = std::move(rules);
  return router;
}

IntentRouter IntentRouter::from_doc_types(IntentTaxonomy taxonomy) {
  IntentRouter router;
  router.taxonomy_ = std::move(taxonomy);
  router.taxonomy_.fallback();
  router.by_doc_type_ = true;
  return router;
}

std::size_t IntentRouter::route(std::string_view doc_url, std::string_view doc_type) const {
  if (by_doc_type_) {
    if (auto i = taxonomy_.find(doc_type)) return *i;
    return taxonomy_.fallback();
  }
  const std::string url(doc_url);
  for (std::size_t r = 0; r < compiled_.size(); ++r) {
    if (std::regex_search(url, compiled_[r])) return rule_intent_[r];
  }
  return taxonomy_.fallback();
}

std::vector<IntentRule> read_rules_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Error::Kind::Io, "cannot open rules: " + path.string());
  try {
    const auto doc = nlohmann::json::parse(in);
    std::vector<IntentRule> rules;
    for (const auto& r : doc) rules.push_back({r.at("intent").get<std::string>(), r.at("pattern").get<std::string>()});
    return rules;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Error::Kind::Config, "rules file malformed: " + std::string(e.what()));
  }
}

void write_rules_json(const std::filesystem::path& path, const std::vector<IntentRule>& rules) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& r : rules) doc.push_back({{"intent", r.intent}, {"pattern", r.pattern}});
  std::ofstream out(path);
  if (!out) throw Error(Error::Kind::Io, "cannot write rules: " + path.string());
  out << doc.dump(2) << '\n';
}

std::map<std::string, std::vector<ClickStat>> aggregate_clicks(std::span<const ClickEvent> events) {
  std::map<std::string, std::vector<ClickStat>> stats;
  for (const auto& ev : events) {
    auto& list = stats[ev.query];
    bool merged = false;
    for (auto& s : list) {
      if (s.doc_url == ev.doc_url && s.doc_type == ev.doc_type) {
        s.clicks += static_cast<double>(ev.click_count);
        merged = true;
        break;
      }
    }
    if (!merged) list.push_back({ev.doc_url, ev.doc_type, static_cast<double>(ev.click_count)});
  }
  return stats;
}

namespace {

std::vector<double> intent_mass(std::span<const ClickStat> stats, const IntentRouter& router) {
  std::vector<double> mass(router.taxonomy().size(), 0.0);
  for (const auto& s : stats) mass[router.route(s.doc_url, s.doc_type)] += s.clicks;
  return mass;
}

}  // namespace

LabelVector label_query(std::span<const ClickStat> stats, const IntentRouter& router,
                        double multi_label_threshold) {
  if (stats.empty()) throw Error(Error::Kind::Precondition, "label_query: no click statistics");
  const auto mass = intent_mass(stats, router);
  double total = 0;
  for (double m : mass) total += m;
  LabelVector y(mass.size());
  if (total <= 0) {
    y.set(router.taxonomy().fallback());
    return y;
  }
  std::size_t best = 0;
  for (std::size_t i = 0; i < mass.size(); ++i) {
    if (mass[i] > mass[best]) best = i;
    if (mass[i] > 0 && mass[i] / total >= multi_label_threshold) y.set(i);
  }
  if (y.count() == 0) y.set(best);
  return y;
}

IntentDistribution intent_distribution(std::span<const ClickStat> stats, const IntentRouter& router) {
  auto mass = intent_mass(stats, router);
  double total = 0;
  for (double m : mass) total += m;
  if (total < 1) throw Error(Error::Kind::Precondition, "intent_distribution: total clicks < 1");
  for (double& m : mass) m /= total;
  return {std::move(mass)};
}

double perplexity(const IntentDistribution& dist) {
  if (dist.probs.empty()) throw Error(Error::Kind::Precondition, "perplexity: empty distribution");
  double sum = 0;
  for (double p : dist.probs) {
    if (!(p >= 0)) throw Error(Error::Kind::Precondition, "perplexity: negative probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(Error::Kind::Precondition, "perplexity: distribution not normalized");
  double entropy = 0;
  for (double p : dist.probs) {
    if (p > 0) entropy -= p * std::log2(p);
  }
  return std::exp2(entropy);
}

std::optional<LabelVector> session_inferred_intent(const SessionStep& step, const IntentRouter& router) {
  if (!step.has_click()) return std::nullopt;
  return LabelVector::one_hot(router.taxonomy().size(), router.route(step.doc_url, step.annotation));
}

double concordance_rate(const Session& session, const std::map<std::string, LabelVector>& global_intents,
                        const IntentRouter& router, IntentMatch match) {
  if (session.steps.empty()) throw Error(Error::Kind::Precondition, "concordance_rate: empty session");
  double agree = 0;
  std::size_t counted = 0;
  for (const auto& step : session.steps) {
    const auto inferred = session_inferred_intent(step, router);
    if (!inferred) continue;
    const auto it = global_intents.find(step.query);
    if (it == global_intents.end()) {
      throw Error(Error::Kind::Precondition, "concordance_rate: no global intent for '" + step.query + "'");
    }
    const LabelVector& global = it->second;
    if (match == IntentMatch::Exact) {
      agree += global == *inferred ? 1.0 : 0.0;
    } else {
      std::size_t inter = 0;
      std::size_t uni = 0;
      for (std::size_t i = 0; i < global.size(); ++i) {
        inter += global.has(i) && inferred->has(i);
        uni += global.has(i) || inferred->has(i);
      }
      agree += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
    ++counted;
  }
  if (counted == 0) throw Error(Error::Kind::Precondition, "concordance_rate: no step with a click");
  return agree / static_cast<double>(counted);
}

std::vector<QueryLabel> label_corpus(std::span<const ClickEvent> events, const IntentRouter& router,
                                     double multi_label_threshold) {
  std::vector<QueryLabel> out;
  for (const auto& [query, stats] : aggregate_clicks(events)) {
    out.push_back({query, label_query(stats, router, multi_label_threshold),
                   perplexity(intent_distribution(stats, router))});
  }
  return out;
}

void write_labels_tsv(const std::filesystem::path& path, const std::vector<QueryLabel>& labels,
                      const IntentTaxonomy& taxonomy) {
  std::ofstream out(path);
  if (!out) throw Error(Error::Kind::Io, "cannot write labels: " + path.string());
  out << "query\tintents\tperplexity\n" << std::setprecision(17);
  for (const auto& l : labels) out << l.query << '\t' << format_labels(l.labels, taxonomy) << '\t' << l.perplexity << '\n';
}

std::vector<QueryLabel> read_labels_tsv(const std::filesystem::path& path, const IntentTaxonomy& taxonomy) {
  std::ifstream in(path);
  if (!in) throw Error(Error::Kind::Io, "cannot open labels: " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<QueryLabel> out;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() < 2) throw Error(Error::Kind::Input, "labels row malformed: " + line);
    QueryLabel ql{normalize_query(cols[0]), parse_labels(cols[1], taxonomy), 1.0};
    if (cols.size() >= 3) ql.perplexity = std::stod(cols[2]);
    out.push_back(std::move(ql));
  }
  return out;
}

}  // namespace mset
