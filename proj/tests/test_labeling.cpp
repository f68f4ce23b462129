#include <gtest/gtest.h>

#include "mset/common.hpp"
#include "mset/labeling.hpp"

#include "oracles.hpp"

#include <algorithm>
#include <filesystem>
#include <random>

using namespace mset;

namespace {

IntentRouter hs_router() {
  return IntentRouter::from_rules(IntentTaxonomy::health_search(),
                                  {{"communication", "message|email|compose|inbox"},
                                   {"drug_info", "/drugs?/"},
                                   {"health_wellness", "/wellness/"},
                                   {"provider", "/provider/"}});
}

ClickStat stat(const std::string& url, double clicks) { return ClickStat{url, "", clicks}; }

SessionStep step(const std::string& query, const std::string& url) {
  return SessionStep{0, query, url, "", url_path(url)};
}

}  // namespace

TEST(TaxonomyTest, HealthSearchOrder) {
  const auto t = IntentTaxonomy::health_search();
  const std::vector<std::string> expected{"access_records", "account_mgmt", "appointment", "bill_cost_coverage",
                                          "communication",  "drug_info",    "health_wellness", "provider",
                                          "facility",       "health_class", "health_plan", "job_search",
                                          "support",        "all_others"};
  EXPECT_EQ(t.names(), expected);
  EXPECT_EQ(t.fallback(), 13u);
  EXPECT_FALSE(t.find("nope").has_value());
  EXPECT_THROW(IntentTaxonomy({"a", "a"}), Error);
}

TEST(LabelFormatTest, RoundTrip) {
  const auto t = IntentTaxonomy::health_search();
  LabelVector y(t.size());
  y.set(5);
  y.set(6);
  EXPECT_EQ(format_labels(y, t), "drug_info;health_wellness");
  EXPECT_EQ(parse_labels("drug_info;health_wellness", t), y);
  EXPECT_THROW(parse_labels("bogus", t), Error);
}

TEST(LabelQueryTest, EmailUrlMeansCommunication) {
  const auto router = hs_router();
  const std::vector<ClickStat> stats{stat("https://hs.org/mail/compose-email", 9), stat("https://hs.org/home", 1)};
  const auto y = label_query(stats, router);
  EXPECT_EQ(y.indices(), std::vector<std::size_t>{router.taxonomy().index_of("communication")});
}

TEST(LabelQueryTest, SixtyFortySplitSetsBoth) {
  const auto router = hs_router();
  const std::vector<ClickStat> stats{stat("https://hs.org/drugs/permethrin", 6), stat("https://hs.org/wellness/lice", 4)};
  const auto y = label_query(stats, router, 0.2);
  EXPECT_TRUE(y.has(router.taxonomy().index_of("drug_info")));
  EXPECT_TRUE(y.has(router.taxonomy().index_of("health_wellness")));
  EXPECT_EQ(y.count(), 2u);
}

TEST(LabelQueryTest, NoRuleMatchesGivesAllOthers) {
  const auto router = hs_router();
  const std::vector<ClickStat> stats{stat("https://hs.org/unknown/a", 3), stat("https://hs.org/else", 2)};
  const auto y = label_query(stats, router);
  EXPECT_EQ(y.indices(), std::vector<std::size_t>{router.taxonomy().fallback()});
}

TEST(LabelQueryTest, FirstMatchingRuleWins) {
  // "/provider/email" matches both communication (first) and provider.
  const auto router = hs_router();
  EXPECT_EQ(router.route("https://hs.org/provider/email", ""), router.taxonomy().index_of("communication"));
}

TEST(LabelQueryTest, ThresholdOneGivesArgmaxWithTaxonomyTieBreak) {
  const auto router = hs_router();
  const std::vector<ClickStat> tie{stat("https://hs.org/provider/x", 5), stat("https://hs.org/drug/y", 5)};
  const auto y = label_query(tie, router, 1.0);
  // drug_info precedes provider in the taxonomy.
  EXPECT_EQ(y.indices(), std::vector<std::size_t>{router.taxonomy().index_of("drug_info")});
  const std::vector<ClickStat> skew{stat("https://hs.org/provider/x", 7), stat("https://hs.org/drug/y", 5)};
  EXPECT_EQ(label_query(skew, router, 1.0).indices(), std::vector<std::size_t>{router.taxonomy().index_of("provider")});
}

TEST(LabelQueryTest, DocTypeRouting) {
  const auto router = IntentRouter::from_doc_types(IntentTaxonomy({"guideline", "review", "all_others"}));
  EXPECT_EQ(router.route("https://any", "review"), 1u);
  EXPECT_EQ(router.route("https://any", "unknown"), 2u);
}

TEST(IntentDistributionTest, Examples) {
  const auto router = hs_router();
  auto d = intent_distribution(std::vector<ClickStat>{stat("https://h/provider/a", 3)}, router);
  EXPECT_DOUBLE_EQ(d.probs[router.taxonomy().index_of("provider")], 1.0);
  d = intent_distribution(std::vector<ClickStat>{stat("https://h/provider/a", 1), stat("https://h/drug/a", 1)}, router);
  EXPECT_DOUBLE_EQ(d.probs[router.taxonomy().index_of("provider")], 0.5);
  EXPECT_DOUBLE_EQ(d.probs[router.taxonomy().index_of("drug_info")], 0.5);
  d = intent_distribution(std::vector<ClickStat>{stat("https://h/provider/a", 4), stat("https://h/drug/a", 1)}, router);
  EXPECT_DOUBLE_EQ(d.probs[router.taxonomy().index_of("provider")], 0.8);
  EXPECT_DOUBLE_EQ(d.probs[router.taxonomy().index_of("drug_info")], 0.2);
  EXPECT_THROW(intent_distribution(std::vector<ClickStat>{}, router), Error);
}

TEST(PerplexityTest, ClosedForms) {
  EXPECT_DOUBLE_EQ(perplexity({{1.0}}), 1.0);
  EXPECT_DOUBLE_EQ(perplexity({{0.5, 0.5}}), 2.0);
  // 2^(-(0.8 log2 0.8 + 0.2 log2 0.2)), entropy 0.721928 bits
  EXPECT_NEAR(perplexity({{0.8, 0.2}}), 1.64938, 1e-5);
  for (int k : {1, 2, 4, 8}) EXPECT_EQ(perplexity({Vec(static_cast<std::size_t>(k), 1.0 / k)}), static_cast<double>(k));
  EXPECT_THROW(perplexity({{0.5, 0.4}}), Error);
}

TEST(PerplexityTest, PermutationInvariantAndMatchesOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto w = oracle::random_weights(rng, 1 + trial % 9);
    if (trial % 3 == 0 && w.size() > 1) w[0] = 0.0;
    double s = 0;
    for (double x : w) s += x;
    for (auto& x : w) x /= s;
    const double p = perplexity({w});
    EXPECT_NEAR(p, oracle::perplexity(w), 1e-9);
    std::reverse(w.begin(), w.end());
    EXPECT_NEAR(perplexity({w}), p, 1e-12);
    EXPECT_GE(p, 1.0 - 1e-12);
    EXPECT_LE(p, static_cast<double>(w.size()) + 1e-9);
  }
}

TEST(SessionIntentTest, Examples) {
  const auto router = hs_router();
  const auto t = router.taxonomy();
  EXPECT_EQ(session_inferred_intent(step("dr", "/provider/find"), router)->indices(),
            std::vector<std::size_t>{t.index_of("provider")});
  EXPECT_EQ(session_inferred_intent(step("dr", "/unmatched"), router)->indices(),
            std::vector<std::size_t>{t.fallback()});
  EXPECT_FALSE(session_inferred_intent(step("dr", ""), router).has_value());
}

TEST(SessionIntentTest, ChiropractorWellnessClickDisagreesWithGlobal) {
  const auto router = hs_router();
  const auto t = router.taxonomy();
  const auto global = LabelVector::one_hot(t.size(), t.index_of("provider"));
  const auto session = session_inferred_intent(step("chiropractor", "https://hs.org/wellness/back-pain"), router);
  ASSERT_TRUE(session.has_value());
  EXPECT_EQ(session->indices(), std::vector<std::size_t>{t.index_of("health_wellness")});
  EXPECT_NE(*session, global);
}

namespace {

Session make_session(const std::vector<std::pair<std::string, std::string>>& steps) {
  Session s{"s", {}};
  for (const auto& [q, url] : steps) s.steps.push_back(step(q, url));
  return s;
}

}  // namespace

TEST(ConcordanceTest, HandCountedFixtures) {
  const auto router = hs_router();
  const auto t = router.taxonomy();
  const std::map<std::string, LabelVector> global{{"a", LabelVector::one_hot(t.size(), t.index_of("provider"))},
                                                  {"b", LabelVector::one_hot(t.size(), t.index_of("drug_info"))},
                                                  {"c", LabelVector::one_hot(t.size(), t.index_of("health_wellness"))}};
  const auto third = make_session({{"a", "/provider/x"}, {"b", "/provider/x"}, {"c", "/provider/x"}});
  EXPECT_EQ(concordance_rate(third, global, router), 1.0 / 3.0);
  const auto all = make_session({{"a", "/provider/x"}, {"b", "/drug/x"}, {"c", "/wellness/x"}});
  EXPECT_EQ(concordance_rate(all, global, router), 1.0);
  const auto none = make_session({{"a", "/drug/x"}, {"b", "/wellness/x"}, {"c", "/provider/x"}});
  EXPECT_EQ(concordance_rate(none, global, router), 0.0);
}

TEST(ConcordanceTest, ErrorsAndSkippedSteps) {
  const auto router = hs_router();
  const auto t = router.taxonomy();
  const std::map<std::string, LabelVector> global{{"a", LabelVector::one_hot(t.size(), t.index_of("provider"))}};
  EXPECT_THROW(concordance_rate(Session{"s", {}}, global, router), Error);
  EXPECT_THROW(concordance_rate(make_session({{"zzz", "/provider/x"}}), global, router), Error);
  // A step without a click is excluded rather than counted as a miss.
  EXPECT_EQ(concordance_rate(make_session({{"a", "/provider/x"}, {"a", ""}}), global, router), 1.0);
}

TEST(ConcordanceTest, JaccardOption) {
  const auto router = hs_router();
  const auto t = router.taxonomy();
  LabelVector two(t.size());
  two.set(t.index_of("provider"));
  two.set(t.index_of("drug_info"));
  const std::map<std::string, LabelVector> global{{"a", two}};
  const auto s = make_session({{"a", "/provider/x"}});
  EXPECT_EQ(concordance_rate(s, global, router, IntentMatch::Exact), 0.0);
  EXPECT_DOUBLE_EQ(concordance_rate(s, global, router, IntentMatch::Jaccard), 0.5);
}

TEST(ConcordanceTest, AddingMatchingStepNeverDecreases) {
  const auto router = hs_router();
  const auto t = router.taxonomy();
  const std::map<std::string, LabelVector> global{{"a", LabelVector::one_hot(t.size(), t.index_of("provider"))}};
  auto s = make_session({{"a", "/drug/x"}, {"a", "/provider/x"}});
  double prev = concordance_rate(s, global, router);
  for (int i = 0; i < 5; ++i) {
    s.steps.push_back(step("a", "/provider/y"));
    const double now = concordance_rate(s, global, router);
    EXPECT_GE(now, prev);
    EXPECT_LE(now, 1.0);
    prev = now;
  }
}

TEST(ConcordanceTest, NoDriftSynthIsFullyConcordant) {
  SynthSpec spec;
  spec.drift_prob = 0.0;
  spec.n_sessions = 300;
  const auto data = synth_generate(spec);
  std::vector<std::string> names = data.intents;
  names.push_back("all_others");
  std::vector<IntentRule> rules;
  for (const auto& n : data.intents) rules.push_back({n, "/" + n + "/"});
  const auto router = IntentRouter::from_rules(IntentTaxonomy(names), rules);
  std::map<std::string, LabelVector> global;
  for (const auto& l : label_corpus(data.events, router)) global[l.query] = l.labels;
  for (const auto& s : sessionize(data.events)) {
    if (s.session_id.rfind("agg-", 0) == 0) continue;
    EXPECT_EQ(concordance_rate(s, global, router), 1.0) << s.session_id;
  }
}

TEST(LabelIoTest, RulesAndLabelsRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path();
  const std::vector<IntentRule> rules{{"communication", "email|inbox"}, {"provider", "/provider/"}};
  write_rules_json(dir / "mset_rules_test.json", rules);
  const auto back = read_rules_json(dir / "mset_rules_test.json");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].pattern, "email|inbox");
  EXPECT_THROW(IntentRouter::from_rules(IntentTaxonomy::health_search(), {{"provider", "("}}), Error);
  EXPECT_THROW(IntentRouter::from_rules(IntentTaxonomy::health_search(), {{"nope", "x"}}), Error);

  const auto t = IntentTaxonomy::health_search();
  std::vector<QueryLabel> labels{{"note to doctor", LabelVector::one_hot(t.size(), 4), 1.0},
                                 {"lice treatment", parse_labels("drug_info;health_wellness", t), 1.9709505944546687}};
  write_labels_tsv(dir / "mset_labels_test.tsv", labels, t);
  const auto lb = read_labels_tsv(dir / "mset_labels_test.tsv", t);
  ASSERT_EQ(lb.size(), 2u);
  EXPECT_EQ(lb[1].labels, labels[1].labels);
  EXPECT_EQ(lb[1].perplexity, labels[1].perplexity);
  std::filesystem::remove(dir / "mset_rules_test.json");
  std::filesystem::remove(dir / "mset_labels_test.tsv");
}
