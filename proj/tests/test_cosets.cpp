#include <gtest/gtest.h>

#include "mset/common.hpp"
#include "mset/cosets.hpp"

#include <filesystem>
#include <map>
#include <set>

using namespace mset;

namespace {

ClickEvent click(const std::string& q, const std::string& type, std::int64_t count,
                 const std::string& url = "") {
  return ClickEvent{0, "s", q, "d", url.empty() ? "https://x.org/" + type + "/a" : url, type, "t", count};
}

const DocumentSet* find_set(const CoQueryCorpus& c, const std::string& id) {
  for (const auto& s : c.sets) {
    if (s.set_id == id) return &s;
  }
  return nullptr;
}

}  // namespace

TEST(ExtractSetsTest, GroupsByDocType) {
  const std::vector<ClickEvent> events{click("a", "drug", 3), click("b", "drug", 4), click("c", "provider", 5)};
  const auto corpus = extract_sets(events, 3);
  ASSERT_EQ(corpus.num_sets(), 2u);
  const auto* drug = find_set(corpus, "drug");
  ASSERT_NE(drug, nullptr);
  ASSERT_EQ(drug->size(), 2u);
  EXPECT_EQ(drug->members[0].query, "a");
  EXPECT_EQ(drug->members[1].query, "b");
  EXPECT_EQ(find_set(corpus, "provider")->members[0].query, "c");
}

TEST(ExtractSetsTest, BelowThresholdExcluded) {
  const std::vector<ClickEvent> events{click("a", "drug", 2), click("b", "drug", 3)};
  const auto corpus = extract_sets(events, kHsMinClicks);
  ASSERT_EQ(corpus.num_sets(), 1u);
  ASSERT_EQ(corpus.sets[0].size(), 1u);
  EXPECT_EQ(corpus.sets[0].members[0].query, "b");
}

TEST(ExtractSetsTest, CountsAggregateAcrossRows) {
  const std::vector<ClickEvent> events{click("a", "drug", 1), click("a", "drug", 1), click("a", "drug", 1)};
  const auto corpus = extract_sets(events, 3);
  ASSERT_EQ(corpus.num_sets(), 1u);
  EXPECT_EQ(corpus.sets[0].members[0].count, 3);
}

TEST(ExtractSetsTest, QueryInTwoSets) {
  const std::vector<ClickEvent> events{click("a", "drug", 4), click("a", "wellness", 3)};
  const auto corpus = extract_sets(events, 3);
  ASSERT_EQ(corpus.num_sets(), 2u);
  ASSERT_EQ(corpus.query_index.at("a").size(), 2u);
}

TEST(ExtractSetsTest, UrlPatternKey) {
  const std::vector<ClickEvent> events{click("a", "x", 3, "https://h.org/provider/find"),
                                       click("b", "y", 3, "https://h.org/provider/other"),
                                       click("c", "x", 3, "https://h.org/billing/pay")};
  const auto corpus = extract_sets(events, 3, SetKey::UrlPattern);
  ASSERT_EQ(corpus.num_sets(), 2u);
  EXPECT_EQ(find_set(corpus, "/provider/")->size(), 2u);
  EXPECT_EQ(parse_set_key("url_pattern"), SetKey::UrlPattern);
  EXPECT_THROW(parse_set_key("bogus"), Error);
}

TEST(ExtractSetsTest, MonotoneFilteringAndRetainedCounts) {
  SynthSpec spec;
  spec.n_queries = 120;
  spec.n_sessions = 200;
  spec.drift_prob = 0.3;
  const auto events = synth_generate(spec).events;
  std::map<std::string, std::size_t> prev_sizes;
  std::size_t prev_sets = SIZE_MAX;
  for (std::int64_t m = 1; m <= 20; ++m) {
    const auto corpus = extract_sets(events, m);
    EXPECT_LE(corpus.num_sets(), prev_sets);
    prev_sets = corpus.num_sets();
    std::map<std::string, std::size_t> sizes;
    for (const auto& s : corpus.sets) {
      sizes[s.set_id] = s.size();
      if (prev_sizes.count(s.set_id)) EXPECT_LE(s.size(), prev_sizes[s.set_id]);
      for (const auto& mem : s.members) EXPECT_GE(mem.count, m);
    }
    if (m > 1) {
      for (const auto& [id, n] : sizes) EXPECT_TRUE(prev_sizes.count(id)) << id;
    }
    prev_sizes = sizes;
  }
}

TEST(ComputeWeightsTest, Examples) {
  auto s = compute_weights("x", {{"a", 3}, {"b", 1}});
  EXPECT_DOUBLE_EQ(s.members[0].weight, 0.75);
  EXPECT_DOUBLE_EQ(s.members[1].weight, 0.25);
  s = compute_weights("x", {{"a", 5}});
  EXPECT_DOUBLE_EQ(s.members[0].weight, 1.0);
  s = compute_weights("x", {{"a", 2}, {"b", 2}, {"c", 2}, {"d", 2}});
  for (const auto& m : s.members) EXPECT_DOUBLE_EQ(m.weight, 0.25);
}

TEST(ComputeWeightsTest, ScaleInvariantAndErrors) {
  const auto a = compute_weights("x", {{"a", 3}, {"b", 5}, {"c", 7}});
  const auto b = compute_weights("x", {{"a", 30}, {"b", 50}, {"c", 70}});
  double sum = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(a.members[i].weight, b.members[i].weight, 1e-15);
    sum += a.members[i].weight;
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_THROW(compute_weights("x", {}), Error);
  EXPECT_THROW(compute_weights("x", {{"a", 0}}), Error);
}

namespace {

CoQueryCorpus corpus_of(const std::vector<std::vector<std::int64_t>>& sizes) {
  CoQueryCorpus c;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    std::vector<std::pair<std::string, std::int64_t>> counts;
    for (std::size_t j = 0; j < sizes[i].size(); ++j) counts.push_back({"q" + std::to_string(i) + "_" + std::to_string(j), sizes[i][j]});
    c.sets.push_back(compute_weights("set" + std::to_string(i), counts));
  }
  index_corpus(c);
  return c;
}

}  // namespace

TEST(BatchSampleTest, CappedSampling) {
  const auto c = corpus_of({{3, 3, 3, 3, 3}, {4, 4}});
  const auto batch = batch_sample(c, 2, 3, 11);
  ASSERT_EQ(batch.groups.size(), 2u);
  std::map<std::size_t, std::size_t> by_set;
  for (const auto& g : batch.groups) {
    by_set[g.set_index] = g.queries.size();
    double sum = 0;
    for (double w : g.weights) sum += w;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    std::set<std::string> unique(g.queries.begin(), g.queries.end());
    EXPECT_EQ(unique.size(), g.queries.size());
  }
  EXPECT_EQ(by_set[0], 3u);
  EXPECT_EQ(by_set[1], 2u);
}

TEST(BatchSampleTest, DeterministicPerSeed) {
  const auto c = corpus_of({{3, 5, 7, 9}, {4, 4, 4}, {3, 3}, {8, 1, 2}});
  const auto a = batch_sample(c, 3, 2, 5);
  const auto b = batch_sample(c, 3, 2, 5);
  ASSERT_EQ(a.groups.size(), b.groups.size());
  for (std::size_t i = 0; i < a.groups.size(); ++i) {
    EXPECT_EQ(a.groups[i].set_index, b.groups[i].set_index);
    EXPECT_EQ(a.groups[i].queries, b.groups[i].queries);
    EXPECT_EQ(a.groups[i].weights, b.groups[i].weights);
  }
}

TEST(BatchSampleTest, SingletonsNeverSampledAndTooFewEligibleThrows) {
  const auto c = corpus_of({{3, 3}, {5}, {4}});
  EXPECT_THROW(batch_sample(c, 2, 3, 1), Error);
  const auto d = corpus_of({{3, 3}, {5}, {4, 4, 4}});
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    for (const auto& g : batch_sample(d, 2, 3, seed).groups) EXPECT_NE(g.set_index, 1u);
  }
}

TEST(BatchSampleTest, HeavierMembersSampledMoreOften) {
  const auto c = corpus_of({{90, 5, 5}, {3, 3}});
  std::size_t heavy = 0, trials = 400;
  for (std::uint64_t seed = 0; seed < trials; ++seed) {
    for (const auto& g : batch_sample(c, 2, 1, seed).groups) {
      if (g.set_index == 0 && g.queries[0] == "q0_0") ++heavy;
    }
  }
  EXPECT_GT(heavy, trials * 8 / 10);
}

TEST(CorpusIoTest, JsonlRoundTrip) {
  const auto c = corpus_of({{3, 5}, {4, 4, 9}});
  const auto path = std::filesystem::temp_directory_path() / "mset_corpus_test.jsonl";
  write_corpus_jsonl(path, c);
  const auto back = read_corpus_jsonl(path);
  EXPECT_EQ(back.sets, c.sets);
  EXPECT_EQ(back.query_index.size(), c.query_index.size());
  std::filesystem::remove(path);
}
