#include <gtest/gtest.h>

#include "mset/classify.hpp"
#include "mset/eval.hpp"
#include "mset/training.hpp"

#include <algorithm>
#include <filesystem>
#include <random>

using namespace mset;

namespace {

SessionStep step(const std::string& q, const std::string& annotation, const std::string& page) {
  return SessionStep{0, q, "https://x.org" + page, annotation, page};
}

/// Planted 8-intent corpus: queries labeled by their planted intent, split 60/20/20 by index.
struct PlantedFixture {
  SynthData data;
  std::vector<LabeledText> train, val, test;
  EncoderParams init;
  EncoderParams trained;

  static const PlantedFixture& get() {
    static const PlantedFixture f = [] {
      PlantedFixture p;
      SynthSpec spec;
      spec.n_sessions = 0;
      p.data = synth_generate(spec);
      for (std::size_t q = 0; q < p.data.queries.size(); ++q) {
        LabeledText t{p.data.queries[q], LabelVector::one_hot(spec.n_intents, p.data.query_intent[q])};
        (q % 5 < 3 ? p.train : q % 5 == 3 ? p.val : p.test).push_back(t);
      }
      p.init = EncoderParams::init(EncoderShape{}, 1);
      p.trained = p.init;
      ContrastiveConfig cfg;
      train_encoder(p.trained, Tokenizer(), extract_sets(p.data.events, kHsMinClicks), cfg);
      return p;
    }();
    return f;
  }
};

double argmax_accuracy(const std::vector<Vec>& probs, const std::vector<LabeledText>& data) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto top = top_k_indices(probs[i], 1)[0];
    hit += data[i].labels.has(top);
  }
  return static_cast<double>(hit) / static_cast<double>(probs.size());
}

}  // namespace

// ============================================================================
// predict / decide / thresholds
// ============================================================================

TEST(PredictTest, ZeroHeadGivesHalf) {
  const auto enc = EncoderParams::init(EncoderShape{256, 8, 8}, 1);
  const Tokenizer tok(256);
  const auto head = ClassifierHead::zeros(5, 8);
  for (double p : predict_proba(enc, tok, head, "anything")) EXPECT_EQ(p, 0.5);
  const auto trained = ClassifierHead::init(5, 8, 3, 2.0);
  const auto a = predict_proba(enc, tok, trained, "same input");
  EXPECT_EQ(a, predict_proba(enc, tok, trained, "same input"));
  for (double p : a) {
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
}

TEST(DecideTest, MonotoneInThresholds) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 100; ++t) {
    Vec p(6), tau(6);
    for (std::size_t i = 0; i < 6; ++i) {
      p[i] = u(rng);
      tau[i] = u(rng);
    }
    const auto lo = decide(p, {tau});
    for (auto& x : tau) x = std::min(1.0, x + 0.1);
    const auto hi = decide(p, {tau});
    for (std::size_t i = 0; i < 6; ++i) EXPECT_LE(hi.has(i), lo.has(i));
  }
}

TEST(ThresholdTest, SeparatedScoresPickLowestTiedTau) {
  const std::vector<Vec> probs{{0.1}, {0.02}, {0.9}, {0.97}};
  const std::vector<LabelVector> labels{LabelVector(1), LabelVector(1), LabelVector::one_hot(1, 0), LabelVector::one_hot(1, 0)};
  const auto sel = select_thresholds(probs, labels);
  EXPECT_DOUBLE_EQ(sel.thresholds.tau[0], 0.15);
  EXPECT_TRUE(sel.warnings.empty());
}

TEST(ThresholdTest, AllNegativeLabelKeepsHalfWithWarning) {
  const std::vector<Vec> probs{{0.3, 0.8}, {0.6, 0.1}};
  const std::vector<LabelVector> labels{LabelVector::one_hot(2, 1), LabelVector(2)};
  const auto sel = select_thresholds(probs, labels);
  EXPECT_EQ(sel.thresholds.tau[0], 0.5);
  ASSERT_EQ(sel.warnings.size(), 1u);
}

TEST(ThresholdTest, MatchesExhaustiveGridOracle) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 40; ++t) {
    std::vector<Vec> probs;
    std::vector<LabelVector> labels;
    for (int s = 0; s < 15; ++s) {
      LabelVector y(3);
      Vec p(3);
      for (std::size_t i = 0; i < 3; ++i) {
        if (rng() % 3 == 0) y.set(i);
        p[i] = std::clamp(u(rng) * 0.7 + (y.has(i) ? 0.3 : 0.0), 0.0, 1.0);
      }
      probs.push_back(p);
      labels.push_back(y);
    }
    const auto sel = select_thresholds(probs, labels);
    for (std::size_t i = 0; i < 3; ++i) {
      int positives = 0;
      for (const auto& y : labels) positives += y.has(i);
      if (positives == 0) continue;
      double best = -1, best_tau = 0;
      for (int g = 1; g <= 19; ++g) {
        const double tau = g / 20.0;
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t s = 0; s < probs.size(); ++s) {
          const bool pred = probs[s][i] >= tau;
          tp += pred && labels[s].has(i);
          fp += pred && !labels[s].has(i);
          fn += !pred && labels[s].has(i);
        }
        const double f1 = tp == 0 ? 0 : 2 * tp / (2 * tp + fp + fn);
        if (f1 > best + 1e-15) {
          best = f1;
          best_tau = tau;
        }
      }
      EXPECT_NEAR(sel.thresholds.tau[i], best_tau, 1e-12);
    }
  }
}

// ============================================================================
// session input assembly
// ============================================================================

TEST(SessionInputTest, FieldOrder) {
  const Session s{"s", {step("q1", "a1", "/p1"), step("q2", "a2", "/p2")}};
  EXPECT_EQ(assemble_session_input(s, 2).text(), "[CLS] q2 [SEP] q1 [SEP] a1 [SEP] p1");
  EXPECT_EQ(assemble_session_input(s, 2, 64, ContextFlags::from_mode("none")).text(), "[CLS] q2");
  EXPECT_EQ(assemble_session_input(s, 2, 64, ContextFlags::from_mode("prev-query")).text(), "[CLS] q2 [SEP] q1");
  EXPECT_EQ(assemble_session_input(s, 2, 64, ContextFlags::from_mode("page")).text(), "[CLS] q2 [SEP] p1");
  EXPECT_EQ(assemble_session_input(s, 2, 64, ContextFlags::from_mode("annotation")).text(), "[CLS] q2 [SEP] a1");
  EXPECT_EQ(assemble_session_input(s, 1).text(), "[CLS] q1");
  EXPECT_THROW(ContextFlags::from_mode("everything"), Error);
}

TEST(SessionInputTest, NewestFirstWithinEachSource) {
  const Session s{"s", {step("q1", "a1", "/p1"), step("q2", "a2", "/p2"), step("q3", "a3", "/p3")}};
  EXPECT_EQ(assemble_session_input(s, 3).text(), "[CLS] q3 [SEP] q2 [SEP] q1 [SEP] a2 [SEP] a1 [SEP] p2 [SEP] p1");
}

TEST(SessionInputTest, AblationIdentity) {
  const Session s{"s", {step("back pain", "a", "/p"), step("chiropractor near me", "b", "/q")}};
  const Tokenizer tok;
  const auto ctx = assemble_session_input(s, 2, 64, ContextFlags::from_mode("none"));
  EXPECT_EQ(tok.tokenize(ctx.text()), tok.tokenize("[CLS] chiropractor near me"));
}

TEST(SessionInputTest, TailTruncationKeepsHead) {
  std::vector<SessionStep> steps;
  for (int i = 0; i < 6; ++i) steps.push_back(step("word" + std::to_string(i) + " extra filler", "ann", "/page/x"));
  const Session s{"s", steps};
  const auto in = assemble_session_input(s, 6, 8);
  EXPECT_EQ(in.words.size(), 8u);
  EXPECT_EQ(in.words[0], "[CLS]");
  EXPECT_EQ(in.words[1], "word5");
  EXPECT_NE(in.words.back(), "[SEP]");
  // The current query survives even when it alone exceeds the budget.
  const Session longq{"s", {step("a b c d e f g h i j", "x", "/y")}};
  EXPECT_EQ(assemble_session_input(longq, 1, 4).words.size(), 11u);
  EXPECT_THROW(assemble_session_input(s, 0), Error);
  EXPECT_THROW(assemble_session_input(s, 7), Error);
}

// ============================================================================
// training
// ============================================================================

TEST(TrainClassifierTest, SeparableLabelsReachPerfectTrainF1) {
  std::vector<LabeledText> train;
  for (int i = 0; i < 40; ++i) {
    const int label = i % 4;
    train.push_back({"topic" + std::to_string(label) + " item" + std::to_string(i), LabelVector::one_hot(4, label)});
  }
  const auto enc = EncoderParams::init(EncoderShape{4096, 32, 32}, 2);
  const Tokenizer tok(4096);
  // Two Adam steps per epoch on 40 examples: give the head room to converge.
  ClassifierConfig cfg;
  cfg.max_epochs = 300;
  cfg.patience = 300;
  const auto model = train_classifier(enc, tok, train, train, cfg);
  const auto probs = predict_all(model.encoder, tok, model.head, train);
  std::vector<LabelVector> decided, truth;
  for (std::size_t i = 0; i < train.size(); ++i) {
    decided.push_back(decide(probs[i], model.thresholds));
    truth.push_back(train[i].labels);
  }
  EXPECT_DOUBLE_EQ(precision_f1(decided, truth).f1, 1.0);
  EXPECT_DOUBLE_EQ(model.report.best_val_f1, 1.0);
}

TEST(TrainClassifierTest, PretrainedEncoderBeatsRandomAndReachesNinetyPercent) {
  const auto& f = PlantedFixture::get();
  const Tokenizer tok;
  ClassifierConfig cfg;
  const auto random_model = train_classifier(f.init, tok, f.train, f.val, cfg);
  const auto pretrained_model = train_classifier(f.trained, tok, f.train, f.val, cfg);
  EXPECT_GT(pretrained_model.report.best_val_f1, random_model.report.best_val_f1);
  const auto probs = predict_all(pretrained_model.encoder, tok, pretrained_model.head, f.test);
  EXPECT_GE(argmax_accuracy(probs, f.test), 0.9);
}

TEST(TrainClassifierTest, DeterministicAndCoTrainingMovesEncoder) {
  const auto& f = PlantedFixture::get();
  const Tokenizer tok;
  ClassifierConfig cfg;
  cfg.max_epochs = 3;
  const auto a = train_classifier(f.init, tok, f.train, f.val, cfg);
  const auto b = train_classifier(f.init, tok, f.train, f.val, cfg);
  EXPECT_EQ(a.head.values, b.head.values);
  EXPECT_EQ(a.report.val_f1, b.report.val_f1);
  EXPECT_EQ(a.encoder.values, f.init.values);
  cfg.freeze_encoder = false;
  const auto c = train_classifier(f.init, tok, f.train, f.val, cfg);
  EXPECT_NE(c.encoder.values, f.init.values);
  EXPECT_LT(c.report.train_loss.back(), c.report.train_loss.front());
}

TEST(TrainClassifierTest, EmptySplitsRejected) {
  const auto enc = EncoderParams::init(EncoderShape{64, 4, 4}, 1);
  const std::vector<LabeledText> one{{"a", LabelVector::one_hot(2, 0)}};
  EXPECT_THROW(train_classifier(enc, Tokenizer(64), {}, one, {}), Error);
  EXPECT_THROW(train_classifier(enc, Tokenizer(64), one, {}, {}), Error);
}

TEST(SessionDatasetTest, TargetsAreSessionIntents) {
  const IntentTaxonomy t({"alpha", "beta", "all_others"});
  const auto router = IntentRouter::from_rules(t, {{"alpha", "/alpha/"}, {"beta", "/beta/"}});
  SessionSplit split;
  split.sessions.push_back(Session{"s", {step("q1", "alpha", "/alpha/x"), step("q2", "beta", "/beta/y"),
                                         SessionStep{0, "q3", "", "", ""}}});
  split.eval_examples = {{0, 2}, {0, 3}};
  const auto data = session_dataset(split, split.eval_examples, router, ContextFlags{}, 64);
  ASSERT_EQ(data.size(), 1u);  // step 3 has no click
  EXPECT_EQ(data[0].text, "[CLS] q2 [SEP] q1 [SEP] alpha [SEP] alpha x");
  EXPECT_EQ(data[0].labels, LabelVector::one_hot(3, 1));
}

TEST(ClassifierIoTest, SaveLoadAndPredictionsRoundTrip) {
  const IntentTaxonomy t({"alpha", "beta", "all_others"});
  const auto head = ClassifierHead::init(3, 4, 5);
  const ThresholdVector tau{{0.15, 0.5, 0.95}};
  const auto dir = std::filesystem::temp_directory_path();
  save_classifier(dir / "mset_clf_test.json", head, tau, t);
  ClassifierHead h2;
  ThresholdVector tau2;
  IntentTaxonomy t2;
  load_classifier(dir / "mset_clf_test.json", h2, tau2, t2);
  EXPECT_EQ(h2.values, head.values);
  EXPECT_EQ(tau2.tau, tau.tau);
  EXPECT_EQ(t2.names(), t.names());

  const std::vector<Vec> probs{{0.2, 0.6, 0.1}, {0.1, 0.1, 0.99}};
  write_predictions_tsv(dir / "mset_pred_test.tsv", {"q a", "q b"}, probs, tau, t);
  const auto table = read_predictions_tsv(dir / "mset_pred_test.tsv", t);
  EXPECT_EQ(table.ids, (std::vector<std::string>{"q a", "q b"}));
  EXPECT_EQ(table.probs, probs);
  EXPECT_EQ(table.decided[0], decide(probs[0], tau));
  EXPECT_EQ(table.decided[1], LabelVector::one_hot(3, 2));
  std::filesystem::remove(dir / "mset_clf_test.json");
  std::filesystem::remove(dir / "mset_pred_test.tsv");
}
