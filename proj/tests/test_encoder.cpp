#include <gtest/gtest.h>

#include "mset/encoder.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace mset;

namespace {

const EncoderShape kSmall{16, 4, 5};

}  // namespace

TEST(TokenizerTest, NormalizationAndMarkers) {
  EXPECT_EQ(Tokenizer::words("Lice-Treatment, KIDS"), (std::vector<std::string>{"lice", "treatment", "kids"}));
  EXPECT_EQ(Tokenizer::words("[CLS] q2 [SEP] q1"), (std::vector<std::string>{"[CLS]", "q2", "[SEP]", "q1"}));
  const Tokenizer tok(64);
  EXPECT_EQ(tok.tokenize("[CLS] a [SEP]").front(), Tokenizer::kCls);
  EXPECT_EQ(tok.tokenize("[CLS] a [SEP]").back(), Tokenizer::kSep);
  EXPECT_EQ(tok.tokenize("  ... "), std::vector<std::uint32_t>{Tokenizer::kOov});
  for (const char* w : {"a", "b", "drug", "provider", "zz9"}) {
    const auto id = tok.word_id(w);
    EXPECT_GE(id, Tokenizer::kReserved);
    EXPECT_LT(id, 64u);
  }
  EXPECT_EQ(tok.tokenize("Same Text"), tok.tokenize("same   text"));
}

TEST(EncoderTest, DeterministicAndOrderInvariant) {
  const auto p = EncoderParams::init(EncoderShape{}, 3);
  const Tokenizer tok;
  EXPECT_EQ(encode(p, tok, "chest pain"), encode(p, tok, "chest pain"));
  EXPECT_EQ(encode(p, tok, "a b"), encode(p, tok, "b a"));
  EXPECT_NE(encode(p, tok, "a b"), encode(p, tok, "a c"));
  EXPECT_EQ(encode(p, tok, "x").size(), 64u);
}

TEST(EncoderTest, ZeroTokenTableGivesConstantOutput) {
  auto p = EncoderParams::init(kSmall, 9);
  std::fill(p.values.begin(), p.values.begin() + static_cast<std::ptrdiff_t>(p.w1_offset()), 0.0);
  const Tokenizer tok(kSmall.vocab);
  EXPECT_EQ(encode(p, tok, "a"), encode(p, tok, "something else entirely"));
}

TEST(EncoderTest, InitRangeAndLayout) {
  const auto p = EncoderParams::init(EncoderShape{}, 1);
  EXPECT_EQ(p.values.size(), EncoderShape{}.num_params());
  for (double v : p.values) {
    ASSERT_LE(std::abs(v), 0.05);
  }
  for (double v : p.b1()) EXPECT_EQ(v, 0.0);
  for (double v : p.b2()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(p.b2_offset() + p.shape.dim, p.values.size());
}

TEST(EncoderTest, BackpropMatchesFiniteDifferences) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g(0, 1);
  const Tokenizer tok(kSmall.vocab);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = EncoderParams::init(kSmall, static_cast<std::uint64_t>(trial), 0.5);
    for (auto& b : p.b1()) b = 0.1 * g(rng);
    Vec weights(kSmall.dim);
    for (auto& w : weights) w = g(rng);
    const auto tokens = tok.tokenize("q" + std::to_string(trial) + " shared tok " + std::to_string(trial % 3));
    auto loss = [&](std::span<const double> x) {
      EncoderParams q = p;
      q.values.assign(x.begin(), x.end());
      const auto e = encode(q, tokens);
      double s = 0;
      for (std::size_t i = 0; i < e.size(); ++i) s += weights[i] * e[i] + 0.5 * e[i] * e[i];
      return s;
    };
    const auto trace = encode_traced(p, tokens);
    Vec grad_out(kSmall.dim);
    for (std::size_t i = 0; i < grad_out.size(); ++i) grad_out[i] = weights[i] + trace.output[i];
    auto grads = EncoderParams::zeros(kSmall);
    backprop(p, trace, grad_out, grads);
    const auto numeric = finite_diff_grad(loss, p.values);
    EXPECT_LT(relative_error(grads.values, numeric), 1e-6) << "trial " << trial;
  }
}

TEST(AdamTest, ZeroGradientLeavesParamsUnchanged) {
  Vec x{1.0, -2.0, 3.0};
  const Vec g(3, 0.0);
  AdamState s;
  for (int i = 0; i < 5; ++i) adam_step(x, g, s);
  EXPECT_EQ(x, (Vec{1.0, -2.0, 3.0}));
}

TEST(AdamTest, HandComputedSteps) {
  const AdamConfig cfg{0.1, 0.9, 0.999, 1e-8};
  Vec x{1.0};
  AdamState s;
  adam_step(x, Vec{0.5}, s, cfg);
  // m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
  EXPECT_NEAR(x[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  adam_step(x, Vec{-1.0}, s, cfg);
  const double m = 0.9 * 0.05 + 0.1 * -1.0;
  const double v = 0.999 * 0.00025 + 0.001 * 1.0;
  const double mh = m / (1 - 0.81);
  const double vh = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(x[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * mh / (std::sqrt(vh) + 1e-8), 1e-14);
  EXPECT_EQ(s.step, 2);
}

TEST(AdamTest, ConstantGradientStepApproachesLr) {
  const AdamConfig cfg{1e-3, 0.9, 0.999, 1e-8};
  Vec x{0.0, 0.0};
  AdamState s;
  for (int i = 0; i < 500; ++i) {
    const Vec before = x;
    adam_step(x, Vec{2.0, -0.3}, s, cfg);
    if (i > 100) {
      EXPECT_NEAR(before[0] - x[0], 1e-3, 1e-9);
      EXPECT_NEAR(x[1] - before[1], 1e-3, 1e-9);
    }
  }
}

TEST(AdamTest, NanGradientAbortsBeforeAnyUpdate) {
  Vec x{1.0, 2.0};
  AdamState s;
  try {
    adam_step(x, Vec{0.1, std::nan("")}, s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), Error::Kind::Numeric);
    EXPECT_NE(std::string(e.what()).find("1"), std::string::npos);
  }
  EXPECT_EQ(x, (Vec{1.0, 2.0}));
  EXPECT_THROW(adam_step(x, Vec{0.1}, s), Error);
}

TEST(FiniteDiffTest, Examples) {
  const auto sq = finite_diff_grad([](std::span<const double> x) { return x[0] * x[0]; }, Vec{3.0}, 1e-4);
  EXPECT_NEAR(sq[0], 6.0, 1e-6);
  const auto c = finite_diff_grad([](std::span<const double>) { return 4.2; }, Vec{1.0, 2.0});
  EXPECT_EQ(c, (Vec{0.0, 0.0}));
  EXPECT_NEAR(relative_error(Vec{1.0, 2.0}, Vec{1.0, 2.1}), 0.1 / 2.1, 1e-15);
}

TEST(CheckpointTest, RoundTripAndCorruption) {
  const auto p = EncoderParams::init(kSmall, 77);
  const auto path = std::filesystem::temp_directory_path() / "mset_ckpt_test.bin";
  save_checkpoint(path, p);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.shape, p.shape);
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.values, p.values);
  std::filesystem::resize_file(path, 40);
  EXPECT_THROW(load_checkpoint(path), Error);
  std::filesystem::remove(path);
}
