#pragma once

#include "mset/common.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mset {

/// Hashing tokenizer: lowercase, split on non-alphanumerics, FNV-1a into buckets.
/// The literal markers "[CLS]" and "[SEP]" map to reserved ids.
class Tokenizer {
 public:
  static constexpr std::uint32_t kOov = 0;
  static constexpr std::uint32_t kCls = 1;
  static constexpr std::uint32_t kSep = 2;
  static constexpr std::uint32_t kReserved = 3;

  explicit Tokenizer(std::size_t vocab_size = 32768);

  std::size_t vocab_size() const { return vocab_size_; }

  /// Normalized word pieces, markers kept verbatim.
  static std::vector<std::string> words(std::string_view text);
  std::uint32_t word_id(std::string_view word) const;
  /// Never empty: text without any word yields {kOov}.
  std::vector<std::uint32_t> tokenize(std::string_view text) const;

 private:
  std::size_t vocab_size_;
};

struct EncoderShape {
  std::size_t vocab = 32768;
  std::size_t dim = 64;
  std::size_t hidden = 128;

  std::size_t num_params() const { return vocab * dim + 2 * hidden * dim + hidden + dim; }
  bool operator==(const EncoderShape&) const = default;
};

/// Token table (vocab x dim) followed by a dim -> hidden -> dim tanh MLP, stored flat so the
/// optimizer and gradient checks can treat the model as one vector.
/// Layout: token_table | w1 (hidden x dim) | b1 | w2 (dim x hidden) | b2.
struct EncoderParams {
  EncoderShape shape;
  std::uint64_t seed = 0;
  std::vector<double> values;

  static EncoderParams zeros(const EncoderShape& shape);
  /// Weights uniform in [-scale, scale]; biases zero.
  static EncoderParams init(const EncoderShape& shape, std::uint64_t seed, double scale = 0.05);

  std::span<double> token_row(std::size_t token);
  std::span<const double> token_row(std::size_t token) const;
  std::span<double> w1();
  std::span<const double> w1() const;
  std::span<double> b1();
  std::span<const double> b1() const;
  std::span<double> w2();
  std::span<const double> w2() const;
  std::span<double> b2();
  std::span<const double> b2() const;

  std::size_t w1_offset() const { return shape.vocab * shape.dim; }
  std::size_t b1_offset() const { return w1_offset() + shape.hidden * shape.dim; }
  std::size_t w2_offset() const { return b1_offset() + shape.hidden; }
  std::size_t b2_offset() const { return w2_offset() + shape.dim * shape.hidden; }

  void set_zero();
};

/// Forward activations kept for backprop.
struct EncodeTrace {
  std::vector<std::uint32_t> tokens;
  Vec pooled;
  Vec hidden;
  Vec output;
};

/// E(q): mean of token vectors passed through the MLP.
Vec encode(const EncoderParams& params, std::span<const std::uint32_t> tokens);
Vec encode(const EncoderParams& params, const Tokenizer& tokenizer, std::string_view text);
EncodeTrace encode_traced(const EncoderParams& params, std::span<const std::uint32_t> tokens);

/// Accumulates dL/dparams into grads given dL/dE for one traced forward pass.
void backprop(const EncoderParams& params, const EncodeTrace& trace, std::span<const double> grad_output,
              EncoderParams& grads);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

/// Bias-corrected Adam update. A non-finite gradient aborts before any parameter moves.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamConfig& config = {});

/// Central differences (f(x+h) - f(x-h)) / 2h per coordinate.
Vec finite_diff_grad(const std::function<double(std::span<const double>)>& loss_fn,
                     std::span<const double> x, double h = 1e-6);

/// max_i |a_i - b_i| / max(max|a|, max|b|, floor).
double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                      double floor = 1e-8);

/// Binary checkpoint: "MSETENC1", then vocab, dim, hidden, seed, count (u64 LE) and the values.
void save_checkpoint(const std::filesystem::path& path, const EncoderParams& params);
EncoderParams load_checkpoint(const std::filesystem::path& path);

}  // namespace mset
