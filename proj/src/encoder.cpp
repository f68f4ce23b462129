#include "mset/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mset {

Tokenizer::Tokenizer(std::size_t vocab_size) : vocab_size_(vocab_size) {
  if (vocab_size_ <= kReserved) throw Error(Error::Kind::Config, "tokenizer: vocab_size too small");
}

std::vector<std::string> Tokenizer::words(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text.substr(i, 5) == "[CLS]" || text.substr(i, 5) == "[SEP]") {
      flush();
      out.emplace_back(text.substr(i, 5));
      i += 4;
      continue;
    }
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

std::uint32_t Tokenizer::word_id(std::string_view word) const {
  if (word == "[CLS]") return kCls;
  if (word == "[SEP]") return kSep;
  return static_cast<std::uint32_t>(kReserved + fnv1a64(word) % (vocab_size_ - kReserved));
}

std::vector<std::uint32_t> Tokenizer::tokenize(std::string_view text) const {
  std::vector<std::uint32_t> ids;
  for (const auto& w : words(text)) ids.push_back(word_id(w));
  if (ids.empty()) ids.push_back(kOov);
  return ids;
}

EncoderParams EncoderParams::zeros(const EncoderShape& shape) {
  if (shape.dim < 2) throw Error(Error::Kind::Config, "encoder: dim must be >= 2");
  if (shape.hidden < 1 || shape.vocab <= Tokenizer::kReserved) {
    throw Error(Error::Kind::Config, "encoder: invalid hidden width or vocab");
  }
  EncoderParams p;
  p.shape = shape;
  p.values.assign(shape.num_params(), 0.0);
  return p;
}

EncoderParams EncoderParams::init(const EncoderShape& shape, std::uint64_t seed, double scale) {
  EncoderParams p = zeros(shape);
  p.seed = seed;
  Rng rng(derive_seed(seed, "encoder-init"));
  auto fill = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) p.values[i] = (2.0 * uniform01(rng) - 1.0) * scale;
  };
  fill(0, p.b1_offset());
  fill(p.w2_offset(), p.b2_offset());
  return p;
}

std::span<double> EncoderParams::token_row(std::size_t token) {
  return {values.data() + token * shape.dim, shape.dim};
}
std::span<const double> EncoderParams::token_row(std::size_t token) const {
  return {values.data() + token * shape.dim, shape.dim};
}
std::span<double> EncoderParams::w1() { return {values.data() + w1_offset(), shape.hidden * shape.dim}; }
std::span<const double> EncoderParams::w1() const {
  return {values.data() + w1_offset(), shape.hidden * shape.dim};
}
std::span<double> EncoderParams::b1() { return {values.data() + b1_offset(), shape.hidden}; }
std::span<const double> EncoderParams::b1() const { return {values.data() + b1_offset(), shape.hidden}; }
std::span<double> EncoderParams::w2() { return {values.data() + w2_offset(), shape.dim * shape.hidden}; }
std::span<const double> EncoderParams::w2() const {
  return {values.data() + w2_offset(), shape.dim * shape.hidden};
}
std::span<double> EncoderParams::b2() { return {values.data() + b2_offset(), shape.dim}; }
std::span<const double> EncoderParams::b2() const { return {values.data() + b2_offset(), shape.dim}; }

void EncoderParams::set_zero() { std::fill(values.begin(), values.end(), 0.0); }

EncodeTrace encode_traced(const EncoderParams& params, std::span<const std::uint32_t> tokens) {
  static constexpr std::uint32_t kOovOnly[] = {Tokenizer::kOov};
  if (tokens.empty()) tokens = kOovOnly;
  const std::size_t d = params.shape.dim;
  const std::size_t h = params.shape.hidden;

  EncodeTrace t;
  t.tokens.assign(tokens.begin(), tokens.end());
  t.pooled.assign(d, 0.0);
  for (std::uint32_t tok : tokens) {
    if (tok >= params.shape.vocab) throw Error(Error::Kind::Precondition, "encode: token id out of range");
    const auto row = params.token_row(tok);
    for (std::size_t k = 0; k < d; ++k) t.pooled[k] += row[k];
  }
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (double& x : t.pooled) x *= inv;

  const auto w1 = params.w1();
  const auto b1 = params.b1();
  t.hidden.resize(h);
  for (std::size_t i = 0; i < h; ++i) {
    double a = b1[i];
    const double* row = w1.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) a += row[k] * t.pooled[k];
    t.hidden[i] = std::tanh(a);
  }

  const auto w2 = params.w2();
  const auto b2 = params.b2();
  t.output.resize(d);
  for (std::size_t k = 0; k < d; ++k) {
    double o = b2[k];
    const double* row = w2.data() + k * h;
    for (std::size_t i = 0; i < h; ++i) o += row[i] * t.hidden[i];
    t.output[k] = o;
  }
  return t;
}

Vec encode(const EncoderParams& params, std::span<const std::uint32_t> tokens) {
  return encode_traced(params, tokens).output;
}

Vec encode(const EncoderParams& params, const Tokenizer& tokenizer, std::string_view text) {
  const auto ids = tokenizer.tokenize(text);
  return encode(params, ids);
}

void backprop(const EncoderParams& params, const EncodeTrace& trace, std::span<const double> grad_output,
              EncoderParams& grads) {
  const std::size_t d = params.shape.dim;
  const std::size_t h = params.shape.hidden;
  if (grad_output.size() != d || grads.shape != params.shape) {
    throw Error(Error::Kind::Precondition, "backprop: shape mismatch");
  }

  auto gb2 = grads.b2();
  auto gw2 = grads.w2();
  const auto w2 = params.w2();
  Vec g_hidden(h, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    const double g = grad_output[k];
    gb2[k] += g;
    double* grow = gw2.data() + k * h;
    const double* wrow = w2.data() + k * h;
    for (std::size_t i = 0; i < h; ++i) {
      grow[i] += g * trace.hidden[i];
      g_hidden[i] += g * wrow[i];
    }
  }

  auto gb1 = grads.b1();
  auto gw1 = grads.w1();
  const auto w1 = params.w1();
  Vec g_pooled(d, 0.0);
  for (std::size_t i = 0; i < h; ++i) {
    const double ga = g_hidden[i] * (1.0 - trace.hidden[i] * trace.hidden[i]);
    gb1[i] += ga;
    double* grow = gw1.data() + i * d;
    const double* wrow = w1.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) {
      grow[k] += ga * trace.pooled[k];
      g_pooled[k] += ga * wrow[k];
    }
  }

  const double inv = 1.0 / static_cast<double>(trace.tokens.size());
  for (std::uint32_t tok : trace.tokens) {
    auto row = grads.token_row(tok);
    for (std::size_t k = 0; k < d; ++k) row[k] += g_pooled[k] * inv;
  }
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamConfig& config) {
  if (params.size() != grads.size()) throw Error(Error::Kind::Precondition, "adam_step: shape mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      std::ostringstream msg;
      msg << "adam_step: non-finite gradient at index " << i << " (value " << grads[i] << ", step "
          << state.step + 1 << ")";
      throw Error(Error::Kind::Numeric, msg.str());
    }
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw Error(Error::Kind::Precondition, "adam_step: state shape mismatch");

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    // Untouched coordinates (zero moments, zero gradient) would receive an exactly zero update.
    if (g == 0.0 && state.m[i] == 0.0 && state.v[i] == 0.0) continue;
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
  }
}

Vec finite_diff_grad(const std::function<double(std::span<const double>)>& loss_fn,
                     std::span<const double> x, double h) {
  if (!(h > 0)) throw Error(Error::Kind::Precondition, "finite_diff_grad: h must be > 0");
  Vec probe(x.begin(), x.end());
  Vec grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = loss_fn(probe);
    probe[i] = orig - h;
    const double down = loss_fn(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor) {
  if (analytic.size() != numeric.size()) throw Error(Error::Kind::Precondition, "relative_error: size mismatch");
  double diff = 0;
  double scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

namespace {

constexpr char kMagic[8] = {'M', 'S', 'E', 'T', 'E', 'N', 'C', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const EncoderParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Error::Kind::Io, "cannot write checkpoint: " + path.string());
  out.write(kMagic, sizeof kMagic);
  put_u64(out, params.shape.vocab);
  put_u64(out, params.shape.dim);
  put_u64(out, params.shape.hidden);
  put_u64(out, params.seed);
  put_u64(out, params.values.size());
  out.write(reinterpret_cast<const char*>(params.values.data()),
            static_cast<std::streamsize>(params.values.size() * sizeof(double)));
  if (!out) throw Error(Error::Kind::Io, "checkpoint write failed: " + path.string());
}

EncoderParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Error::Kind::Io, "cannot open checkpoint: " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw Error(Error::Kind::Input, "not an encoder checkpoint: " + path.string());
  }
  EncoderShape shape;
  shape.vocab = get_u64(in);
  shape.dim = get_u64(in);
  shape.hidden = get_u64(in);
  const std::uint64_t seed = get_u64(in);
  const std::uint64_t count = get_u64(in);
  if (!in || count != shape.num_params()) throw Error(Error::Kind::Input, "checkpoint header corrupt: " + path.string());
  EncoderParams p = EncoderParams::zeros(shape);
  p.seed = seed;
  in.read(reinterpret_cast<char*>(p.values.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw Error(Error::Kind::Input, "checkpoint truncated: " + path.string());
  return p;
}

}  // namespace mset
