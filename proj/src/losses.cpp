#include "mset/losses.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <ostream>

namespace mset {

void LossConfig::validate() const {
  if (!(epsilon > 0 && epsilon < 1)) throw Error(Error::Kind::Config, "loss: epsilon must lie in (0, 1)");
  if (!(norm_floor > 0)) throw Error(Error::Kind::Config, "loss: norm_floor must be > 0");
  if (!(cosine_clamp < 1)) throw Error(Error::Kind::Config, "loss: cosine_clamp must be < 1");
}

namespace {

double dot(std::span<const double> u, std::span<const double> v) {
  double s = 0;
  for (std::size_t k = 0; k < u.size(); ++k) s += u[k] * v[k];
  return s;
}

double norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

void check_same_length(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw Error(Error::Kind::Precondition, "cosine: vector length mismatch");
}

}  // namespace

double cosine(std::span<const double> u, std::span<const double> v, double norm_floor) {
  check_same_length(u, v);
  return dot(u, v) / (std::max(norm(u), norm_floor) * std::max(norm(v), norm_floor));
}

void cosine_backward(std::span<const double> u, std::span<const double> v, double norm_floor, double scale,
                     std::span<double> gu, std::span<double> gv) {
  check_same_length(u, v);
  const double nu = norm(u);
  const double nv = norm(v);
  const double a = std::max(nu, norm_floor);
  const double b = std::max(nv, norm_floor);
  const double c = dot(u, v) / (a * b);
  const double inv_ab = scale / (a * b);
  // The clamped norm is constant below the floor, so its derivative vanishes there.
  const double cu = nu > norm_floor ? scale * c / (a * a) : 0.0;
  const double cv = nv > norm_floor ? scale * c / (b * b) : 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    if (!gu.empty()) gu[k] += v[k] * inv_ab - u[k] * cu;
    if (!gv.empty()) gv[k] += u[k] * inv_ab - v[k] * cv;
  }
}

double set_similarity_term(double cos, const LossConfig& config) {
  const double c = std::min(cos, config.cosine_clamp);
  return 1.0 / (1.0 - std::exp(c - 1.0) + config.epsilon);
}

double set_similarity_term_derivative(double cos, const LossConfig& config) {
  if (cos >= config.cosine_clamp) return 0.0;
  const double ex = std::exp(cos - 1.0);
  const double denom = 1.0 - ex + config.epsilon;
  return ex / (denom * denom);
}

Vec centroid(std::span<const Vec> members) {
  if (members.empty()) throw Error(Error::Kind::Precondition, "centroid: empty set");
  Vec c(members.front().size(), 0.0);
  for (const auto& e : members) {
    if (e.size() != c.size()) throw Error(Error::Kind::Precondition, "centroid: dimension mismatch");
    for (std::size_t k = 0; k < c.size(); ++k) c[k] += e[k];
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (double& x : c) x *= inv;
  return c;
}

namespace {

SetGradients zero_grads(std::span<const SetEmbeddings> sets) {
  SetGradients g(sets.size());
  for (std::size_t i = 0; i < sets.size(); ++i) {
    g[i].assign(sets[i].members.size(), Vec(sets[i].members.front().size(), 0.0));
  }
  return g;
}

void check_sets(std::span<const SetEmbeddings> sets, std::size_t min_members, const char* op) {
  if (sets.empty()) throw Error(Error::Kind::Precondition, std::string(op) + ": no sets");
  for (const auto& s : sets) {
    if (s.members.size() < min_members) {
      throw Error(Error::Kind::Precondition,
                  std::string(op) + ": set with " + std::to_string(s.members.size()) + " members (need >= " +
                      std::to_string(min_members) + ")");
    }
    if (s.weights.size() != s.members.size()) {
      throw Error(Error::Kind::Precondition, std::string(op) + ": weight count mismatch");
    }
  }
}

/// Spreads a centroid gradient over the members that formed it.
void distribute_centroid_grad(const Vec& g_centroid, std::vector<Vec>& member_grads) {
  const double inv = 1.0 / static_cast<double>(member_grads.size());
  for (auto& g : member_grads) {
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += g_centroid[k] * inv;
  }
}

}  // namespace

SetLoss intra_loss(std::span<const SetEmbeddings> sets, const LossConfig& config, bool with_grad) {
  config.validate();
  check_sets(sets, 2, "intra_loss");
  SetLoss out;
  if (with_grad) out.grads = zero_grads(sets);

  for (std::size_t i = 0; i < sets.size(); ++i) {
    const auto& set = sets[i];
    const std::size_t n = set.members.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    const Vec c_full = centroid(set.members);
    const std::size_t d = c_full.size();
    Vec g_centroid(d, 0.0);
    Vec g_total_loo(d, 0.0);
    std::vector<Vec> g_own_loo;
    if (config.leave_one_out && with_grad) g_own_loo.assign(n, Vec(d, 0.0));

    for (std::size_t j = 0; j < n; ++j) {
      const Vec& e = set.members[j];
      Vec c_loo;
      if (config.leave_one_out) {
        c_loo.resize(d);
        for (std::size_t k = 0; k < d; ++k) c_loo[k] = (c_full[k] * static_cast<double>(n) - e[k]) / static_cast<double>(n - 1);
      }
      const Vec& c = config.leave_one_out ? c_loo : c_full;
      const double cs = cosine(e, c, config.norm_floor);
      out.value += set.weights[j] * inv_n * set_similarity_term(cs, config);
      if (!with_grad) continue;
      const double coef = set.weights[j] * inv_n * set_similarity_term_derivative(cs, config);
      if (coef == 0.0) continue;
      if (config.leave_one_out) {
        Vec gc(d, 0.0);
        cosine_backward(e, c, config.norm_floor, coef, out.grads[i][j], gc);
        for (std::size_t k = 0; k < d; ++k) {
          g_own_loo[j][k] += gc[k];
          g_total_loo[k] += gc[k];
        }
      } else {
        cosine_backward(e, c, config.norm_floor, coef, out.grads[i][j], g_centroid);
      }
    }
    if (!with_grad) continue;
    if (config.leave_one_out) {
      // Member k feeds every centroid except its own, each with factor 1/(n-1).
      const double inv = 1.0 / static_cast<double>(n - 1);
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t t = 0; t < d; ++t) out.grads[i][k][t] += (g_total_loo[t] - g_own_loo[k][t]) * inv;
      }
    } else {
      distribute_centroid_grad(g_centroid, out.grads[i]);
    }
  }
  return out;
}

SetLoss inter_loss(std::span<const SetEmbeddings> sets, const LossConfig& config, bool with_grad) {
  config.validate();
  check_sets(sets, 1, "inter_loss");
  if (sets.size() < 2) throw Error(Error::Kind::Precondition, "inter_loss: need at least 2 sets");
  SetLoss out;
  if (with_grad) out.grads = zero_grads(sets);

  std::vector<Vec> centroids;
  centroids.reserve(sets.size());
  for (const auto& s : sets) centroids.push_back(centroid(s.members));
  std::vector<Vec> g_centroids(sets.size(), Vec(centroids.front().size(), 0.0));

  for (std::size_t i = 0; i < sets.size(); ++i) {
    const auto& set = sets[i];
    const double inv_n = 1.0 / static_cast<double>(set.members.size());
    for (std::size_t j = 0; j < sets.size(); ++j) {
      if (j == i) continue;
      for (std::size_t k = 0; k < set.members.size(); ++k) {
        const double cs = cosine(set.members[k], centroids[j], config.norm_floor);
        out.value += set.weights[k] * inv_n * set_similarity_term(cs, config);
        if (!with_grad) continue;
        const double coef = set.weights[k] * inv_n * set_similarity_term_derivative(cs, config);
        if (coef != 0.0) {
          cosine_backward(set.members[k], centroids[j], config.norm_floor, coef, out.grads[i][k], g_centroids[j]);
        }
      }
    }
  }
  if (with_grad) {
    for (std::size_t j = 0; j < sets.size(); ++j) distribute_centroid_grad(g_centroids[j], out.grads[j]);
  }
  return out;
}

SetLoss multiset_loss(std::span<const SetEmbeddings> sets, const LossConfig& config, bool with_grad) {
  const SetLoss intra = intra_loss(sets, config, with_grad);
  const SetLoss inter = inter_loss(sets, config, with_grad);
  if (!(intra.value > 0) || !(inter.value > 0)) {
    throw Error(Error::Kind::Numeric, "multiset_loss: non-positive component");
  }
  SetLoss out;
  out.value = -std::log(intra.value / inter.value);
  if (with_grad) {
    out.grads = inter.grads;
    const double a = 1.0 / inter.value;
    const double b = 1.0 / intra.value;
    for (std::size_t i = 0; i < out.grads.size(); ++i) {
      for (std::size_t j = 0; j < out.grads[i].size(); ++j) {
        for (std::size_t k = 0; k < out.grads[i][j].size(); ++k) {
          out.grads[i][j][k] = a * inter.grads[i][j][k] - b * intra.grads[i][j][k];
        }
      }
    }
  }
  return out;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

PairwiseLoss pairwise_loss(std::span<const Vec> embeddings, std::span<const PairwiseTriple> triples,
                           double norm_floor, bool with_grad) {
  if (triples.empty()) throw Error(Error::Kind::Precondition, "pairwise_loss: empty batch");
  PairwiseLoss out;
  if (with_grad) {
    out.grads.reserve(embeddings.size());
    for (const auto& e : embeddings) out.grads.emplace_back(e.size(), 0.0);
  }
  for (const auto& t : triples) {
    if (t.anchor >= embeddings.size() || t.positive >= embeddings.size() || t.negative >= embeddings.size()) {
      throw Error(Error::Kind::Precondition, "pairwise_loss: triple index out of range");
    }
    const auto& a = embeddings[t.anchor];
    const auto& p = embeddings[t.positive];
    const auto& n = embeddings[t.negative];
    // 1 / (1 + exp(c)) == sigmoid(-c)
    const double s_pos = sigmoid(-cosine(a, p, norm_floor));
    const double s_neg = sigmoid(-cosine(a, n, norm_floor));
    out.value += s_pos - s_neg;
    if (!with_grad) continue;
    cosine_backward(a, p, norm_floor, -s_pos * (1.0 - s_pos), out.grads[t.anchor], out.grads[t.positive]);
    cosine_backward(a, n, norm_floor, s_neg * (1.0 - s_neg), out.grads[t.anchor], out.grads[t.negative]);
  }
  return out;
}

BceLoss bce_loss(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size() || y.empty()) throw Error(Error::Kind::Precondition, "bce_loss: length mismatch");
  const double inv = 1.0 / static_cast<double>(y.size());
  BceLoss out;
  out.grad.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double raw = y_hat[i];
    const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
    out.value -= inv * (y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p));
    const bool clamped = raw < kProbClamp || raw > 1.0 - kProbClamp;
    out.grad[i] = clamped ? 0.0 : -inv * (y[i] / p - (1.0 - y[i]) / (1.0 - p));
  }
  return out;
}

BceLoss bce_with_logits(std::span<const double> y, std::span<const double> logits) {
  Vec probs(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) probs[i] = sigmoid(logits[i]);
  BceLoss out = bce_loss(y, probs);
  for (std::size_t i = 0; i < probs.size(); ++i) out.grad[i] *= probs[i] * (1.0 - probs[i]);
  return out;
}

namespace {

std::vector<SetEmbeddings> random_sets(std::size_t k, std::size_t n, std::size_t dim, Rng& rng) {
  std::vector<SetEmbeddings> sets(k);
  for (auto& s : sets) {
    s.members.assign(n, Vec(dim));
    s.weights.assign(n, 1.0 / static_cast<double>(n));
    for (auto& e : s.members) {
      for (double& x : e) x = 2.0 * uniform01(rng) - 1.0;
    }
  }
  return sets;
}

template <typename Fn>
std::pair<double, std::size_t> median_time(Fn&& fn, std::size_t trials, double min_trial_seconds) {
  using clock = std::chrono::steady_clock;
  fn();  // warm-up
  std::size_t reps = 1;
  while (true) {
    const auto t0 = clock::now();
    for (std::size_t r = 0; r < reps; ++r) fn();
    const double dt = std::chrono::duration<double>(clock::now() - t0).count();
    if (dt >= min_trial_seconds || reps >= (1u << 20)) break;
    reps *= 2;
  }
  std::vector<double> samples;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto t0 = clock::now();
    for (std::size_t r = 0; r < reps; ++r) fn();
    samples.push_back(std::chrono::duration<double>(clock::now() - t0).count() / static_cast<double>(reps));
  }
  std::sort(samples.begin(), samples.end());
  const std::size_t m = samples.size() / 2;
  const double median = samples.size() % 2 ? samples[m] : 0.5 * (samples[m - 1] + samples[m]);
  return {median, reps};
}

}  // namespace

std::vector<BenchRow> bench_complexity(const BenchConfig& config) {
  if (config.trials == 0) throw Error(Error::Kind::Config, "bench: trials must be > 0");
  std::vector<BenchRow> rows;
  Rng rng(derive_seed(config.seed, "bench"));
  const LossConfig loss_config;
  volatile double sink = 0;

  for (std::size_t k : config.k_values) {
    for (std::size_t n : config.n_values) {
      if (k < 2 || n < 2) throw Error(Error::Kind::Config, "bench: K and N must be >= 2");
      const auto sets = random_sets(k, n, config.dim, rng);

      auto [ms, ms_reps] = median_time(
          [&] { sink = sink + multiset_loss(sets, loss_config, config.include_gradients).value; }, config.trials,
          config.min_trial_seconds);
      rows.push_back({"multiset", k, n, ms, ms_reps});

      std::vector<Vec> flat;
      for (const auto& s : sets) flat.insert(flat.end(), s.members.begin(), s.members.end());
      std::vector<PairwiseTriple> triples;
      triples.reserve(k * n * (n - 1));
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t a = 0; a < n; ++a) {
          for (std::size_t p = 0; p < n; ++p) {
            if (p == a) continue;
            std::size_t other = uniform_index(rng, k - 1);
            if (other >= i) ++other;
            triples.push_back({i * n + a, i * n + p, other * n + uniform_index(rng, n)});
          }
        }
      }
      auto [ps, ps_reps] = median_time(
          [&] { sink = sink + pairwise_loss(flat, triples, loss_config.norm_floor, config.include_gradients).value; },
          config.trials, config.min_trial_seconds);
      rows.push_back({"pairwise", k, n, ps, ps_reps});
    }
  }
  return rows;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << "objective,k,n,median_seconds,repetitions\n";
  for (const auto& r : rows) {
    out << r.objective << ',' << r.k << ',' << r.n << ',' << r.median_seconds << ',' << r.repetitions << '\n';
  }
}

}  // namespace mset
