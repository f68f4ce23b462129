#include "mset/eval.hpp"

#include <json.hpp>

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

namespace mset {

Partition Partition::from_ids(std::span<const std::size_t> ids) {
  std::map<std::size_t, std::size_t> remap;
  Partition p;
  p.labels.reserve(ids.size());
  for (std::size_t id : ids) {
    auto [it, inserted] = remap.try_emplace(id, remap.size());
    p.labels.push_back(it->second);
  }
  return p;
}

std::size_t Partition::num_clusters() const {
  if (labels.empty()) return 0;
  return *std::max_element(labels.begin(), labels.end()) + 1;
}

bool same_grouping(const Partition& a, const Partition& b) {
  if (a.size() != b.size()) return false;
  return Partition::from_ids(a.labels) == Partition::from_ids(b.labels);
}

namespace {

double sq_dist(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

KMeansResult kmeans_once(std::span<const Vec> points, std::size_t k, Rng& rng, std::size_t max_iter) {
  const std::size_t n = points.size();
  std::vector<Vec> centers;
  centers.push_back(points[uniform_index(rng, n)]);
  Vec nearest(n, std::numeric_limits<double>::infinity());
  while (centers.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], sq_dist(points[i], centers.back()));
      total += nearest[i];
    }
    std::size_t pick = uniform_index(rng, n);
    if (total > 0) {
      double r = uniform01(rng) * total;
      for (std::size_t i = 0; i < n; ++i) {
        if (nearest[i] <= 0) continue;
        pick = i;
        if (r < nearest[i]) break;
        r -= nearest[i];
      }
    }
    centers.push_back(points[pick]);
  }

  std::vector<std::size_t> assign(n, k);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = sq_dist(points[i], centers[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = sq_dist(points[i], centers[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;

    const std::size_t dim = points[0].size();
    std::vector<Vec> sums(k, Vec(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t t = 0; t < dim; ++t) sums[assign[i]][t] += points[i][t];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Empty cluster: move it onto the point worst served by its center.
        std::size_t far = 0;
        double far_d = -1;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = sq_dist(points[i], centers[assign[i]]);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        centers[c] = points[far];
        assign[far] = c;
        continue;
      }
      for (std::size_t t = 0; t < dim; ++t) centers[c][t] = sums[c][t] / static_cast<double>(counts[c]);
    }
  }

  KMeansResult r;
  for (std::size_t i = 0; i < n; ++i) r.inertia += sq_dist(points[i], centers[assign[i]]);
  r.partition = Partition::from_ids(assign);
  r.centers = std::move(centers);
  return r;
}

double comb2(double x) { return x * (x - 1.0) / 2.0; }

struct Contingency {
  std::vector<std::vector<double>> table;
  std::vector<double> rows;
  std::vector<double> cols;
  double n = 0;
};

Contingency contingency(const Partition& a, const Partition& b) {
  if (a.size() != b.size()) throw Error(Error::Kind::Precondition, "partition length mismatch");
  Contingency c;
  const Partition pa = Partition::from_ids(a.labels);
  const Partition pb = Partition::from_ids(b.labels);
  c.table.assign(pa.num_clusters(), std::vector<double>(pb.num_clusters(), 0.0));
  c.rows.assign(pa.num_clusters(), 0.0);
  c.cols.assign(pb.num_clusters(), 0.0);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    c.table[pa.labels[i]][pb.labels[i]] += 1;
    c.rows[pa.labels[i]] += 1;
    c.cols[pb.labels[i]] += 1;
  }
  c.n = static_cast<double>(pa.size());
  return c;
}

}  // namespace

KMeansResult kmeans(std::span<const Vec> points, std::size_t k, std::size_t restarts, std::uint64_t seed,
                    std::size_t max_iter) {
  if (k < 1) throw Error(Error::Kind::Precondition, "kmeans: k must be >= 1");
  if (k > points.size()) throw Error(Error::Kind::Precondition, "kmeans: k exceeds number of items");
  if (restarts < 1) throw Error(Error::Kind::Precondition, "kmeans: restarts must be >= 1");
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < restarts; ++r) {
    Rng rng(derive_seed(seed, "kmeans-" + std::to_string(r)));
    KMeansResult cand = kmeans_once(points, k, rng, max_iter);
    if (cand.inertia < best.inertia) best = std::move(cand);
  }
  return best;
}

double ari(const Partition& pred, const Partition& truth) {
  const Contingency c = contingency(pred, truth);
  if (c.rows.size() <= 1 && c.cols.size() <= 1) return 1.0;
  double index = 0;
  for (const auto& row : c.table) {
    for (double v : row) index += comb2(v);
  }
  double sum_a = 0;
  double sum_b = 0;
  for (double v : c.rows) sum_a += comb2(v);
  for (double v : c.cols) sum_b += comb2(v);
  const double expected = sum_a * sum_b / comb2(c.n);
  const double max_index = 0.5 * (sum_a + sum_b);
  const double denom = max_index - expected;
  if (denom == 0.0) return same_grouping(pred, truth) ? 1.0 : 0.0;
  return (index - expected) / denom;
}

double nmi(const Partition& pred, const Partition& truth) {
  const Contingency c = contingency(pred, truth);
  if (c.n == 0) throw Error(Error::Kind::Precondition, "nmi: empty partitions");
  auto entropy = [&](const std::vector<double>& marg) {
    double h = 0;
    for (double v : marg) {
      if (v > 0) h -= (v / c.n) * std::log(v / c.n);
    }
    return h;
  };
  const double ha = entropy(c.rows);
  const double hb = entropy(c.cols);
  if (ha == 0.0 || hb == 0.0) return same_grouping(pred, truth) ? 1.0 : 0.0;
  double mi = 0;
  for (std::size_t i = 0; i < c.rows.size(); ++i) {
    for (std::size_t j = 0; j < c.cols.size(); ++j) {
      const double v = c.table[i][j];
      if (v > 0) mi += (v / c.n) * std::log(c.n * v / (c.rows[i] * c.cols[j]));
    }
  }
  return std::clamp(mi / (0.5 * (ha + hb)), 0.0, 1.0);
}

ClassificationScores precision_f1(std::span<const LabelVector> decided, std::span<const LabelVector> truth,
                                  Averaging averaging) {
  if (decided.size() != truth.size()) throw Error(Error::Kind::Precondition, "precision_f1: size mismatch");
  if (decided.empty()) throw Error(Error::Kind::Precondition, "precision_f1: empty dataset");
  const std::size_t labels = truth.front().size();
  std::vector<std::size_t> tp(labels, 0);
  std::vector<std::size_t> fp(labels, 0);
  std::vector<std::size_t> fn(labels, 0);
  for (std::size_t q = 0; q < decided.size(); ++q) {
    if (decided[q].size() != labels || truth[q].size() != labels) {
      throw Error(Error::Kind::Precondition, "precision_f1: label vector length mismatch");
    }
    for (std::size_t i = 0; i < labels; ++i) {
      const bool p = decided[q].has(i);
      const bool t = truth[q].has(i);
      tp[i] += p && t;
      fp[i] += p && !t;
      fn[i] += !p && t;
    }
  }

  auto prf = [](double tp_, double fp_, double fn_, ClassificationScores& s) {
    s.precision = tp_ + fp_ > 0 ? tp_ / (tp_ + fp_) : 0.0;
    s.recall = tp_ + fn_ > 0 ? tp_ / (tp_ + fn_) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  };

  ClassificationScores out;
  out.tp = std::accumulate(tp.begin(), tp.end(), std::size_t{0});
  out.fp = std::accumulate(fp.begin(), fp.end(), std::size_t{0});
  out.fn = std::accumulate(fn.begin(), fn.end(), std::size_t{0});
  if (averaging == Averaging::Micro) {
    prf(static_cast<double>(out.tp), static_cast<double>(out.fp), static_cast<double>(out.fn), out);
    if (out.tp + out.fp == 0) out.warnings.push_back("no predicted positives; precision set to 0");
    return out;
  }
  double p = 0;
  double r = 0;
  double f = 0;
  for (std::size_t i = 0; i < labels; ++i) {
    ClassificationScores s;
    prf(static_cast<double>(tp[i]), static_cast<double>(fp[i]), static_cast<double>(fn[i]), s);
    if (tp[i] + fp[i] == 0) out.warnings.push_back("label " + std::to_string(i) + " has no predicted positives");
    p += s.precision;
    r += s.recall;
    f += s.f1;
  }
  out.precision = p / static_cast<double>(labels);
  out.recall = r / static_cast<double>(labels);
  out.f1 = f / static_cast<double>(labels);
  return out;
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

double hit_rate_3(std::span<const Vec> scores, std::span<const LabelVector> truth) {
  if (scores.size() != truth.size()) throw Error(Error::Kind::Precondition, "hit_rate_3: size mismatch");
  if (scores.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t s = 0; s < scores.size(); ++s) {
    for (std::size_t i : top_k_indices(scores[s], 3)) {
      if (truth[s].has(i)) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

NdcgResult ndcg_3(std::span<const Vec> scores, std::span<const LabelVector> truth) {
  if (scores.size() != truth.size()) throw Error(Error::Kind::Precondition, "ndcg_3: size mismatch");
  NdcgResult out;
  double total = 0;
  for (std::size_t s = 0; s < scores.size(); ++s) {
    const std::size_t relevant = truth[s].count();
    if (relevant == 0) {
      ++out.excluded;
      continue;
    }
    const auto top = top_k_indices(scores[s], 3);
    double dcg = 0;
    for (std::size_t r = 0; r < top.size(); ++r) {
      if (truth[s].has(top[r])) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    }
    double idcg = 0;
    for (std::size_t r = 0; r < std::min<std::size_t>({3, relevant, top.size()}); ++r) {
      idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    }
    total += dcg / idcg;
    ++out.evaluated;
  }
  out.value = out.evaluated ? total / static_cast<double>(out.evaluated) : 0.0;
  return out;
}

std::array<std::size_t, 3> largest_remainder(std::size_t n, const SplitRatios& ratios) {
  const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * r[i];
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b] + 1e-12; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[order[i % 3]];
  return counts;
}

SplitIndices stratified_split(std::span<const LabelVector> labels, const SplitRatios& ratios, std::size_t min_group,
                              std::uint64_t seed) {
  if (labels.empty()) throw Error(Error::Kind::Precondition, "stratified_split: empty input");
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9 || ratios.train < 0 || ratios.val < 0 ||
      ratios.test < 0) {
    throw Error(Error::Kind::Precondition, "stratified_split: ratios must be non-negative and sum to 1");
  }
  std::map<std::vector<std::uint8_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i].bits].push_back(i);

  SplitIndices out;
  Rng rng(derive_seed(seed, "stratified-split"));
  for (auto& [key, members] : groups) {
    if (members.size() < min_group) {
      out.test.insert(out.test.end(), members.begin(), members.end());
      continue;
    }
    for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[uniform_index(rng, i)]);
    const auto counts = largest_remainder(members.size(), ratios);
    auto it = members.begin();
    out.train.insert(out.train.end(), it, it + static_cast<std::ptrdiff_t>(counts[0]));
    it += static_cast<std::ptrdiff_t>(counts[0]);
    out.val.insert(out.val.end(), it, it + static_cast<std::ptrdiff_t>(counts[1]));
    it += static_cast<std::ptrdiff_t>(counts[1]);
    out.test.insert(out.test.end(), it, members.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw Error(Error::Kind::Precondition, "paired_t_test: need >= 2 pairs");
  const double n = static_cast<double>(a.size());
  Vec diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
  const double mean = std::accumulate(diff.begin(), diff.end(), 0.0) / n;
  double ss = 0;
  for (double d : diff) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / (n - 1));
  TTestResult r;
  r.mean_diff = mean;
  r.df = n - 1;
  if (sd == 0.0) {
    r.t = mean > 0 ? std::numeric_limits<double>::infinity() : (mean < 0 ? -std::numeric_limits<double>::infinity() : 0.0);
    r.p_one_sided = mean > 0 ? 0.0 : (mean < 0 ? 1.0 : 0.5);
    return r;
  }
  r.t = mean / (sd / std::sqrt(n));
  boost::math::students_t dist(r.df);
  r.p_one_sided = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  put("precision", precision);
  put("recall", recall);
  put("f1", f1);
  put("hit_rate_3", hit_rate_3);
  put("ndcg_3", ndcg_3);
  put("ari", ari);
  put("nmi", nmi);
  j["support"] = support;
  j["ndcg_excluded"] = ndcg_excluded;
  if (!note.empty()) j["note"] = note;
  return j.dump(2);
}

MetricReport MetricReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MetricReport r;
  auto get = [&](const char* key, std::optional<double>& v) {
    if (j.contains(key)) v = j.at(key).get<double>();
  };
  get("precision", r.precision);
  get("recall", r.recall);
  get("f1", r.f1);
  get("hit_rate_3", r.hit_rate_3);
  get("ndcg_3", r.ndcg_3);
  get("ari", r.ari);
  get("nmi", r.nmi);
  r.support = j.value("support", std::size_t{0});
  r.ndcg_excluded = j.value("ndcg_excluded", std::size_t{0});
  r.note = j.value("note", std::string{});
  return r;
}

std::string MetricReport::to_table() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  auto row = [&](const char* name, const std::optional<double>& v) {
    if (v) out << std::left << std::setw(12) << name << std::right << std::setw(10) << *v << '\n';
  };
  row("precision", precision);
  row("recall", recall);
  row("f1", f1);
  row("hit_rate@3", hit_rate_3);
  row("ndcg@3", ndcg_3);
  row("ari", ari);
  row("nmi", nmi);
  out << std::left << std::setw(12) << "support" << std::right << std::setw(10) << support << '\n';
  if (!note.empty()) out << "note: " << note << '\n';
  return out.str();
}

}  // namespace mset
