#include "mset/classify.hpp"

#include "mset/eval.hpp"
#include "mset/losses.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace mset {

ClassifierHead ClassifierHead::zeros(std::size_t intents, std::size_t dim) {
  if (intents == 0 || dim == 0) throw Error(Error::Kind::Config, "classifier head: empty shape");
  return ClassifierHead{intents, dim, Vec(intents * dim + intents, 0.0)};
}

ClassifierHead ClassifierHead::init(std::size_t intents, std::size_t dim, std::uint64_t seed, double scale) {
  ClassifierHead h = zeros(intents, dim);
  Rng rng(derive_seed(seed, "head-init"));
  for (std::size_t i = 0; i < intents * dim; ++i) h.values[i] = (2.0 * uniform01(rng) - 1.0) * scale;
  return h;
}

Vec ClassifierHead::logits(std::span<const double> features) const {
  if (features.size() != dim) throw Error(Error::Kind::Precondition, "classifier head: feature size mismatch");
  Vec z(intents);
  for (std::size_t i = 0; i < intents; ++i) {
    double s = values[intents * dim + i];
    const double* w = values.data() + i * dim;
    for (std::size_t k = 0; k < dim; ++k) s += w[k] * features[k];
    z[i] = s;
  }
  return z;
}

Vec head_features(std::span<const double> embedding) {
  double n = 0;
  for (double x : embedding) n += x * x;
  n = std::sqrt(n);
  Vec f(embedding.begin(), embedding.end());
  if (n > 0) {
    for (double& x : f) x /= n;
  }
  return f;
}

Vec predict_proba(const EncoderParams& encoder, const ClassifierHead& head, std::span<const std::uint32_t> tokens) {
  Vec z = head.logits(head_features(encode(encoder, tokens)));
  for (double& x : z) x = sigmoid(x);
  return z;
}

Vec predict_proba(const EncoderParams& encoder, const Tokenizer& tokenizer, const ClassifierHead& head,
                  std::string_view text) {
  const auto ids = tokenizer.tokenize(text);
  return predict_proba(encoder, head, ids);
}

LabelVector decide(std::span<const double> probs, const ThresholdVector& thresholds) {
  if (probs.size() != thresholds.tau.size()) throw Error(Error::Kind::Precondition, "decide: size mismatch");
  LabelVector y(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] >= thresholds.tau[i]) y.set(i);
  }
  return y;
}

ThresholdSelection select_thresholds(std::span<const Vec> probs, std::span<const LabelVector> labels) {
  if (probs.empty() || probs.size() != labels.size()) {
    throw Error(Error::Kind::Precondition, "select_thresholds: need matching, non-empty validation data");
  }
  const std::size_t n_labels = labels.front().size();
  ThresholdSelection out;
  out.thresholds.tau.assign(n_labels, 0.5);
  for (std::size_t i = 0; i < n_labels; ++i) {
    std::size_t positives = 0;
    for (const auto& y : labels) positives += y.has(i);
    if (positives == 0) {
      out.warnings.push_back("label " + std::to_string(i) + " absent from validation; threshold 0.5");
      continue;
    }
    double best_f1 = -1;
    for (int step = 1; step <= 19; ++step) {
      const double tau = step / 20.0;
      std::size_t tp = 0;
      std::size_t fp = 0;
      for (std::size_t s = 0; s < probs.size(); ++s) {
        const bool p = probs[s][i] >= tau;
        tp += p && labels[s].has(i);
        fp += p && !labels[s].has(i);
      }
      const std::size_t fn = positives - tp;
      const double f1 = tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
      if (f1 > best_f1) {
        best_f1 = f1;
        out.thresholds.tau[i] = tau;
      }
    }
  }
  return out;
}

ContextFlags ContextFlags::from_mode(std::string_view mode) {
  if (mode == "none") return {false, false, false};
  if (mode == "prev-query") return {true, false, false};
  if (mode == "page") return {false, false, true};
  if (mode == "annotation") return {false, true, false};
  if (mode == "all") return {true, true, true};
  throw Error(Error::Kind::Config, "unknown context mode: " + std::string(mode));
}

std::string SessionInput::text() const { return join(words, " "); }

SessionInput assemble_session_input(const Session& session, std::size_t step_index, std::size_t max_tokens,
                                    ContextFlags flags) {
  if (step_index < 1 || step_index > session.size()) {
    throw Error(Error::Kind::Precondition, "assemble_session_input: step " + std::to_string(step_index) +
                                               " out of range for session of length " +
                                               std::to_string(session.size()));
  }
  const std::size_t cur = step_index - 1;
  SessionInput in;
  in.words.push_back("[CLS]");
  for (auto& w : Tokenizer::words(session.steps[cur].query)) in.words.push_back(std::move(w));
  const std::size_t protected_len = in.words.size();

  auto append_element = [&](std::string_view text) {
    auto ws = Tokenizer::words(text);
    if (ws.empty()) return;
    in.words.push_back("[SEP]");
    for (auto& w : ws) in.words.push_back(std::move(w));
  };
  if (flags.prev_queries) {
    for (std::size_t k = cur; k-- > 0;) append_element(session.steps[k].query);
  }
  if (flags.annotations) {
    for (std::size_t k = cur; k-- > 0;) append_element(session.steps[k].annotation);
  }
  if (flags.page) {
    for (std::size_t k = cur; k-- > 0;) append_element(session.steps[k].page_context);
  }
  if (in.words.size() > max_tokens) in.words.resize(std::max(max_tokens, protected_len));
  // A trailing separator carries no element.
  if (in.words.size() > protected_len && in.words.back() == "[SEP]") in.words.pop_back();
  return in;
}

namespace {

struct Example {
  std::vector<std::uint32_t> tokens;
  Vec target;
};

std::vector<Example> prepare(const Tokenizer& tokenizer, std::span<const LabeledText> data) {
  std::vector<Example> out;
  out.reserve(data.size());
  for (const auto& d : data) {
    Example e{tokenizer.tokenize(d.text), Vec(d.labels.size())};
    for (std::size_t i = 0; i < d.labels.size(); ++i) e.target[i] = d.labels.has(i) ? 1.0 : 0.0;
    out.push_back(std::move(e));
  }
  return out;
}

double micro_f1_at_half(const std::vector<Vec>& probs, std::span<const LabeledText> data) {
  const ThresholdVector half{Vec(data.front().labels.size(), 0.5)};
  std::vector<LabelVector> decided;
  std::vector<LabelVector> truth;
  for (std::size_t s = 0; s < probs.size(); ++s) {
    decided.push_back(decide(probs[s], half));
    truth.push_back(data[s].labels);
  }
  return precision_f1(decided, truth).f1;
}

}  // namespace

std::vector<Vec> predict_all(const EncoderParams& encoder, const Tokenizer& tokenizer, const ClassifierHead& head,
                             std::span<const LabeledText> inputs) {
  std::vector<Vec> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) out.push_back(predict_proba(encoder, tokenizer, head, in.text));
  return out;
}

TrainedClassifier train_classifier(const EncoderParams& encoder, const Tokenizer& tokenizer,
                                   std::span<const LabeledText> train, std::span<const LabeledText> val,
                                   const ClassifierConfig& config) {
  if (train.empty()) throw Error(Error::Kind::Precondition, "train_classifier: empty training split");
  if (val.empty()) throw Error(Error::Kind::Precondition, "train_classifier: empty validation split");
  if (config.batch_size == 0) throw Error(Error::Kind::Config, "train_classifier: batch_size must be > 0");
  const std::size_t n_intents = train.front().labels.size();
  const std::size_t dim = encoder.shape.dim;

  TrainedClassifier result{encoder, ClassifierHead::zeros(n_intents, dim), {}, {}};
  EncoderParams& enc = result.encoder;
  ClassifierHead& head = result.head;

  const auto examples = prepare(tokenizer, train);
  std::vector<Vec> frozen_features;
  if (config.freeze_encoder) {
    for (const auto& e : examples) frozen_features.push_back(head_features(encode(enc, e.tokens)));
  }

  ClassifierHead best_head = head;
  EncoderParams best_encoder = config.freeze_encoder ? EncoderParams{} : enc;
  AdamState head_state;
  AdamState enc_state;
  Vec head_grad(head.values.size());
  EncoderParams enc_grad = config.freeze_encoder ? EncoderParams{} : EncoderParams::zeros(enc.shape);

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(config.seed, "classifier-shuffle"));
  std::size_t since_best = 0;
  result.report.best_val_f1 = -1;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      std::fill(head_grad.begin(), head_grad.end(), 0.0);
      if (!config.freeze_encoder) enc_grad.set_zero();

      for (std::size_t b = start; b < end; ++b) {
        const Example& ex = examples[order[b]];
        EncodeTrace trace;
        Vec features;
        if (config.freeze_encoder) {
          features = frozen_features[order[b]];
        } else {
          trace = encode_traced(enc, ex.tokens);
          features = head_features(trace.output);
        }
        const BceLoss loss = bce_with_logits(ex.target, head.logits(features));
        epoch_loss += loss.value;

        Vec g_features(dim, 0.0);
        for (std::size_t i = 0; i < n_intents; ++i) {
          const double g = loss.grad[i] * inv_batch;
          head_grad[n_intents * dim + i] += g;
          double* gw = head_grad.data() + i * dim;
          const double* w = head.values.data() + i * dim;
          for (std::size_t k = 0; k < dim; ++k) {
            gw[k] += g * features[k];
            g_features[k] += g * w[k];
          }
        }
        if (!config.freeze_encoder) {
          double norm = 0;
          for (double x : trace.output) norm += x * x;
          norm = std::sqrt(norm);
          if (norm > 0) {
            double proj = 0;
            for (std::size_t k = 0; k < dim; ++k) proj += features[k] * g_features[k];
            Vec g_out(dim);
            for (std::size_t k = 0; k < dim; ++k) g_out[k] = (g_features[k] - features[k] * proj) / norm;
            backprop(enc, trace, g_out, enc_grad);
          }
        }
      }
      adam_step(head.values, head_grad, head_state, config.head_adam);
      if (!config.freeze_encoder) adam_step(enc.values, enc_grad.values, enc_state, config.encoder_adam);
    }
    result.report.train_loss.push_back(epoch_loss / static_cast<double>(examples.size()));

    const double f1 = micro_f1_at_half(predict_all(enc, tokenizer, head, val), val);
    result.report.val_f1.push_back(f1);
    result.report.epochs_run = epoch;
    if (f1 > result.report.best_val_f1) {
      result.report.best_val_f1 = f1;
      result.report.best_epoch = epoch;
      best_head = head;
      if (!config.freeze_encoder) best_encoder = enc;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }

  head = std::move(best_head);
  if (!config.freeze_encoder) enc = std::move(best_encoder);

  std::vector<LabelVector> val_labels;
  for (const auto& v : val) val_labels.push_back(v.labels);
  auto selection = select_thresholds(predict_all(enc, tokenizer, head, val), val_labels);
  result.thresholds = std::move(selection.thresholds);
  result.report.warnings = std::move(selection.warnings);
  return result;
}

std::vector<LabeledText> session_dataset(const SessionSplit& split, std::span<const SessionExample> examples,
                                         const IntentRouter& router, ContextFlags flags, std::size_t max_tokens) {
  std::vector<LabeledText> out;
  for (const auto& ex : examples) {
    const Session& s = split.sessions.at(ex.session);
    auto target = session_inferred_intent(s.steps.at(ex.step - 1), router);
    if (!target) continue;
    out.push_back({assemble_session_input(s, ex.step, max_tokens, flags).text(), std::move(*target)});
  }
  return out;
}

void save_classifier(const std::filesystem::path& path, const ClassifierHead& head, const ThresholdVector& thresholds,
                     const IntentTaxonomy& taxonomy) {
  nlohmann::json j;
  j["format"] = "mset-classifier";
  j["version"] = 1;
  j["intents"] = taxonomy.names();
  j["dim"] = head.dim;
  j["values"] = head.values;
  j["thresholds"] = thresholds.tau;
  std::ofstream out(path);
  if (!out) throw Error(Error::Kind::Io, "cannot write classifier: " + path.string());
  out << j.dump() << '\n';
}

void load_classifier(const std::filesystem::path& path, ClassifierHead& head, ThresholdVector& thresholds,
                     IntentTaxonomy& taxonomy) {
  std::ifstream in(path);
  if (!in) throw Error(Error::Kind::Io, "cannot open classifier: " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    taxonomy = IntentTaxonomy(j.at("intents").get<std::vector<std::string>>());
    head.intents = taxonomy.size();
    head.dim = j.at("dim").get<std::size_t>();
    head.values = j.at("values").get<Vec>();
    thresholds.tau = j.at("thresholds").get<Vec>();
    if (head.values.size() != head.intents * head.dim + head.intents || thresholds.tau.size() != head.intents) {
      throw Error(Error::Kind::Input, "classifier file has inconsistent shapes");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Error::Kind::Input, "classifier file malformed: " + std::string(e.what()));
  }
}

void write_predictions_tsv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                           const std::vector<Vec>& probs, const ThresholdVector& thresholds,
                           const IntentTaxonomy& taxonomy) {
  std::ofstream out(path);
  if (!out) throw Error(Error::Kind::Io, "cannot write predictions: " + path.string());
  out << "id";
  for (const auto& name : taxonomy.names()) out << '\t' << name;
  out << "\tdecided\n" << std::setprecision(17);
  for (std::size_t s = 0; s < ids.size(); ++s) {
    out << ids[s];
    for (double p : probs[s]) out << '\t' << p;
    out << '\t' << format_labels(decide(probs[s], thresholds), taxonomy) << '\n';
  }
}

PredictionTable read_predictions_tsv(const std::filesystem::path& path, const IntentTaxonomy& taxonomy) {
  std::ifstream in(path);
  if (!in) throw Error(Error::Kind::Io, "cannot open predictions: " + path.string());
  std::string line;
  std::getline(in, line);
  const auto header = split(line, '\t');
  if (header.size() != taxonomy.size() + 2) throw Error(Error::Kind::Input, "predictions header does not match taxonomy");
  PredictionTable table;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() != taxonomy.size() + 2) throw Error(Error::Kind::Input, "predictions row malformed: " + line);
    table.ids.push_back(cols[0]);
    Vec p;
    for (std::size_t i = 0; i < taxonomy.size(); ++i) p.push_back(std::stod(cols[i + 1]));
    table.probs.push_back(std::move(p));
    table.decided.push_back(parse_labels(cols.back(), taxonomy));
  }
  return table;
}

}  // namespace mset
