#pragma once

#include "mset/clicklog.hpp"
#include "mset/encoder.hpp"
#include "mset/labeling.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mset {

/// One dense d -> 1 unit per intent, applied to the L2-normalized encoder output.
/// values holds the I x d weight matrix row-major, then the I biases.
struct ClassifierHead {
  std::size_t intents = 0;
  std::size_t dim = 0;
  Vec values;

  static ClassifierHead zeros(std::size_t intents, std::size_t dim);
  static ClassifierHead init(std::size_t intents, std::size_t dim, std::uint64_t seed, double scale = 0.05);

  Vec logits(std::span<const double> features) const;
};

/// Unit-length copy of the embedding (zero vector stays zero).
Vec head_features(std::span<const double> embedding);

Vec predict_proba(const EncoderParams& encoder, const ClassifierHead& head, std::span<const std::uint32_t> tokens);
Vec predict_proba(const EncoderParams& encoder, const Tokenizer& tokenizer, const ClassifierHead& head,
                  std::string_view text);

struct ThresholdVector {
  Vec tau;
};

/// y_i = 1 iff p_i >= tau_i.
LabelVector decide(std::span<const double> probs, const ThresholdVector& thresholds);

struct ThresholdSelection {
  ThresholdVector thresholds;
  std::vector<std::string> warnings;
};

/// Per-label tau on the grid 0.05, 0.10, ..., 0.95 maximizing that label's F1 (lowest tau on
/// ties). Labels without validation positives keep 0.5 and produce a warning.
ThresholdSelection select_thresholds(std::span<const Vec> probs, std::span<const LabelVector> labels);

/// Which context sources enter the session input.
struct ContextFlags {
  bool prev_queries = true;
  bool annotations = true;
  bool page = true;

  /// "none", "prev-query", "page", "annotation" or "all".
  static ContextFlags from_mode(std::string_view mode);
};

/// "[CLS] q_n [SEP] q_n-1 [SEP] ... [SEP] a_n-1 [SEP] ... [SEP] p_n-1 ..." as word pieces.
struct SessionInput {
  std::vector<std::string> words;

  std::string text() const;
};

inline constexpr std::size_t kDefaultMaxTokens = 64;

/// Input for the 1-based step of a session: current query, then previous queries, clicked-doc
/// annotations and page contexts, each newest first. Truncation drops words from the tail.
SessionInput assemble_session_input(const Session& session, std::size_t step_index,
                                    std::size_t max_tokens = kDefaultMaxTokens, ContextFlags flags = {});

struct LabeledText {
  std::string text;
  LabelVector labels;
};

struct ClassifierConfig {
  std::size_t max_epochs = 50;
  std::size_t patience = 5;
  std::size_t batch_size = 32;
  AdamConfig head_adam{1e-2, 0.9, 0.999, 1e-8};
  AdamConfig encoder_adam{};
  bool freeze_encoder = true;
  std::uint64_t seed = 1;
};

struct ClassifierReport {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_f1 = 0.0;
  std::vector<double> train_loss;
  std::vector<double> val_f1;
  std::vector<std::string> warnings;
};

struct TrainedClassifier {
  EncoderParams encoder;
  ClassifierHead head;
  ThresholdVector thresholds;
  ClassifierReport report;
};

/// Minimizes mean BCE with Adam, early-stopping on validation micro-F1 (tau = 0.5) with the
/// configured patience, then selects per-label thresholds on validation predictions.
TrainedClassifier train_classifier(const EncoderParams& encoder, const Tokenizer& tokenizer,
                                   std::span<const LabeledText> train, std::span<const LabeledText> val,
                                   const ClassifierConfig& config);

/// Probabilities for many inputs.
std::vector<Vec> predict_all(const EncoderParams& encoder, const Tokenizer& tokenizer, const ClassifierHead& head,
                             std::span<const LabeledText> inputs);

/// Labeled session inputs for the given examples; the target is the session-inferred intent of the step.
std::vector<LabeledText> session_dataset(const SessionSplit& split, std::span<const SessionExample> examples,
                                         const IntentRouter& router, ContextFlags flags,
                                         std::size_t max_tokens = kDefaultMaxTokens);

void save_classifier(const std::filesystem::path& path, const ClassifierHead& head, const ThresholdVector& thresholds,
                     const IntentTaxonomy& taxonomy);
void load_classifier(const std::filesystem::path& path, ClassifierHead& head, ThresholdVector& thresholds,
                     IntentTaxonomy& taxonomy);

/// TSV: id, one probability column per intent, decided label set.
void write_predictions_tsv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                           const std::vector<Vec>& probs, const ThresholdVector& thresholds,
                           const IntentTaxonomy& taxonomy);

struct PredictionTable {
  std::vector<std::string> ids;
  std::vector<Vec> probs;
  std::vector<LabelVector> decided;
};

PredictionTable read_predictions_tsv(const std::filesystem::path& path, const IntentTaxonomy& taxonomy);

}  // namespace mset
