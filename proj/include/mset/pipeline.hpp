#pragma once

#include "mset/classify.hpp"
#include "mset/eval.hpp"
#include "mset/training.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mset {

/// Flat key = value run configuration. Every key has a default; unknown keys are rejected.
struct RunConfig {
  std::string out_dir = "run";
  std::string log;  // empty: synthesize a planted-intent log
  std::string log_format = "canonical-tsv";
  std::int64_t gap_seconds = kDefaultSessionGapSeconds;

  std::size_t synth_intents = 8;
  std::size_t synth_queries = 400;
  std::size_t synth_sessions = 1000;
  double synth_vocab_overlap = 0.3;
  double synth_drift = 0.4;
  double synth_noise = 0.2;
  std::size_t synth_session_len_min = 2;
  std::size_t synth_session_len_max = 6;

  std::int64_t min_clicks = kHsMinClicks;
  std::string set_key = "doc_type";
  std::string rules;  // empty: synthetic rules, or doc_type routing for real logs
  std::string taxonomy = "auto";  // "auto" or "health_search"
  double multi_label_threshold = kDefaultMultiLabelThreshold;

  std::string objective = "multiset";
  std::size_t vocab = 32768;
  std::size_t dim = 64;
  std::size_t hidden = 128;
  std::uint64_t seed = 42;
  double lr = 1e-3;
  std::size_t steps = 300;
  std::size_t sets_per_batch = 4;
  std::size_t queries_per_set = 8;
  double epsilon = 1e-6;
  double cosine_clamp = 0.9;

  double split_train = 0.6;
  double split_val = 0.2;
  double split_test = 0.2;
  std::size_t min_group = 3;
  std::string splits;  // empty: stratified split of the weak labels
  std::size_t kmeans_restarts = 10;

  bool freeze_encoder = true;
  std::size_t classifier_epochs = 50;
  std::size_t patience = 5;
  double head_lr = 1e-2;
  std::size_t max_tokens = kDefaultMaxTokens;
  std::string session_contexts = "none,prev-query,page,all";
  std::size_t session_min_len = 2;
  std::size_t session_max_len = 6;

  /// Applies one key; throws Config on unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();
  static std::string describe(const std::string& key);

  /// Reads a key = value file ('#' comments); then applies MSET_<KEY> environment overrides
  /// ('.' and '-' become '_', upper-cased).
  static RunConfig load(const std::filesystem::path& path, bool env_overrides = true);
  void apply_env();
  std::string to_text() const;
};

/// Path plus content hash.
struct ArtifactRef {
  std::string path;
  std::string sha256;
};

/// Per-stage record linking outputs to inputs and to the upstream manifests.
struct Manifest {
  std::string stage;
  std::uint64_t seed = 0;
  std::string config_sha256;
  std::vector<ArtifactRef> inputs;
  std::vector<ArtifactRef> outputs;
  /// upstream stage -> sha256 of its manifest file.
  std::map<std::string, std::string> upstream;

  std::string to_json() const;
  static Manifest from_json(const std::string& text);
};

std::filesystem::path manifest_path(const std::filesystem::path& run_dir, const std::string& stage);
void write_manifest(const std::filesystem::path& run_dir, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& run_dir, const std::string& stage);

/// Rechecks every manifest in the run directory: output hashes against the files and
/// upstream manifest hashes against the manifests. Throws Integrity naming the first break.
void verify_run(const std::filesystem::path& run_dir);

/// Stage names in execution order.
const std::vector<std::string>& pipeline_stages();

/// Runs ingest -> extract-sets -> label -> train -> cluster-eval -> train-classifier -> eval ->
/// session-eval into config.out_dir. Failures are rethrown prefixed with the stage name.
void run_pipeline(const RunConfig& config);

/// Runs a single stage against existing upstream artifacts in config.out_dir.
void run_stage(const RunConfig& config, const std::string& stage);

struct ReportRow {
  std::string run;
  std::string objective;
  std::map<std::string, std::optional<double>> values;
};

struct Report {
  std::vector<std::string> columns;
  std::vector<ReportRow> rows;
  std::vector<std::string> warnings;

  std::string to_text() const;
  std::string to_csv() const;
  static Report from_csv(const std::string& text);
};

/// Side-by-side comparison of finished runs (cluster metrics, global classification, and
/// session F1 per context mode). Missing artifacts leave blanks and add a warning.
Report build_report(const std::vector<std::filesystem::path>& run_dirs);

/// Planted-intent synthetic spec derived from the config.
SynthSpec synth_spec_from(const RunConfig& config);

/// Embeds queries and writes "query\tv1,v2,...".
void write_embeddings_tsv(const std::filesystem::path& path, const EncoderParams& params, const Tokenizer& tokenizer,
                          const std::vector<std::string>& queries);

/// Clusters L2-normalized query embeddings and scores them against truth cluster ids.
MetricReport cluster_eval(const EncoderParams& params, const Tokenizer& tokenizer,
                          const std::vector<std::string>& queries, const std::vector<std::size_t>& truth,
                          std::size_t k, std::size_t restarts, std::uint64_t seed);

/// Taxonomy file: one intent name per line.
void write_taxonomy(const std::filesystem::path& path, const IntentTaxonomy& taxonomy);
IntentTaxonomy read_taxonomy(const std::filesystem::path& path);

/// Taxonomy named by a predictions TSV header (id, intents..., decided).
IntentTaxonomy taxonomy_from_predictions(const std::filesystem::path& path);

/// First two columns of a labels or truth TSV: query and its label combination as a cluster id.
struct ClusterTruth {
  std::vector<std::string> queries;
  std::vector<std::size_t> ids;
  std::size_t num_clusters = 0;
};
ClusterTruth read_cluster_truth(const std::filesystem::path& path);

/// Scores predictions against a labels TSV; every prediction id must have a label row.
MetricReport evaluate_predictions(const PredictionTable& predictions, const std::vector<QueryLabel>& truth);

/// Precision/F1 from decided sets plus HitRate@3/NDCG@3 from probabilities.
MetricReport classification_report(const std::vector<Vec>& probs, const std::vector<LabelVector>& decided,
                                   const std::vector<LabelVector>& truth);

}  // namespace mset
