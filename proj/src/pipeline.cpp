#include "mset/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace mset {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Config schema

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  const auto t = trim(value);
  auto res = std::from_chars(t.data(), t.data() + t.size(), out);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw Error(Error::Kind::Config, "config key '" + key + "': expected an integer, got '" + value + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  const auto t = trim(value);
  char* end = nullptr;
  const double out = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size() || !std::isfinite(out)) {
    throw Error(Error::Kind::Config, "config key '" + key + "': expected a number, got '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  const auto t = to_lower(trim(value));
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw Error(Error::Kind::Config, "config key '" + key + "': expected a boolean, got '" + value + "'");
}

struct Field {
  std::string name;
  std::string doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

Field field(const char* name, std::string RunConfig::*m, const char* doc) {
  return {name, doc, [m](RunConfig& c, const std::string& v) { c.*m = trim(v); },
          [m](const RunConfig& c) { return c.*m; }};
}
Field field(const char* name, double RunConfig::*m, const char* doc) {
  return {name, doc, [m, name](RunConfig& c, const std::string& v) { c.*m = parse_real(name, v); },
          [m](const RunConfig& c) { return format_double(c.*m); }};
}
Field field(const char* name, bool RunConfig::*m, const char* doc) {
  return {name, doc, [m, name](RunConfig& c, const std::string& v) { c.*m = parse_bool(name, v); },
          [m](const RunConfig& c) { return std::string(c.*m ? "true" : "false"); }};
}
template <class T>
Field field(const char* name, T RunConfig::*m, const char* doc) {
  return {name, doc, [m, name](RunConfig& c, const std::string& v) { c.*m = parse_integer<T>(name, v); },
          [m](const RunConfig& c) { return std::to_string(c.*m); }};
}

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = {
      field("out_dir", &RunConfig::out_dir, "run directory receiving every artifact"),
      field("log", &RunConfig::log, "click log path; empty synthesizes a planted-intent log"),
      field("log_format", &RunConfig::log_format, "canonical-tsv or tripclick-like"),
      field("gap_seconds", &RunConfig::gap_seconds, "session split gap in seconds"),
      field("synth_intents", &RunConfig::synth_intents, "synthetic: number of planted intents"),
      field("synth_queries", &RunConfig::synth_queries, "synthetic: number of distinct queries"),
      field("synth_sessions", &RunConfig::synth_sessions, "synthetic: number of sessions"),
      field("synth_vocab_overlap", &RunConfig::synth_vocab_overlap, "synthetic: share of shared query tokens"),
      field("synth_drift", &RunConfig::synth_drift, "synthetic: per-step probability of a drifted query"),
      field("synth_noise", &RunConfig::synth_noise, "synthetic: probability of a low-count off-intent click"),
      field("synth_session_len_min", &RunConfig::synth_session_len_min, "synthetic: shortest session"),
      field("synth_session_len_max", &RunConfig::synth_session_len_max, "synthetic: longest session"),
      field("min_clicks", &RunConfig::min_clicks, "minimum aggregated clicks for a (query, set) pair"),
      field("set_key", &RunConfig::set_key, "document set key: doc_type or url_pattern"),
      field("rules", &RunConfig::rules, "URL rules JSON; empty uses synthetic rules or doc_type routing"),
      field("taxonomy", &RunConfig::taxonomy, "auto or health_search"),
      field("multi_label_threshold", &RunConfig::multi_label_threshold, "click share needed for an extra label"),
      field("objective", &RunConfig::objective, "encoder objective: pairwise, multiset or bce"),
      field("vocab", &RunConfig::vocab, "hashing vocabulary size V"),
      field("dim", &RunConfig::dim, "embedding size d"),
      field("hidden", &RunConfig::hidden, "MLP hidden size h"),
      field("seed", &RunConfig::seed, "root seed; every stage derives its own"),
      field("lr", &RunConfig::lr, "encoder Adam learning rate"),
      field("steps", &RunConfig::steps, "contrastive training steps"),
      field("sets_per_batch", &RunConfig::sets_per_batch, "document sets per batch B"),
      field("queries_per_set", &RunConfig::queries_per_set, "queries sampled per set M"),
      field("epsilon", &RunConfig::epsilon, "set-similarity denominator epsilon"),
      field("cosine_clamp", &RunConfig::cosine_clamp, "largest cosine fed to the set-similarity term in training"),
      field("split_train", &RunConfig::split_train, "train share of each label-combination group"),
      field("split_val", &RunConfig::split_val, "validation share"),
      field("split_test", &RunConfig::split_test, "test share"),
      field("min_group", &RunConfig::min_group, "smaller label-combination groups go to test"),
      field("splits", &RunConfig::splits, "existing splits TSV (query, train|val|test); empty computes one"),
      field("kmeans_restarts", &RunConfig::kmeans_restarts, "k-means restarts for cluster-eval"),
      field("freeze_encoder", &RunConfig::freeze_encoder, "train only the classifier head"),
      field("classifier_epochs", &RunConfig::classifier_epochs, "maximum classifier epochs"),
      field("patience", &RunConfig::patience, "early-stopping patience in epochs"),
      field("head_lr", &RunConfig::head_lr, "classifier head Adam learning rate"),
      field("max_tokens", &RunConfig::max_tokens, "session input length limit in words"),
      field("session_contexts", &RunConfig::session_contexts, "comma list of none, prev-query, page, annotation, all"),
      field("session_min_len", &RunConfig::session_min_len, "shortest curated session"),
      field("session_max_len", &RunConfig::session_max_len, "longest curated session"),
  };
  return fields;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : schema()) {
    if (f.name == key) return f;
  }
  throw Error(Error::Kind::Config, "unknown config key: '" + key + "'");
}

void validate(const RunConfig& c) {
  parse_log_format(c.log_format);
  parse_set_key(c.set_key);
  parse_objective(c.objective);
  if (c.taxonomy != "auto" && c.taxonomy != "health_search") {
    throw Error(Error::Kind::Config, "taxonomy must be auto or health_search");
  }
  for (const auto& mode : split(c.session_contexts, ',')) ContextFlags::from_mode(trim(mode));
  const double total = c.split_train + c.split_val + c.split_test;
  if (c.split_train < 0 || c.split_val < 0 || c.split_test < 0 || std::abs(total - 1.0) > 1e-9) {
    throw Error(Error::Kind::Config, "split ratios must be non-negative and sum to 1");
  }
  if (c.min_clicks < 1) throw Error(Error::Kind::Config, "min_clicks must be >= 1");
  if (c.dim == 0 || c.hidden == 0 || c.vocab <= Tokenizer::kReserved) {
    throw Error(Error::Kind::Config, "encoder shape must be positive and vocab larger than the reserved ids");
  }
  if (c.out_dir.empty()) throw Error(Error::Kind::Config, "out_dir must not be empty");
  LossConfig{c.epsilon, 1e-12, c.cosine_clamp, false}.validate();
}

// ---------------------------------------------------------------------------
// Files

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Error::Kind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Error::Kind::Io, "cannot write " + path.string());
  out << text;
}

std::vector<ClickEvent> read_events(const fs::path& path) {
  return parse_log(path, LogFormat::CanonicalTsv).events;
}

json report_json(const MetricReport& r) { return json::parse(r.to_json()); }

// ---------------------------------------------------------------------------
// Stage plumbing

const std::map<std::string, std::vector<std::string>>& stage_upstream() {
  static const std::map<std::string, std::vector<std::string>> deps = {
      {"ingest", {}},
      {"extract-sets", {"ingest"}},
      {"label", {"ingest"}},
      {"train", {"extract-sets", "label"}},
      {"cluster-eval", {"ingest", "label", "train"}},
      {"train-classifier", {"label", "train"}},
      {"eval", {"label", "train-classifier"}},
      {"session-eval", {"ingest", "label", "train"}},
  };
  return deps;
}

/// Collects artifacts of one stage run.
struct StageIo {
  fs::path dir;
  std::vector<ArtifactRef> inputs;
  std::vector<ArtifactRef> outputs;

  fs::path in(const std::string& name) {
    const fs::path p = dir / name;
    if (!fs::exists(p)) throw Error(Error::Kind::Precondition, "missing artifact " + name);
    inputs.push_back({name, sha256_file(p.string())});
    return p;
  }
  fs::path external(const std::string& path) {
    if (!fs::exists(path)) throw Error(Error::Kind::Input, "missing input file " + path);
    inputs.push_back({fs::absolute(path).string(), sha256_file(path)});
    return path;
  }
  fs::path out(const std::string& name) { return dir / name; }
  void seal(const std::vector<std::string>& names) {
    for (const auto& n : names) outputs.push_back({n, sha256_file((dir / n).string())});
  }
};

void verify_outputs(const fs::path& run_dir, const Manifest& m) {
  for (const auto& out : m.outputs) {
    const fs::path p = run_dir / out.path;
    if (!fs::exists(p)) {
      throw Error(Error::Kind::Integrity, "stage " + m.stage + ": artifact " + out.path + " is missing");
    }
    if (sha256_file(p.string()) != out.sha256) {
      throw Error(Error::Kind::Integrity, "stage " + m.stage + ": artifact " + out.path + " was modified");
    }
  }
}

SplitRatios ratios_of(const RunConfig& c) { return {c.split_train, c.split_val, c.split_test}; }

ContrastiveConfig contrastive_config(const RunConfig& c, std::uint64_t seed) {
  ContrastiveConfig cc;
  cc.objective = parse_objective(c.objective);
  cc.steps = c.steps;
  cc.sets_per_batch = c.sets_per_batch;
  cc.queries_per_set = c.queries_per_set;
  cc.adam.lr = c.lr;
  cc.loss.epsilon = c.epsilon;
  cc.loss.cosine_clamp = c.cosine_clamp;
  cc.seed = seed;
  return cc;
}

ClassifierConfig classifier_config(const RunConfig& c, std::uint64_t seed, bool freeze) {
  ClassifierConfig cc;
  cc.max_epochs = c.classifier_epochs;
  cc.patience = c.patience;
  cc.head_adam.lr = c.head_lr;
  cc.encoder_adam.lr = c.lr;
  cc.freeze_encoder = freeze;
  cc.seed = seed;
  return cc;
}

IntentRouter make_router(const fs::path& run_dir, const IntentTaxonomy& taxonomy) {
  const fs::path rules = run_dir / "rules.json";
  if (fs::exists(rules)) return IntentRouter::from_rules(taxonomy, read_rules_json(rules));
  return IntentRouter::from_doc_types(taxonomy);
}

std::vector<LabeledText> labeled_queries(const std::vector<QueryLabel>& labels) {
  std::vector<LabeledText> out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back({l.query, l.labels});
  return out;
}

template <class T>
std::vector<T> pick(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

SplitIndices query_split(const RunConfig& c, const std::vector<QueryLabel>& labels) {
  std::vector<LabelVector> ys;
  for (const auto& l : labels) ys.push_back(l.labels);
  return stratified_split(ys, ratios_of(c), c.min_group, derive_seed(c.seed, "split"));
}

/// Assigns labeled queries from a (query, split) TSV; every labeled query must appear.
SplitIndices read_splits(const fs::path& path, const std::vector<QueryLabel>& labels) {
  std::map<std::string, std::string> which;
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() != 2) throw Error(Error::Kind::Input, "splits row malformed: " + line);
    which[normalize_query(cols[0])] = trim(cols[1]);
  }
  SplitIndices sp;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto it = which.find(labels[i].query);
    if (it == which.end()) throw Error(Error::Kind::Input, "splits file lacks query '" + labels[i].query + "'");
    if (it->second == "train") sp.train.push_back(i);
    else if (it->second == "val") sp.val.push_back(i);
    else if (it->second == "test") sp.test.push_back(i);
    else throw Error(Error::Kind::Input, "unknown split '" + it->second + "'");
  }
  return sp;
}

// ---------------------------------------------------------------------------
// Stages

void stage_ingest(const RunConfig& c, StageIo& io) {
  std::vector<std::string> outs{"events.tsv", "ingest_summary.json"};
  json summary;
  std::vector<ClickEvent> events;
  if (c.log.empty()) {
    const auto data = synth_generate(synth_spec_from(c));
    events = data.events;
    write_truth(io.out("truth.tsv"), data);
    outs.push_back("truth.tsv");
    if (c.rules.empty()) {
      std::vector<IntentRule> rules;
      for (const auto& name : data.intents) rules.push_back({name, "/" + name + "/"});
      write_rules_json(io.out("rules.json"), rules);
      outs.push_back("rules.json");
    }
    summary["source"] = "synthetic";
    summary["rows"] = events.size();
    summary["malformed"] = 0;
  } else {
    const auto parsed = parse_log(io.external(c.log), parse_log_format(c.log_format));
    events = parsed.events;
    summary["source"] = c.log;
    summary["rows"] = parsed.rows;
    summary["malformed"] = parsed.malformed;
    summary["issues"] = parsed.issues;
  }
  if (!c.rules.empty()) {
    write_rules_json(io.out("rules.json"), read_rules_json(io.external(c.rules)));
    outs.push_back("rules.json");
  }
  write_log(io.out("events.tsv"), events);
  summary["events"] = events.size();
  summary["sessions"] = sessionize(events, c.gap_seconds).size();
  write_text(io.out("ingest_summary.json"), summary.dump(2) + "\n");
  io.seal(outs);
}

void stage_extract_sets(const RunConfig& c, StageIo& io) {
  const auto events = read_events(io.in("events.tsv"));
  const auto corpus = extract_sets(events, c.min_clicks, parse_set_key(c.set_key));
  if (corpus.sets.empty()) throw Error(Error::Kind::Input, "no document set survives min_clicks");
  write_corpus_jsonl(io.out("corpus.jsonl"), corpus);
  io.seal({"corpus.jsonl"});
}

void stage_label(const RunConfig& c, StageIo& io) {
  const auto events = read_events(io.in("events.tsv"));
  const bool has_rules = fs::exists(io.dir / "rules.json");
  std::vector<IntentRule> rules;
  if (has_rules) rules = read_rules_json(io.in("rules.json"));

  IntentTaxonomy taxonomy;
  if (c.taxonomy == "health_search") {
    taxonomy = IntentTaxonomy::health_search();
  } else {
    std::vector<std::string> names;
    if (has_rules) {
      for (const auto& r : rules) {
        if (std::find(names.begin(), names.end(), r.intent) == names.end()) names.push_back(r.intent);
      }
    } else {
      std::set<std::string> types;
      for (const auto& e : events) types.insert(e.doc_type);
      names.assign(types.begin(), types.end());
    }
    if (std::find(names.begin(), names.end(), "all_others") == names.end()) names.push_back("all_others");
    taxonomy = IntentTaxonomy(names);
  }
  const auto router = has_rules ? IntentRouter::from_rules(taxonomy, rules) : IntentRouter::from_doc_types(taxonomy);
  const auto labels = label_corpus(events, router, c.multi_label_threshold);
  write_taxonomy(io.out("taxonomy.txt"), taxonomy);
  write_labels_tsv(io.out("labels.tsv"), labels, taxonomy);
  io.seal({"taxonomy.txt", "labels.tsv"});
}

void stage_train(const RunConfig& c, std::uint64_t seed, StageIo& io) {
  const auto corpus = read_corpus_jsonl(io.in("corpus.jsonl"));
  const Tokenizer tokenizer(c.vocab);
  auto params = EncoderParams::init(EncoderShape{c.vocab, c.dim, c.hidden}, derive_seed(seed, "init"));
  std::ostringstream log;
  log << "step,loss\n" << std::setprecision(17);
  const auto objective = parse_objective(c.objective);
  if (objective == Objective::Bce) {
    // Supervised encoder: co-train with a classifier head on the weak labels' train split.
    const auto taxonomy = read_taxonomy(io.in("taxonomy.txt"));
    const auto labels = read_labels_tsv(io.in("labels.tsv"), taxonomy);
    const auto items = labeled_queries(labels);
    const auto sp = query_split(c, labels);
    const auto tr = pick(items, sp.train);
    const auto va = pick(items, sp.val);
    const auto trained = train_classifier(params, tokenizer, tr, va, classifier_config(c, seed, false));
    params = trained.encoder;
    for (std::size_t e = 0; e < trained.report.train_loss.size(); ++e) log << e + 1 << ',' << trained.report.train_loss[e] << '\n';
  } else {
    const auto report = train_encoder(params, tokenizer, corpus, contrastive_config(c, seed));
    for (std::size_t s = 0; s < report.losses.size(); ++s) log << s + 1 << ',' << report.losses[s] << '\n';
  }
  params.seed = seed;
  save_checkpoint(io.out("encoder.bin"), params);
  write_text(io.out("train_loss.csv"), log.str());
  io.seal({"encoder.bin", "train_loss.csv"});
}

void stage_cluster_eval(const RunConfig& c, std::uint64_t seed, StageIo& io) {
  const auto params = load_checkpoint(io.in("encoder.bin"));
  const bool planted = fs::exists(io.dir / "truth.tsv");
  const auto truth = read_cluster_truth(planted ? io.in("truth.tsv") : io.in("labels.tsv"));
  auto report = cluster_eval(params, Tokenizer(params.shape.vocab), truth.queries, truth.ids, truth.num_clusters,
                             c.kmeans_restarts, seed);
  report.note += planted ? "; truth: planted intents" : "; truth: weak label combinations";
  write_text(io.out("cluster_metrics.json"), report.to_json() + "\n");
  io.seal({"cluster_metrics.json"});
}

void stage_train_classifier(const RunConfig& c, std::uint64_t seed, StageIo& io) {
  const auto params = load_checkpoint(io.in("encoder.bin"));
  const auto taxonomy = read_taxonomy(io.in("taxonomy.txt"));
  const auto labels = read_labels_tsv(io.in("labels.tsv"), taxonomy);
  const auto items = labeled_queries(labels);
  SplitIndices sp;
  if (c.splits.empty()) {
    sp = query_split(c, labels);
  } else {
    sp = read_splits(io.external(c.splits), labels);
  }

  std::ostringstream splits;
  splits << "query\tsplit\n";
  std::vector<std::string> which(items.size());
  for (auto i : sp.train) which[i] = "train";
  for (auto i : sp.val) which[i] = "val";
  for (auto i : sp.test) which[i] = "test";
  for (std::size_t i = 0; i < items.size(); ++i) splits << items[i].text << '\t' << which[i] << '\n';
  write_text(io.out("splits.tsv"), splits.str());

  const Tokenizer tokenizer(params.shape.vocab);
  const auto tr = pick(items, sp.train);
  const auto va = pick(items, sp.val);
  const auto te = pick(items, sp.test);
  const auto model = train_classifier(params, tokenizer, tr, va, classifier_config(c, seed, c.freeze_encoder));
  save_classifier(io.out("classifier.json"), model.head, model.thresholds, taxonomy);
  std::vector<std::string> outs{"splits.tsv", "classifier.json", "predictions.tsv", "classifier_report.json"};
  if (!c.freeze_encoder) {
    save_checkpoint(io.out("classifier_encoder.bin"), model.encoder);
    outs.push_back("classifier_encoder.bin");
  }
  std::vector<std::string> ids;
  for (const auto& t : te) ids.push_back(t.text);
  write_predictions_tsv(io.out("predictions.tsv"), ids, predict_all(model.encoder, tokenizer, model.head, te),
                        model.thresholds, taxonomy);
  json rep;
  rep["epochs_run"] = model.report.epochs_run;
  rep["best_epoch"] = model.report.best_epoch;
  rep["best_val_f1"] = model.report.best_val_f1;
  rep["train"] = tr.size();
  rep["val"] = va.size();
  rep["test"] = te.size();
  rep["warnings"] = model.report.warnings;
  write_text(io.out("classifier_report.json"), rep.dump(2) + "\n");
  io.seal(outs);
}

void stage_eval(const RunConfig&, StageIo& io) {
  const auto taxonomy = read_taxonomy(io.in("taxonomy.txt"));
  io.in("classifier.json");
  const auto predictions = read_predictions_tsv(io.in("predictions.tsv"), taxonomy);
  const auto truth = read_labels_tsv(io.in("labels.tsv"), taxonomy);
  write_text(io.out("metrics.json"), evaluate_predictions(predictions, truth).to_json() + "\n");
  io.seal({"metrics.json"});
}

void stage_session_eval(const RunConfig& c, std::uint64_t seed, StageIo& io) {
  const auto params = load_checkpoint(io.in("encoder.bin"));
  const auto taxonomy = read_taxonomy(io.in("taxonomy.txt"));
  if (fs::exists(io.dir / "rules.json")) io.in("rules.json");
  const auto router = make_router(io.dir, taxonomy);
  const auto events = read_events(io.in("events.tsv"));
  const auto split_sessions = curate_sessions(sessionize(events, c.gap_seconds), c.session_min_len, c.session_max_len);
  const std::size_t n = split_sessions.sessions.size();
  if (n == 0) throw Error(Error::Kind::Input, "no session within the curated length range");

  // Sessions, not steps, are divided so that no session leaks across splits.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "session-split"));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  const auto counts = largest_remainder(n, ratios_of(c));
  std::vector<int> part(n);
  for (std::size_t r = 0; r < n; ++r) part[order[r]] = r < counts[0] ? 0 : (r < counts[0] + counts[1] ? 1 : 2);

  std::vector<SessionExample> tr, va, te;
  for (const auto& e : split_sessions.train_examples) {
    if (part[e.session] == 0) tr.push_back(e);
  }
  for (const auto& e : split_sessions.eval_examples) {
    if (part[e.session] == 1) va.push_back(e);
    if (part[e.session] == 2) te.push_back(e);
  }

  const Tokenizer tokenizer(params.shape.vocab);
  json all;
  std::vector<std::string> outs{"session_metrics.json"};
  for (const auto& raw_mode : split(c.session_contexts, ',')) {
    const auto mode = trim(raw_mode);
    const auto flags = ContextFlags::from_mode(mode);
    const auto dtr = session_dataset(split_sessions, tr, router, flags, c.max_tokens);
    const auto dva = session_dataset(split_sessions, va, router, flags, c.max_tokens);
    const auto dte = session_dataset(split_sessions, te, router, flags, c.max_tokens);
    if (dtr.empty() || dte.empty()) throw Error(Error::Kind::Input, "session split has no clicked steps for " + mode);
    const auto model =
        train_classifier(params, tokenizer, dtr, dva, classifier_config(c, derive_seed(seed, mode), c.freeze_encoder));
    const auto probs = predict_all(model.encoder, tokenizer, model.head, dte);
    std::vector<LabelVector> decided, truth;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < dte.size(); ++i) {
      decided.push_back(decide(probs[i], model.thresholds));
      truth.push_back(dte[i].labels);
      ids.push_back(split_sessions.sessions[te[i].session].session_id + "#" + std::to_string(te[i].step));
    }
    const std::string pred_name = "session_" + mode + "_predictions.tsv";
    write_predictions_tsv(io.out(pred_name), ids, probs, model.thresholds, taxonomy);
    outs.push_back(pred_name);
    auto report = classification_report(probs, decided, truth);
    report.note = "context: " + mode;
    all[mode] = report_json(report);
  }
  write_text(io.out("session_metrics.json"), all.dump(2) + "\n");
  io.seal(outs);
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

void RunConfig::set(const std::string& key, const std::string& value) { find_field(trim(key)).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return find_field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& f : schema()) out.push_back(f.name);
    return out;
  }();
  return names;
}

std::string RunConfig::describe(const std::string& key) { return find_field(key).doc; }

RunConfig RunConfig::load(const fs::path& path, bool env_overrides) {
  std::ifstream in(path);
  if (!in) throw Error(Error::Kind::Io, "cannot open config: " + path.string());
  RunConfig config;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(Error::Kind::Config, path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    config.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  if (env_overrides) config.apply_env();
  validate(config);
  return config;
}

void RunConfig::apply_env() {
  for (const auto& f : schema()) {
    std::string var = "MSET_";
    for (char ch : f.name) var += (ch == '.' || ch == '-') ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    if (const char* v = std::getenv(var.c_str())) f.set(*this, v);
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  for (const auto& f : schema()) out << f.name << " = " << f.get(*this) << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Manifests

std::string Manifest::to_json() const {
  json j;
  j["stage"] = stage;
  j["seed"] = seed;
  j["config_sha256"] = config_sha256;
  auto refs = [](const std::vector<ArtifactRef>& v) {
    json a = json::array();
    for (const auto& r : v) a.push_back({{"path", r.path}, {"sha256", r.sha256}});
    return a;
  };
  j["inputs"] = refs(inputs);
  j["outputs"] = refs(outputs);
  j["upstream"] = json::object();
  for (const auto& [k, v] : upstream) j["upstream"][k] = v;
  return j.dump(2);
}

Manifest Manifest::from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    Manifest m;
    m.stage = j.at("stage").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_sha256 = j.at("config_sha256").get<std::string>();
    for (const auto& r : j.at("inputs")) m.inputs.push_back({r.at("path"), r.at("sha256")});
    for (const auto& r : j.at("outputs")) m.outputs.push_back({r.at("path"), r.at("sha256")});
    for (const auto& [k, v] : j.at("upstream").items()) m.upstream[k] = v.get<std::string>();
    return m;
  } catch (const json::exception& e) {
    throw Error(Error::Kind::Integrity, "manifest malformed: " + std::string(e.what()));
  }
}

fs::path manifest_path(const fs::path& run_dir, const std::string& stage) {
  return run_dir / ("manifest." + stage + ".json");
}

void write_manifest(const fs::path& run_dir, const Manifest& manifest) {
  write_text(manifest_path(run_dir, manifest.stage), manifest.to_json() + "\n");
}

Manifest read_manifest(const fs::path& run_dir, const std::string& stage) {
  const auto p = manifest_path(run_dir, stage);
  if (!fs::exists(p)) throw Error(Error::Kind::Precondition, "stage " + stage + " has not run (no manifest)");
  return Manifest::from_json(read_text(p));
}

void verify_run(const fs::path& run_dir) {
  std::size_t found = 0;
  for (const auto& stage : pipeline_stages()) {
    if (!fs::exists(manifest_path(run_dir, stage))) continue;
    ++found;
    const auto m = read_manifest(run_dir, stage);
    verify_outputs(run_dir, m);
    for (const auto& [up, hash] : m.upstream) {
      const auto p = manifest_path(run_dir, up);
      if (!fs::exists(p)) throw Error(Error::Kind::Integrity, "stage " + stage + ": upstream manifest " + up + " is missing");
      if (sha256_file(p.string()) != hash) {
        throw Error(Error::Kind::Integrity, "stage " + stage + ": upstream manifest " + up + " was modified");
      }
    }
  }
  if (found == 0) throw Error(Error::Kind::Precondition, "no manifest in " + run_dir.string());
}

const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> stages = {"ingest", "extract-sets", "label", "train",
                                                  "cluster-eval", "train-classifier", "eval", "session-eval"};
  return stages;
}

void run_stage(const RunConfig& config, const std::string& stage) {
  validate(config);
  const auto deps = stage_upstream().find(stage);
  if (deps == stage_upstream().end()) throw Error(Error::Kind::Config, "unknown stage: " + stage);
  const fs::path dir = config.out_dir;
  fs::create_directories(dir);

  Manifest m;
  m.stage = stage;
  m.seed = derive_seed(config.seed, stage);
  m.config_sha256 = sha256_hex(config.to_text());
  for (const auto& up : deps->second) {
    verify_outputs(dir, read_manifest(dir, up));
    m.upstream[up] = sha256_file(manifest_path(dir, up).string());
  }

  StageIo io{dir, {}, {}};
  if (stage == "ingest") stage_ingest(config, io);
  else if (stage == "extract-sets") stage_extract_sets(config, io);
  else if (stage == "label") stage_label(config, io);
  else if (stage == "train") stage_train(config, m.seed, io);
  else if (stage == "cluster-eval") stage_cluster_eval(config, m.seed, io);
  else if (stage == "train-classifier") stage_train_classifier(config, m.seed, io);
  else if (stage == "eval") stage_eval(config, io);
  else stage_session_eval(config, m.seed, io);

  m.inputs = std::move(io.inputs);
  m.outputs = std::move(io.outputs);
  write_manifest(dir, m);
}

void run_pipeline(const RunConfig& config) {
  validate(config);
  fs::create_directories(config.out_dir);
  write_text(fs::path(config.out_dir) / "config.txt", config.to_text());
  for (const auto& stage : pipeline_stages()) {
    try {
      run_stage(config, stage);
    } catch (const Error& e) {
      throw Error(e.kind(), "stage " + stage + " failed: " + e.what());
    } catch (const std::exception& e) {
      throw Error(Error::Kind::Io, "stage " + stage + " failed: " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------
// Report

namespace {

const std::vector<std::string> kGlobalColumns = {"ari", "nmi", "precision", "recall", "f1", "hit_rate_3", "ndcg_3"};

std::optional<double> json_number(const json& j, const std::string& key) {
  if (j.contains(key) && j[key].is_number()) return j[key].get<double>();
  return std::nullopt;
}

}  // namespace

Report build_report(const std::vector<fs::path>& run_dirs) {
  Report report;
  report.columns = kGlobalColumns;
  std::vector<std::string> session_cols;
  for (const auto& dir : run_dirs) {
    ReportRow row;
    row.run = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    for (const auto& col : kGlobalColumns) row.values[col] = std::nullopt;
    const auto warn = [&](const std::string& artifact) {
      report.warnings.push_back(row.run + ": missing artifact " + artifact);
    };

    const auto config_path = dir / "config.txt";
    if (fs::exists(config_path)) {
      std::istringstream in(read_text(config_path));
      std::string line;
      while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos && trim(line.substr(0, eq)) == "objective") row.objective = trim(line.substr(eq + 1));
      }
    } else {
      warn("config.txt");
    }
    const auto cluster = dir / "cluster_metrics.json";
    if (fs::exists(cluster)) {
      const auto j = json::parse(read_text(cluster));
      row.values["ari"] = json_number(j, "ari");
      row.values["nmi"] = json_number(j, "nmi");
    } else {
      warn("cluster_metrics.json");
    }
    const auto metrics = dir / "metrics.json";
    if (fs::exists(metrics)) {
      const auto j = json::parse(read_text(metrics));
      for (const auto* key : {"precision", "recall", "f1", "hit_rate_3", "ndcg_3"}) row.values[key] = json_number(j, key);
    } else {
      warn("metrics.json");
    }
    const auto session = dir / "session_metrics.json";
    if (fs::exists(session)) {
      const auto j = json::parse(read_text(session));
      for (const auto& [mode, rep] : j.items()) {
        const std::string col = "session_f1:" + mode;
        if (std::find(session_cols.begin(), session_cols.end(), col) == session_cols.end()) session_cols.push_back(col);
        row.values[col] = json_number(rep, "f1");
      }
    } else {
      warn("session_metrics.json");
    }
    report.rows.push_back(std::move(row));
  }
  if (session_cols.empty()) {
    for (const auto& mode : split(RunConfig{}.session_contexts, ',')) session_cols.push_back("session_f1:" + mode);
  }
  report.columns.insert(report.columns.end(), session_cols.begin(), session_cols.end());
  for (auto& row : report.rows) {
    for (const auto& col : report.columns) row.values.try_emplace(col, std::nullopt);
  }
  return report;
}

std::string Report::to_csv() const {
  std::ostringstream out;
  out << "run,objective";
  for (const auto& c : columns) out << ',' << c;
  out << '\n';
  for (const auto& row : rows) {
    out << row.run << ',' << row.objective;
    for (const auto& c : columns) {
      out << ',';
      const auto it = row.values.find(c);
      if (it != row.values.end() && it->second) out << format_double(*it->second);
    }
    out << '\n';
  }
  return out.str();
}

Report Report::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(Error::Kind::Input, "report CSV is empty");
  const auto header = split(line, ',');
  if (header.size() < 2 || header[0] != "run" || header[1] != "objective") {
    throw Error(Error::Kind::Input, "report CSV header must start with run,objective");
  }
  Report report;
  report.columns.assign(header.begin() + 2, header.end());
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != header.size()) throw Error(Error::Kind::Input, "report CSV row has wrong width: " + line);
    ReportRow row{cells[0], cells[1], {}};
    for (std::size_t c = 0; c < report.columns.size(); ++c) {
      const auto& cell = cells[c + 2];
      row.values[report.columns[c]] = cell.empty() ? std::nullopt : std::optional<double>(parse_real(report.columns[c], cell));
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string Report::to_text() const {
  std::vector<std::string> head{"run", "objective"};
  head.insert(head.end(), columns.begin(), columns.end());
  std::vector<std::vector<std::string>> cells{head};
  for (const auto& row : rows) {
    std::vector<std::string> line{row.run, row.objective};
    for (const auto& c : columns) {
      const auto it = row.values.find(c);
      if (it != row.values.end() && it->second) {
        std::ostringstream v;
        v << std::fixed << std::setprecision(4) << *it->second;
        line.push_back(v.str());
      } else {
        line.push_back("");
      }
    }
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  }
  std::ostringstream out;
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      out << std::left << std::setw(static_cast<int>(width[c])) << line[c] << (c + 1 < line.size() ? "  " : "");
    }
    out << '\n';
  }
  for (const auto& w : warnings) out << "warning: " << w << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Shared helpers

SynthSpec synth_spec_from(const RunConfig& c) {
  SynthSpec s;
  s.n_intents = c.synth_intents;
  s.n_queries = c.synth_queries;
  s.vocab_overlap = c.synth_vocab_overlap;
  s.n_sessions = c.synth_sessions;
  s.drift_prob = c.synth_drift;
  s.noise_click_prob = c.synth_noise;
  s.min_session_len = c.synth_session_len_min;
  s.max_session_len = c.synth_session_len_max;
  s.seed = derive_seed(c.seed, "synth");
  return s;
}

void write_embeddings_tsv(const fs::path& path, const EncoderParams& params, const Tokenizer& tokenizer,
                          const std::vector<std::string>& queries) {
  std::ofstream out(path);
  if (!out) throw Error(Error::Kind::Io, "cannot write embeddings: " + path.string());
  out << std::setprecision(9);
  for (const auto& q : queries) {
    const auto e = encode(params, tokenizer, q);
    out << q << '\t';
    for (std::size_t i = 0; i < e.size(); ++i) out << (i ? "," : "") << e[i];
    out << '\n';
  }
}

MetricReport cluster_eval(const EncoderParams& params, const Tokenizer& tokenizer,
                          const std::vector<std::string>& queries, const std::vector<std::size_t>& truth,
                          std::size_t k, std::size_t restarts, std::uint64_t seed) {
  if (queries.size() != truth.size()) throw Error(Error::Kind::Precondition, "cluster_eval: queries and truth differ in length");
  std::vector<Vec> points;
  points.reserve(queries.size());
  for (const auto& q : queries) points.push_back(head_features(encode(params, tokenizer, q)));
  const auto km = kmeans(points, k, restarts, seed);
  const auto gold = Partition::from_ids(truth);
  MetricReport r;
  r.ari = ari(km.partition, gold);
  r.nmi = nmi(km.partition, gold);
  r.support = queries.size();
  r.note = "k-means++ on unit-normalized embeddings (stand-in protocol), k=" + std::to_string(k) +
           ", restarts=" + std::to_string(restarts);
  return r;
}

void write_taxonomy(const fs::path& path, const IntentTaxonomy& taxonomy) {
  std::ofstream out(path);
  if (!out) throw Error(Error::Kind::Io, "cannot write taxonomy: " + path.string());
  for (const auto& n : taxonomy.names()) out << n << '\n';
}

IntentTaxonomy read_taxonomy(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (!trim(line).empty()) names.push_back(trim(line));
  }
  if (names.empty()) throw Error(Error::Kind::Input, "taxonomy file is empty: " + path.string());
  return IntentTaxonomy(names);
}

IntentTaxonomy taxonomy_from_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Error::Kind::Io, "cannot open predictions: " + path.string());
  std::string line;
  std::getline(in, line);
  auto cols = split(line, '\t');
  if (cols.size() < 3 || cols.front() != "id" || cols.back() != "decided") {
    throw Error(Error::Kind::Input, "predictions header must be id, intents..., decided");
  }
  return IntentTaxonomy(std::vector<std::string>(cols.begin() + 1, cols.end() - 1));
}

ClusterTruth read_cluster_truth(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  ClusterTruth truth;
  std::map<std::string, std::size_t> ids;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() < 2) throw Error(Error::Kind::Input, "truth row malformed: " + line);
    const auto [it, inserted] = ids.try_emplace(cols[1], ids.size());
    truth.queries.push_back(cols[0]);
    truth.ids.push_back(it->second);
  }
  truth.num_clusters = ids.size();
  if (truth.queries.empty()) throw Error(Error::Kind::Input, "truth file has no rows: " + path.string());
  return truth;
}

MetricReport classification_report(const std::vector<Vec>& probs, const std::vector<LabelVector>& decided,
                                   const std::vector<LabelVector>& truth) {
  const auto scores = precision_f1(decided, truth);
  const auto nd = ndcg_3(probs, truth);
  MetricReport r;
  r.precision = scores.precision;
  r.recall = scores.recall;
  r.f1 = scores.f1;
  r.hit_rate_3 = hit_rate_3(probs, truth);
  r.ndcg_3 = nd.value;
  r.support = truth.size();
  r.ndcg_excluded = nd.excluded;
  if (!scores.warnings.empty()) r.note = join(scores.warnings, "; ");
  return r;
}

MetricReport evaluate_predictions(const PredictionTable& predictions, const std::vector<QueryLabel>& truth) {
  std::map<std::string, const LabelVector*> by_query;
  for (const auto& t : truth) by_query[t.query] = &t.labels;
  std::vector<LabelVector> gold;
  for (const auto& id : predictions.ids) {
    const auto it = by_query.find(normalize_query(id));
    if (it == by_query.end()) throw Error(Error::Kind::Input, "no truth row for prediction id '" + id + "'");
    gold.push_back(*it->second);
  }
  return classification_report(predictions.probs, predictions.decided, gold);
}

}  // namespace mset
