/// mset: click-log query representation learning toolkit.
///
/// Stage subcommands (ingest, extract-sets, label, train, cluster-eval, train-classifier, eval,
/// session-eval) work inside a run directory and write a manifest per stage. File-level tools
/// (synth-gen, embed, bench-loss, report) read and write explicit paths.
///
/// Exit codes: 0 success, 1 usage error, 2 bad input data, 3 bad config, 4 precondition,
/// 5 numeric failure, 6 I/O, 7 integrity (tampered artifact).

#include "mset/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace mset;

namespace {

/// Options shared by every run-directory subcommand.
struct CommonOpts {
  std::string config_path;
  std::string run_dir;
  std::vector<std::string> sets;
};

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config_path, "key = value config file");
  sub->add_option("--run-dir", o.run_dir, "run directory (overrides out_dir)");
  sub->add_option("--set", o.sets, "config override key=value (repeatable)");
}

/// Defaults, then the config file, then MSET_* environment, then --set, then named flags.
RunConfig resolve(const CommonOpts& o, const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig config = o.config_path.empty() ? RunConfig{} : RunConfig::load(o.config_path, false);
  config.apply_env();
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error(Error::Kind::Config, "--set expects key=value, got '" + kv + "'");
    config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const auto& [k, v] : flags) config.set(k, v);
  if (!o.run_dir.empty()) config.out_dir = o.run_dir;
  return config;
}

/// Named flags that were given on the command line, as config assignments.
struct FlagMap {
  std::vector<std::pair<std::string, std::string>> bound;
  std::vector<std::pair<CLI::Option*, std::string>> options;
  std::vector<std::shared_ptr<std::string>> storage;

  void add(CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
    auto value = std::make_shared<std::string>();
    storage.push_back(value);
    options.emplace_back(sub->add_option(flag, *value, help), key);
  }
  std::vector<std::pair<std::string, std::string>> given() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (std::size_t i = 0; i < options.size(); ++i) {
      if (options[i].first->count() > 0) out.emplace_back(options[i].second, *storage[i]);
    }
    return out;
  }
};

void print_stage(const RunConfig& config, const std::string& stage) {
  run_stage(config, stage);
  std::cout << stage << ": ok (" << manifest_path(config.out_dir, stage).string() << ")\n";
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& part : split(text, ',')) {
    if (!trim(part).empty()) out.push_back(std::stoul(trim(part)));
  }
  if (out.empty()) throw Error(Error::Kind::Config, "expected a comma-separated list of sizes");
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Error::Kind::Io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mset: multiset contrastive query representations, intent labeling and evaluation"};
  app.require_subcommand(1);

  // run / verify
  CommonOpts run_opts;
  auto* run = app.add_subcommand("run", "run every stage into the run directory");
  add_common(run, run_opts);
  CommonOpts verify_opts;
  auto* verify = app.add_subcommand("verify", "recheck the manifest hash chain of a run directory");
  add_common(verify, verify_opts);
  auto* keys = app.add_subcommand("config-keys", "list config keys with defaults");

  // Stage subcommands.
  std::map<std::string, CommonOpts> stage_opts;
  std::map<std::string, FlagMap> stage_flags;
  std::map<std::string, CLI::App*> stage_apps;
  const std::map<std::string, std::string> stage_help = {
      {"ingest", "parse or synthesize the click log into events.tsv"},
      {"extract-sets", "group queries into co-click document sets"},
      {"label", "weak intent labels from click distributions"},
      {"train", "train the query encoder"},
      {"cluster-eval", "k-means ARI/NMI of query embeddings"},
      {"train-classifier", "train the multi-label intent classifier"},
      {"eval", "score classifier predictions"},
      {"session-eval", "session-context intent classification"},
  };
  for (const auto& stage : pipeline_stages()) {
    auto* sub = app.add_subcommand(stage, stage_help.at(stage));
    add_common(sub, stage_opts[stage]);
    stage_apps[stage] = sub;
  }
  auto& ingest_f = stage_flags["ingest"];
  ingest_f.add(stage_apps["ingest"], "--log", "log", "click log path (omit to synthesize)");
  ingest_f.add(stage_apps["ingest"], "--format", "log_format", "canonical-tsv or tripclick-like");
  ingest_f.add(stage_apps["ingest"], "--gap-seconds", "gap_seconds", "session split gap");
  ingest_f.add(stage_apps["ingest"], "--rules", "rules", "URL rules JSON");
  auto& sets_f = stage_flags["extract-sets"];
  sets_f.add(stage_apps["extract-sets"], "--min-clicks", "min_clicks", "minimum aggregated clicks");
  sets_f.add(stage_apps["extract-sets"], "--key", "set_key", "doc_type or url_pattern");
  auto& label_f = stage_flags["label"];
  label_f.add(stage_apps["label"], "--taxonomy", "taxonomy", "auto or health_search");
  label_f.add(stage_apps["label"], "--threshold", "multi_label_threshold", "multi-label click share");
  auto& train_f = stage_flags["train"];
  train_f.add(stage_apps["train"], "--objective", "objective", "pairwise, multiset or bce");
  train_f.add(stage_apps["train"], "--steps", "steps", "training steps");
  train_f.add(stage_apps["train"], "--seed", "seed", "root seed");
  auto& tc_f = stage_flags["train-classifier"];
  tc_f.add(stage_apps["train-classifier"], "--objective", "objective", "objective recorded with the run");
  tc_f.add(stage_apps["train-classifier"], "--freeze-encoder", "freeze_encoder", "true or false");
  tc_f.add(stage_apps["train-classifier"], "--splits", "splits", "existing splits TSV (query, split)");
  auto& se_f = stage_flags["session-eval"];
  se_f.add(stage_apps["session-eval"], "--context", "session_contexts", "none, prev-query, page, annotation, all (comma list)");
  auto& ce_f = stage_flags["cluster-eval"];
  ce_f.add(stage_apps["cluster-eval"], "--restarts", "kmeans_restarts", "k-means restarts");

  // cluster-eval and eval also work on explicit files.
  std::string ce_checkpoint, ce_labels, ce_out;
  std::size_t ce_k = 0;
  stage_apps["cluster-eval"]->add_option("--checkpoint", ce_checkpoint, "encoder checkpoint (file mode)");
  stage_apps["cluster-eval"]->add_option("--labels", ce_labels, "labels or truth TSV (file mode)");
  stage_apps["cluster-eval"]->add_option("--k", ce_k, "clusters (default: distinct label combinations)");
  stage_apps["cluster-eval"]->add_option("--out", ce_out, "metric JSON output (file mode)");
  std::string ev_predictions, ev_truth, ev_out;
  stage_apps["eval"]->add_option("--predictions", ev_predictions, "predictions TSV (file mode)");
  stage_apps["eval"]->add_option("--truth", ev_truth, "labels TSV (file mode)");
  stage_apps["eval"]->add_option("--out", ev_out, "metric JSON output (file mode)");

  // File-level tools.
  auto* synth = app.add_subcommand("synth-gen", "write a planted-intent click log");
  SynthSpec sspec;
  std::string synth_out;
  synth->add_option("--intents", sspec.n_intents, "planted intents");
  synth->add_option("--queries", sspec.n_queries, "distinct queries");
  synth->add_option("--sessions", sspec.n_sessions, "sessions");
  synth->add_option("--drift", sspec.drift_prob, "per-step drift probability");
  synth->add_option("--overlap", sspec.vocab_overlap, "shared-token share");
  synth->add_option("--session-len-min", sspec.min_session_len, "shortest session");
  synth->add_option("--session-len-max", sspec.max_session_len, "longest session");
  synth->add_option("--seed", sspec.seed, "generator seed");
  synth->add_option("--out", synth_out, "output directory")->required();

  auto* embed = app.add_subcommand("embed", "embed queries with a trained encoder");
  std::string em_checkpoint, em_queries, em_out;
  embed->add_option("--checkpoint", em_checkpoint, "encoder checkpoint")->required();
  embed->add_option("--queries-file", em_queries, "one query per line")->required();
  embed->add_option("--out", em_out, "TSV output")->required();

  auto* bench = app.add_subcommand("bench-loss", "time multiset vs pairwise loss evaluation");
  std::string bk = "8", bn = "100,200,400", b_out;
  std::size_t b_trials = 5;
  bench->add_option("--k-range", bk, "comma list of set counts K");
  bench->add_option("--n-range", bn, "comma list of set sizes N");
  bench->add_option("--trials", b_trials, "trials per point (median)");
  bench->add_option("--out", b_out, "CSV output");

  auto* report = app.add_subcommand("report", "side-by-side table over run directories");
  std::vector<std::string> r_runs;
  std::string r_out;
  report->add_option("--runs", r_runs, "run directories")->required();
  report->add_option("--out", r_out, "CSV output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (run->parsed()) {
      const auto config = resolve(run_opts, {});
      run_pipeline(config);
      std::cout << build_report({config.out_dir}).to_text();
      return 0;
    }
    if (verify->parsed()) {
      const auto config = resolve(verify_opts, {});
      verify_run(config.out_dir);
      std::cout << "manifest chain intact: " << config.out_dir << '\n';
      return 0;
    }
    if (keys->parsed()) {
      const RunConfig defaults;
      for (const auto& k : RunConfig::keys()) {
        std::cout << k << " = " << defaults.get(k) << "    # " << RunConfig::describe(k) << '\n';
      }
      return 0;
    }
    if (stage_apps["cluster-eval"]->parsed() && !ce_checkpoint.empty()) {
      if (ce_labels.empty()) throw Error(Error::Kind::Config, "cluster-eval --checkpoint needs --labels");
      const auto config = resolve(stage_opts["cluster-eval"], ce_f.given());
      const auto params = load_checkpoint(ce_checkpoint);
      const auto truth = read_cluster_truth(ce_labels);
      const auto r = cluster_eval(params, Tokenizer(params.shape.vocab), truth.queries, truth.ids,
                                  ce_k ? ce_k : truth.num_clusters, config.kmeans_restarts,
                                  derive_seed(config.seed, "cluster-eval"));
      if (!ce_out.empty()) std::ofstream(ce_out) << r.to_json() << '\n';
      std::cout << r.to_table();
      return 0;
    }
    if (stage_apps["eval"]->parsed() && !ev_predictions.empty()) {
      if (ev_truth.empty()) throw Error(Error::Kind::Config, "eval --predictions needs --truth");
      const auto taxonomy = taxonomy_from_predictions(ev_predictions);
      const auto r = evaluate_predictions(read_predictions_tsv(ev_predictions, taxonomy),
                                          read_labels_tsv(ev_truth, taxonomy));
      if (!ev_out.empty()) std::ofstream(ev_out) << r.to_json() << '\n';
      std::cout << r.to_table();
      return 0;
    }
    for (const auto& stage : pipeline_stages()) {
      if (!stage_apps[stage]->parsed()) continue;
      auto config = resolve(stage_opts[stage], stage_flags[stage].given());
      if (stage == "ingest") {
        fs::create_directories(config.out_dir);
        std::ofstream(fs::path(config.out_dir) / "config.txt") << config.to_text();
      }
      print_stage(config, stage);
      return 0;
    }
    if (synth->parsed()) {
      fs::create_directories(synth_out);
      const auto data = synth_generate(sspec);
      write_log(fs::path(synth_out) / "events.tsv", data.events);
      write_truth(fs::path(synth_out) / "truth.tsv", data);
      std::vector<IntentRule> rules;
      for (const auto& name : data.intents) rules.push_back({name, "/" + name + "/"});
      write_rules_json(fs::path(synth_out) / "rules.json", rules);
      std::cout << "wrote " << data.events.size() << " events, " << data.queries.size() << " queries to " << synth_out
                << '\n';
      return 0;
    }
    if (embed->parsed()) {
      const auto params = load_checkpoint(em_checkpoint);
      std::istringstream in(read_file(em_queries));
      std::vector<std::string> queries;
      std::string line;
      while (std::getline(in, line)) {
        if (!trim(line).empty()) queries.push_back(trim(line));
      }
      write_embeddings_tsv(em_out, params, Tokenizer(params.shape.vocab), queries);
      return 0;
    }
    if (bench->parsed()) {
      BenchConfig bc;
      bc.k_values = parse_sizes(bk);
      bc.n_values = parse_sizes(bn);
      bc.trials = b_trials;
      const auto rows = bench_complexity(bc);
      write_bench_csv(std::cout, rows);
      if (!b_out.empty()) {
        std::ofstream out(b_out);
        if (!out) throw Error(Error::Kind::Io, "cannot write " + b_out);
        write_bench_csv(out, rows);
      }
      return 0;
    }
    if (report->parsed()) {
      std::vector<fs::path> dirs(r_runs.begin(), r_runs.end());
      const auto rep = build_report(dirs);
      std::cout << rep.to_text();
      if (!r_out.empty()) {
        std::ofstream out(r_out);
        if (!out) throw Error(Error::Kind::Io, "cannot write " + r_out);
        out << rep.to_csv();
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
