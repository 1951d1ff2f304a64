#pragma once

// Implementations behind the `medl` command-line verbs. Each command reads and
// writes files only; given identical inputs and seed it writes identical
// bytes, except timing.json which records wall-clock time.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medl/checkpoint.hpp"
#include "medl/data.hpp"
#include "medl/eval.hpp"

namespace medl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("invalid JSON in '" + path + "': " + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out << text;
}

inline std::string fmt_double(double v, int digits = 17) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

/// Rejects keys outside `allowed`, listing every offender.
inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& what) {
  if (!j.is_object()) throw ValidationError(what + ": expected a JSON object");
  std::string bad;
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) bad += (bad.empty() ? "" : ", ") + key;
  if (!bad.empty()) throw ValidationError(what + ": unknown field(s): " + bad);
}

// ---------------------------------------------------------------- synth ---

inline SyntheticSpec synthetic_spec_from_json(const json& j) {
  check_keys(j, {"kind", "patterns", "weights", "label_probs", "flip_prob", "feature_dim", "count", "seed"},
             "synthetic spec");
  SyntheticSpec s;
  std::vector<std::string> problems;
  auto field = [&](const char* key, auto& target) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(target);
    } catch (const json::exception&) {
      problems.push_back(std::string(key) + " has the wrong type");
    }
  };
  std::string kind = "multimode";
  field("kind", kind);
  field("patterns", s.patterns);
  field("weights", s.weights);
  field("label_probs", s.label_probs);
  field("flip_prob", s.flip_prob);
  field("feature_dim", s.feature_dim);
  field("count", s.count);
  field("seed", s.seed);
  try {
    s.kind = parse_synthetic_kind(kind);
  } catch (const ValidationError& e) {
    problems.push_back(e.what());
  }
  if (!problems.empty()) {
    std::string msg = "synthetic spec invalid:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw ValidationError(msg);
  }
  return s;
}

struct SynthOptions {
  std::string spec_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> count;
};

/// Writes <out>/data.jsonl and <out>/joint_table.json.
inline void cmd_synth(const SynthOptions& opt) {
  SyntheticSpec spec = synthetic_spec_from_json(read_json_file(opt.spec_path));
  if (opt.seed) spec.seed = *opt.seed;
  if (opt.count) spec.count = *opt.count;
  spec.validate();
  const SyntheticData data = generate_synthetic(spec);
  fs::create_directories(opt.out_dir);
  save_jsonl((fs::path(opt.out_dir) / "data.jsonl").string(), data.dataset);

  const std::size_t l = spec.label_count();
  json entries = json::array();
  for (std::size_t idx = 0; idx < data.joint.size(); ++idx)
    entries.push_back({{"y", outcome_labels(idx, l)}, {"p", data.joint[idx]}});
  json table{{"kind", synthetic_kind_name(spec.kind)}, {"label_count", l}, {"seed", spec.seed}, {"entries", entries}};
  write_text(fs::path(opt.out_dir) / "joint_table.json", table.dump(2) + "\n");
}

// ---------------------------------------------------------------- train ---

struct RunConfig {
  std::string model_kind = "cvae";
  std::string train_path;
  std::string val_path;  // empty: hold out val_fraction of train
  double val_fraction = 0.1;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::size_t epochs = 300;
  std::size_t batch = 512;
  double learning_rate = 1e-4;
  std::size_t patience = 20;
  double keep_prob = 0.8;
  std::size_t latent_dim = 16;
  std::vector<std::size_t> feature_widths{64, 64};
  std::vector<std::size_t> prior_hidden{32};
  std::vector<std::size_t> recognition_hidden{32};
  std::vector<std::size_t> decoder_hidden{64};
  std::vector<std::size_t> head_hidden{64};
  std::vector<std::size_t> chain_hidden{64};
  std::string hidden_activation = "relu";
  std::vector<std::size_t> label_order;
  bool standardize = true;
  std::vector<std::string> label_names;
};

inline RunConfig run_config_from_json(const json& j) {
  check_keys(j,
             {"model_kind", "train", "val", "val_fraction", "out", "seed", "epochs", "batch", "learning_rate",
              "patience", "keep_prob", "latent_dim", "feature_widths", "prior_hidden", "recognition_hidden",
              "decoder_hidden", "head_hidden", "chain_hidden", "hidden_activation", "label_order", "standardize",
              "label_names"},
             "run config");
  RunConfig c;
  std::vector<std::string> problems;
  auto field = [&](const char* key, auto& target) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(target);
    } catch (const json::exception&) {
      problems.push_back(std::string(key) + " has the wrong type");
    }
  };
  field("model_kind", c.model_kind);
  field("train", c.train_path);
  field("val", c.val_path);
  field("val_fraction", c.val_fraction);
  field("out", c.out_dir);
  if (j.contains("seed")) {
    std::uint64_t s = 0;
    field("seed", s);
    c.seed = s;
  }
  field("epochs", c.epochs);
  field("batch", c.batch);
  field("learning_rate", c.learning_rate);
  field("patience", c.patience);
  field("keep_prob", c.keep_prob);
  field("latent_dim", c.latent_dim);
  field("feature_widths", c.feature_widths);
  field("prior_hidden", c.prior_hidden);
  field("recognition_hidden", c.recognition_hidden);
  field("decoder_hidden", c.decoder_hidden);
  field("head_hidden", c.head_hidden);
  field("chain_hidden", c.chain_hidden);
  field("hidden_activation", c.hidden_activation);
  field("label_order", c.label_order);
  field("standardize", c.standardize);
  field("label_names", c.label_names);
  if (!problems.empty()) {
    std::string msg = "run config invalid:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw ValidationError(msg);
  }
  return c;
}

inline void validate_run_config(const RunConfig& c) {
  std::vector<std::string> problems;
  if (c.model_kind != "cvae" && c.model_kind != "independent" && c.model_kind != "pcc")
    problems.push_back("model_kind must be cvae, independent or pcc");
  if (!c.seed) problems.push_back("seed is mandatory");
  if (c.train_path.empty())
    problems.push_back("train path missing");
  else if (!fs::exists(c.train_path))
    problems.push_back("train path '" + c.train_path + "' does not exist");
  if (!c.val_path.empty() && !fs::exists(c.val_path)) problems.push_back("val path '" + c.val_path + "' does not exist");
  if (c.val_path.empty() && !(c.val_fraction > 0.0 && c.val_fraction < 1.0))
    problems.push_back("val_fraction must lie in (0, 1)");
  if (c.out_dir.empty()) problems.push_back("output directory missing");
  if (c.epochs == 0) problems.push_back("epochs must be positive");
  if (c.batch == 0) problems.push_back("batch must be positive");
  if (!(c.learning_rate >= 0.0)) problems.push_back("learning_rate must be non-negative");
  if (!(c.keep_prob > 0.0 && c.keep_prob <= 1.0)) problems.push_back("keep_prob must lie in (0, 1]");
  if (c.latent_dim == 0) problems.push_back("latent_dim must be positive");
  if (!problems.empty()) {
    std::string msg = "run config invalid:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw ValidationError(msg);
  }
}

inline json run_config_to_json(const RunConfig& c) {
  return {{"model_kind", c.model_kind},
          {"train", c.train_path},
          {"val", c.val_path},
          {"val_fraction", c.val_fraction},
          {"seed", *c.seed},
          {"epochs", c.epochs},
          {"batch", c.batch},
          {"learning_rate", c.learning_rate},
          {"patience", c.patience},
          {"keep_prob", c.keep_prob},
          {"latent_dim", c.latent_dim},
          {"feature_widths", c.feature_widths},
          {"prior_hidden", c.prior_hidden},
          {"recognition_hidden", c.recognition_hidden},
          {"decoder_hidden", c.decoder_hidden},
          {"head_hidden", c.head_hidden},
          {"chain_hidden", c.chain_hidden},
          {"hidden_activation", c.hidden_activation},
          {"label_order", c.label_order},
          {"standardize", c.standardize},
          {"label_names", c.label_names}};
}

/// Model initialized from a run config for a dataset of shape (k, l).
inline AnyModel make_model(const RunConfig& c, std::size_t k, std::size_t l) {
  const Activation act = parse_activation(c.hidden_activation);
  const std::uint64_t seed = stream_seed(*c.seed, 0x1417);
  if (c.model_kind == "cvae") {
    CvaeConfig m;
    m.feature_dim = k;
    m.label_count = l;
    m.latent_dim = c.latent_dim;
    m.feature_widths = c.feature_widths;
    m.prior_hidden = c.prior_hidden;
    m.recognition_hidden = c.recognition_hidden;
    m.decoder_hidden = c.decoder_hidden;
    m.hidden = act;
    m.keep_prob = c.keep_prob;
    return CvaeModel(m, seed);
  }
  if (c.model_kind == "independent") {
    IndependentConfig m;
    m.feature_dim = k;
    m.label_count = l;
    m.feature_widths = c.feature_widths;
    m.head_hidden = c.head_hidden;
    m.hidden = act;
    m.keep_prob = c.keep_prob;
    return IndependentModel(m, seed);
  }
  ChainConfig m;
  m.feature_dim = k;
  m.label_count = l;
  m.hidden_widths = c.chain_hidden;
  m.hidden = act;
  m.keep_prob = c.keep_prob;
  m.label_order = c.label_order;
  return ChainModel(m, seed);
}

struct TrainOutcome {
  TrainResult result;
  double seconds = 0.0;
};

/// Writes checkpoint.json, metrics.jsonl, stats.json, config.json and timing.json into out_dir.
/// Metrics are appended as epochs finish, so a numeric abort leaves a partial log behind.
inline TrainOutcome cmd_train(const RunConfig& config, bool quiet = true) {
  validate_run_config(config);
  const fs::path out(config.out_dir);
  fs::create_directories(out);

  LabeledDataset train = load_jsonl(config.train_path);
  LabeledDataset val;
  if (config.val_path.empty()) {
    const double fr[] = {1.0 - config.val_fraction, config.val_fraction};
    auto parts = split(train, fr, stream_seed(*config.seed, 0x5b11));
    train = std::move(parts[0]);
    val = std::move(parts[1]);
  } else {
    val = load_jsonl(config.val_path);
  }
  if (val.feature_dim() != train.feature_dim() || val.label_count() != train.label_count())
    throw ValidationError("train and val datasets disagree on k or l");
  if (!config.label_names.empty() && config.label_names.size() != train.label_count())
    throw ValidationError("label_names has " + std::to_string(config.label_names.size()) + " entries, dataset has " +
                          std::to_string(train.label_count()) + " labels");

  FeatureStats stats{std::vector<double>(train.feature_dim(), 0.0), std::vector<double>(train.feature_dim(), 1.0)};
  if (config.standardize) stats = fit_standardizer(train);
  train = standardize(stats, train);
  val = standardize(stats, val);
  write_text(out / "stats.json", stats_to_json(stats).dump() + "\n");
  write_text(out / "config.json", run_config_to_json(config).dump(2) + "\n");

  Checkpoint ckpt{make_model(config, train.feature_dim(), train.label_count()), config.label_names};
  TrainConfig tc;
  tc.epochs = config.epochs;
  tc.batch = config.batch;
  tc.adam.learning_rate = config.learning_rate;
  tc.seed = stream_seed(*config.seed, 0x7a11);
  tc.patience = config.patience;

  const std::string objective = config.model_kind == "cvae" ? "neg_elbo" : "nll";
  std::ofstream metrics(out / "metrics.jsonl", std::ios::binary);
  std::vector<double> epoch_seconds;
  auto on_epoch = [&](const EpochMetrics& m) {
    metrics << json{{"epoch", m.epoch}, {"objective", objective}, {"train_loss", m.train_loss}, {"val_loss", m.val_loss}}
                   .dump()
            << '\n'
            << std::flush;
    epoch_seconds.push_back(m.seconds);
    if (!quiet)
      std::cout << "epoch " << m.epoch << "  train " << fmt_double(m.train_loss, 6) << "  val "
                << fmt_double(m.val_loss, 6) << std::endl;
  };

  const auto started = std::chrono::steady_clock::now();
  TrainOutcome outcome;
  outcome.result = std::visit(
      [&](auto& model) -> TrainResult {
        using M = std::decay_t<decltype(model)>;
        if constexpr (std::is_same_v<M, CvaeModel>) return train_cvae(model, train, val, tc, on_epoch);
        else if constexpr (std::is_same_v<M, IndependentModel>) return train_independent(model, train, val, tc, on_epoch);
        else return train_pcc(model, train, val, tc, on_epoch);
      },
      ckpt.model);
  outcome.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  save_checkpoint((out / "checkpoint.json").string(), ckpt);
  write_text(out / "timing.json",
             json{{"train_seconds", outcome.seconds}, {"epoch_seconds", epoch_seconds}}.dump() + "\n");
  return outcome;
}

// ----------------------------------------------------------------- eval ---

/// Standardization stats stored beside a checkpoint, if any.
inline std::optional<FeatureStats> stats_beside(const fs::path& checkpoint) {
  const fs::path p = checkpoint.parent_path() / "stats.json";
  if (!fs::exists(p)) return std::nullopt;
  return stats_from_json(read_json_file(p.string()));
}

inline LabeledDataset load_for_model(const std::string& data_path, const AnyModel& model) {
  LabeledDataset ds = load_jsonl(data_path);
  if (ds.feature_dim() != model_feature_dim(model) || ds.label_count() != model_label_count(model))
    throw ValidationError("dataset '" + data_path + "' has k=" + std::to_string(ds.feature_dim()) + ", l=" +
                          std::to_string(ds.label_count()) + " but checkpoint expects k=" +
                          std::to_string(model_feature_dim(model)) + ", l=" +
                          std::to_string(model_label_count(model)));
  return ds;
}

struct EvalCommandOptions {
  std::string checkpoint;
  std::string data;
  std::size_t samples = 10000;
  std::uint64_t seed = 0;
  std::string out_dir;  // default: the checkpoint's directory
  std::size_t workers = 1;
};

/// Writes report.json and pr.csv; returns the report.
inline EvalReport cmd_eval(const EvalCommandOptions& opt) {
  const fs::path ckpt_path(opt.checkpoint);
  const Checkpoint ckpt = load_checkpoint(opt.checkpoint);
  LabeledDataset ds = load_for_model(opt.data, ckpt.model);
  const std::string hash = dataset_hash(ds);
  if (const auto stats = stats_beside(ckpt_path)) ds = standardize(*stats, ds);

  EvalOptions eo;
  eo.samples = opt.samples;
  eo.seed = opt.seed;
  eo.workers = opt.workers;
  EvalReport report = evaluate(ckpt.model, ds, eo);
  report.dataset_hash = hash;

  const fs::path out = opt.out_dir.empty() ? ckpt_path.parent_path() : fs::path(opt.out_dir);
  if (!out.empty()) fs::create_directories(out);
  json j = report_to_json(report, ckpt.label_names);
  j["run"] = fs::absolute(ckpt_path).parent_path().filename().string();
  write_text(out / "report.json", j.dump(2) + "\n");
  std::ostringstream csv;
  write_pr_csv(csv, report.pr, ckpt.label_names);
  write_text(out / "pr.csv", csv.str());
  return report;
}

// --------------------------------------------------------------- sample ---

struct SampleOptions {
  std::string checkpoint;
  std::string data;               // with row
  std::optional<std::size_t> row;
  std::vector<double> x;          // literal context, raw units
  std::size_t count = 1000;
  std::uint64_t seed = 0;
  std::string out_path;
};

/// Writes one {"y": [...]} line per sample and returns empirical pattern frequencies (l <= 10).
inline std::map<std::string, double> cmd_sample(const SampleOptions& opt) {
  const fs::path ckpt_path(opt.checkpoint);
  const Checkpoint ckpt = load_checkpoint(opt.checkpoint);
  const auto* model = std::get_if<CvaeModel>(&ckpt.model);
  if (!model)
    throw ValidationError("sample: checkpoint holds a '" + std::string(model_kind(ckpt.model)) +
                          "' model; sampling needs a cvae checkpoint");
  std::vector<double> x;
  if (opt.row) {
    if (opt.data.empty()) throw ValidationError("sample: --row needs --data");
    const LabeledDataset ds = load_for_model(opt.data, ckpt.model);
    if (*opt.row >= ds.size())
      throw ValidationError("sample: row " + std::to_string(*opt.row) + " out of range (dataset has " +
                            std::to_string(ds.size()) + " rows)");
    const auto r = ds.features.row(*opt.row);
    x.assign(r.begin(), r.end());
  } else {
    x = opt.x;
  }
  if (x.size() != model->config().feature_dim)
    throw ValidationError("sample: context has " + std::to_string(x.size()) + " values, model expects " +
                          std::to_string(model->config().feature_dim));
  if (const auto stats = stats_beside(ckpt_path)) {
    const Tensor t = standardize(*stats, as_row(x));
    x.assign(t.data().begin(), t.data().end());
  }

  const auto samples = sample_y(*model, x, opt.count, opt.seed);
  std::ostringstream text;
  std::map<std::string, std::size_t> counts;
  for (const auto& y : samples) {
    text << json{{"y", y}}.dump() << '\n';
    std::string key;
    for (int b : y) key += static_cast<char>('0' + b);
    ++counts[key];
  }
  if (!opt.out_path.empty()) {
    const fs::path p(opt.out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_text(p, text.str());
  }
  std::map<std::string, double> freq;
  if (model->config().label_count <= 10)
    for (const auto& [k, c] : counts) freq[k] = static_cast<double>(c) / static_cast<double>(samples.size());
  return freq;
}

// -------------------------------------------------------------- compare ---

struct CompareOptions {
  std::vector<std::string> reports;
  std::string format = "markdown";  // or "csv"
  bool include_timing = true;
};

/// Table of runs sorted by Neg. JLL. Train minutes come from timing.json beside each report.
inline std::string cmd_compare(const CompareOptions& opt) {
  if (opt.reports.size() < 2) throw ValidationError("compare: need at least two reports");
  if (opt.format != "markdown" && opt.format != "csv") throw ValidationError("compare: format must be markdown or csv");
  struct Row {
    std::string run, kind;
    std::optional<double> neg_jll, macro_ap, minutes;
    std::string hash;
  };
  std::vector<Row> rows;
  for (const auto& path : opt.reports) {
    const json r = read_json_file(path);
    Row row;
    row.run = r.value("run", fs::path(path).parent_path().filename().string());
    row.kind = r.value("model_kind", "?");
    row.hash = r.value("dataset_hash", "");
    if (r.contains("neg_jll") && r["neg_jll"].is_number()) row.neg_jll = r["neg_jll"].get<double>();
    if (r.contains("macro_ap") && r["macro_ap"].is_number()) row.macro_ap = r["macro_ap"].get<double>();
    const fs::path timing = fs::path(path).parent_path() / "timing.json";
    if (opt.include_timing && fs::exists(timing)) {
      const json t = read_json_file(timing.string());
      if (t.contains("train_seconds")) row.minutes = t["train_seconds"].get<double>() / 60.0;
    }
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    const double x = a.neg_jll.value_or(std::numeric_limits<double>::infinity());
    const double y = b.neg_jll.value_or(std::numeric_limits<double>::infinity());
    return x < y;
  });

  std::set<std::string> hashes;
  for (const auto& r : rows) hashes.insert(r.hash);
  const bool mixed = hashes.size() > 1;
  const std::string dash = "\xE2\x80\x94";
  auto cell = [&](const std::optional<double>& v, int digits) {
    if (!v) return dash;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, *v);
    return std::string(buf);
  };

  std::ostringstream out;
  if (opt.format == "markdown") {
    if (mixed) out << "> **WARNING:** reports were evaluated on different datasets (hash mismatch)\n\n";
    out << "| Run | Model | Neg. JLL | Macro AP | Time (min) |\n";
    out << "|---|---|---|---|---|\n";
    for (const auto& r : rows)
      out << "| " << r.run << " | " << r.kind << " | " << cell(r.neg_jll, 4) << " | " << cell(r.macro_ap, 4) << " | "
          << cell(r.minutes, 2) << " |\n";
  } else {
    if (mixed) out << "# WARNING: reports were evaluated on different datasets (hash mismatch)\n";
    out << "run,model,neg_jll,macro_ap,train_minutes\n";
    for (const auto& r : rows)
      out << r.run << ',' << r.kind << ',' << cell(r.neg_jll, 6) << ',' << cell(r.macro_ap, 6) << ','
          << cell(r.minutes, 4) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------- export-embeddings ---

/// CSV with header label,e1..eh and one row per label.
inline std::string cmd_export_embeddings(const std::string& checkpoint) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const auto* model = std::get_if<CvaeModel>(&ckpt.model);
  if (!model)
    throw ValidationError("export-embeddings: checkpoint holds a '" + std::string(model_kind(ckpt.model)) +
                          "' model; embeddings need a cvae checkpoint");
  const Tensor e = export_embeddings(*model);
  std::ostringstream out;
  out << "label";
  for (std::size_t i = 0; i < e.dim(1); ++i) out << ",e" << i + 1;
  out << '\n';
  for (std::size_t j = 0; j < e.dim(0); ++j) {
    out << (j < ckpt.label_names.size() ? ckpt.label_names[j] : "label_" + std::to_string(j + 1));
    for (std::size_t i = 0; i < e.dim(1); ++i) out << ',' << fmt_double(e.at(j, i));
    out << '\n';
  }
  return out.str();
}

}  // namespace medl::cli
