#include <cstdlib>
#include <numbers>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "medl/commands.hpp"
#include "test_util.hpp"

using namespace medl;
using namespace medl::cli;
using medl::test::scratch_dir;
using medl::test::slurp;
using medl::test::spit;

namespace {

const char* kTwoModeSpec = R"({"kind": "multimode", "patterns": [[0, 1], [1, 0]], "weights": [0.5, 0.5],
  "flip_prob": 0.0, "feature_dim": 2, "count": 600, "seed": 4})";

/// Writes a two-mode dataset into dir/data and returns the JSONL path.
std::string synth_two_mode(const fs::path& dir, std::size_t count = 600, std::uint64_t seed = 4) {
  spit(dir / "spec.json", kTwoModeSpec);
  SynthOptions opt{(dir / "spec.json").string(), (dir / "data").string(), seed, count};
  cmd_synth(opt);
  return (dir / "data" / "data.jsonl").string();
}

RunConfig tiny_run(const std::string& kind, const std::string& train, const fs::path& out) {
  RunConfig c;
  c.model_kind = kind;
  c.train_path = train;
  c.out_dir = out.string();
  c.seed = 42;
  c.epochs = 3;
  c.batch = 128;
  c.learning_rate = 3e-3;
  c.keep_prob = 1.0;
  c.latent_dim = 2;
  c.feature_widths = {8};
  c.prior_hidden = {8};
  c.recognition_hidden = {8};
  c.decoder_hidden = {8};
  c.head_hidden = {8};
  c.chain_hidden = {8};
  return c;
}

std::string error_message(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected an exception";
  return "";
}

struct CliRun {
  int exit_code;
  std::string stdout_text, stderr_text;
};

CliRun run_cli(const std::string& args, const fs::path& dir) {
  const auto out = dir / "cli_stdout.txt", err = dir / "cli_stderr.txt";
  const std::string cmd = std::string(MEDL_CLI_PATH) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

json last_stderr_record(const std::string& text) {
  std::string t = text;
  while (!t.empty() && t.back() == '\n') t.pop_back();
  return json::parse(t.substr(t.rfind('\n') == std::string::npos ? 0 : t.rfind('\n') + 1));
}

}  // namespace

// ---------------------------------------------------------------- synth ---

TEST(Synth, WritesDatasetAndJointTable) {
  const auto dir = scratch_dir("cli_synth");
  const auto data = synth_two_mode(dir);
  EXPECT_EQ(load_jsonl(data).size(), 600u);
  const json table = read_json_file((dir / "data" / "joint_table.json").string());
  ASSERT_EQ(table["entries"].size(), 4u);
  double total = 0.0;
  for (const auto& e : table["entries"]) total += e["p"].get<double>();
  EXPECT_EQ(total, 1.0);
  EXPECT_EQ(table["entries"][1]["y"], json({0, 1}));
  EXPECT_EQ(table["entries"][1]["p"], 0.5);
}

TEST(Synth, RerunIsByteIdentical) {
  const auto a = scratch_dir("cli_synth_a"), b = scratch_dir("cli_synth_b");
  EXPECT_EQ(slurp(synth_two_mode(a)), slurp(synth_two_mode(b)));
  EXPECT_EQ(slurp(a / "data" / "joint_table.json"), slurp(b / "data" / "joint_table.json"));
}

TEST(Synth, FlipNoiseGivesPositiveEntries) {
  const auto dir = scratch_dir("cli_synth_flip");
  spit(dir / "spec.json", R"({"patterns": [[0, 1], [1, 0]], "weights": [0.5, 0.5], "flip_prob": 0.1, "seed": 1})");
  cmd_synth({(dir / "spec.json").string(), (dir / "out").string(), std::nullopt, std::nullopt});
  const json table = read_json_file((dir / "out" / "joint_table.json").string());
  for (const auto& e : table["entries"]) EXPECT_GT(e["p"].get<double>(), 0.0);
}

TEST(Synth, InvalidFieldsAreEnumerated) {
  const auto dir = scratch_dir("cli_synth_bad");
  spit(dir / "spec.json", R"({"kind": "bimodal", "weights": "half", "count": 10})");
  const std::string msg = error_message([&] { cmd_synth({(dir / "spec.json").string(), (dir / "o").string(), {}, {}}); });
  EXPECT_NE(msg.find("weights"), std::string::npos) << msg;
  EXPECT_NE(msg.find("bimodal"), std::string::npos) << msg;

  spit(dir / "typo.json", R"({"patern": [[0, 1]], "wieghts": [1]})");
  const std::string typo = error_message([&] { cmd_synth({(dir / "typo.json").string(), (dir / "o").string(), {}, {}}); });
  EXPECT_NE(typo.find("patern"), std::string::npos) << typo;
  EXPECT_NE(typo.find("wieghts"), std::string::npos) << typo;
}

// ---------------------------------------------------------------- train ---

TEST(Train, WritesArtifactsAndRerunsIdentically) {
  const auto dir = scratch_dir("cli_train");
  const auto data = synth_two_mode(dir);
  for (const std::string kind : {"cvae", "independent", "pcc"}) {
    const auto a = dir / (kind + "_a"), b = dir / (kind + "_b");
    cmd_train(tiny_run(kind, data, a));
    cmd_train(tiny_run(kind, data, b));
    for (const char* f : {"checkpoint.json", "metrics.jsonl", "stats.json", "config.json"}) {
      ASSERT_TRUE(fs::exists(a / f)) << kind << " " << f;
      EXPECT_EQ(slurp(a / f), slurp(b / f)) << kind << " " << f;
    }
    EXPECT_TRUE(fs::exists(a / "timing.json"));
    // metrics: one record per epoch, epochs strictly increasing
    std::istringstream lines(slurp(a / "metrics.jsonl"));
    std::string line;
    std::size_t expect = 1;
    while (std::getline(lines, line)) {
      const json rec = json::parse(line);
      EXPECT_EQ(rec["epoch"], expect++);
      EXPECT_EQ(rec["objective"], kind == "cvae" ? "neg_elbo" : "nll");
    }
    EXPECT_EQ(expect, 4u);
  }
}

TEST(Train, MissingSeedIsAnError) {
  const auto dir = scratch_dir("cli_train_seed");
  auto c = tiny_run("cvae", synth_two_mode(dir), dir / "out");
  c.seed.reset();
  const std::string msg = error_message([&] { cmd_train(c); });
  EXPECT_NE(msg.find("seed is mandatory"), std::string::npos) << msg;
}

TEST(Train, MissingPathsAreReported) {
  const auto dir = scratch_dir("cli_train_paths");
  auto c = tiny_run("cvae", (dir / "nope.jsonl").string(), dir / "out");
  c.val_path = (dir / "also_nope.jsonl").string();
  const std::string msg = error_message([&] { cmd_train(c); });
  EXPECT_NE(msg.find("nope.jsonl"), std::string::npos) << msg;
  EXPECT_NE(msg.find("also_nope.jsonl"), std::string::npos) << msg;
}

TEST(Train, ConfigJsonRejectsUnknownKeys) {
  EXPECT_THROW(run_config_from_json(json{{"epochz", 3}}), ValidationError);
  const auto c = run_config_from_json(json{{"model_kind", "pcc"}, {"seed", 9}, {"learning_rate", 0.01}});
  EXPECT_EQ(c.model_kind, "pcc");
  EXPECT_EQ(*c.seed, 9u);
  EXPECT_EQ(c.learning_rate, 0.01);
  EXPECT_EQ(c.batch, 512u);
  EXPECT_EQ(c.epochs, 300u);
  EXPECT_EQ(c.keep_prob, 0.8);
}

// ----------------------------------------------------------------- eval ---

TEST(Eval, RerunGivesIdenticalReport) {
  const auto dir = scratch_dir("cli_eval");
  const auto data = synth_two_mode(dir);
  cmd_train(tiny_run("cvae", data, dir / "run"));
  EvalCommandOptions opt{(dir / "run" / "checkpoint.json").string(), data, 200, 7, (dir / "e1").string(), 1};
  const auto r1 = cmd_eval(opt);
  opt.out_dir = (dir / "e2").string();
  opt.workers = 2;
  const auto r2 = cmd_eval(opt);
  EXPECT_EQ(r1.neg_jll, r2.neg_jll);
  EXPECT_EQ(slurp(dir / "e1" / "pr.csv"), slurp(dir / "e2" / "pr.csv"));
  EXPECT_EQ(slurp(dir / "e1" / "report.json"), slurp(dir / "e2" / "report.json"));
  const json report = read_json_file((dir / "e1" / "report.json").string());
  EXPECT_EQ(report["run"], "run");
  EXPECT_EQ(report["dataset_hash"], dataset_hash(load_jsonl(data)));
}

TEST(Eval, ShapeMismatchStatesBoth) {
  const auto dir = scratch_dir("cli_eval_mismatch");
  const auto data = synth_two_mode(dir);
  cmd_train(tiny_run("independent", data, dir / "run"));
  spit(dir / "wide.jsonl", "{\"x\": [1, 2, 3], \"y\": [1, 0, 1]}\n");
  const std::string msg = error_message([&] {
    cmd_eval({(dir / "run" / "checkpoint.json").string(), (dir / "wide.jsonl").string(), 10, 1, "", 1});
  });
  EXPECT_NE(msg.find("k=3, l=3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("k=2, l=2"), std::string::npos) << msg;
}

TEST(Eval, UniformIndependentSeventeenLabels) {
  const auto dir = scratch_dir("cli_eval_uniform");
  IndependentConfig c;
  c.feature_dim = 3;
  c.label_count = 17;
  IndependentModel model(c, 1);
  for (Tensor* p : model.parameter_tensors()) p->fill(0.0);
  save_checkpoint((dir / "checkpoint.json").string(), Checkpoint{model, {}});
  LabeledDataset ds{Tensor({4, 3}, 0.25), Tensor({4, 17}), {}, {}};
  for (std::size_t j = 0; j < 17; j += 3) ds.labels.at(1, j) = 1.0;
  save_jsonl((dir / "d.jsonl").string(), ds);
  const auto r = cmd_eval({(dir / "checkpoint.json").string(), (dir / "d.jsonl").string(), 10, 1, "", 1});
  EXPECT_NEAR(r.neg_jll, 17 * std::numbers::ln2, 1e-12);
  EXPECT_NEAR(r.neg_jll, 11.78, 5e-3);
}

// --------------------------------------------------------------- sample ---

TEST(Sample, CountZeroWritesEmptyFile) {
  const auto dir = scratch_dir("cli_sample_zero");
  const auto data = synth_two_mode(dir);
  cmd_train(tiny_run("cvae", data, dir / "run"));
  SampleOptions opt;
  opt.checkpoint = (dir / "run" / "checkpoint.json").string();
  opt.x = {0.5, 0.5};
  opt.count = 0;
  opt.out_path = (dir / "s.jsonl").string();
  EXPECT_TRUE(cmd_sample(opt).empty());
  EXPECT_EQ(slurp(dir / "s.jsonl"), "");
}

TEST(Sample, FixedSeedIdenticalFile) {
  const auto dir = scratch_dir("cli_sample_seed");
  const auto data = synth_two_mode(dir);
  cmd_train(tiny_run("cvae", data, dir / "run"));
  SampleOptions opt;
  opt.checkpoint = (dir / "run" / "checkpoint.json").string();
  opt.data = data;
  opt.row = 3;
  opt.count = 500;
  opt.seed = 11;
  opt.out_path = (dir / "a.jsonl").string();
  const auto freq = cmd_sample(opt);
  opt.out_path = (dir / "b.jsonl").string();
  cmd_sample(opt);
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
  double total = 0.0;
  for (const auto& [pattern, f] : freq) {
    EXPECT_EQ(pattern.size(), 2u);
    total += f;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);

  opt.row = 100000;
  EXPECT_THROW(cmd_sample(opt), ValidationError);
}

TEST(Sample, RefusesNonCvaeCheckpoint) {
  const auto dir = scratch_dir("cli_sample_kind");
  const auto data = synth_two_mode(dir);
  cmd_train(tiny_run("pcc", data, dir / "run"));
  SampleOptions opt;
  opt.checkpoint = (dir / "run" / "checkpoint.json").string();
  opt.x = {0.5, 0.5};
  const std::string msg = error_message([&] { cmd_sample(opt); });
  EXPECT_NE(msg.find("pcc"), std::string::npos) << msg;
  EXPECT_THROW(cmd_export_embeddings(opt.checkpoint), ValidationError);
}

// -------------------------------------------------------------- compare ---

namespace {

fs::path write_report(const fs::path& dir, const std::string& run, const json& body, double minutes = -1) {
  fs::create_directories(dir / run);
  json r = body;
  r["run"] = run;
  spit(dir / run / "report.json", r.dump());
  if (minutes >= 0) spit(dir / run / "timing.json", json{{"train_seconds", 60 * minutes}}.dump());
  return dir / run / "report.json";
}

}  // namespace

TEST(Compare, SortsByNegJllAndMarksMissing) {
  const auto dir = scratch_dir("cli_compare");
  const auto a = write_report(dir, "ind", {{"model_kind", "independent"}, {"neg_jll", 1.39}, {"macro_ap", 0.5},
                                           {"dataset_hash", "h"}}, 0.5);
  const auto b = write_report(dir, "cv", {{"model_kind", "cvae"}, {"neg_jll", 0.71}, {"macro_ap", nullptr},
                                          {"dataset_hash", "h"}}, 1.25);
  CompareOptions opt{{a.string(), b.string()}, "markdown", true};
  const std::string table = cmd_compare(opt);
  EXPECT_LT(table.find("| cv |"), table.find("| ind |"));
  EXPECT_NE(table.find("| cv | cvae | 0.7100 | \xE2\x80\x94 | 1.25 |"), std::string::npos) << table;
  EXPECT_EQ(table.find("WARNING"), std::string::npos);
  EXPECT_EQ(table, cmd_compare(opt));

  opt.format = "csv";
  opt.include_timing = false;
  const std::string csv = cmd_compare(opt);
  EXPECT_EQ(csv, "run,model,neg_jll,macro_ap,train_minutes\ncv,cvae,0.710000,\xE2\x80\x94,\xE2\x80\x94\n"
                 "ind,independent,1.390000,0.500000,\xE2\x80\x94\n");
}

TEST(Compare, WarnsOnMixedDatasets) {
  const auto dir = scratch_dir("cli_compare_mixed");
  const auto a = write_report(dir, "a", {{"model_kind", "pcc"}, {"neg_jll", 0.7}, {"dataset_hash", "h1"}});
  const auto b = write_report(dir, "b", {{"model_kind", "pcc"}, {"neg_jll", 0.8}, {"dataset_hash", "h2"}});
  const std::string table = cmd_compare({{a.string(), b.string()}, "markdown", true});
  EXPECT_EQ(table.rfind("> **WARNING:**", 0), 0u) << table;
}

TEST(Compare, NeedsTwoReports) {
  const auto dir = scratch_dir("cli_compare_one");
  const auto a = write_report(dir, "a", {{"neg_jll", 0.7}});
  EXPECT_THROW(cmd_compare({{a.string()}, "markdown", true}), ValidationError);
}

// ---------------------------------------------------- export-embeddings ---

TEST(ExportEmbeddings, OneRowPerLabelMatchingWeights) {
  const auto dir = scratch_dir("cli_embeddings");
  CvaeConfig c = test::small_cvae(2, 17);
  const CvaeModel model(c, 3);
  std::vector<std::string> names;
  for (int j = 0; j < 17; ++j) names.push_back("sp" + std::to_string(j));
  save_checkpoint((dir / "checkpoint.json").string(), Checkpoint{model, names});
  const std::string csv = cmd_export_embeddings((dir / "checkpoint.json").string());
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 12), "label,e1,e2,");
  const Tensor& w = model.decoder().layers().back().weight;  // [h, l]
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    EXPECT_EQ(cell, names[rows]);
    std::size_t i = 0;
    while (std::getline(cells, cell, ',')) EXPECT_EQ(std::stod(cell), w.at(i++, rows));
    EXPECT_EQ(i, w.dim(0));
    ++rows;
  }
  EXPECT_EQ(rows, 17u);
}

// ------------------------------------------------------------ the binary ---

TEST(Binary, ValidationErrorExitsOne) {
  const auto dir = scratch_dir("cli_bin_validation");
  const auto data = synth_two_mode(dir);
  const CliRun r = run_cli("train --model cvae --train " + data + " --out " + (dir / "o").string(), dir);
  EXPECT_EQ(r.exit_code, 1);
  const json rec = last_stderr_record(r.stderr_text);
  EXPECT_EQ(rec["command"], "train");
  EXPECT_EQ(rec["exit"], 1);
  EXPECT_EQ(rec["kind"], "validation");
  EXPECT_NE(rec["message"].get<std::string>().find("seed"), std::string::npos);
}

TEST(Binary, UsageErrorExitsOne) {
  const auto dir = scratch_dir("cli_bin_usage");
  const CliRun r = run_cli("eval --frobnicate", dir);
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_EQ(last_stderr_record(r.stderr_text)["kind"], "usage");
}

TEST(Binary, NumericFailureExitsTwoAndKeepsMetrics) {
  const auto dir = scratch_dir("cli_bin_numeric");
  const auto data = synth_two_mode(dir);
  const auto out = dir / "o";
  const CliRun r = run_cli("--quiet train --model independent --seed 1 --epochs 50 --batch 64 --lr 1e300 --train " +
                            data + " --out " + out.string(),
                        dir);
  EXPECT_EQ(r.exit_code, 2) << r.stderr_text;
  const json rec = last_stderr_record(r.stderr_text);
  EXPECT_EQ(rec["exit"], 2);
  EXPECT_EQ(rec["kind"], "numeric");
  EXPECT_NE(rec["message"].get<std::string>().find("epoch"), std::string::npos) << rec.dump();
  EXPECT_TRUE(fs::exists(out / "metrics.jsonl"));
  EXPECT_FALSE(fs::exists(out / "checkpoint.json"));
}

TEST(Binary, EvalPrintsHeadlineNumber) {
  const auto dir = scratch_dir("cli_bin_eval");
  const auto data = synth_two_mode(dir);
  cmd_train(tiny_run("independent", data, dir / "run"));
  const CliRun r = run_cli("eval --checkpoint " + (dir / "run" / "checkpoint.json").string() + " --data " + data +
                            " --seed 3",
                        dir);
  ASSERT_EQ(r.exit_code, 0) << r.stderr_text;
  const json report = read_json_file((dir / "run" / "report.json").string());
  char expected[32];
  std::snprintf(expected, sizeof expected, "%.6f\n", report["neg_jll"].get<double>());
  EXPECT_EQ(r.stdout_text, expected);
  EXPECT_EQ(last_stderr_record(r.stderr_text)["status"], "ok");
}
