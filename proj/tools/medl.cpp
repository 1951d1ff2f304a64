// medl: command-line front end.
//
// Exit codes: 0 success, 1 validation error, 2 numeric failure. The last line
// written to stderr is always a JSON status record.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "medl/commands.hpp"

namespace {

using medl::cli::json;

int finish(const std::string& command, int code, const std::string& kind = "", const std::string& message = "") {
  json status{{"command", command}, {"status", code == 0 ? "ok" : "error"}, {"exit", code}};
  if (code != 0) {
    status["kind"] = kind;
    status["message"] = message;
  }
  std::cerr << status.dump() << std::endl;
  return code;
}

std::vector<double> parse_csv_doubles(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw medl::ValidationError("--x: '" + item + "' is not a number");
    }
  }
  return out;
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  medl::cli::write_text(p, text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-entity dependence learning: CVAE and baselines for joint multi-label prediction"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("--quiet", quiet, "Suppress progress output");

  // synth
  medl::cli::SynthOptions synth;
  std::uint64_t synth_seed = 0;
  std::size_t synth_count = 0;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset and its exact joint table");
  synth_cmd->add_option("--config", synth.spec_path, "Synthetic spec JSON")->required()->check(CLI::ExistingFile);
  synth_cmd->add_option("--out", synth.out_dir, "Output directory")->required();
  auto* synth_seed_opt = synth_cmd->add_option("--seed", synth_seed, "Override the spec's seed");
  auto* synth_count_opt = synth_cmd->add_option("--count", synth_count, "Override the spec's row count");

  // train
  std::string train_config;
  medl::cli::RunConfig run;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a cvae, independent or pcc model");
  train_cmd->add_option("--config", train_config, "Run config JSON")->check(CLI::ExistingFile);
  auto* o_seed = train_cmd->add_option("--seed", train_seed, "Random seed (mandatory here or in the config)");
  auto* o_out = train_cmd->add_option("--out", run.out_dir, "Output directory");
  auto* o_model = train_cmd->add_option("--model", run.model_kind, "cvae, independent or pcc");
  auto* o_train = train_cmd->add_option("--train", run.train_path, "Training JSONL");
  auto* o_val = train_cmd->add_option("--val", run.val_path, "Validation JSONL (default: hold out part of train)");
  auto* o_epochs = train_cmd->add_option("--epochs", run.epochs);
  auto* o_batch = train_cmd->add_option("--batch", run.batch);
  auto* o_lr = train_cmd->add_option("--lr", run.learning_rate);
  auto* o_patience = train_cmd->add_option("--patience", run.patience);
  auto* o_keep = train_cmd->add_option("--keep-prob", run.keep_prob);

  // eval
  medl::cli::EvalCommandOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ev.data)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--samples", ev.samples, "Monte-Carlo samples per datapoint (cvae)");
  eval_cmd->add_option("--seed", ev.seed)->required();
  eval_cmd->add_option("--out", ev.out_dir, "Output directory (default: the checkpoint's directory)");
  eval_cmd->add_option("--workers", ev.workers, "Evaluation threads")->check(CLI::PositiveNumber);

  // sample
  medl::cli::SampleOptions sp;
  std::size_t sample_row = 0;
  std::string sample_x;
  auto* sample_cmd = app.add_subcommand("sample", "Draw label vectors from a cvae's generating process");
  sample_cmd->add_option("--checkpoint", sp.checkpoint)->required()->check(CLI::ExistingFile);
  auto* o_row = sample_cmd->add_option("--row", sample_row, "Context row index in --data");
  sample_cmd->add_option("--data", sp.data)->check(CLI::ExistingFile);
  auto* o_x = sample_cmd->add_option("--x", sample_x, "Literal context, comma separated");
  o_row->excludes(o_x);
  sample_cmd->add_option("--count", sp.count);
  sample_cmd->add_option("--seed", sp.seed)->required();
  sample_cmd->add_option("--out", sp.out_path, "Output JSONL")->required();

  // compare
  medl::cli::CompareOptions cmp;
  std::string compare_out;
  bool no_timing = false;
  auto* compare_cmd = app.add_subcommand("compare", "Tabulate eval reports sorted by Neg. JLL");
  compare_cmd->add_option("reports", cmp.reports, "report.json files")->required()->check(CLI::ExistingFile);
  compare_cmd->add_option("--format", cmp.format)->check(CLI::IsMember({"markdown", "csv"}));
  compare_cmd->add_option("--out", compare_out, "Write the table here instead of stdout");
  compare_cmd->add_flag("--no-timing", no_timing, "Leave the train-time column empty");

  // export-embeddings
  std::string emb_ckpt, emb_out;
  auto* emb_cmd = app.add_subcommand("export-embeddings", "Write the decoder's per-label output weights as CSV");
  emb_cmd->add_option("--checkpoint", emb_ckpt)->required()->check(CLI::ExistingFile);
  emb_cmd->add_option("--out", emb_out, "Output CSV")->required();

  std::string command = "medl";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return finish(command, 1, "usage", e.what());
  }
  command = app.get_subcommands().front()->get_name();

  try {
    if (*synth_cmd) {
      if (*synth_seed_opt) synth.seed = synth_seed;
      if (*synth_count_opt) synth.count = synth_count;
      medl::cli::cmd_synth(synth);
    } else if (*train_cmd) {
      medl::cli::RunConfig merged;
      if (!train_config.empty()) merged = medl::cli::run_config_from_json(medl::cli::read_json_file(train_config));
      if (*o_seed) merged.seed = train_seed;
      if (*o_out) merged.out_dir = run.out_dir;
      if (*o_model) merged.model_kind = run.model_kind;
      if (*o_train) merged.train_path = run.train_path;
      if (*o_val) merged.val_path = run.val_path;
      if (*o_epochs) merged.epochs = run.epochs;
      if (*o_batch) merged.batch = run.batch;
      if (*o_lr) merged.learning_rate = run.learning_rate;
      if (*o_patience) merged.patience = run.patience;
      if (*o_keep) merged.keep_prob = run.keep_prob;
      const auto outcome = medl::cli::cmd_train(merged, quiet);
      if (!quiet && !outcome.result.log.empty()) {
        const auto& best = outcome.result.log[outcome.result.best_epoch - 1];
        std::cout << "best epoch " << best.epoch << "  val " << medl::cli::fmt_double(best.val_loss, 6) << '\n';
      }
    } else if (*eval_cmd) {
      const auto report = medl::cli::cmd_eval(ev);
      std::printf("%.6f\n", report.neg_jll);
    } else if (*sample_cmd) {
      if (*o_row) sp.row = sample_row;
      else if (*o_x) sp.x = parse_csv_doubles(sample_x);
      else throw medl::ValidationError("sample: give --row (with --data) or --x");
      const auto freq = medl::cli::cmd_sample(sp);
      if (!quiet)
        for (const auto& [pattern, f] : freq) std::printf("%s %.4f\n", pattern.c_str(), f);
    } else if (*compare_cmd) {
      cmp.include_timing = !no_timing;
      write_or_print(compare_out, medl::cli::cmd_compare(cmp));
    } else if (*emb_cmd) {
      write_or_print(emb_out, medl::cli::cmd_export_embeddings(emb_ckpt));
    }
  } catch (const medl::NumericError& e) {
    return finish(command, 2, "numeric", e.what());
  } catch (const medl::DomainError& e) {
    return finish(command, 2, "numeric", e.what());
  } catch (const medl::Error& e) {
    return finish(command, 1, "validation", e.what());
  } catch (const std::exception& e) {
    return finish(command, 1, "validation", e.what());
  }
  return finish(command, 0);
}
