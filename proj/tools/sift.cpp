// sift: ingest -> build -> train -> generate -> eval -> report.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sift/pipeline.hpp"
#include "sift/synthetic.hpp"

namespace {

struct Overrides {
  std::string config_path;
  std::vector<std::uint64_t> seeds;
  bool greedy = false;
  std::string strategy;
  std::optional<std::size_t> shots;
  std::optional<std::size_t> eval_shots;
  std::string eval_instruction;
  bool quiet = false;
};

sift::Run open_run(const Overrides& o) {
  auto cfg = sift::load_config(o.config_path);
  if (!o.seeds.empty()) cfg.train.seeds = o.seeds;
  if (o.greedy) cfg.decode.greedy = true;
  if (!o.strategy.empty()) cfg.strategy = sift::strategy_from_string(o.strategy);
  if (o.shots) cfg.n_shots = *o.shots;
  if (o.eval_shots) cfg.eval_shots = *o.eval_shots;
  if (!o.eval_instruction.empty()) cfg.eval_instruction = sift::instruction_kind_from_string(o.eval_instruction);
  sift::Logger log;
  if (!o.quiet) log = [](const std::string& m) { std::cerr << "[sift] " << m << "\n"; };
  return sift::Run(std::move(cfg), std::move(log));
}

void add_run_options(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config_path, "run config (key = value)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed-override", o.seeds, "replace the configured seed list");
  cmd->add_flag("--greedy", o.greedy, "argmax decoding");
  cmd->add_option("--strategy", o.strategy, "vanilla | src | mrc");
  cmd->add_option("--shots", o.shots, "demonstrations per training prompt (eval follows unless --eval-shots)");
  cmd->add_option("--eval-shots", o.eval_shots, "demonstrations per evaluation prompt");
  cmd->add_option("--eval-instruction", o.eval_instruction, "vanilla | permuted | nonsense | none");
  cmd->add_flag("-q,--quiet", o.quiet, "no progress logging");
}

void write_synthetic(const std::string& out_dir, std::size_t n_train, std::size_t n_valid, std::size_t n_test,
                     std::uint64_t seed) {
  namespace fs = std::filesystem;
  const auto ds = sift::make_synthetic_dataset(n_train, n_valid, n_test, seed);
  fs::create_directories(out_dir);
  auto put = [&](const std::string& name, const std::string& text) {
    std::ofstream f(fs::path(out_dir) / name, std::ios::binary);
    if (!f) sift::fail(sift::Errc::IoError, "cannot write " + name);
    f << text;
  };
  put("train.conll", sift::write_conll(ds.train));
  put("valid.conll", sift::write_conll(ds.valid));
  put("test.conll", sift::write_conll(ds.test));
  put("sift.cfg", "# synthetic two-class task\n"
                  "data_dir = " + out_dir + "\n"
                  "output_dir = " + out_dir + "/runs\n"
                  "classes = animal, color\n"
                  "strategy = mrc\n"
                  "n_shots = 1\n"
                  "learning_rate = 0.01\n"
                  "epochs = 10\n"
                  "window = 24\n");
  std::cerr << "[sift] wrote " << n_train << "/" << n_valid << "/" << n_test << " sentences to " << out_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Supervised in-context fine-tuning toolkit for sequence labeling"};
  app.require_subcommand(1);
  Overrides o;

  auto* ingest = app.add_subcommand("ingest", "parse CoNLL splits into the dataset bundle");
  auto* build = app.add_subcommand("build", "render train/eval prompts and fit the tokenizer");
  auto* train = app.add_subcommand("train", "train one toy model per seed");
  auto* generate = app.add_subcommand("generate", "grammar-constrained generation on eval prompts");
  auto* eval = app.add_subcommand("eval", "strict micro F1 per seed and across seeds");
  auto* report = app.add_subcommand("report", "print the evaluation summary");
  auto* all = app.add_subcommand("all", "run every step in order");
  for (auto* cmd : {ingest, build, train, generate, eval, report, all}) add_run_options(cmd, o);

  std::string synth_out = "synthetic";
  std::size_t n_train = 600, n_valid = 50, n_test = 50;
  std::uint64_t synth_seed = 7;
  auto* synth = app.add_subcommand("synth", "write the bundled synthetic task and a sample config");
  synth->add_option("-o,--out", synth_out, "output directory");
  synth->add_option("--train", n_train);
  synth->add_option("--valid", n_valid);
  synth->add_option("--test", n_test);
  synth->add_option("--seed", synth_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      write_synthetic(synth_out, n_train, n_valid, n_test, synth_seed);
      return 0;
    }
    const auto run = open_run(o);
    const bool everything = all->parsed();
    if (everything || ingest->parsed()) sift::cmd_ingest(run);
    if (everything || build->parsed()) sift::cmd_build(run);
    if (everything || train->parsed()) sift::cmd_train(run);
    if (everything || generate->parsed()) sift::cmd_generate(run);
    if (everything || eval->parsed()) sift::cmd_eval(run);
    if (everything || report->parsed()) std::cout << sift::cmd_report(run);
    if (ingest->parsed() || build->parsed()) std::cout << run.dir().string() << "\n";
  } catch (const sift::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
