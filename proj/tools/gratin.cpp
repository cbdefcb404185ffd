// Command line front end: prepare, train, augment, influence, filter-sweep,
// corrupt, report.
//
// Precedence: built-in defaults, then --config <file.json>, then flags.

#include "gratin/experiment.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

using nlohmann::json;
using namespace gratin;

struct Flags {
  std::string config_file;
  json overrides = json::object();
};

// Registers one flag per config field; only flags given on the command line
// end up in `overrides`.
void add_config_flags(CLI::App &app, Flags &flags) {
  app.add_option("--config", flags.config_file, "flat JSON config file")
      ->check(CLI::ExistingFile);
  auto str = [&](const char *flag, const char *key, const char *help) {
    app.add_option_function<std::string>(
        flag, [&flags, key](const std::string &v) { flags.overrides[key] = v; }, help);
  };
  auto integer = [&](const char *flag, const char *key, const char *help) {
    app.add_option_function<long long>(
        flag, [&flags, key](long long v) { flags.overrides[key] = v; }, help);
  };
  auto real = [&](const char *flag, const char *key, const char *help) {
    app.add_option_function<double>(
        flag, [&flags, key](double v) { flags.overrides[key] = v; }, help);
  };
  str("--dataset", "dataset", "dataset name (TU layout prefix)");
  str("--data-root", "data_root", "directory holding <dataset>/");
  str("--backbone", "backbone", "gcn | gin");
  str("--augmenter", "augmenter",
      "none | gratin | gratin_fisher | dropedge | dropnode | config_model");
  integer("--epochs", "epochs", "backbone training epochs");
  real("--lr", "learning_rate", "Adam learning rate");
  integer("--hidden-dim", "hidden_dim", "message-passing width");
  integer("--num-layers", "num_layers", "message-passing layers");
  integer("--batch-size", "batch_size", "0 for full batch");
  str("--gmm-components", "gmm_components", "K per class, or table7");
  real("--p", "p", "drop probability (dropedge, dropnode)");
  real("--r", "r", "rewire probability (config_model)");
  integer("--M", "M", "augmented samples per training graph");
  real("--keep-fraction", "keep_fraction", "kept share of the candidate pool");
  integer("--pool-multiplier", "pool_multiplier", "candidate pool size over M");
  app.add_flag_function(
      "--augment-per-epoch", [&flags](std::int64_t) { flags.overrides["augment_per_epoch"] = true; },
      "fresh structural augmentation every epoch");
  integer("--finetune-epochs", "finetune_epochs", "head fine-tuning epochs");
  real("--finetune-lr", "finetune_lr", "head fine-tuning learning rate");
  integer("--cv-folds", "cv_folds", "k of the cross-validation split");
  integer("--folds", "folds", "number of folds to run");
  integer("--degree-cap", "degree_cap", "degree one-hot cap, 0 for the dataset maximum");
  app.add_option_function<std::uint64_t>(
      "--seed", [&flags](std::uint64_t v) { flags.overrides["seed"] = v; }, "root seed");
  real("--budget", "budget", "structure corruption budget");
  str("--output-dir", "output_dir", "results root");
  integer("--jobs", "jobs", "parallel folds");
}

json read_json(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw Error(ErrorCategory::Io, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception &e) {
    throw Error(ErrorCategory::Parse, path + ": " + e.what());
  }
}

ExperimentConfig resolve(const Flags &flags, std::optional<Augmenter> default_augmenter) {
  ExperimentConfig c;
  if (default_augmenter)
    c.augmenter = *default_augmenter;
  if (!flags.config_file.empty())
    c = config_from_json(read_json(flags.config_file), c);
  return config_from_json(flags.overrides, c);
}

void print_table(const ResultTable &t, const std::filesystem::path &dir) {
  for (const auto &f : t.folds) {
    if (f.ok)
      std::cout << "fold " << f.fold << "  test " << f.test_acc << "\n";
    else
      std::cout << "fold " << f.fold << "  FAILED " << f.error << "\n";
  }
  std::cout << "mean " << t.mean << " +- " << t.stddev << (t.partial ? "  (partial)" : "")
            << "\n"
            << "artifacts " << dir.string() << "\n";
}

int run(int argc, char **argv) {
  CLI::App app{"Graph classification with embedding-space augmentation"};
  app.require_subcommand(1);

  Flags prepare_f, train_f, augment_f, influence_f, sweep_f, corrupt_f;
  auto *prepare = app.add_subcommand("prepare", "parse a dataset and write its manifest");
  add_config_flags(*prepare, prepare_f);
  auto *train_cmd = app.add_subcommand("train", "cross-validated training");
  add_config_flags(*train_cmd, train_f);
  auto *augment = app.add_subcommand("augment", "training with an augmenter (default gratin)");
  add_config_flags(*augment, augment_f);
  auto *influence = app.add_subcommand("influence", "average influence of augmented samples");
  add_config_flags(*influence, influence_f);
  int bins = 30;
  influence->add_option("--bins", bins, "histogram bins")->check(CLI::PositiveNumber);
  auto *sweep = app.add_subcommand("filter-sweep", "accuracy against keep_fraction");
  add_config_flags(*sweep, sweep_f);
  std::vector<double> grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  sweep->add_option("--keep-grid", grid, "keep_fraction grid")->delimiter(',');
  auto *corrupt = app.add_subcommand("corrupt", "training on structurally corrupted graphs");
  add_config_flags(*corrupt, corrupt_f);
  auto *report = app.add_subcommand("report", "summarize every table under a results root");
  std::string results_root = "results";
  report->add_option("--results", results_root, "results root");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code(ErrorCategory::Parse);
  }

  if (prepare->parsed()) {
    ExperimentConfig c = resolve(prepare_f, std::nullopt);
    c.normalize();
    const GraphDataset ds = load_dataset(c);
    json manifest = dataset_manifest(ds);
    manifest["config_hash"] = c.hash();
    manifest["seed"] = c.seed;
    const auto path = c.output_dir / c.hash() / "manifest.json";
    write_text(path, manifest.dump(2) + "\n");
    std::cout << manifest.dump(2) << "\n" << "manifest " << path.string() << "\n";
  } else if (train_cmd->parsed() || augment->parsed()) {
    const bool is_augment = augment->parsed();
    ExperimentConfig c = resolve(is_augment ? augment_f : train_f,
                                 is_augment ? std::optional(Augmenter::Gratin) : std::nullopt);
    require(!is_augment || c.augmenter != Augmenter::None, "augment needs an augmenter");
    const RunOutput out = run_experiment(c);
    print_table(out.table, write_artifacts(c, out));
  } else if (corrupt->parsed()) {
    ExperimentConfig c = resolve(corrupt_f, std::nullopt);
    require(c.corruption_budget.has_value(), "corrupt needs --budget");
    const RunOutput out = run_corruption_experiment(c, *c.corruption_budget);
    print_table(out.table, write_artifacts(c, out));
  } else if (influence->parsed()) {
    ExperimentConfig c = resolve(influence_f, Augmenter::Gratin);
    c.normalize();
    FigureInputs in;
    in.histogram_bins = bins;
    in.influence = run_influence(c);
    for (const auto &r : in.influence)
      in.saturation.emplace_back(r.fold, r.saturation);
    const auto dir = c.output_dir / c.hash() / "influence";
    emit_figures(in, dir, c.hash(), c.seed);
    std::cout << "influence figures " << (dir / "figures").string() << "\n";
  } else if (sweep->parsed()) {
    ExperimentConfig c = resolve(sweep_f, Augmenter::GratinFisher);
    c.normalize();
    FigureInputs in;
    in.sweep = run_filter_sweep(c, grid);
    const auto dir = c.output_dir / c.hash() / "filter_sweep";
    emit_figures(in, dir, c.hash(), c.seed);
    for (const auto &row : in.sweep)
      std::cout << "keep " << row.keep_fraction << "  " << row.mean << " +- " << row.stddev
                << "\n";
    std::cout << "filter sweep " << (dir / "figures").string() << "\n";
  } else if (report->parsed()) {
    const json rows = summarize_results(results_root);
    std::cout << rows.dump(2) << "\n";
  }
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  try {
    return run(argc, argv);
  } catch (const gratin::Error &e) {
    std::cerr << "error [" << gratin::category_name(e.category()) << "]: " << e.what() << "\n";
    return gratin::exit_code(e.category());
  } catch (const std::exception &e) {
    std::cerr << "error [internal]: " << e.what() << "\n";
    return 1;
  }
}
