#pragma once

#include "gratin/datasets.hpp"
#include "gratin/gnn.hpp"
#include "gratin/influence.hpp"
#include "gratin/pipeline.hpp"

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

namespace gratin {

enum class Augmenter { None, Gratin, GratinFisher, DropEdge, DropNode, ConfigModel };

std::string to_string(Augmenter a);
Augmenter parse_augmenter(const std::string &s);

struct ExperimentConfig {
  std::string dataset = "MUTAG";
  std::filesystem::path data_root = "data";
  Backbone backbone = Backbone::GCN;
  Augmenter augmenter = Augmenter::None;
  TrainConfig train;
  // "table7" looks up K per (dataset, backbone); otherwise an integer.
  std::string gmm_components = "table7";
  std::optional<double> drop_probability;  // dropedge, dropnode
  std::optional<double> rewire_probability; // config_model
  std::optional<int> samples_per_graph;     // gratin, gratin_fisher
  std::optional<double> keep_fraction;      // gratin_fisher
  std::optional<int> pool_multiplier;       // gratin_fisher
  bool augment_per_epoch = false;
  int finetune_epochs = 100;
  double finetune_lr = 1e-2;
  int cv_folds = 10;   // k of the split
  int folds = 10;      // folds actually run, taken from the front
  int degree_cap = 0;  // 0: largest degree in the dataset
  std::uint64_t seed = 0;
  std::optional<double> corruption_budget;

  // Not part of the hash.
  std::filesystem::path output_dir = "results";
  int jobs = 1;

  // Fills defaults for the parameters the augmenter needs; rejects
  // parameters it does not use.
  void normalize();

  nlohmann::json semantic_json() const;
  std::string hash() const;
};

nlohmann::json to_json(const ExperimentConfig &c);
// Keys absent from the JSON keep the values already in `base`.
ExperimentConfig config_from_json(const nlohmann::json &j, ExperimentConfig base = {});

// K from the GMM-size table of the reference experiments, if listed.
std::optional<int> table7_components(const std::string &dataset, Backbone backbone);

struct FoldResult {
  int fold = 0;
  double test_acc = 0.0;
  double val_acc = 0.0;
  bool ok = true;
  std::string error;
};

struct ResultTable {
  std::vector<FoldResult> folds;
  double mean = 0.0;
  double stddev = 0.0;
  bool partial = false;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::optional<double> budget;
  std::vector<TimingRow> timings;

  // Population mean and standard deviation over successful folds.
  void aggregate();
  nlohmann::json to_json(bool include_timings = false) const;
  void write_csv(std::ostream &out) const;
};

// Per-fold artifacts gathered while running; written by write_artifacts.
struct FoldArtifacts {
  int fold = 0;
  GnnModel model;
  std::vector<EpochRecord> history;
  SaturationReport saturation;
  std::optional<GratinReport> gratin;
  std::vector<EditCounts> corruption_edits;
  std::vector<int> train_indices;
};

struct RunOutput {
  ResultTable table;
  std::vector<FoldArtifacts> artifacts;
  nlohmann::json manifest;
};

// Loads the dataset and applies degree features when it has none.
GraphDataset load_dataset(const ExperimentConfig &config);

RunOutput run_experiment(const ExperimentConfig &config);
RunOutput run_corruption_experiment(ExperimentConfig config, double budget);

// results/<hash>/: table.json, table.csv, timings.json, config.json,
// manifest.json, models/, figures/.
std::filesystem::path write_artifacts(const ExperimentConfig &config, const RunOutput &run);

struct InfluenceRun {
  int fold = 0;
  InfluenceReport test;
  InfluenceReport validation;
  SaturationReport saturation;
};

// Trains each fold's backbone, samples GRATIN augmentations and scores them
// against the test and validation embeddings.
std::vector<InfluenceRun> run_influence(const ExperimentConfig &config);

struct SweepRow {
  double keep_fraction = 0.0;
  std::vector<double> fold_acc;
  double mean = 0.0;
  double stddev = 0.0;
};

std::vector<SweepRow> run_filter_sweep(const ExperimentConfig &config,
                                       const std::vector<double> &keep_grid);

struct FigureInputs {
  std::vector<std::pair<int, SaturationReport>> saturation; // per fold
  std::vector<InfluenceRun> influence;
  std::vector<SweepRow> sweep;
  int histogram_bins = 30;
};

// Writes figures/*.csv under dir. Each CSV starts with a comment line naming
// the config hash and seed.
void emit_figures(const FigureInputs &inputs, const std::filesystem::path &dir,
                  const std::string &config_hash, std::uint64_t seed);

// Reads every results/<hash>/table.json under root and writes summary.csv.
nlohmann::json summarize_results(const std::filesystem::path &root);

void write_text(const std::filesystem::path &path, const std::string &text);

} // namespace gratin
