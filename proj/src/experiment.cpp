#include "gratin/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace gratin {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct AugmenterName {
  Augmenter value;
  const char *name;
};

constexpr AugmenterName kAugmenters[] = {
    {Augmenter::None, "none"},          {Augmenter::Gratin, "gratin"},
    {Augmenter::GratinFisher, "gratin_fisher"}, {Augmenter::DropEdge, "dropedge"},
    {Augmenter::DropNode, "dropnode"},  {Augmenter::ConfigModel, "config_model"},
};

bool uses_drop(Augmenter a) { return a == Augmenter::DropEdge || a == Augmenter::DropNode; }
bool uses_gmm(Augmenter a) { return a == Augmenter::Gratin || a == Augmenter::GratinFisher; }
bool is_structural(Augmenter a) { return uses_drop(a) || a == Augmenter::ConfigModel; }

std::string number(double x) { return json(x).dump(); }

std::string csv_preamble(const std::string &hash, std::uint64_t seed) {
  return "# config_hash=" + hash + " seed=" + std::to_string(seed) + "\n";
}

std::uint64_t fnv1a(const std::string &text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::pair<double, double> mean_std(const std::vector<double> &xs) {
  if (xs.empty())
    return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double mean = 0.0;
  for (double x : xs)
    mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs)
    var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

template <class T>
T get_field(const json &j, const char *key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception &e) {
    throw Error(ErrorCategory::Parse, std::string("config field '") + key + "': " + e.what());
  }
}

std::vector<Graph> pick(const GraphDataset &ds, const std::vector<int> &idx) {
  std::vector<Graph> out;
  out.reserve(idx.size());
  for (int i : idx)
    out.push_back(ds.graphs[i]);
  return out;
}

std::vector<int> resolve_components(const ExperimentConfig &c, int num_classes,
                                    std::vector<std::string> *warnings) {
  int k = kDefaultComponents;
  if (c.gmm_components == "table7") {
    if (auto t = table7_components(c.dataset, c.backbone))
      k = *t;
    else if (warnings)
      warnings->push_back("no tabulated K for " + c.dataset + "; using " +
                          std::to_string(kDefaultComponents));
  } else {
    k = std::stoi(c.gmm_components);
  }
  return std::vector<int>(num_classes, k);
}

GratinOptions gratin_options(const ExperimentConfig &c, int num_classes, std::uint64_t seed,
                             int samples_per_graph, std::vector<std::string> *warnings) {
  GratinOptions o;
  o.samples_per_graph = samples_per_graph;
  o.seed = seed;
  o.components = resolve_components(c, num_classes, warnings);
  o.finetune = {c.finetune_epochs, c.finetune_lr};
  return o;
}

Graph structural_augment(const ExperimentConfig &c, const Graph &g, Rng &rng) {
  switch (c.augmenter) {
  case Augmenter::DropEdge:
    return drop_edge(g, *c.drop_probability, rng);
  case Augmenter::DropNode:
    return drop_node(g, *c.drop_probability, rng);
  case Augmenter::ConfigModel:
    return configuration_rewire(g, *c.rewire_probability, rng).graph;
  default:
    throw Error(ErrorCategory::Contract, "structural_augment: not a structural augmenter");
  }
}

// One fold with its slices materialized.
struct FoldData {
  int fold = 0;
  std::uint64_t seed = 0;
  std::vector<Graph> train, val, test;
  std::vector<int> train_indices;
};

FoldData fold_data(const ExperimentConfig &c, const GraphDataset &ds, const FoldSplit &split) {
  FoldData f;
  f.fold = split.fold_index;
  f.seed = derive_seed(c.seed, "fold", static_cast<std::uint64_t>(split.fold_index));
  f.train = pick(ds, split.train_indices);
  f.val = pick(ds, split.val_indices);
  f.test = pick(ds, split.test_indices);
  f.train_indices = split.train_indices;
  return f;
}

TrainConfig fold_train_config(const ExperimentConfig &c, const FoldData &f) {
  TrainConfig t = c.train;
  t.seed = derive_seed(f.seed, "batch-order");
  return t;
}

GnnModel initial_model(const ExperimentConfig &c, const GraphDataset &ds, const FoldData &f) {
  Rng rng(derive_seed(f.seed, "init"));
  return GnnModel::create(c.backbone, ds.feature_dim, c.train.hidden_dim, c.train.num_layers,
                          ds.num_classes, rng);
}

TrainResult train_backbone(const ExperimentConfig &c, const GraphDataset &ds, const FoldData &f,
                           TimingLog &timings) {
  auto probe = timings.probe("train");
  return train(initial_model(c, ds, f), f.train, fold_train_config(c, f), f.val);
}

struct FoldOutcome {
  FoldResult result;
  FoldArtifacts artifacts;
  TimingLog timings;
};

FoldOutcome run_fold(const ExperimentConfig &c, const GraphDataset &ds, FoldData f) {
  FoldOutcome out;
  out.result.fold = f.fold;
  out.artifacts.fold = f.fold;
  out.artifacts.train_indices = f.train_indices;

  if (c.corruption_budget) {
    Rng rng(derive_seed(f.seed, "corrupt"));
    for (auto &g : f.train) {
      EditCounts counts;
      g = corrupt_graph(g, *c.corruption_budget, rng, 0.5, &counts);
      out.artifacts.corruption_edits.push_back(counts);
    }
  }

  const TrainConfig tc = fold_train_config(c, f);
  GnnModel model;
  if (is_structural(c.augmenter)) {
    const std::uint64_t aug_seed = derive_seed(f.seed, "augment");
    TrainResult tr;
    auto probe = out.timings.probe("train");
    if (c.augment_per_epoch) {
      EpochAugmenter fresh = [&](int epoch) {
        Rng rng(derive_seed(aug_seed, "epoch", static_cast<std::uint64_t>(epoch)));
        std::vector<Graph> extra;
        extra.reserve(f.train.size());
        for (const auto &g : f.train)
          extra.push_back(structural_augment(c, g, rng));
        return extra;
      };
      tr = train(initial_model(c, ds, f), f.train, tc, f.val, fresh);
    } else {
      Rng rng(aug_seed);
      std::vector<Graph> combined = f.train;
      for (const auto &g : f.train)
        combined.push_back(structural_augment(c, g, rng));
      tr = train(initial_model(c, ds, f), combined, tc, f.val);
    }
    model = std::move(tr.model);
    out.artifacts.history = std::move(tr.history);
  } else {
    TrainResult tr = train_backbone(c, ds, f, out.timings);
    out.artifacts.history = std::move(tr.history);
    model = std::move(tr.model);
    const std::uint64_t gseed = derive_seed(f.seed, "gratin");
    if (c.augmenter == Augmenter::Gratin) {
      GratinReport dummy;
      auto opts = gratin_options(c, ds.num_classes, gseed, *c.samples_per_graph, &dummy.warnings);
      GratinResult gr = run_gratin(model, f.train, opts);
      gr.report.warnings.insert(gr.report.warnings.begin(), dummy.warnings.begin(),
                                dummy.warnings.end());
      model = std::move(gr.model);
      out.timings.append(gr.report.timings);
      out.artifacts.gratin = std::move(gr.report);
    } else if (c.augmenter == Augmenter::GratinFisher) {
      require(!f.val.empty(), "gratin_fisher needs a non-empty validation slice");
      GratinReport report;
      auto opts = gratin_options(c, ds.num_classes, gseed,
                                 *c.samples_per_graph * *c.pool_multiplier, &report.warnings);
      EmbeddingSet train_emb, val_emb;
      {
        auto probe = report.timings.probe("embed");
        train_emb = embed_dataset(model, f.train);
        val_emb = embed_dataset(model, f.val);
      }
      AugmentationBatch pool = augment_embeddings(train_emb, ds.num_classes, opts, &report);
      FilterResult fr;
      {
        auto probe = report.timings.probe("filter");
        fr = fisher_filter(model, train_emb, pool, val_emb, *c.keep_fraction, opts.finetune);
      }
      model = std::move(fr.model);
      out.timings.append(report.timings);
      out.artifacts.gratin = std::move(report);
    }
  }

  {
    auto probe = out.timings.probe("evaluate");
    out.result.test_acc = 100.0 * accuracy(model, f.test);
    out.result.val_acc = f.val.empty() ? std::numeric_limits<double>::quiet_NaN()
                                       : 100.0 * accuracy(model, f.val);
    out.artifacts.saturation = saturation_report(model, f.test);
  }
  out.artifacts.model = std::move(model);
  return out;
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads.
template <class Fn>
void parallel_for(int n, int jobs, Fn fn) {
  jobs = std::clamp(jobs, 1, std::max(1, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i)
      fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> workers;
  for (int w = 0; w < jobs; ++w)
    workers.emplace_back([&] {
      for (int i = next++; i < n; i = next++)
        fn(i);
    });
  for (auto &t : workers)
    t.join();
}

std::string describe(const std::exception &e) {
  if (const auto *ge = dynamic_cast<const Error *>(&e))
    return std::string(category_name(ge->category())) + ": " + ge->what();
  return std::string("internal: ") + e.what();
}

std::vector<FoldSplit> selected_folds(const ExperimentConfig &c, const GraphDataset &ds) {
  auto splits = make_folds(ds, c.cv_folds, derive_seed(c.seed, "fold-split"));
  splits.resize(c.folds);
  return splits;
}

} // namespace

std::string to_string(Augmenter a) {
  for (const auto &e : kAugmenters)
    if (e.value == a)
      return e.name;
  return "unknown";
}

Augmenter parse_augmenter(const std::string &s) {
  for (const auto &e : kAugmenters)
    if (s == e.name)
      return e.value;
  throw Error(ErrorCategory::Parse, "unknown augmenter '" + s + "'");
}

std::optional<int> table7_components(const std::string &dataset, Backbone backbone) {
  static const std::map<std::string, std::pair<int, int>> table = {
      {"IMDB-BINARY", {40, 50}}, {"IMDB-MULTI", {50, 5}}, {"MUTAG", {10, 2}},
      {"PROTEINS", {10, 2}},     {"DD", {2, 50}},
  };
  auto it = table.find(dataset);
  if (it == table.end())
    return std::nullopt;
  return backbone == Backbone::GCN ? it->second.first : it->second.second;
}

void ExperimentConfig::normalize() {
  const std::string aug = to_string(augmenter);
  auto reject = [&](bool present, const char *field) {
    if (present)
      throw Error(ErrorCategory::Contract,
                  std::string(field) + " is not used by augmenter '" + aug + "'");
  };

  if (uses_drop(augmenter)) {
    if (!drop_probability)
      drop_probability = 0.2;
  } else {
    reject(drop_probability.has_value(), "p");
  }
  if (augmenter == Augmenter::ConfigModel) {
    if (!rewire_probability)
      rewire_probability = 0.2;
  } else {
    reject(rewire_probability.has_value(), "r");
  }
  if (uses_gmm(augmenter)) {
    if (!samples_per_graph)
      samples_per_graph = 1;
  } else {
    reject(samples_per_graph.has_value(), "M");
    reject(gmm_components != "table7", "gmm_components");
  }
  if (augmenter == Augmenter::GratinFisher) {
    if (!keep_fraction)
      keep_fraction = 0.5;
    if (!pool_multiplier)
      pool_multiplier = 4;
  } else {
    reject(keep_fraction.has_value(), "keep_fraction");
    reject(pool_multiplier.has_value(), "pool_multiplier");
  }
  reject(augment_per_epoch && !is_structural(augmenter), "augment_per_epoch");

  if (gmm_components != "table7") {
    std::size_t used = 0;
    int k = 0;
    try {
      k = std::stoi(gmm_components, &used);
    } catch (const std::exception &) {
      used = 0;
    }
    require(used == gmm_components.size() && k >= 1,
            "gmm_components must be a positive integer or \"table7\"");
  }
  if (drop_probability)
    require(*drop_probability >= 0.0 && *drop_probability <= 1.0, "p must lie in [0, 1]");
  if (rewire_probability)
    require(*rewire_probability >= 0.0 && *rewire_probability <= 1.0, "r must lie in [0, 1]");
  if (samples_per_graph)
    require(*samples_per_graph >= 1, "M must be at least 1");
  if (keep_fraction)
    require(*keep_fraction >= 0.0 && *keep_fraction <= 1.0, "keep_fraction must lie in [0, 1]");
  if (pool_multiplier)
    require(*pool_multiplier >= 1, "pool_multiplier must be at least 1");
  if (corruption_budget)
    require(*corruption_budget >= 0.0 && *corruption_budget < 1.0,
            "budget must lie in [0, 1)");
  require(cv_folds >= 2, "cv_folds must be at least 2");
  require(folds >= 1 && folds <= cv_folds, "folds must lie in [1, cv_folds]");
  require(train.epochs >= 0, "epochs must be nonnegative");
  require(train.hidden_dim >= 1 && train.num_layers >= 1, "hidden_dim and num_layers must be positive");
  require(train.batch_size >= 0, "batch_size must be nonnegative");
  require(finetune_epochs >= 0, "finetune_epochs must be nonnegative");
  require(degree_cap >= 0, "degree_cap must be nonnegative");
  require(jobs >= 1, "jobs must be positive");
}

json ExperimentConfig::semantic_json() const {
  json j = {{"dataset", dataset},
            {"backbone", to_string(backbone)},
            {"augmenter", to_string(augmenter)},
            {"epochs", train.epochs},
            {"learning_rate", train.learning_rate},
            {"beta1", train.beta1},
            {"beta2", train.beta2},
            {"adam_eps", train.adam_eps},
            {"hidden_dim", train.hidden_dim},
            {"num_layers", train.num_layers},
            {"batch_size", train.batch_size},
            {"cv_folds", cv_folds},
            {"folds", folds},
            {"degree_cap", degree_cap},
            {"seed", seed}};
  if (uses_gmm(augmenter)) {
    j["gmm_components"] = gmm_components;
    j["finetune_epochs"] = finetune_epochs;
    j["finetune_lr"] = finetune_lr;
  }
  if (is_structural(augmenter))
    j["augment_per_epoch"] = augment_per_epoch;
  if (drop_probability)
    j["p"] = *drop_probability;
  if (rewire_probability)
    j["r"] = *rewire_probability;
  if (samples_per_graph)
    j["M"] = *samples_per_graph;
  if (keep_fraction)
    j["keep_fraction"] = *keep_fraction;
  if (pool_multiplier)
    j["pool_multiplier"] = *pool_multiplier;
  if (corruption_budget)
    j["budget"] = *corruption_budget;
  return j;
}

std::string ExperimentConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(semantic_json().dump())));
  return buf;
}

json to_json(const ExperimentConfig &c) {
  json j = c.semantic_json();
  j["data_root"] = c.data_root.string();
  j["output_dir"] = c.output_dir.string();
  j["jobs"] = c.jobs;
  return j;
}

ExperimentConfig config_from_json(const json &j, ExperimentConfig c) {
  if (!j.is_object())
    throw Error(ErrorCategory::Parse, "config must be a JSON object");
  for (const auto &[key, value] : j.items()) {
    if (key == "dataset") c.dataset = get_field<std::string>(j, "dataset");
    else if (key == "data_root") c.data_root = get_field<std::string>(j, "data_root");
    else if (key == "backbone") c.backbone = parse_backbone(get_field<std::string>(j, "backbone"));
    else if (key == "augmenter") c.augmenter = parse_augmenter(get_field<std::string>(j, "augmenter"));
    else if (key == "epochs") c.train.epochs = get_field<int>(j, "epochs");
    else if (key == "learning_rate") c.train.learning_rate = get_field<double>(j, "learning_rate");
    else if (key == "beta1") c.train.beta1 = get_field<double>(j, "beta1");
    else if (key == "beta2") c.train.beta2 = get_field<double>(j, "beta2");
    else if (key == "adam_eps") c.train.adam_eps = get_field<double>(j, "adam_eps");
    else if (key == "hidden_dim") c.train.hidden_dim = get_field<int>(j, "hidden_dim");
    else if (key == "num_layers") c.train.num_layers = get_field<int>(j, "num_layers");
    else if (key == "batch_size") c.train.batch_size = get_field<int>(j, "batch_size");
    else if (key == "gmm_components")
      c.gmm_components = value.is_number_integer() ? std::to_string(value.get<int>())
                                                   : get_field<std::string>(j, "gmm_components");
    else if (key == "p") c.drop_probability = get_field<double>(j, "p");
    else if (key == "r") c.rewire_probability = get_field<double>(j, "r");
    else if (key == "M") c.samples_per_graph = get_field<int>(j, "M");
    else if (key == "keep_fraction") c.keep_fraction = get_field<double>(j, "keep_fraction");
    else if (key == "pool_multiplier") c.pool_multiplier = get_field<int>(j, "pool_multiplier");
    else if (key == "augment_per_epoch") c.augment_per_epoch = get_field<bool>(j, "augment_per_epoch");
    else if (key == "finetune_epochs") c.finetune_epochs = get_field<int>(j, "finetune_epochs");
    else if (key == "finetune_lr") c.finetune_lr = get_field<double>(j, "finetune_lr");
    else if (key == "cv_folds") c.cv_folds = get_field<int>(j, "cv_folds");
    else if (key == "folds") c.folds = get_field<int>(j, "folds");
    else if (key == "degree_cap") c.degree_cap = get_field<int>(j, "degree_cap");
    else if (key == "seed") c.seed = get_field<std::uint64_t>(j, "seed");
    else if (key == "budget") c.corruption_budget = get_field<double>(j, "budget");
    else if (key == "output_dir") c.output_dir = get_field<std::string>(j, "output_dir");
    else if (key == "jobs") c.jobs = get_field<int>(j, "jobs");
    else throw Error(ErrorCategory::Parse, "unknown config field '" + key + "'");
  }
  return c;
}

void ResultTable::aggregate() {
  std::sort(folds.begin(), folds.end(),
            [](const FoldResult &a, const FoldResult &b) { return a.fold < b.fold; });
  std::vector<double> accs;
  partial = false;
  for (const auto &f : folds) {
    if (f.ok)
      accs.push_back(f.test_acc);
    else
      partial = true;
  }
  std::tie(mean, stddev) = mean_std(accs);
}

json ResultTable::to_json(bool include_timings) const {
  json rows = json::array();
  for (const auto &f : folds) {
    json r = {{"fold", f.fold}, {"status", f.ok ? "ok" : "failed"}};
    if (f.ok) {
      r["test_acc"] = f.test_acc;
      r["val_acc"] = std::isnan(f.val_acc) ? json(nullptr) : json(f.val_acc);
    } else {
      r["error"] = f.error;
    }
    rows.push_back(std::move(r));
  }
  json j = {{"config_hash", config_hash},
            {"seed", seed},
            {"folds", rows},
            {"mean", std::isnan(mean) ? json(nullptr) : json(mean)},
            {"std", std::isnan(stddev) ? json(nullptr) : json(stddev)},
            {"partial", partial}};
  if (budget)
    j["budget"] = *budget;
  if (include_timings)
    j["timings"] = gratin::to_json(timings);
  return j;
}

void ResultTable::write_csv(std::ostream &out) const {
  out << csv_preamble(config_hash, seed);
  out << "fold,test_acc,val_acc,status,error\n";
  for (const auto &f : folds) {
    out << f.fold << ',';
    if (f.ok)
      out << number(f.test_acc) << ',' << (std::isnan(f.val_acc) ? "" : number(f.val_acc))
          << ",ok,\n";
    else
      out << ",,failed," << json(f.error).dump() << '\n';
  }
}

GraphDataset load_dataset(const ExperimentConfig &c) {
  GraphDataset ds = parse_tud_dataset(c.data_root / c.dataset, c.dataset);
  if (ds.feature_dim == 0) {
    const int cap = c.degree_cap > 0 ? c.degree_cap : std::max(1, max_degree(ds));
    ds = degree_onehot_features(ds, cap);
  }
  return ds;
}

RunOutput run_experiment(const ExperimentConfig &config_in) {
  ExperimentConfig config = config_in;
  config.normalize();
  const GraphDataset ds = load_dataset(config);
  const auto splits = selected_folds(config, ds);

  std::vector<std::optional<FoldOutcome>> outcomes(splits.size());
  std::vector<std::string> failures(splits.size());
  parallel_for(static_cast<int>(splits.size()), config.jobs, [&](int i) {
    try {
      outcomes[i] = run_fold(config, ds, fold_data(config, ds, splits[i]));
    } catch (const std::exception &e) {
      failures[i] = describe(e);
    }
  });

  RunOutput run;
  run.manifest = dataset_manifest(ds);
  run.table.config_hash = config.hash();
  run.table.seed = config.seed;
  run.table.budget = config.corruption_budget;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (!outcomes[i]) {
      FoldResult r;
      r.fold = splits[i].fold_index;
      r.ok = false;
      r.error = failures[i];
      run.table.folds.push_back(r);
      continue;
    }
    run.table.folds.push_back(outcomes[i]->result);
    for (const auto &row : outcomes[i]->timings.rows())
      run.table.timings.push_back(
          {"fold" + std::to_string(splits[i].fold_index) + "/" + row.phase, row.seconds});
    run.artifacts.push_back(std::move(outcomes[i]->artifacts));
  }
  run.table.aggregate();
  return run;
}

RunOutput run_corruption_experiment(ExperimentConfig config, double budget) {
  config.corruption_budget = budget;
  return run_experiment(config);
}

void write_text(const fs::path &path, const std::string &text) {
  if (path.has_parent_path())
    fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error(ErrorCategory::Io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out)
    throw Error(ErrorCategory::Io, "write failed for " + path.string());
}

fs::path write_artifacts(const ExperimentConfig &config_in, const RunOutput &run) {
  ExperimentConfig config = config_in;
  config.normalize();
  const std::string hash = config.hash();
  const fs::path dir = config.output_dir / hash;
  const auto stamp = [&](json j) {
    j["config_hash"] = hash;
    j["seed"] = config.seed;
    return j;
  };

  write_text(dir / "config.json", stamp(config.semantic_json()).dump(2) + "\n");
  write_text(dir / "manifest.json", stamp(run.manifest).dump(2) + "\n");
  write_text(dir / "table.json", run.table.to_json(false).dump(2) + "\n");
  {
    std::ostringstream csv;
    run.table.write_csv(csv);
    write_text(dir / "table.csv", csv.str());
  }

  json timings = stamp(json::object());
  timings["timings"] = to_json(run.table.timings);
  write_text(dir / "timings.json", timings.dump(2) + "\n");

  FigureInputs figures;
  std::ostringstream edits;
  edits << csv_preamble(hash, config.seed) << "fold,graph,requested,removed,inserted,skipped\n";
  for (const auto &a : run.artifacts) {
    const std::string tag = "fold" + std::to_string(a.fold);
    json model = stamp({{"fold", a.fold}, {"model", to_json(a.model)}});
    write_text(dir / "models" / (tag + ".json"), model.dump() + "\n");
    if (a.gratin) {
      json rep = stamp(a.gratin->to_json(false, true));
      rep["fold"] = a.fold;
      write_text(dir / "models" / (tag + "_gmm.json"), rep.dump() + "\n");
    }
    std::ostringstream hist;
    hist << csv_preamble(hash, config.seed);
    write_history_csv(hist, a.history);
    write_text(dir / "figures" / ("history_" + tag + ".csv"), hist.str());
    figures.saturation.emplace_back(a.fold, a.saturation);
    for (std::size_t g = 0; g < a.corruption_edits.size(); ++g) {
      const auto &e = a.corruption_edits[g];
      edits << a.fold << ',' << a.train_indices[g] << ',' << e.requested << ',' << e.removed
            << ',' << e.inserted << ',' << e.skipped << '\n';
    }
  }
  if (config.corruption_budget)
    write_text(dir / "corruption_edits.csv", edits.str());
  if (!figures.saturation.empty())
    emit_figures(figures, dir, hash, config.seed);
  return dir;
}

std::vector<InfluenceRun> run_influence(const ExperimentConfig &config_in) {
  ExperimentConfig config = config_in;
  config.normalize();
  const GraphDataset ds = load_dataset(config);
  const auto splits = selected_folds(config, ds);
  const int samples = config.samples_per_graph.value_or(1);

  std::vector<InfluenceRun> runs(splits.size());
  std::vector<std::string> failures(splits.size());
  parallel_for(static_cast<int>(splits.size()), config.jobs, [&](int i) {
    try {
      FoldData f = fold_data(config, ds, splits[i]);
      TimingLog timings;
      GnnModel model = train_backbone(config, ds, f, timings).model;
      auto opts = gratin_options(config, ds.num_classes, derive_seed(f.seed, "gratin"), samples,
                                 nullptr);
      EmbeddingSet train_emb = embed_dataset(model, f.train);
      AugmentationBatch batch = augment_embeddings(train_emb, ds.num_classes, opts);
      InfluenceRun &r = runs[i];
      r.fold = f.fold;
      r.test = average_influence(model, train_emb, batch, embed_dataset(model, f.test),
                                 {std::nullopt, HessianSolver::Direct, "test"});
      if (!f.val.empty())
        r.validation = average_influence(model, train_emb, batch, embed_dataset(model, f.val),
                                         {std::nullopt, HessianSolver::Direct, "validation"});
      r.saturation = saturation_report(model, f.test);
    } catch (const std::exception &e) {
      failures[i] = describe(e);
    }
  });
  for (std::size_t i = 0; i < failures.size(); ++i)
    if (!failures[i].empty())
      throw Error(ErrorCategory::Numerical,
                  "influence fold " + std::to_string(splits[i].fold_index) + ": " + failures[i]);
  return runs;
}

std::vector<SweepRow> run_filter_sweep(const ExperimentConfig &config_in,
                                       const std::vector<double> &keep_grid) {
  require(!keep_grid.empty(), "filter sweep needs at least one keep_fraction");
  for (double k : keep_grid)
    require(k >= 0.0 && k <= 1.0, "keep_fraction grid values must lie in [0, 1]");
  ExperimentConfig config = config_in;
  config.normalize();
  const GraphDataset ds = load_dataset(config);
  const auto splits = selected_folds(config, ds);
  const int samples = config.samples_per_graph.value_or(1) * config.pool_multiplier.value_or(4);

  std::vector<std::vector<double>> acc(splits.size());
  std::vector<std::string> failures(splits.size());
  parallel_for(static_cast<int>(splits.size()), config.jobs, [&](int i) {
    try {
      FoldData f = fold_data(config, ds, splits[i]);
      require(!f.val.empty(), "filter sweep needs a non-empty validation slice");
      TimingLog timings;
      GnnModel model = train_backbone(config, ds, f, timings).model;
      auto opts = gratin_options(config, ds.num_classes, derive_seed(f.seed, "gratin"), samples,
                                 nullptr);
      EmbeddingSet train_emb = embed_dataset(model, f.train);
      EmbeddingSet val_emb = embed_dataset(model, f.val);
      AugmentationBatch pool = augment_embeddings(train_emb, ds.num_classes, opts);
      for (double keep : keep_grid) {
        FilterResult fr = fisher_filter(model, train_emb, pool, val_emb, keep, opts.finetune);
        acc[i].push_back(100.0 * accuracy(fr.model, f.test));
      }
    } catch (const std::exception &e) {
      failures[i] = describe(e);
    }
  });
  for (std::size_t i = 0; i < failures.size(); ++i)
    if (!failures[i].empty())
      throw Error(ErrorCategory::Numerical,
                  "filter sweep fold " + std::to_string(splits[i].fold_index) + ": " +
                      failures[i]);

  std::vector<SweepRow> rows;
  for (std::size_t g = 0; g < keep_grid.size(); ++g) {
    SweepRow row;
    row.keep_fraction = keep_grid[g];
    for (const auto &fold : acc)
      row.fold_acc.push_back(fold[g]);
    std::tie(row.mean, row.stddev) = mean_std(row.fold_acc);
    rows.push_back(std::move(row));
  }
  return rows;
}

void emit_figures(const FigureInputs &in, const fs::path &dir, const std::string &hash,
                  std::uint64_t seed) {
  if (in.saturation.empty() && in.influence.empty() && in.sweep.empty())
    throw Error(ErrorCategory::Contract,
                "emit_figures: no saturation, influence or filter-sweep report given");
  const fs::path fig = dir / "figures";
  const std::string pre = csv_preamble(hash, seed);

  if (!in.saturation.empty()) {
    std::ostringstream out;
    out << pre << "fold,graph,max_confidence,entropy\n";
    for (const auto &[fold, rep] : in.saturation)
      for (std::size_t g = 0; g < rep.entropy.size(); ++g)
        out << fold << ',' << g << ',' << number(rep.max_confidence[g]) << ','
            << number(rep.entropy[g]) << '\n';
    write_text(fig / "saturation.csv", out.str());
  }

  for (const auto &run : in.influence) {
    if (run.test.eval_set.empty() && run.validation.eval_set.empty())
      throw Error(ErrorCategory::Contract,
                  "emit_figures: fold " + std::to_string(run.fold) + " has no influence report");
    for (const InfluenceReport *rep : {&run.test, &run.validation}) {
      if (rep->eval_set.empty())
        continue;
      if (rep->scores.size() == 0)
        throw Error(ErrorCategory::Contract, "emit_figures: influence report for fold " +
                                                 std::to_string(run.fold) + " (" +
                                                 rep->eval_set + ") is empty");
      const std::string tag = rep->eval_set + "_fold" + std::to_string(run.fold);
      std::ostringstream scores, hist;
      scores << pre;
      rep->write_csv(scores);
      write_text(fig / ("influence_" + tag + ".csv"), scores.str());
      json header = rep->header();
      header["config_hash"] = hash;
      header["seed"] = seed;
      write_text(fig / ("influence_" + tag + ".json"), header.dump(2) + "\n");
      std::vector<double> values(rep->scores.data(), rep->scores.data() + rep->scores.size());
      hist << pre;
      histogram(values, in.histogram_bins).write_csv(hist);
      write_text(fig / ("influence_hist_" + tag + ".csv"), hist.str());
    }
  }

  if (!in.sweep.empty()) {
    std::ostringstream summary, per_fold;
    summary << pre << "keep_fraction,mean_acc,std_acc,folds\n";
    per_fold << pre << "keep_fraction,fold,test_acc\n";
    for (const auto &row : in.sweep) {
      summary << number(row.keep_fraction) << ',' << number(row.mean) << ','
              << number(row.stddev) << ',' << row.fold_acc.size() << '\n';
      for (std::size_t f = 0; f < row.fold_acc.size(); ++f)
        per_fold << number(row.keep_fraction) << ',' << f << ',' << number(row.fold_acc[f])
                 << '\n';
    }
    write_text(fig / "filter_sweep.csv", summary.str());
    write_text(fig / "filter_sweep_folds.csv", per_fold.str());
  }
}

json summarize_results(const fs::path &root) {
  if (!fs::is_directory(root))
    throw Error(ErrorCategory::Io, "results directory " + root.string() + " does not exist");
  std::vector<fs::path> dirs;
  for (const auto &entry : fs::directory_iterator(root))
    if (entry.is_directory() && fs::exists(entry.path() / "table.json"))
      dirs.push_back(entry.path());
  if (dirs.empty())
    throw Error(ErrorCategory::Io, "no table.json found under " + root.string());
  std::sort(dirs.begin(), dirs.end());

  auto load = [](const fs::path &p) {
    std::ifstream in(p);
    if (!in)
      throw Error(ErrorCategory::Io, "missing report " + p.string());
    try {
      return json::parse(in);
    } catch (const json::exception &e) {
      throw Error(ErrorCategory::Parse, p.string() + ": " + e.what());
    }
  };

  json rows = json::array();
  std::ostringstream csv;
  csv << "config_hash,seed,dataset,backbone,augmenter,budget,folds,mean,std,partial\n";
  for (const auto &d : dirs) {
    const json table = load(d / "table.json");
    const json config = load(d / "config.json");
    json row = {{"config_hash", table.at("config_hash")},
                {"seed", table.at("seed")},
                {"dataset", config.at("dataset")},
                {"backbone", config.at("backbone")},
                {"augmenter", config.at("augmenter")},
                {"budget", table.value("budget", json(nullptr))},
                {"folds", table.at("folds").size()},
                {"mean", table.at("mean")},
                {"std", table.at("std")},
                {"partial", table.at("partial")}};
    auto cell = [](const json &v) {
      if (v.is_null())
        return std::string();
      return v.is_string() ? v.get<std::string>() : v.dump();
    };
    csv << cell(row["config_hash"]) << ',' << cell(row["seed"]) << ',' << cell(row["dataset"])
        << ',' << cell(row["backbone"]) << ',' << cell(row["augmenter"]) << ','
        << cell(row["budget"]) << ',' << cell(row["folds"]) << ',' << cell(row["mean"]) << ','
        << cell(row["std"]) << ',' << cell(row["partial"]) << '\n';
    rows.push_back(std::move(row));
  }
  write_text(root / "summary.csv", csv.str());
  return rows;
}

} // namespace gratin
