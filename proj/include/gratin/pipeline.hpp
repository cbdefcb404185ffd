#pragma once

#include "gratin/gmm.hpp"
#include "gratin/gnn.hpp"

#include <chrono>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

namespace gratin {

/// Labeled embeddings drawn from the class-conditional mixtures.
struct AugmentationBatch {
  Matrix vectors; // M_total x d
  std::vector<int> labels;
  std::vector<int> origin_class_counts; // per class

  int size() const { return static_cast<int>(vectors.rows()); }
  AugmentationBatch subset(std::span<const int> rows) const;
};

// Training embeddings followed by the augmented rows (source id -1).
EmbeddingSet merge(const EmbeddingSet &original, const AugmentationBatch &batch);

constexpr int kDefaultComponents = 5;

struct GratinOptions {
  int samples_per_graph = 1;
  std::uint64_t seed = 0;
  // Requested K per class; classes beyond the list use kDefaultComponents.
  std::vector<int> components;
  EmOptions em;
  FinetuneConfig finetune;
  int deviation_pairs = 10000;
};

struct ClassFit {
  int label = 0;
  int n = 0;
  int requested_k = 0;
  int k = 0;
  double loglik = 0.0; // final mean per-sample log-likelihood
  GaussianMixture<double> gmm;
};

struct DeviationStats {
  double mean_dev = 0.0;
  double sup_dev = 0.0;
  bool sup_exact = true;
  long pairs = 0;
};

struct TimingRow {
  std::string phase;
  double seconds = 0.0;
};

class TimingLog {
public:
  class Scope {
  public:
    Scope(TimingLog &log, std::string phase)
        : log_(log), phase_(std::move(phase)), start_(std::chrono::steady_clock::now()) {}
    Scope(const Scope &) = delete;
    Scope &operator=(const Scope &) = delete;
    ~Scope() {
      const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start_;
      log_.rows_.push_back({phase_, elapsed.count()});
    }

  private:
    TimingLog &log_;
    std::string phase_;
    std::chrono::steady_clock::time_point start_;
  };

  // Wall-clock bracket for one section; the row is appended when it closes.
  Scope probe(std::string section) { return Scope(*this, std::move(section)); }

  const std::vector<TimingRow> &rows() const { return rows_; }
  void append(const TimingLog &other) {
    rows_.insert(rows_.end(), other.rows_.begin(), other.rows_.end());
  }

private:
  std::vector<TimingRow> rows_;
};

nlohmann::json to_json(const std::vector<TimingRow> &rows);

struct GratinReport {
  std::vector<ClassFit> per_class;
  DeviationStats deviation;
  TimingLog timings;
  std::vector<std::string> warnings;

  nlohmann::json to_json(bool include_timings = true, bool include_gmms = false) const;
};

/// Per-class GMM fit on the embeddings and M * |D_c| samples per class.
AugmentationBatch augment_embeddings(const EmbeddingSet &embeddings, int num_classes,
                                     const GratinOptions &options,
                                     GratinReport *report = nullptr);

struct GratinResult {
  GnnModel model;
  AugmentationBatch batch;
  EmbeddingSet train_embeddings;
  GratinReport report;
};

/// Embeds the training slice with the trained backbone, augments in embedding
/// space and fine-tunes only the head on original plus augmented rows.
GratinResult run_gratin(const GnnModel &model, std::span<const Graph> train_slice,
                        const GratinOptions &options);

/// Monte Carlo mean of ||h~ - h|| over independent draws and the supremum over
/// all pairs (full scan up to exhaustive_limit pairs, sampled beyond).
DeviationStats embedding_deviation(const Matrix &originals, const Matrix &augmented,
                                   long pairs, std::uint64_t seed,
                                   long exhaustive_limit = 10'000'000);

} // namespace gratin
