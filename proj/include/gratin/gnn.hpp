#pragma once

#include "gratin/common.hpp"
#include "gratin/datasets.hpp"

#include <Eigen/SparseCore>
#include <json.hpp>

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gratin {

enum class Backbone { GCN, GIN };

std::string to_string(Backbone b);
Backbone parse_backbone(const std::string &s);

// Trainable tensors. Message-passing layer t maps width d_{t-1} to d_t:
// weights[t] is d_{t-1} x d_t and biases[t] has length d_t. The head maps the
// readout (length d_T) to C logits.
struct GnnParams {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  Matrix head_weight; // C x d_T
  Vector head_bias;   // C

  Eigen::Index size() const;
  Vector flatten() const;
  void assign(const Vector &flat);
  GnnParams zeros_like() const;
};

struct GnnModel {
  Backbone backbone = Backbone::GCN;
  std::vector<double> gin_epsilon; // one per layer, fixed
  GnnParams params;

  int num_layers() const { return static_cast<int>(params.weights.size()); }
  int input_dim() const { return static_cast<int>(params.weights.front().rows()); }
  int embedding_dim() const { return static_cast<int>(params.weights.back().cols()); }
  int num_classes() const { return static_cast<int>(params.head_weight.rows()); }

  // Glorot-uniform weights, zero biases.
  static GnnModel create(Backbone backbone, int input_dim, int hidden_dim,
                         int num_layers, int num_classes, Rng &rng);
};

// Graph shift operator: D~^{-1/2} (A + I) D~^{-1/2} for GCN, A for GIN (the
// (1 + eps) H term is applied separately per layer).
Eigen::SparseMatrix<double> shift_operator(const Graph &g, Backbone backbone);

// A graph with its shift operator computed once.
struct PreparedGraph {
  Eigen::SparseMatrix<double> shift;
  Matrix features;
  int label = 0;
};

PreparedGraph prepare(const Graph &g, Backbone backbone);
std::vector<PreparedGraph> prepare(std::span<const Graph> graphs, Backbone backbone);

struct ForwardResult {
  Vector embedding;
  Vector logits;
  Vector probs;
};

ForwardResult forward(const GnnModel &model, const Graph &g);
ForwardResult forward(const GnnModel &model, const PreparedGraph &g);

// Numerically stable log-softmax.
Vector log_softmax(const Vector &logits);
Vector softmax(const Vector &logits);

struct LossAndGrad {
  double loss = 0.0;
  GnnParams grads;
  int predicted = -1; // argmax class; -1 for batch results
};

// Cross-entropy of one graph and its exact gradient.
LossAndGrad loss_and_grad(const GnnModel &model, const Graph &g);
LossAndGrad loss_and_grad(const GnnModel &model, const PreparedGraph &g);

// Mean loss over a batch; also counts correct argmax predictions.
LossAndGrad batch_loss_and_grad(const GnnModel &model,
                                std::span<const PreparedGraph> batch,
                                std::span<const int> members = {},
                                int *correct = nullptr);

struct AdamConfig {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
public:
  explicit Adam(Eigen::Index size, AdamConfig config = {});
  void step(Vector &params, const Vector &grads);
  long steps() const { return t_; }

private:
  AdamConfig config_;
  Vector m_;
  Vector v_;
  long t_ = 0;
};

struct TrainConfig {
  int epochs = 300;
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int hidden_dim = 32;
  int num_layers = 2;
  // 0 means full batch. Mini-batches follow a per-epoch seeded shuffle.
  int batch_size = 0;

  AdamConfig adam() const { return {learning_rate, beta1, beta2, adam_eps}; }
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0; // NaN without a validation slice
};

struct TrainResult {
  GnnModel model;
  std::vector<EpochRecord> history;
};

// Supplies extra training graphs for one epoch (fresh augmentation per epoch).
using EpochAugmenter = std::function<std::vector<Graph>(int epoch)>;

TrainResult train(GnnModel model, std::span<const Graph> train_slice,
                  const TrainConfig &config,
                  std::span<const Graph> val_slice = {},
                  const EpochAugmenter &augmenter = {});

double accuracy(const GnnModel &model, std::span<const Graph> graphs);

void write_history_csv(std::ostream &out, const std::vector<EpochRecord> &history);

struct EmbeddingSet {
  Matrix vectors; // N x d
  std::vector<int> labels;
  std::vector<int> source_ids;

  int size() const { return static_cast<int>(vectors.rows()); }
  int dim() const { return static_cast<int>(vectors.cols()); }
};

// source_ids default to positions in the slice.
EmbeddingSet embed_dataset(const GnnModel &model, std::span<const Graph> slice,
                           std::span<const int> source_ids = {});

// --- post-readout head ------------------------------------------------------

struct HeadLoss {
  double loss = 0.0;
  Matrix grad_weight;
  Vector grad_bias;
};

// Mean cross-entropy of the linear-softmax head over embedding rows.
HeadLoss head_loss_and_grad(const Matrix &head_weight, const Vector &head_bias,
                            const Matrix &embeddings, std::span<const int> labels);

struct FinetuneConfig {
  int epochs = 100;
  double learning_rate = 1e-2;
};

// Head-only Adam on the embeddings; message-passing weights are untouched.
GnnModel finetune_head(GnnModel model, const EmbeddingSet &embeddings,
                       const FinetuneConfig &config = {});

std::vector<int> predict_from_embeddings(const GnnModel &model, const Matrix &embeddings);

// --- diagnostics ------------------------------------------------------------

struct SaturationReport {
  std::vector<double> max_confidence;
  std::vector<double> entropy;
};

double entropy(const Vector &probs);

SaturationReport saturation_report(const GnnModel &model, std::span<const Graph> slice);

// 1/delta + 2 M p / delta^{5/2} with delta the minimum self-loop-augmented
// degree, M the largest 1-norm of A + I, p the largest node count.
double gcn_lipschitz_bound(std::span<const Graph> slice);

// --- checkpoints ------------------------------------------------------------

nlohmann::json to_json(const GnnModel &model);
GnnModel model_from_json(const nlohmann::json &j);

} // namespace gratin
