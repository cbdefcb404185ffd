#pragma once

#include "gratin/cg.hpp"
#include "gratin/gnn.hpp"
#include "gratin/pipeline.hpp"

#include <Eigen/Cholesky>
#include <iosfwd>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gratin {

// Head parameters are flattened class-major over the bias-augmented input
// [h; 1]: index c * (d + 1) + j, with j == d the bias of class c.
int head_param_count(const GnnModel &model);
Vector head_parameters(const GnnModel &model);
void set_head_parameters(GnnModel &model, const Vector &theta);

// Gradient of -log softmax(W h + b)[label] with respect to the head.
Vector head_gradient(const GnnModel &model, const Vector &embedding, int label);

/// Exact Hessian of the mean head cross-entropy over the embeddings,
/// (1/N) sum_n (diag(p_n) - p_n p_n') kron [h_n;1][h_n;1]', plus damping I.
Matrix head_hessian(const GnnModel &model, const Matrix &embeddings, double damping);

// Damping used when none is given: 1e-4 * trace(H) / dim.
double default_damping(const Matrix &undamped_hessian);

/// Matrix-free product with the undamped head Hessian.
class HeadHessianOperator {
public:
  HeadHessianOperator(const GnnModel &model, const Matrix &embeddings);
  Vector operator()(const Vector &v) const;
  Eigen::Index dim() const { return dim_; }

private:
  Matrix inputs_; // N x (d + 1)
  Matrix probs_;  // N x C
  Eigen::Index dim_ = 0;
};

enum class HessianSolver { Direct, ConjugateGradient };

/// (H + damping I)^{-1} applied either through one Cholesky factorization or
/// through CG with the matrix-free operator.
class InverseHessian {
public:
  InverseHessian(const GnnModel &model, const Matrix &train_embeddings,
                 std::optional<double> damping = std::nullopt,
                 HessianSolver solver = HessianSolver::Direct);

  Vector solve(const Vector &rhs) const;
  double damping() const { return damping_; }
  Eigen::Index dim() const { return dim_; }

private:
  HessianSolver solver_;
  double damping_ = 0.0;
  Eigen::Index dim_ = 0;
  Eigen::LLT<Matrix> llt_;
  std::optional<HeadHessianOperator> op_;
};

/// Influence of upweighting an augmented sample on one evaluation sample,
/// g_eval' (H + damping I)^{-1} g_aug. Positive means the evaluation loss
/// decreases; the loss derivative itself is the negation.
double influence_score(const GnnModel &model, const InverseHessian &inverse,
                       const Vector &aug_embedding, int aug_label,
                       const Vector &eval_embedding, int eval_label);

// Predicted d loss(eval) / d epsilon.
double predicted_loss_derivative(const GnnModel &model, const InverseHessian &inverse,
                                 const Vector &aug_embedding, int aug_label,
                                 const Vector &eval_embedding, int eval_label);

struct InfluenceReport {
  Vector scores; // one per augmented sample
  std::vector<int> ranking; // sample indices by descending score
  std::vector<int> sample_class;
  double hessian_damping = 0.0;
  std::string eval_set;
  int train_count = 0;
  int eval_count = 0;
  int dim = 0;

  nlohmann::json header() const;
  void write_csv(std::ostream &out) const;
};

struct InfluenceOptions {
  std::optional<double> damping;
  HessianSolver solver = HessianSolver::Direct;
  std::string eval_set = "validation";
};

/// Mean influence of each augmented row over the evaluation embeddings. The
/// Hessian is that of the training objective and is factorized once.
InfluenceReport average_influence(const GnnModel &model, const EmbeddingSet &train_embeddings,
                                  const AugmentationBatch &batch,
                                  const EmbeddingSet &eval_embeddings,
                                  const InfluenceOptions &options = {});

// Descending by score; ties keep the lower index first.
std::vector<int> rank_descending(const Vector &scores);

struct Histogram {
  std::vector<double> edges; // bins + 1
  std::vector<int> counts;

  void write_csv(std::ostream &out) const;
};

Histogram histogram(std::span<const double> values, int bins);

struct FilterResult {
  AugmentationBatch kept;
  GnnModel model;
  InfluenceReport report;
};

/// Ranks the candidate pool by average validation influence, keeps the top
/// floor(keep_fraction * M) rows and fine-tunes the head on train plus kept.
FilterResult fisher_filter(const GnnModel &model, const EmbeddingSet &train_embeddings,
                           const AugmentationBatch &pool,
                           const EmbeddingSet &val_embeddings, double keep_fraction,
                           const FinetuneConfig &finetune = {},
                           const InfluenceOptions &options = {});

} // namespace gratin
