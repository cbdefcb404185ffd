#include "gratin/influence.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

namespace gratin {

namespace {

Matrix with_bias_column(const Matrix &embeddings) {
  Matrix x(embeddings.rows(), embeddings.cols() + 1);
  x.leftCols(embeddings.cols()) = embeddings;
  x.col(embeddings.cols()).setOnes();
  return x;
}

Matrix head_probs(const GnnModel &model, const Matrix &embeddings) {
  Matrix logits = embeddings * model.params.head_weight.transpose();
  logits.rowwise() += model.params.head_bias.transpose();
  Matrix probs(logits.rows(), logits.cols());
  for (Eigen::Index n = 0; n < logits.rows(); ++n)
    probs.row(n) = softmax(logits.row(n).transpose()).transpose();
  if (!probs.allFinite())
    throw Error(ErrorCategory::Contract, "head produced non-finite probabilities");
  return probs;
}

// (1/N) sum_n tr(B_n) ||x_n||^2, the trace of the undamped Hessian.
double hessian_trace(const Matrix &inputs, const Matrix &probs) {
  if (inputs.rows() == 0)
    return 0.0;
  const Vector curvature = (probs.array() * (1.0 - probs.array())).rowwise().sum();
  return curvature.dot(inputs.rowwise().squaredNorm()) / static_cast<double>(inputs.rows());
}

double damping_from_trace(double trace, Eigen::Index dim) {
  return std::max(1e-4 * trace / static_cast<double>(dim), 1e-12);
}

} // namespace

int head_param_count(const GnnModel &model) {
  return model.num_classes() * (model.embedding_dim() + 1);
}

Vector head_parameters(const GnnModel &model) {
  const int c_count = model.num_classes();
  const int d = model.embedding_dim();
  Vector theta(head_param_count(model));
  for (int c = 0; c < c_count; ++c) {
    theta.segment(c * (d + 1), d) = model.params.head_weight.row(c).transpose();
    theta(c * (d + 1) + d) = model.params.head_bias(c);
  }
  return theta;
}

void set_head_parameters(GnnModel &model, const Vector &theta) {
  require(theta.size() == head_param_count(model), "head parameter length mismatch");
  const int d = model.embedding_dim();
  for (int c = 0; c < model.num_classes(); ++c) {
    model.params.head_weight.row(c) = theta.segment(c * (d + 1), d).transpose();
    model.params.head_bias(c) = theta(c * (d + 1) + d);
  }
}

Vector head_gradient(const GnnModel &model, const Vector &embedding, int label) {
  require(embedding.size() == model.embedding_dim(), "head_gradient: width mismatch");
  require(label >= 0 && label < model.num_classes(), "head_gradient: label out of range");
  const int d = model.embedding_dim();
  Vector residual =
      softmax(model.params.head_weight * embedding + model.params.head_bias);
  residual(label) -= 1.0;
  Vector g(head_param_count(model));
  for (int c = 0; c < model.num_classes(); ++c) {
    g.segment(c * (d + 1), d) = residual(c) * embedding;
    g(c * (d + 1) + d) = residual(c);
  }
  return g;
}

Matrix head_hessian(const GnnModel &model, const Matrix &embeddings, double damping) {
  require(embeddings.rows() > 0, "head_hessian: no embeddings");
  require(embeddings.cols() == model.embedding_dim(), "head_hessian: width mismatch");
  const Matrix x = with_bias_column(embeddings);
  const Matrix p = head_probs(model, embeddings);
  const Eigen::Index c_count = p.cols();
  const Eigen::Index block = x.cols();
  const double inv_n = 1.0 / static_cast<double>(x.rows());

  Matrix h(c_count * block, c_count * block);
  for (Eigen::Index a = 0; a < c_count; ++a) {
    for (Eigen::Index b = a; b < c_count; ++b) {
      // B_n(a, b) = p_a (delta_ab - p_b)
      Vector w = -p.col(a).cwiseProduct(p.col(b));
      if (a == b)
        w += p.col(a);
      const Matrix blk = x.transpose() * w.asDiagonal() * x * inv_n;
      h.block(a * block, b * block, block, block) = blk;
      if (a != b)
        h.block(b * block, a * block, block, block) = blk.transpose();
    }
  }
  h.diagonal().array() += damping;
  return h;
}

double default_damping(const Matrix &undamped_hessian) {
  return damping_from_trace(undamped_hessian.trace(), undamped_hessian.rows());
}

HeadHessianOperator::HeadHessianOperator(const GnnModel &model, const Matrix &embeddings)
    : inputs_(with_bias_column(embeddings)), probs_(head_probs(model, embeddings)),
      dim_(static_cast<Eigen::Index>(head_param_count(model))) {}

Vector HeadHessianOperator::operator()(const Vector &v) const {
  require(v.size() == dim_, "HeadHessianOperator: vector length mismatch");
  const Eigen::Index block = inputs_.cols();
  const Eigen::Index c_count = probs_.cols();
  // v is class-major, so it is the row-major storage of a C x (d + 1) matrix.
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      vm(v.data(), c_count, block);
  const Matrix a = inputs_ * vm.transpose();           // N x C
  const Matrix pa = probs_.cwiseProduct(a);
  const Vector s = pa.rowwise().sum();
  const Matrix b = pa - probs_.cwiseProduct(s.replicate(1, c_count));
  const Matrix r = b.transpose() * inputs_ / static_cast<double>(inputs_.rows());
  Vector out(dim_);
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      out.data(), c_count, block) = r;
  return out;
}

InverseHessian::InverseHessian(const GnnModel &model, const Matrix &train_embeddings,
                               std::optional<double> damping, HessianSolver solver)
    : solver_(solver), dim_(head_param_count(model)) {
  if (solver_ == HessianSolver::Direct) {
    Matrix h = head_hessian(model, train_embeddings, 0.0);
    damping_ = damping.value_or(default_damping(h));
    require(damping_ >= 0.0, "damping must be nonnegative");
    h.diagonal().array() += damping_;
    llt_.compute(h);
    if (llt_.info() != Eigen::Success) {
      Eigen::SelfAdjointEigenSolver<Matrix> eig(h, Eigen::EigenvaluesOnly);
      std::ostringstream msg;
      msg << "head Hessian factorization failed; eigenvalue range ["
          << eig.eigenvalues().minCoeff() << ", " << eig.eigenvalues().maxCoeff()
          << "], damping " << damping_;
      throw Error(ErrorCategory::Numerical, msg.str());
    }
  } else {
    require(train_embeddings.rows() > 0, "InverseHessian: no embeddings");
    op_.emplace(model, train_embeddings);
    damping_ = damping.value_or(damping_from_trace(
        hessian_trace(with_bias_column(train_embeddings), head_probs(model, train_embeddings)),
        dim_));
    require(damping_ >= 0.0, "damping must be nonnegative");
  }
}

Vector InverseHessian::solve(const Vector &rhs) const {
  require(rhs.size() == dim_, "InverseHessian: rhs length mismatch");
  if (solver_ == HessianSolver::Direct)
    return llt_.solve(rhs);
  return ihvp_solve<double>(*op_, rhs, damping_, -1, 1e-12).x;
}

double influence_score(const GnnModel &model, const InverseHessian &inverse,
                       const Vector &aug_embedding, int aug_label,
                       const Vector &eval_embedding, int eval_label) {
  const Vector g_aug = head_gradient(model, aug_embedding, aug_label);
  const Vector g_eval = head_gradient(model, eval_embedding, eval_label);
  return g_eval.dot(inverse.solve(g_aug));
}

double predicted_loss_derivative(const GnnModel &model, const InverseHessian &inverse,
                                 const Vector &aug_embedding, int aug_label,
                                 const Vector &eval_embedding, int eval_label) {
  return -influence_score(model, inverse, aug_embedding, aug_label, eval_embedding,
                          eval_label);
}

std::vector<int> rank_descending(const Vector &scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores(a) > scores(b); });
  return order;
}

InfluenceReport average_influence(const GnnModel &model, const EmbeddingSet &train_embeddings,
                                  const AugmentationBatch &batch,
                                  const EmbeddingSet &eval_embeddings,
                                  const InfluenceOptions &options) {
  InfluenceReport report;
  report.eval_set = options.eval_set;
  report.train_count = train_embeddings.size();
  report.eval_count = eval_embeddings.size();
  report.dim = head_param_count(model);
  report.scores = Vector::Zero(batch.size());
  report.sample_class = batch.labels;
  if (batch.size() == 0)
    return report;
  require(eval_embeddings.size() > 0, "average_influence: empty evaluation set");
  require(batch.vectors.cols() == model.embedding_dim() &&
              eval_embeddings.dim() == model.embedding_dim(),
          "average_influence: embedding width mismatch");

  const InverseHessian inverse(model, train_embeddings.vectors, options.damping,
                               options.solver);
  report.hessian_damping = inverse.damping();

  // The mean over eval points of g_k' H^{-1} g_a is g_bar' H^{-1} g_a.
  Vector g_bar = Vector::Zero(report.dim);
  for (int k = 0; k < eval_embeddings.size(); ++k)
    g_bar += head_gradient(model, eval_embeddings.vectors.row(k).transpose(),
                           eval_embeddings.labels[k]);
  g_bar /= static_cast<double>(eval_embeddings.size());
  const Vector u = inverse.solve(g_bar);

  for (int a = 0; a < batch.size(); ++a)
    report.scores(a) =
        head_gradient(model, batch.vectors.row(a).transpose(), batch.labels[a]).dot(u);
  report.ranking = rank_descending(report.scores);
  return report;
}

nlohmann::json InfluenceReport::header() const {
  return {{"lambda", hessian_damping}, {"eval_set", eval_set},
          {"N", train_count},          {"eval_count", eval_count},
          {"samples", scores.size()},  {"dim", dim}};
}

void InfluenceReport::write_csv(std::ostream &out) const {
  std::vector<int> rank_of(scores.size(), 0);
  for (std::size_t r = 0; r < ranking.size(); ++r)
    rank_of[ranking[r]] = static_cast<int>(r) + 1;
  out << "sample_id,class,score,rank\n";
  out.precision(17);
  for (Eigen::Index i = 0; i < scores.size(); ++i)
    out << i << ',' << sample_class[i] << ',' << scores(i) << ',' << rank_of[i] << '\n';
}

Histogram histogram(std::span<const double> values, int bins) {
  require(bins >= 1, "histogram: bins must be positive");
  Histogram h;
  h.counts.assign(bins, 0);
  double lo = 0.0;
  double hi = 1.0;
  if (!values.empty()) {
    lo = *std::min_element(values.begin(), values.end());
    hi = *std::max_element(values.begin(), values.end());
  }
  if (hi <= lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / bins;
  for (int b = 0; b <= bins; ++b)
    h.edges.push_back(lo + b * width);
  h.edges.back() = hi;
  for (double v : values) {
    int b = static_cast<int>((v - lo) / width);
    h.counts[std::clamp(b, 0, bins - 1)]++;
  }
  return h;
}

void Histogram::write_csv(std::ostream &out) const {
  out << "bin_lo,bin_hi,count\n";
  out.precision(17);
  for (std::size_t b = 0; b < counts.size(); ++b)
    out << edges[b] << ',' << edges[b + 1] << ',' << counts[b] << '\n';
}

FilterResult fisher_filter(const GnnModel &model, const EmbeddingSet &train_embeddings,
                           const AugmentationBatch &pool,
                           const EmbeddingSet &val_embeddings, double keep_fraction,
                           const FinetuneConfig &finetune,
                           const InfluenceOptions &options) {
  require(keep_fraction >= 0.0 && keep_fraction <= 1.0,
          "fisher_filter: keep_fraction must be in [0, 1]");
  FilterResult result;
  InfluenceOptions opts = options;
  opts.eval_set = "validation";
  const int keep = static_cast<int>(std::floor(keep_fraction * pool.size() + 1e-9));
  result.report = average_influence(model, train_embeddings, pool, val_embeddings, opts);
  // Kept rows stay in pool order.
  std::vector<int> chosen(result.report.ranking.begin(),
                          result.report.ranking.begin() + keep);
  std::sort(chosen.begin(), chosen.end());
  result.kept = pool.subset(chosen);
  result.model = finetune_head(model, merge(train_embeddings, result.kept), finetune);
  return result;
}

} // namespace gratin
