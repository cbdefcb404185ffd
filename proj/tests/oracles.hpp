#pragma once

// Independent oracles shared by the unit tests and the acceptance binary.

#include "gratin/gnn.hpp"
#include "gratin/gmm.hpp"
#include "gratin/influence.hpp"
#include "gratin/pipeline.hpp"

#include <random>

namespace oracles {

using namespace gratin;

// --- message passing -------------------------------------------------------

inline GnnModel random_model(Backbone b, int in, int hidden, int layers, int classes, Rng &rng) {
  GnnModel m = GnnModel::create(b, in, hidden, layers, classes, rng);
  // Nonzero biases so their gradients are exercised too.
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto &bias : m.params.biases)
    for (auto &x : bias)
      x = n(rng);
  for (auto &x : m.params.head_bias)
    x = n(rng);
  return m;
}

inline double loss_at(GnnModel m, const Vector &theta, const Graph &g) {
  m.params.assign(theta);
  return loss_and_grad(m, g).loss;
}

// Max over parameter tensors of ||analytic - fd||_inf / max(||fd||_inf, 1e-8).
inline double fd_relative_error(const GnnModel &m, const Graph &g, double step) {
  const Vector theta = m.params.flatten();
  const Vector analytic = loss_and_grad(m, g).grads.flatten();
  Vector fd(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    Vector tp = theta, tm = theta;
    tp(i) += step;
    tm(i) -= step;
    fd(i) = (loss_at(m, tp, g) - loss_at(m, tm, g)) / (2.0 * step);
  }
  double worst = 0.0;
  Eigen::Index pos = 0;
  auto tensor = [&](Eigen::Index size) {
    const double scale = std::max(fd.segment(pos, size).cwiseAbs().maxCoeff(), 1e-8);
    const double err = (analytic.segment(pos, size) - fd.segment(pos, size)).cwiseAbs().maxCoeff();
    worst = std::max(worst, err / scale);
    pos += size;
  };
  for (int t = 0; t < m.num_layers(); ++t) {
    tensor(m.params.weights[t].size());
    tensor(m.params.biases[t].size());
  }
  tensor(m.params.head_weight.size());
  tensor(m.params.head_bias.size());
  return worst;
}

// --- softmax head ----------------------------------------------------------

// Head-only model: the message-passing layers are never evaluated here.
inline GnnModel head_model(int d, int classes, Rng &rng) {
  return GnnModel::create(Backbone::GCN, 2, d, 1, classes, rng);
}

inline EmbeddingSet random_embeddings(int n, int d, int classes, Rng &rng, double spread = 1.0) {
  std::normal_distribution<double> z(0.0, 1.0);
  EmbeddingSet e;
  e.vectors.resize(n, d);
  for (int i = 0; i < n; ++i) {
    const int label = i % classes;
    e.labels.push_back(label);
    e.source_ids.push_back(i);
    for (int j = 0; j < d; ++j)
      e.vectors(i, j) = spread * z(rng) + (j == label ? 1.0 : 0.0);
  }
  return e;
}

// Mean cross-entropy of the head written out independently of the library.
inline double mean_head_loss(const Vector &theta, const Matrix &x, const std::vector<int> &labels,
                      int classes) {
  const int d = static_cast<int>(x.cols());
  double total = 0.0;
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    Vector logits(classes);
    for (int c = 0; c < classes; ++c)
      logits(c) = theta.segment(c * (d + 1), d).dot(x.row(n).transpose()) + theta(c * (d + 1) + d);
    const double m = logits.maxCoeff();
    total += m + std::log((logits.array() - m).exp().sum()) - logits(labels[n]);
  }
  return total / static_cast<double>(x.rows());
}

inline Vector mean_head_grad(const GnnModel &m, const EmbeddingSet &e) {
  Vector g = Vector::Zero(head_param_count(m));
  for (int n = 0; n < e.size(); ++n)
    g += head_gradient(m, e.vectors.row(n).transpose(), e.labels[n]);
  return g / e.size();
}

inline double single_loss(const GnnModel &m, const Vector &h, int label) {
  return -log_softmax(m.params.head_weight * h + m.params.head_bias)(label);
}

// Damped Newton's method on (1/N) sum loss + extra_weight * loss(extra) + lambda/2 ||theta||^2.
inline GnnModel newton_fit(GnnModel m, const EmbeddingSet &e, double lambda,
                    const Vector *extra = nullptr, int extra_label = 0,
                    double extra_weight = 0.0) {
  for (int it = 0; it < 100; ++it) {
    const Vector theta = head_parameters(m);
    Vector g = mean_head_grad(m, e) + lambda * theta;
    Matrix h = head_hessian(m, e.vectors, lambda);
    if (extra) {
      g += extra_weight * head_gradient(m, *extra, extra_label);
      h += extra_weight * head_hessian(m, extra->transpose(), 0.0);
    }
    if (g.norm() < 1e-13)
      break;
    const Vector step = h.ldlt().solve(g);
    auto objective = [&](const Vector &t) {
      GnnModel probe = m;
      set_head_parameters(probe, t);
      double f = mean_head_loss(t, e.vectors, e.labels, m.num_classes()) +
                 0.5 * lambda * t.squaredNorm();
      if (extra)
        f += extra_weight * single_loss(probe, *extra, extra_label);
      return f;
    };
    const double f0 = objective(theta);
    double t = 1.0;
    while (t > 1e-8 && objective(theta - t * step) > f0 - 1e-4 * t * g.dot(step))
      t *= 0.5;
    set_head_parameters(m, theta - t * step);
  }
  return m;
}

inline double objective_grad_norm(const GnnModel &m, const EmbeddingSet &e, double lambda) {
  return (mean_head_grad(m, e) + lambda * head_parameters(m)).norm();
}

inline AugmentationBatch as_batch(const EmbeddingSet &e, int classes) {
  AugmentationBatch b;
  b.vectors = e.vectors;
  b.labels = e.labels;
  b.origin_class_counts.assign(classes, 0);
  for (int l : e.labels)
    ++b.origin_class_counts[l];
  return b;
}

// Hessian of mean_head_loss from second differences of the loss alone.
inline Matrix fd_head_hessian(const GnnModel &m, const EmbeddingSet &e, double step) {
  const Vector theta = head_parameters(m);
  const Eigen::Index dim = theta.size();
  auto loss = [&](const Vector &t) {
    return mean_head_loss(t, e.vectors, e.labels, m.num_classes());
  };
  Matrix fd(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i)
    for (Eigen::Index j = i; j < dim; ++j) {
      Vector pp = theta, pm = theta, mp = theta, mm = theta;
      pp(i) += step; pp(j) += step;
      pm(i) += step; pm(j) -= step;
      mp(i) -= step; mp(j) += step;
      mm(i) -= step; mm(j) -= step;
      fd(i, j) = fd(j, i) = (loss(pp) - loss(pm) - loss(mp) + loss(mm)) / (4.0 * step * step);
    }
  return fd;
}

// --- mixtures --------------------------------------------------------------

inline Matrix random_spd(int d, Rng &rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix a(d, d);
  for (auto &x : a.reshaped())
    x = n(rng);
  return scale * (a * a.transpose() / d + 0.2 * Matrix::Identity(d, d));
}

// Mixture-distributed rows with optional dead (all-zero) coordinates, the
// shape ReLU embeddings tend to have.
inline Matrix random_dataset(Rng &rng, int n, int d, int true_k, bool dead_columns) {
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_int_distribution<int> comp(0, true_k - 1);
  std::vector<Vector> centers;
  std::vector<Matrix> factors;
  for (int k = 0; k < true_k; ++k) {
    Vector c(d);
    for (auto &x : c)
      x = 4.0 * z(rng);
    centers.push_back(c);
    factors.push_back(random_spd(d, rng).llt().matrixL());
  }
  Matrix data(n, d);
  for (int i = 0; i < n; ++i) {
    Vector e(d);
    for (auto &x : e)
      x = z(rng);
    const int k = comp(rng);
    data.row(i) = (centers[k] + factors[k] * e).transpose();
  }
  if (dead_columns)
    for (int j = 0; j < d; j += 3)
      data.col(j).setZero();
  return data;
}

} // namespace oracles
