#pragma once

#include "gratin/common.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace gratin {

/// Gaussian mixture with full covariances:
/// p(x) = sum_k weights(k) N(x | means.row(k), covariances[k]).
template <typename Scalar = double> struct GaussianMixture {
  VectorX<Scalar> weights;
  MatrixX<Scalar> means; // K x d
  std::vector<MatrixX<Scalar>> covariances;
  // Mean per-sample log-likelihood after initialization and after each M-step.
  std::vector<Scalar> log_likelihood_history;
  // Smallest eigenvalue allowed in any covariance.
  Scalar floor = Scalar(0);

  struct Reseed {
    int iteration = 0;
    int component = 0;
    bool accepted = false;
  };
  std::vector<Reseed> reseeds;

  int num_components() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(means.cols()); }
};

struct EmOptions {
  int max_iter = 100;
  // Stop once the mean per-sample log-likelihood gains less than this.
  double tol = 1e-3;
  std::uint64_t seed = 0;
  // floor = floor_scale * trace(global covariance) / d
  double floor_scale = 1e-6;
};

namespace detail {

template <typename Scalar>
Scalar log_sum_exp(const Eigen::Ref<const VectorX<Scalar>> &v) {
  const Scalar m = v.maxCoeff();
  if (!std::isfinite(m))
    return m;
  return m + std::log((v.array() - m).exp().sum());
}

template <typename Scalar>
Eigen::LLT<MatrixX<Scalar>> checked_cholesky(const MatrixX<Scalar> &cov, int k) {
  Eigen::LLT<MatrixX<Scalar>> llt(cov);
  if (llt.info() != Eigen::Success)
    throw Error(ErrorCategory::Numerical,
                "covariance of component " + std::to_string(k) +
                    " is not positive definite");
  return llt;
}

// Eigenvalues below the floor are raised to it. This is the maximizer of the
// Gaussian likelihood term over {Sigma >= floor * I}, so EM stays monotone.
template <typename Scalar>
MatrixX<Scalar> clip_eigenvalues(const MatrixX<Scalar> &s, Scalar floor) {
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> eig(s);
  VectorX<Scalar> values = eig.eigenvalues().cwiseMax(floor);
  MatrixX<Scalar> out = eig.eigenvectors() * values.asDiagonal() *
                        eig.eigenvectors().transpose();
  return (out + out.transpose()) / Scalar(2);
}

template <typename Scalar>
MatrixX<Scalar> weighted_covariance(const MatrixX<Scalar> &data,
                                    const VectorX<Scalar> &w,
                                    const VectorX<Scalar> &mean) {
  const Scalar total = w.sum();
  MatrixX<Scalar> centered = data.rowwise() - mean.transpose();
  MatrixX<Scalar> cov =
      centered.transpose() * w.asDiagonal() * centered / std::max(total, Scalar(1e-300));
  return (cov + cov.transpose()) / Scalar(2);
}

// Lexicographic comparison makes the selection independent of row order.
template <typename Scalar>
bool lex_less(const MatrixX<Scalar> &data, Eigen::Index a, Eigen::Index b) {
  for (Eigen::Index j = 0; j < data.cols(); ++j) {
    if (data(a, j) < data(b, j))
      return true;
    if (data(b, j) < data(a, j))
      return false;
  }
  return false;
}

// Farthest-point selection: the row farthest from the global mean, then
// repeatedly the row farthest from all chosen centers.
template <typename Scalar>
MatrixX<Scalar> farthest_point_centers(const MatrixX<Scalar> &data, int k) {
  const Eigen::Index n = data.rows();
  const VectorX<Scalar> mean = data.colwise().mean().transpose();
  VectorX<Scalar> dist = (data.rowwise() - mean.transpose()).rowwise().squaredNorm();
  MatrixX<Scalar> centers(k, data.cols());
  for (int c = 0; c < k; ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < n; ++i)
      if (dist(i) > dist(best) || (dist(i) == dist(best) && lex_less(data, i, best)))
        best = i;
    centers.row(c) = data.row(best);
    const VectorX<Scalar> d_new =
        (data.rowwise() - data.row(best)).rowwise().squaredNorm();
    if (c == 0)
      dist = d_new;
    else
      dist = dist.cwiseMin(d_new);
  }
  return centers;
}

} // namespace detail

/// N x K matrix of log(weights(k)) + log N(x_n | k).
template <typename Scalar>
MatrixX<Scalar> weighted_log_densities(const GaussianMixture<Scalar> &model,
                                       const MatrixX<Scalar> &data) {
  require(data.cols() == model.dim(), "gmm: data dimension mismatch");
  const int k_count = model.num_components();
  const Scalar log_2pi = std::log(Scalar(2) * std::numbers::pi_v<Scalar>);
  MatrixX<Scalar> out(data.rows(), k_count);
  for (int k = 0; k < k_count; ++k) {
    const auto llt = detail::checked_cholesky(model.covariances[k], k);
    const MatrixX<Scalar> l = llt.matrixL();
    const Scalar log_det = Scalar(2) * l.diagonal().array().log().sum();
    MatrixX<Scalar> centered =
        (data.rowwise() - model.means.row(k)).transpose(); // d x N
    llt.matrixL().solveInPlace(centered);
    const VectorX<Scalar> maha = centered.colwise().squaredNorm().transpose();
    const Scalar log_w = model.weights(k) > Scalar(0)
                             ? std::log(model.weights(k))
                             : -std::numeric_limits<Scalar>::infinity();
    out.col(k) = (-Scalar(0.5) * (maha.array() + log_det + model.dim() * log_2pi)) + log_w;
  }
  return out;
}

template <typename Scalar>
Scalar gmm_logpdf(const GaussianMixture<Scalar> &model, const VectorX<Scalar> &x) {
  require(x.size() == model.dim(), "gmm_logpdf: dimension mismatch");
  MatrixX<Scalar> row = x.transpose();
  VectorX<Scalar> terms = weighted_log_densities(model, row).row(0).transpose();
  return detail::log_sum_exp<Scalar>(terms);
}

/// Posterior component memberships; each row sums to one.
template <typename Scalar>
MatrixX<Scalar> responsibilities(const GaussianMixture<Scalar> &model,
                                 const MatrixX<Scalar> &data) {
  MatrixX<Scalar> logd = weighted_log_densities(model, data);
  for (Eigen::Index n = 0; n < logd.rows(); ++n) {
    const Scalar lse = detail::log_sum_exp<Scalar>(logd.row(n).transpose());
    logd.row(n) = (logd.row(n).array() - lse).exp();
  }
  return logd;
}

template <typename Scalar>
Scalar mean_log_likelihood(const GaussianMixture<Scalar> &model,
                           const MatrixX<Scalar> &data) {
  const MatrixX<Scalar> logd = weighted_log_densities(model, data);
  Scalar total = 0;
  for (Eigen::Index n = 0; n < logd.rows(); ++n)
    total += detail::log_sum_exp<Scalar>(logd.row(n).transpose());
  return total / static_cast<Scalar>(logd.rows());
}

/// EM with covariance eigenvalues held at or above a floor. A component whose
/// responsibility mass falls below one sample is re-seeded at a random data
/// row; the re-seed is kept only if it does not lower the likelihood.
template <typename Scalar>
GaussianMixture<Scalar> fit_em(const MatrixX<Scalar> &data, int k,
                               const EmOptions &options = {}) {
  const Eigen::Index n = data.rows();
  const Eigen::Index d = data.cols();
  require(k >= 1, "fit_em: K must be positive");
  require(d >= 1, "fit_em: data must have at least one column");
  require(n >= k, "fit_em: K=" + std::to_string(k) + " exceeds " +
                      std::to_string(n) + " samples");
  require(data.allFinite(), "fit_em: data contains non-finite values");

  const VectorX<Scalar> ones = VectorX<Scalar>::Ones(n);
  const VectorX<Scalar> global_mean = data.colwise().mean().transpose();
  const MatrixX<Scalar> global_cov = detail::weighted_covariance(data, ones, global_mean);

  GaussianMixture<Scalar> model;
  model.floor = static_cast<Scalar>(options.floor_scale) * global_cov.trace() /
                static_cast<Scalar>(d);
  if (!(model.floor > Scalar(0)))
    model.floor = static_cast<Scalar>(options.floor_scale);
  model.weights = VectorX<Scalar>::Constant(k, Scalar(1) / Scalar(k));
  model.means = detail::farthest_point_centers(data, k);
  const MatrixX<Scalar> start_cov = detail::clip_eigenvalues(global_cov, model.floor);
  model.covariances.assign(k, start_cov);

  Rng rng(options.seed);
  Scalar current = mean_log_likelihood(model, data);
  model.log_likelihood_history.push_back(current);

  for (int iter = 1; iter <= options.max_iter; ++iter) {
    const MatrixX<Scalar> resp = responsibilities(model, data);
    const VectorX<Scalar> mass = resp.colwise().sum().transpose();

    GaussianMixture<Scalar> next = model;
    next.weights = mass / static_cast<Scalar>(n);
    std::vector<int> collapsed;
    for (int c = 0; c < k; ++c) {
      if (mass(c) <= Scalar(0)) {
        collapsed.push_back(c);
        continue;
      }
      const VectorX<Scalar> w = resp.col(c);
      const VectorX<Scalar> mu = data.transpose() * w / mass(c);
      next.means.row(c) = mu.transpose();
      next.covariances[c] =
          detail::clip_eigenvalues(detail::weighted_covariance(data, w, mu), next.floor);
      if (mass(c) < Scalar(1))
        collapsed.push_back(c);
    }
    Scalar next_ll = mean_log_likelihood(next, data);

    if (!collapsed.empty()) {
      GaussianMixture<Scalar> candidate = next;
      std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
      for (int c : collapsed) {
        candidate.means.row(c) = data.row(pick(rng));
        candidate.covariances[c] = start_cov;
        candidate.weights(c) = Scalar(1) / static_cast<Scalar>(n);
      }
      candidate.weights /= candidate.weights.sum();
      const Scalar cand_ll = mean_log_likelihood(candidate, data);
      const bool accept = cand_ll >= next_ll;
      for (int c : collapsed)
        next.reseeds.push_back({iter, c, accept});
      if (accept) {
        candidate.reseeds = next.reseeds;
        next = std::move(candidate);
        next_ll = cand_ll;
      }
    }

    next.log_likelihood_history.push_back(next_ll);
    model = std::move(next);
    const Scalar gain = next_ll - current;
    current = next_ll;
    if (gain < static_cast<Scalar>(options.tol))
      break;
  }
  return model;
}

/// Ancestral sampling: component from the weights, then mean + L z.
template <typename Scalar>
MatrixX<Scalar> sample(const GaussianMixture<Scalar> &model, int count,
                       std::uint64_t seed, std::vector<int> *components = nullptr) {
  require(count >= 0, "sample: negative count");
  const int d = model.dim();
  MatrixX<Scalar> out(count, d);
  if (count == 0)
    return out;
  std::vector<MatrixX<Scalar>> factors;
  for (int k = 0; k < model.num_components(); ++k)
    factors.push_back(detail::checked_cholesky(model.covariances[k], k).matrixL());
  std::vector<double> w(model.weights.data(), model.weights.data() + model.weights.size());
  std::discrete_distribution<int> pick(w.begin(), w.end());
  std::normal_distribution<Scalar> normal(Scalar(0), Scalar(1));
  Rng rng(seed);
  VectorX<Scalar> z(d);
  for (int m = 0; m < count; ++m) {
    const int k = pick(rng);
    for (int j = 0; j < d; ++j)
      z(j) = normal(rng);
    out.row(m) = (model.means.row(k).transpose() + factors[k] * z).transpose();
    if (components)
      components->push_back(k);
  }
  return out;
}

template <typename Scalar>
VectorX<Scalar> mixture_mean(const GaussianMixture<Scalar> &model) {
  return model.means.transpose() * model.weights;
}

template <typename Scalar>
MatrixX<Scalar> mixture_covariance(const GaussianMixture<Scalar> &model) {
  const VectorX<Scalar> mean = mixture_mean(model);
  MatrixX<Scalar> cov = MatrixX<Scalar>::Zero(model.dim(), model.dim());
  for (int k = 0; k < model.num_components(); ++k) {
    const VectorX<Scalar> delta = model.means.row(k).transpose() - mean;
    cov += model.weights(k) * (model.covariances[k] + delta * delta.transpose());
  }
  return cov;
}

template <typename Scalar>
nlohmann::json to_json(const GaussianMixture<Scalar> &model) {
  auto rows_of = [](const MatrixX<Scalar> &m) {
    std::vector<std::vector<Scalar>> rows(m.rows(), std::vector<Scalar>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        rows[i][j] = m(i, j);
    return rows;
  };
  nlohmann::json covs = nlohmann::json::array();
  for (const auto &c : model.covariances)
    covs.push_back(rows_of(c));
  nlohmann::json reseeds = nlohmann::json::array();
  for (const auto &r : model.reseeds)
    reseeds.push_back({{"iteration", r.iteration},
                       {"component", r.component},
                       {"accepted", r.accepted}});
  return {{"weights", std::vector<Scalar>(model.weights.data(),
                                          model.weights.data() + model.weights.size())},
          {"means", rows_of(model.means)},
          {"covariances", covs},
          {"floor", model.floor},
          {"log_likelihood_history", model.log_likelihood_history},
          {"reseeds", reseeds}};
}

template <typename Scalar = double>
GaussianMixture<Scalar> gmm_from_json(const nlohmann::json &j) {
  auto matrix_of = [](const nlohmann::json &rows) {
    const auto r = rows.get<std::vector<std::vector<Scalar>>>();
    MatrixX<Scalar> m(static_cast<Eigen::Index>(r.size()),
                      r.empty() ? 0 : static_cast<Eigen::Index>(r[0].size()));
    for (std::size_t i = 0; i < r.size(); ++i)
      for (std::size_t c = 0; c < r[i].size(); ++c)
        m(i, c) = r[i][c];
    return m;
  };
  GaussianMixture<Scalar> model;
  const auto w = j.at("weights").get<std::vector<Scalar>>();
  model.weights = Eigen::Map<const VectorX<Scalar>>(w.data(), w.size());
  model.means = matrix_of(j.at("means"));
  for (const auto &c : j.at("covariances"))
    model.covariances.push_back(matrix_of(c));
  model.floor = j.at("floor").get<Scalar>();
  model.log_likelihood_history =
      j.at("log_likelihood_history").get<std::vector<Scalar>>();
  for (const auto &r : j.value("reseeds", nlohmann::json::array()))
    model.reseeds.push_back({r.at("iteration").get<int>(), r.at("component").get<int>(),
                             r.at("accepted").get<bool>()});
  require(model.means.rows() == model.weights.size() &&
              model.covariances.size() == static_cast<std::size_t>(model.weights.size()),
          "gmm json: inconsistent component counts");
  return model;
}

} // namespace gratin
