#pragma once

#include "gratin/common.hpp"

#include <cmath>
#include <concepts>
#include <sstream>

namespace gratin {

template <typename Scalar> struct CgResult {
  VectorX<Scalar> x;
  int iterations = 0;
  Scalar residual = 0; // final ||rhs - (H + damping I) x||
};

/// Conjugate gradient on (H + damping I) x = rhs where `apply(v)` returns H v.
/// Converges when ||r|| <= tol ||rhs||; max_iter < 0 means 10 * dim.
template <typename Scalar, typename Operator>
  requires std::invocable<const Operator &, const VectorX<Scalar> &>
CgResult<Scalar> ihvp_solve(const Operator &apply, const VectorX<Scalar> &rhs,
                            Scalar damping, int max_iter = -1,
                            Scalar tol = Scalar(1e-8)) {
  const Eigen::Index dim = rhs.size();
  if (max_iter < 0)
    max_iter = static_cast<int>(10 * dim);
  auto op = [&](const VectorX<Scalar> &v) -> VectorX<Scalar> {
    return apply(v) + damping * v;
  };

  CgResult<Scalar> result;
  result.x = VectorX<Scalar>::Zero(dim);
  const Scalar rhs_norm = rhs.norm();
  if (rhs_norm == Scalar(0))
    return result;

  VectorX<Scalar> r = rhs;
  VectorX<Scalar> p = r;
  Scalar rr = r.squaredNorm();
  const Scalar target = tol * rhs_norm;
  for (int it = 0; it < max_iter; ++it) {
    if (std::sqrt(rr) <= target) {
      result.residual = std::sqrt(rr);
      return result;
    }
    const VectorX<Scalar> q = op(p);
    const Scalar curvature = p.dot(q);
    if (!(curvature > Scalar(0))) {
      std::ostringstream msg;
      msg << "ihvp_solve: operator is not positive definite (p'Ap = " << curvature
          << " at iteration " << it << ")";
      throw Error(ErrorCategory::Numerical, msg.str());
    }
    const Scalar alpha = rr / curvature;
    result.x += alpha * p;
    r -= alpha * q;
    const Scalar rr_next = r.squaredNorm();
    p = r + (rr_next / rr) * p;
    rr = rr_next;
    result.iterations = it + 1;
  }
  // Recompute the true residual; the recurrence drifts.
  result.residual = (rhs - op(result.x)).norm();
  if (result.residual <= target)
    return result;
  std::ostringstream msg;
  msg << "ihvp_solve: no convergence after " << max_iter
      << " iterations, residual " << result.residual << " (target " << target << ")";
  throw Error(ErrorCategory::Numerical, msg.str());
}

} // namespace gratin
