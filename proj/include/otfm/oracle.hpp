// Exact small-scale references: Hungarian assignment and a dense-matrix
// log-domain Sinkhorn (with the squared-Euclidean cost variant kept for A/B
// conditioning comparisons). Clarity beats speed here; everything is
// single-threaded and materializes the full matrix.
#pragma once

#include <limits>
#include <vector>

#include "otfm/common.hpp"
#include "otfm/momentum.hpp"

namespace otfm::oracle {

inline constexpr Index kSizeGuard = 4096;

struct Assignment {
  std::vector<Index> perm;  // row i -> column perm[i]
  double cost = 0.0;        // mean assigned cost, sum_i C(i, perm(i)) / n
};

/// Optimal assignment via shortest augmenting paths (Jonker-Volgenant style,
/// O(n^3)). Ties are broken towards the lowest column index.
inline Assignment hungarian(const Eigen::Ref<const MatrixXdRM>& C) {
  const Index n = C.rows();
  if (C.cols() != n) throw InvalidArgument("hungarian: square matrix required");
  if (n > kSizeGuard) throw SizeGuard("hungarian: n exceeds the 4096 guard");
  if (!C.allFinite()) throw NonFinite("hungarian: non-finite cost");

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1, 0.0);
  std::vector<Index> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1, 0);

  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      Index i0 = p[j0], j1 = 0;
      double delta = inf;
      for (Index j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = C(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      Index j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  Assignment a;
  a.perm.assign(n, -1);
  for (Index j = 1; j <= n; ++j)
    if (p[j]) a.perm[p[j] - 1] = j - 1;
  for (Index i = 0; i < n; ++i) a.cost += C(i, a.perm[i]);
  a.cost /= static_cast<double>(n);
  return a;
}

enum class CostForm { kDotProduct, kSquaredEuclidean };

/// Materializes the cost matrix in the requested scalar type. The
/// squared-Euclidean form is assembled from norms and the cross term, the way
/// a direct implementation would (which is exactly what makes it
/// ill-conditioned in single precision).
template <class S>
inline MatrixRM<S> dense_cost(const PointBatch& X, const PointBatch& Y, CostForm form) {
  require_same_dim(X, Y, "dense_cost");
  MatrixRM<S> Xs = X.mat().cast<S>();
  MatrixRM<S> Ys = Y.mat().cast<S>();
  MatrixRM<S> C = -(Xs * Ys.transpose());
  if (form == CostForm::kSquaredEuclidean) {
    VectorX<S> xn = Xs.rowwise().squaredNorm() * S(0.5);
    VectorX<S> yn = Ys.rowwise().squaredNorm() * S(0.5);
    C.colwise() += xn;
    C.rowwise() += yn.transpose();
  }
  return C;
}

template <class S>
struct DenseSinkhornResult {
  VectorX<S> f, g;
  MatrixRM<S> P;
  Index iters = 0;
  double final_err = 0.0;
  bool converged = false;
};

/// Textbook log-domain Sinkhorn on a materialized matrix, uniform 1/n
/// marginals. Shares the iteration schedule (per-iteration convergence check,
/// adaptive momentum) with the sharded solver so dual trajectories align.
template <class S>
inline DenseSinkhornResult<S> dense_sinkhorn(const MatrixRM<S>& C, S eps_abs, S tau = S(1e-3),
                                             Index max_iters = 50000,
                                             Index momentum_start_iter = 2000) {
  const Index n = C.rows();
  if (C.cols() != n) throw InvalidArgument("dense_sinkhorn: square matrix required");
  if (n > kSizeGuard) throw SizeGuard("dense_sinkhorn: n exceeds the 4096 guard");
  if (!(eps_abs > S(0))) throw InvalidArgument("dense_sinkhorn: eps_abs must be positive");

  const S log_inv_n = -std::log(static_cast<S>(n));
  DenseSinkhornResult<S> r;
  r.f = VectorX<S>::Zero(n);
  r.g = VectorX<S>::Zero(n);
  VectorX<S> f_cand(n), g_cand(n), a(n);
  MomentumController momentum(momentum_start_iter);

  auto softmin_rows = [&](const VectorX<S>& opposite, bool transpose, VectorX<S>& out) {
    for (Index i = 0; i < n; ++i) {
      if (transpose)
        a = (opposite - C.col(i)) / eps_abs;
      else
        a = (opposite - C.row(i).transpose()) / eps_abs;
      S m = a.maxCoeff();
      out(i) = eps_abs * (log_inv_n - (m + std::log((a.array() - m).exp().sum())));
    }
  };

  r.final_err = std::numeric_limits<double>::infinity();
  for (Index iter = 0; iter < max_iters; ++iter) {
    softmin_rows(r.g, false, f_cand);
    double err = 0.0;
    for (Index i = 0; i < n; ++i)
      err += std::abs(std::exp(static_cast<double>((r.f(i) - f_cand(i)) / eps_abs)) - 1.0);
    err /= static_cast<double>(n);
    r.final_err = err;
    r.iters = iter;
    if (err <= static_cast<double>(tau)) {
      r.converged = true;
      break;
    }
    if (!f_cand.allFinite()) throw NonFinite("dense_sinkhorn: non-finite dual");
    S theta = static_cast<S>(momentum.theta(iter, err));
    r.f = (iter >= momentum_start_iter) ? (r.f + theta * (f_cand - r.f)).eval() : f_cand;
    softmin_rows(r.f, true, g_cand);
    if (!g_cand.allFinite()) throw NonFinite("dense_sinkhorn: non-finite dual");
    r.g = (iter >= momentum_start_iter) ? (r.g + theta * (g_cand - r.g)).eval() : g_cand;
    r.iters = iter + 1;
  }

  r.P = (((-C).colwise() + r.f).rowwise() + r.g.transpose()) / eps_abs;
  r.P = r.P.array().exp().matrix();
  return r;
}

}  // namespace otfm::oracle
