// Blockwise evaluation of the negative dot-product cost, cost-scale
// estimation for the relative-epsilon rescaling, and PCA projection for
// reduced-dimension matching.
#pragma once

#include <algorithm>
#include <numeric>
#include <optional>

#include "otfm/common.hpp"
#include "otfm/rng.hpp"
#include "otfm/thread_pool.hpp"

namespace otfm::geometry {

inline constexpr Index kDefaultStdCap = Index(1) << 14;  // 16384

/// Dense block of the cost in force: block(i, j) = -<x_{r0+i}, y_{c0+j}>.
inline void cost_block(const PointBatch& X, Index r0, Index r1, const PointBatch& Y, Index c0,
                       Index c1, Eigen::Ref<MatrixXdRM> out) {
  require_same_dim(X, Y, "cost_block");
  if (r0 < 0 || r1 > X.n || c0 < 0 || c1 > Y.n || r1 < r0 || c1 < c0)
    throw InvalidArgument("cost_block: bad slice");
  out.noalias() = -(X.mat().middleRows(r0, r1 - r0) * Y.mat().middleRows(c0, c1 - c0).transpose());
}

inline MatrixXdRM cost_block(const PointBatch& X, const PointBatch& Y) {
  MatrixXdRM out(X.n, Y.n);
  cost_block(X, 0, X.n, Y, 0, Y.n, out);
  return out;
}

struct CostScale {
  double std = 0.0;
  bool subsampled = false;
  Index sample_size = 0;
};

namespace detail {

// Uniform sample of `count` rows without replacement (partial Fisher-Yates).
inline PointBatch subsample_rows(const PointBatch& X, Index count, rng::Stream& stream) {
  std::vector<Index> idx(static_cast<std::size_t>(X.n));
  std::iota(idx.begin(), idx.end(), Index(0));
  for (Index i = 0; i < count; ++i) {
    Index j = i + static_cast<Index>(stream.below(static_cast<std::uint64_t>(X.n - i)));
    std::swap(idx[i], idx[j]);
  }
  PointBatch out(count, X.d);
  for (Index i = 0; i < count; ++i) out.mat().row(i) = X.mat().row(idx[i]);
  return out;
}

}  // namespace detail

/// Standard deviation of the n*n cost entries, streamed in blocks (two-pass;
/// the cost matrix is never materialized). Above `cap` points per side, a
/// seeded uniform row subsample of size `cap` is used instead.
inline CostScale cost_std(const PointBatch& X, const PointBatch& Y, Index cap = kDefaultStdCap,
                          std::uint64_t seed = 0) {
  require_same_dim(X, Y, "cost_std");
  if (X.n < 2 || Y.n < 2) throw InvalidArgument("cost_std: need n >= 2 on both sides");

  CostScale scale;
  const PointBatch* xs = &X;
  const PointBatch* ys = &Y;
  PointBatch xsub, ysub;
  if (cap > 0 && (X.n > cap || Y.n > cap)) {
    rng::Stream sx(rng::derive(seed, rng::salt::kSubsample));
    rng::Stream sy(rng::derive(seed, rng::salt::kSubsample + 1));
    if (X.n > cap) {
      xsub = detail::subsample_rows(X, cap, sx);
      xs = &xsub;
    }
    if (Y.n > cap) {
      ysub = detail::subsample_rows(Y, cap, sy);
      ys = &ysub;
    }
    scale.subsampled = true;
  }
  scale.sample_size = std::max(xs->n, ys->n);

  const Index block = 512;
  ThreadPool& pool = ThreadPool::global();
  const std::size_t n_chunks = static_cast<std::size_t>((xs->n + block - 1) / block);

  // pass 1: mean
  std::vector<double> partial(n_chunks, 0.0);
  parallel_chunks(pool, static_cast<std::size_t>(xs->n), static_cast<std::size_t>(block),
                  [&](std::size_t c, std::size_t b, std::size_t e) {
                    MatrixXdRM blk(static_cast<Index>(e - b), ys->n);
                    cost_block(*xs, static_cast<Index>(b), static_cast<Index>(e), *ys, 0, ys->n,
                               blk);
                    partial[c] = blk.sum();
                  });
  const double total = static_cast<double>(xs->n) * static_cast<double>(ys->n);
  double mean = std::accumulate(partial.begin(), partial.end(), 0.0) / total;

  // pass 2: centered second moment
  std::fill(partial.begin(), partial.end(), 0.0);
  parallel_chunks(pool, static_cast<std::size_t>(xs->n), static_cast<std::size_t>(block),
                  [&](std::size_t c, std::size_t b, std::size_t e) {
                    MatrixXdRM blk(static_cast<Index>(e - b), ys->n);
                    cost_block(*xs, static_cast<Index>(b), static_cast<Index>(e), *ys, 0, ys->n,
                               blk);
                    partial[c] = (blk.array() - mean).square().sum();
                  });
  double var = std::accumulate(partial.begin(), partial.end(), 0.0) / total;
  scale.std = std::sqrt(std::max(var, 0.0));
  if (!(scale.std >= 1e-12))
    throw DegenerateCost("cost_std: all costs equal (std < 1e-12)");
  return scale;
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

struct PcaProjection {
  MatrixXdRM directions;  // k x d, orthonormal rows (top-k right singular vectors)
  Eigen::VectorXd mean;   // subtracted before projection
  double explained_variance_ratio = 0.0;

  Index k() const { return directions.rows(); }
  Index d() const { return directions.cols(); }
};

/// Fits the top-k PCA directions of Y (covariance eigendecomposition).
inline PcaProjection pca_fit(const PointBatch& Y, Index k) {
  if (Y.n < 2) throw InvalidArgument("pca_fit: need n >= 2");
  if (k < 1 || k > std::min(Y.n - 1, Y.d)) throw InvalidArgument("pca_fit: need 1 <= k <= min(n-1, d)");

  PcaProjection p;
  p.mean = Y.mat().colwise().mean().transpose();
  MatrixXdRM centered = Y.mat().rowwise() - p.mean.transpose();
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(Y.n);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericalError("pca_fit: eigendecomposition failed");
  // ascending eigenvalues; take the top k from the back
  const Eigen::VectorXd& ev = eig.eigenvalues();
  double ev_max = std::max(ev(Y.d - 1), 0.0);
  double tol = ev_max * 1e-12;
  Index nonzero = 0;
  for (Index i = 0; i < Y.d; ++i)
    if (ev(i) > tol) ++nonzero;
  if (nonzero < k) throw RankDeficient("pca_fit: fewer than k nonzero singular values");

  p.directions.resize(k, Y.d);
  double kept = 0.0;
  for (Index r = 0; r < k; ++r) {
    Eigen::VectorXd v = eig.eigenvectors().col(Y.d - 1 - r);
    Index imax;
    v.cwiseAbs().maxCoeff(&imax);
    if (v(imax) < 0) v = -v;  // deterministic sign
    p.directions.row(r) = v.transpose();
    kept += std::max(ev(Y.d - 1 - r), 0.0);
  }
  double total_var = ev.cwiseMax(0.0).sum();
  p.explained_variance_ratio = total_var > 0 ? kept / total_var : 0.0;
  return p;
}

/// x_bar = A (x - mean), applied row by row.
inline PointBatch pca_project(const PcaProjection& p, const PointBatch& X) {
  if (X.d != p.d()) throw DimensionMismatch("pca_project: dimension mismatch");
  PointBatch out(X.n, p.k());
  out.mat().noalias() = (X.mat().rowwise() - p.mean.transpose()) * p.directions.transpose();
  return out;
}

}  // namespace otfm::geometry
