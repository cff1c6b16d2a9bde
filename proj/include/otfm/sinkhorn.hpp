// Log-domain Sinkhorn with blockwise sharded soft-min updates. The n x n
// cost matrix is never instantiated: each half-iteration recomputes dot
// products block by block with a running-max log-sum-exp. Supports adaptive
// over-relaxation, automatic epsilon rescaling by the cost standard
// deviation, optional PCA-reduced matching and warm-started duals.
//
// The row-marginal L1 error is a free byproduct of the f half-update
// (r_i = exp((f_i - f_cand_i)/eps) / n), so convergence is checked every
// iteration at no extra cost and reported iteration counts are exact.
#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>

#include "otfm/common.hpp"
#include "otfm/geometry.hpp"
#include "otfm/momentum.hpp"
#include "otfm/thread_pool.hpp"

namespace otfm::sinkhorn {

struct SinkhornConfig {
  double relative_eps = 0.1;       // scale-free, meaningful within [0.001, 1.0]
  double tau = 1e-3;               // L1 row-marginal tolerance
  Index max_iters = 50000;
  Index momentum_start_iter = 2000;
  Index shard_size = 1024;         // block edge for the soft-min
  std::optional<Index> use_pca;    // project both clouds to k dims first
  std::optional<double> eps_abs;   // bypass std(C)-based rescaling
  Index cost_std_cap = geometry::kDefaultStdCap;
  std::uint64_t seed = 0;          // cost_std subsampling
  double theta_max = 1.95;
  bool record_trace = false;       // keep the per-iteration marginal errors

  void validate() const {
    if (!(relative_eps > 0)) throw InvalidArgument("SinkhornConfig: relative_eps must be > 0");
    if (!(tau > 0)) throw InvalidArgument("SinkhornConfig: tau must be > 0");
    if (max_iters < 1) throw InvalidArgument("SinkhornConfig: max_iters must be >= 1");
    if (momentum_start_iter > max_iters)
      throw InvalidArgument("SinkhornConfig: momentum_start_iter must be <= max_iters");
    if (shard_size < 1) throw InvalidArgument("SinkhornConfig: shard_size must be >= 1");
    if (eps_abs && !(*eps_abs > 0)) throw InvalidArgument("SinkhornConfig: eps_abs must be > 0");
  }
};

struct DualPotentials {
  Eigen::VectorXd f, g;
  double eps_abs = 0.0;  // absolute regularization, std(C) x relative_eps
};

struct SolveReport {
  Index iters_used = 0;
  double final_l1_error = std::numeric_limits<double>::infinity();
  bool converged = false;
  double wall_time = 0.0;  // seconds
  bool warmstarted = false;
  std::vector<double> err_trace;  // filled when record_trace is set
};

struct SolveResult {
  DualPotentials duals;
  SolveReport report;
  // set when the solve ran in PCA space; duals then refer to the projected
  // clouds and downstream coupling ops must use the same projection
  std::optional<geometry::PcaProjection> pca;
};

namespace detail {

// out_i = eps*log(1/n) - eps * LSE_j((opp_j + <a_i, b_j>)/eps), streamed over
// column blocks with a running max. Shards of rows run on the pool; each
// shard owns its output slice and scans blocks in a fixed order, so results
// are reproducible for any worker count.
template <class S>
void softmin_pass(const MatrixRM<S>& A, const MatrixRM<S>& B, const VectorX<S>& opp, S eps,
                  S log_inv_n, Index shard_size, ThreadPool& pool, VectorX<S>& out) {
  const Index na = A.rows(), nb = B.rows();
  const S inv_eps = S(1) / eps;
  parallel_chunks(pool, static_cast<std::size_t>(na), static_cast<std::size_t>(shard_size),
                  [&](std::size_t, std::size_t rb, std::size_t re) {
                    const Index r0 = static_cast<Index>(rb), rows = static_cast<Index>(re - rb);
                    VectorX<S> m = VectorX<S>::Constant(rows, -std::numeric_limits<S>::infinity());
                    VectorX<S> s = VectorX<S>::Zero(rows);
                    MatrixRM<S> blk;
                    for (Index c0 = 0; c0 < nb; c0 += shard_size) {
                      const Index cols = std::min(shard_size, nb - c0);
                      blk.resize(rows, cols);
                      blk.noalias() = A.middleRows(r0, rows) * B.middleRows(c0, cols).transpose();
                      auto oppseg = opp.segment(c0, cols).transpose().array();
                      for (Index i = 0; i < rows; ++i) {
                        auto a = (blk.row(i).array() + oppseg) * inv_eps;
                        S mb = a.maxCoeff();
                        S mn = m(i) < mb ? mb : m(i);
                        if (mn == -std::numeric_limits<S>::infinity()) continue;
                        S acc = (a - mn).exp().sum();
                        s(i) = s(i) * std::exp(m(i) - mn) + acc;
                        m(i) = mn;
                      }
                    }
                    for (Index i = 0; i < rows; ++i)
                      out(r0 + i) = eps * (log_inv_n - (m(i) + std::log(s(i))));
                  });
}

// L1 deviation of the implicit row marginals from 1/n, given the candidate
// f update for the current duals.
template <class S>
double l1_marginal_error(const VectorX<S>& f, const VectorX<S>& f_cand, S eps) {
  double err = 0.0;
  const Index n = f.size();
  for (Index i = 0; i < n; ++i)
    err += std::abs(std::exp(static_cast<double>(f(i) - f_cand(i)) / static_cast<double>(eps)) -
                    1.0);
  return err / static_cast<double>(n);
}

}  // namespace detail

/// Spec'd soft-min building block: recomputed f entries for the row range
/// [r0, r1) of X against all of Y, given the current g.
inline Eigen::VectorXd softmin_rows(const PointBatch& X, Index r0, Index r1, const PointBatch& Y,
                                    const Eigen::VectorXd& g, double eps_abs,
                                    Index shard_size = 1024) {
  require_same_dim(X, Y, "softmin_rows");
  if (!(eps_abs > 0)) throw InvalidArgument("softmin_rows: eps_abs must be > 0");
  if (g.size() != Y.n) throw DimensionMismatch("softmin_rows: g size mismatch");
  MatrixRM<double> A = X.mat().middleRows(r0, r1 - r0);
  MatrixRM<double> B = Y.mat();
  Eigen::VectorXd out(r1 - r0);
  detail::softmin_pass<double>(A, B, g, eps_abs, -std::log(double(Y.n)), shard_size,
                               ThreadPool::global(), out);
  if (!out.allFinite()) throw NonFinite("softmin_rows: non-finite output");
  return out;
}

enum class MarginalSide { kRow, kCol };

/// L1 norm of the marginal violation of the implicit coupling, computed
/// blockwise (no n x n allocation).
inline double marginal_error(const DualPotentials& duals, const PointBatch& X, const PointBatch& Y,
                             MarginalSide side = MarginalSide::kRow, Index shard_size = 1024) {
  require_same_dim(X, Y, "marginal_error");
  if (duals.f.size() != X.n || duals.g.size() != Y.n)
    throw DimensionMismatch("marginal_error: dual size mismatch");
  if (!duals.f.allFinite() || !duals.g.allFinite()) throw NonFinite("marginal_error: duals");
  MatrixRM<double> A, B;
  Eigen::VectorXd cand(side == MarginalSide::kRow ? X.n : Y.n);
  const double eps = duals.eps_abs;
  if (side == MarginalSide::kRow) {
    A = X.mat();
    B = Y.mat();
    detail::softmin_pass<double>(A, B, duals.g, eps, -std::log(double(Y.n)), shard_size,
                                 ThreadPool::global(), cand);
    return detail::l1_marginal_error<double>(duals.f, cand, eps);
  }
  A = Y.mat();
  B = X.mat();
  detail::softmin_pass<double>(A, B, duals.f, eps, -std::log(double(X.n)), shard_size,
                               ThreadPool::global(), cand);
  return detail::l1_marginal_error<double>(duals.g, cand, eps);
}

/// Alternating dual updates until the row-marginal error drops below tau.
/// `init`, when given, is used verbatim as the starting duals.
template <class S = double>
inline SolveResult solve(const PointBatch& X, const PointBatch& Y, const SinkhornConfig& cfg,
                         const std::optional<DualPotentials>& init = std::nullopt) {
  cfg.validate();
  X.validate();
  Y.validate();
  require_same_dim(X, Y, "sinkhorn::solve");
  if (X.n != Y.n) throw InvalidArgument("sinkhorn::solve: square coupling requires equal n");
  const auto t_start = std::chrono::steady_clock::now();

  SolveResult result;
  const PointBatch* xs = &X;
  const PointBatch* ys = &Y;
  PointBatch xp, yp;
  if (cfg.use_pca) {
    result.pca = geometry::pca_fit(Y, *cfg.use_pca);
    xp = geometry::pca_project(*result.pca, X);
    yp = geometry::pca_project(*result.pca, Y);
    xs = &xp;
    ys = &yp;
  }

  // epsilon is scale-free: the absolute value used by the iteration is
  // std(C) x relative_eps, with std recomputed in the projected space
  double eps_abs = cfg.eps_abs
                       ? *cfg.eps_abs
                       : geometry::cost_std(*xs, *ys, cfg.cost_std_cap, cfg.seed).std *
                             cfg.relative_eps;

  const Index n = xs->n;
  MatrixRM<S> A = xs->mat().cast<S>();
  MatrixRM<S> B = ys->mat().cast<S>();
  const S eps = static_cast<S>(eps_abs);
  const S log_inv_n = -std::log(static_cast<S>(n));
  ThreadPool& pool = ThreadPool::global();

  VectorX<S> f = VectorX<S>::Zero(n), g = VectorX<S>::Zero(n);
  if (init) {
    if (init->f.size() != n || init->g.size() != n)
      throw DimensionMismatch("sinkhorn::solve: init dual size mismatch");
    f = init->f.cast<S>();
    g = init->g.cast<S>();
    result.report.warmstarted = true;
  }
  VectorX<S> f_cand(n), g_cand(n);
  MomentumController momentum(cfg.momentum_start_iter, cfg.theta_max);

  SolveReport& rep = result.report;
  for (Index iter = 0; iter < cfg.max_iters; ++iter) {
    detail::softmin_pass<S>(A, B, g, eps, log_inv_n, cfg.shard_size, pool, f_cand);
    double err = detail::l1_marginal_error<S>(f, f_cand, eps);
    rep.final_l1_error = err;
    rep.iters_used = iter;
    if (cfg.record_trace) rep.err_trace.push_back(err);
    if (err <= cfg.tau) {
      rep.converged = true;
      break;
    }
    if (!f_cand.allFinite()) throw NonFinite("sinkhorn::solve: non-finite dual (f)");
    S theta = static_cast<S>(momentum.theta(iter, err));
    f = (iter >= cfg.momentum_start_iter) ? (f + theta * (f_cand - f)).eval() : f_cand;
    detail::softmin_pass<S>(B, A, f, eps, log_inv_n, cfg.shard_size, pool, g_cand);
    if (!g_cand.allFinite()) throw NonFinite("sinkhorn::solve: non-finite dual (g)");
    g = (iter >= cfg.momentum_start_iter) ? (g + theta * (g_cand - g)).eval() : g_cand;
    rep.iters_used = iter + 1;
  }

  result.duals.f = f.template cast<double>();
  result.duals.g = g.template cast<double>();
  result.duals.eps_abs = eps_abs;
  rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

/// Continuous extension of converged duals onto a fresh batch, evaluated
/// blockwise against the batch that produced them:
///   f'(x') = eps log(1/n) + min_eps_j(C(x', y_j) - g_j)
/// and symmetrically for g'. Used to warm-start the next solve.
inline DualPotentials extend_warmstart(const DualPotentials& prev, const PointBatch& prev_x,
                                       const PointBatch& prev_y, const PointBatch& new_x,
                                       const PointBatch& new_y, Index shard_size = 1024) {
  require_same_dim(prev_x, new_x, "extend_warmstart");
  require_same_dim(prev_y, new_y, "extend_warmstart");
  if (prev.f.size() != prev_x.n || prev.g.size() != prev_y.n)
    throw DimensionMismatch("extend_warmstart: dual size mismatch");
  DualPotentials out;
  out.eps_abs = prev.eps_abs;
  out.f.resize(new_x.n);
  out.g.resize(new_y.n);
  ThreadPool& pool = ThreadPool::global();
  const double eps = prev.eps_abs;
  MatrixRM<double> nx = new_x.mat(), ny = new_y.mat(), px = prev_x.mat(), py = prev_y.mat();
  detail::softmin_pass<double>(nx, py, prev.g, eps, -std::log(double(prev_y.n)), shard_size, pool,
                               out.f);
  detail::softmin_pass<double>(ny, px, prev.f, eps, -std::log(double(prev_x.n)), shard_size, pool,
                               out.g);
  if (!out.f.allFinite() || !out.g.allFinite())
    throw NonFinite("extend_warmstart: non-finite extension");
  return out;
}

}  // namespace otfm::sinkhorn
