// Trajectory integration (fixed-step Euler, adaptive Dormand-Prince 5(4))
// and the evaluation metrics for a trained field: curvature, reconstruction
// against a known transport map, and NLL/BPD via the density ODE with a
// Hutchinson divergence estimator.
//
// Velocity fields are passed as template parameters. Required surface:
//   MatrixXdRM eval_batch(const VectorXd& ts, const MatrixXdRM& X)
// and for nll_bpd additionally
//   MatrixXdRM jvp_batch(const VectorXd& ts, const MatrixXdRM& X,
//                        const MatrixXdRM& U)
// (the exact directional derivative of the field in x).
#pragma once

#include <string>
#include <vector>

#include "otfm/common.hpp"
#include "otfm/flowmatch.hpp"
#include "otfm/rng.hpp"
#include "otfm/synthbench.hpp"

namespace otfm::metrics {

// Adapter exposing an Mlp as a batched velocity field.
struct MlpField {
  const flowmatch::Mlp<double>* net;

  MatrixXdRM eval_batch(const Eigen::VectorXd& ts, const MatrixXdRM& X) const {
    return net->forward_batch(ts, X);
  }
  MatrixXdRM jvp_batch(const Eigen::VectorXd& ts, const MatrixXdRM& X,
                       const MatrixXdRM& U) const {
    return net->jvp_batch(ts, X, U);
  }
};

struct Trajectory {
  std::vector<double> times;       // strictly increasing, 0 to 1
  std::vector<Eigen::VectorXd> states;
  Index nfe = 0;
};

struct SolverSpec {
  enum class Kind { kEuler, kDopri5 } kind = Kind::kEuler;
  Index n_steps = 50;     // euler
  double rtol = 1e-6;     // dopri5
  double atol = 1e-8;

  static SolverSpec euler(Index steps) {
    SolverSpec s;
    s.kind = Kind::kEuler;
    s.n_steps = steps;
    return s;
  }
  static SolverSpec dopri5(double rtol = 1e-6, double atol = 1e-8) {
    SolverSpec s;
    s.kind = Kind::kDopri5;
    s.rtol = rtol;
    s.atol = atol;
    return s;
  }
};

namespace detail {

template <class Field>
Eigen::VectorXd eval_one(const Field& v, double t, const Eigen::VectorXd& x) {
  Eigen::VectorXd ts(1);
  ts(0) = t;
  MatrixXdRM X(1, x.size());
  X.row(0) = x.transpose();
  return v.eval_batch(ts, X).row(0).transpose();
}

}  // namespace detail

/// Forward Euler on a uniform grid: x_{t+h} = x_t + h v(t, x_t).
template <class Field>
Trajectory integrate_euler(const Field& v, const Eigen::VectorXd& x0, Index n_steps) {
  if (n_steps < 1) throw InvalidArgument("integrate_euler: need n_steps >= 1");
  Trajectory traj;
  const double h = 1.0 / static_cast<double>(n_steps);
  Eigen::VectorXd x = x0;
  traj.times.push_back(0.0);
  traj.states.push_back(x);
  for (Index k = 0; k < n_steps; ++k) {
    const double t = static_cast<double>(k) * h;
    x += h * detail::eval_one(v, t, x);
    if (!x.allFinite()) throw NonFinite("integrate_euler: state");
    traj.times.push_back(static_cast<double>(k + 1) * h);
    traj.states.push_back(x);
    ++traj.nfe;
  }
  return traj;
}

/// Dormand-Prince 5(4) with a PI step-size controller and FSAL.
template <class Field>
Trajectory integrate_dopri5(const Field& v, const Eigen::VectorXd& x0, double rtol = 1e-6,
                            double atol = 1e-8) {
  if (!(rtol > 0) || !(atol > 0)) throw InvalidArgument("integrate_dopri5: tolerances");
  static const double c[7] = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
  static const double a[7][6] = {
      {},
      {1.0 / 5},
      {3.0 / 40, 9.0 / 40},
      {44.0 / 45, -56.0 / 15, 32.0 / 9},
      {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
      {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
      {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
  static const double b5[7] = {35.0 / 384,     0.0,  500.0 / 1113, 125.0 / 192,
                               -2187.0 / 6784, 11.0 / 84, 0.0};
  static const double b4[7] = {5179.0 / 57600,  0.0,        7571.0 / 16695, 393.0 / 640,
                               -92097.0 / 339200, 187.0 / 2100, 1.0 / 40};

  Trajectory traj;
  Eigen::VectorXd x = x0;
  double t = 0.0;
  traj.times.push_back(t);
  traj.states.push_back(x);

  Eigen::VectorXd k[7];
  k[0] = detail::eval_one(v, t, x);
  ++traj.nfe;
  double h = 0.05;
  double prev_err = 1.0;
  const double h_min = 1e-12;

  while (t < 1.0) {
    if (t + h > 1.0) h = 1.0 - t;
    for (int s = 1; s < 7; ++s) {
      Eigen::VectorXd xs = x;
      for (int j = 0; j < s; ++j)
        if (a[s][j] != 0.0) xs += h * a[s][j] * k[j];
      k[s] = detail::eval_one(v, t + c[s] * h, xs);
      ++traj.nfe;
    }
    Eigen::VectorXd x5 = x, x4 = x;
    for (int s = 0; s < 7; ++s) {
      if (b5[s] != 0.0) x5 += h * b5[s] * k[s];
      if (b4[s] != 0.0) x4 += h * b4[s] * k[s];
    }
    // scaled RMS error
    double err = 0.0;
    for (Index i = 0; i < x.size(); ++i) {
      double sc = atol + rtol * std::max(std::abs(x(i)), std::abs(x5(i)));
      double e = (x5(i) - x4(i)) / sc;
      err += e * e;
    }
    err = std::sqrt(err / static_cast<double>(x.size()));

    const bool accept = err <= 1.0;
    if (accept) {
      t += h;
      x = x5;
      if (!x.allFinite()) throw NonFinite("integrate_dopri5: state");
      traj.times.push_back(t);
      traj.states.push_back(x);
      k[0] = k[6];  // FSAL
      prev_err = std::max(err, 1e-10);
    }
    // PI controller
    double fac = 0.9 * std::pow(err > 0 ? 1.0 / err : 1e10, 0.2) *
                 std::pow(prev_err, 0.08);
    fac = std::min(5.0, std::max(0.2, fac));
    if (!accept) fac = std::min(fac, 1.0);
    h *= fac;
    if (h < h_min && t < 1.0) throw StepSizeUnderflow("integrate_dopri5: step size underflow");
  }
  return traj;
}

/// Batched Euler endpoints for a whole point batch.
template <class Field>
MatrixXdRM euler_endpoints(const Field& v, const PointBatch& X0, Index n_steps, Index* nfe = nullptr) {
  MatrixXdRM X = X0.mat();
  const double h = 1.0 / static_cast<double>(n_steps);
  Eigen::VectorXd ts(X.rows());
  for (Index k = 0; k < n_steps; ++k) {
    ts.setConstant(static_cast<double>(k) * h);
    X += h * v.eval_batch(ts, X);
  }
  if (!X.allFinite()) throw NonFinite("euler_endpoints: state");
  if (nfe) *nfe += n_steps;
  return X;
}

/// kappa = mean_i integral_0^1 ||v(t, x_t) - (x_1 - x_0)||^2 dt, with the
/// trajectory and the left-Riemann quadrature on the same Euler grid.
template <class Field>
double curvature(const Field& v, const PointBatch& X0, Index n_steps = 50) {
  const Index B = X0.n;
  MatrixXdRM X = X0.mat();
  const double h = 1.0 / static_cast<double>(n_steps);
  std::vector<MatrixXdRM> vels;
  vels.reserve(static_cast<std::size_t>(n_steps));
  Eigen::VectorXd ts(B);
  for (Index k = 0; k < n_steps; ++k) {
    ts.setConstant(static_cast<double>(k) * h);
    MatrixXdRM V = v.eval_batch(ts, X);
    X += h * V;
    vels.push_back(std::move(V));
  }
  if (!X.allFinite()) throw NonFinite("curvature: state");
  MatrixXdRM chord = X - X0.mat();  // x_1 - x_0 per trajectory
  double acc = 0.0;
  for (Index k = 0; k < n_steps; ++k)
    acc += (vels[static_cast<std::size_t>(k)] - chord).rowwise().squaredNorm().sum() * h;
  return acc / static_cast<double>(B);
}

/// R = mean_i || T_theta(x0_i) - T_0(x0_i) ||^2 with T_theta the flow map of
/// the chosen solver.
template <class Field>
double reconstruction_loss(const Field& v, const synthbench::PiecewiseBrenierMap& map,
                           const PointBatch& X0, const SolverSpec& spec = SolverSpec::euler(50)) {
  if (map.d != X0.d) throw DimensionMismatch("reconstruction_loss: dimension mismatch");
  MatrixXdRM endpoints;
  if (spec.kind == SolverSpec::Kind::kEuler) {
    endpoints = euler_endpoints(v, X0, spec.n_steps);
  } else {
    endpoints.resize(X0.n, X0.d);
    for (Index i = 0; i < X0.n; ++i) {
      auto traj = integrate_dopri5(v, X0.row(i).eval(), spec.rtol, spec.atol);
      endpoints.row(i) = traj.states.back().transpose();
    }
  }
  double acc = 0.0;
  for (Index i = 0; i < X0.n; ++i)
    acc += (endpoints.row(i).transpose() - synthbench::apply_map(map, X0.row(i).eval()))
               .squaredNorm();
  return acc / static_cast<double>(X0.n);
}

struct NllResult {
  double nll = 0.0;
  double bpd = 0.0;
  Index nfe = 0;
};

/// Backward Euler integration of the density ODE from t=1 to t=0. The
/// divergence is estimated per step by hutchinson_k Rademacher probes with
/// the exact directional derivative (forward mode), never finite
/// differences. Probe signs are keyed by (seed, sample, step, probe).
template <class Field>
NllResult nll_bpd(const Field& v, const PointBatch& X1, Index hutchinson_k = 8,
                  Index n_steps = 50, std::uint64_t seed = 0) {
  if (hutchinson_k < 1 || n_steps < 1) throw InvalidArgument("nll_bpd: bad parameters");
  const Index B = X1.n, d = X1.d;
  const double h = 1.0 / static_cast<double>(n_steps);
  MatrixXdRM X = X1.mat();
  Eigen::VectorXd div_int = Eigen::VectorXd::Zero(B);
  Eigen::VectorXd ts(B);
  MatrixXdRM Z(B, d);
  NllResult out;

  const std::uint64_t probe_key = rng::derive(seed, rng::salt::kProbe);
  for (Index k = n_steps; k >= 1; --k) {
    const double t = static_cast<double>(k) * h;
    ts.setConstant(t);
    Eigen::VectorXd div = Eigen::VectorXd::Zero(B);
    for (Index p = 0; p < hutchinson_k; ++p) {
      for (Index i = 0; i < B; ++i) {
        // one word yields 64 Rademacher signs
        std::uint64_t sample_key =
            rng::derive(probe_key, static_cast<std::uint64_t>(i));
        std::uint64_t step_key = rng::derive(
            sample_key, static_cast<std::uint64_t>(k) * 1024 + static_cast<std::uint64_t>(p));
        for (Index j = 0; j < d; ++j) {
          std::uint64_t w = rng::word(step_key, static_cast<std::uint64_t>(j) >> 6);
          Z(i, j) = ((w >> (static_cast<std::uint64_t>(j) & 63)) & 1) ? 1.0 : -1.0;
        }
      }
      MatrixXdRM JZ = v.jvp_batch(ts, X, Z);
      div += JZ.cwiseProduct(Z).rowwise().sum();
      out.nfe += B;
    }
    div /= static_cast<double>(hutchinson_k);
    div_int += h * div;
    X -= h * v.eval_batch(ts, X);
    out.nfe += B;
    if (!X.allFinite()) throw NonFinite("nll_bpd: state");
  }

  // log p1(x1) = log p0(x0) - integral of divergence
  const double log_norm = -0.5 * static_cast<double>(d) * std::log(2.0 * M_PI);
  double nll_acc = 0.0;
  for (Index i = 0; i < B; ++i) {
    double logp0 = log_norm - 0.5 * X.row(i).squaredNorm();
    nll_acc -= logp0 - div_int(i);
  }
  out.nll = nll_acc / static_cast<double>(B);
  out.bpd = out.nll / (static_cast<double>(d) * std::log(2.0));
  return out;
}

struct MetricReport {
  double curvature = 0.0;
  double reconstruction = 0.0;
  double nll = 0.0;
  double bpd = 0.0;
  Index nfe = 0;
};

inline std::string report_csv_header() {
  return "run_id,checkpoint,solver,n_steps,curvature,reconstruction,nll,bpd,nfe";
}

inline std::string report_csv_row(const std::string& run_id, const std::string& checkpoint,
                                  const std::string& solver, Index n_steps,
                                  const MetricReport& r) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%s,%s,%s,%lld,%.9g,%.9g,%.9g,%.9g,%lld", run_id.c_str(),
                checkpoint.c_str(), solver.c_str(), static_cast<long long>(n_steps), r.curvature,
                r.reconstruction, r.nll, r.bpd, static_cast<long long>(r.nfe));
  return std::string(buf);
}

}  // namespace otfm::metrics
