// Velocity-field MLP with Fourier time encoding and the one-step flow
// matching training loop. Supports independent, batch-OT and
// perfect-supervision coupling, with OT batches consumed in gradient-batch
// chunks and Sinkhorn warm-started across batches.
#pragma once

#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "otfm/binio.hpp"
#include "otfm/common.hpp"
#include "otfm/coupling.hpp"
#include "otfm/pairstore.hpp"
#include "otfm/rng.hpp"
#include "otfm/sinkhorn.hpp"
#include "otfm/synthbench.hpp"
#include "otfm/thread_pool.hpp"

namespace otfm::flowmatch {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

inline std::vector<Index> default_hidden(Index d) {
  return std::vector<Index>(5, d <= 64 ? 512 : 1024);
}

// silu(x) = x * sigmoid(x); smooth, so the divergence of the field exists.
template <class S>
inline S silu(S x) {
  return x / (S(1) + std::exp(-x));
}
template <class S>
inline S silu_prime(S x) {
  S sig = S(1) / (S(1) + std::exp(-x));
  return sig * (S(1) + x * (S(1) - sig));
}

// ---------------------------------------------------------------------------
// MLP velocity field v(t, x): input [x, sin(2pi 2^j t), cos(2pi 2^j t)],
// j = 0..n_freq-1, silu hidden layers, linear output of size d.
// ---------------------------------------------------------------------------

template <class S>
struct Mlp {
  Index d = 0;
  Index n_freq = 0;
  std::vector<MatrixRM<S>> w;  // w[l] is out x in
  std::vector<VectorX<S>> b;

  Index input_dim() const { return d + 2 * n_freq; }
  Index layers() const { return static_cast<Index>(w.size()); }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (std::size_t l = 0; l < w.size(); ++l)
      total += static_cast<std::size_t>(w[l].size() + b[l].size());
    return total;
  }

  bool finite() const {
    for (std::size_t l = 0; l < w.size(); ++l)
      if (!w[l].allFinite() || !b[l].allFinite()) return false;
    return true;
  }

  // fan-in scaled Gaussian init; the output layer starts at zero so the
  // initial field is identically zero
  static Mlp init(Index d, const std::vector<Index>& hidden, Index n_freq, std::uint64_t seed) {
    if (d < 1 || n_freq < 1 || hidden.empty())
      throw InvalidArgument("Mlp::init: bad architecture");
    Mlp net;
    net.d = d;
    net.n_freq = n_freq;
    std::vector<Index> dims;
    dims.push_back(d + 2 * n_freq);
    for (Index h : hidden) dims.push_back(h);
    dims.push_back(d);
    rng::Stream s(rng::derive(seed, rng::salt::kInit));
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      MatrixRM<S> wl(dims[l + 1], dims[l]);
      const bool last = (l + 2 == dims.size());
      const double scale = last ? 0.0 : 1.0 / std::sqrt(static_cast<double>(dims[l]));
      for (Index i = 0; i < wl.rows(); ++i)
        for (Index j = 0; j < wl.cols(); ++j) wl(i, j) = static_cast<S>(scale * s.normal());
      net.w.push_back(std::move(wl));
      net.b.push_back(VectorX<S>::Zero(dims[l + 1]));
    }
    return net;
  }

  void time_features(S t, Eigen::Ref<VectorX<S>> out) const {
    for (Index j = 0; j < n_freq; ++j) {
      const S arg = static_cast<S>(kTwoPi) * static_cast<S>(double(Index(1) << j)) * t;
      out(2 * j) = std::sin(arg);
      out(2 * j + 1) = std::cos(arg);
    }
  }

  // single-sample forward
  VectorX<S> operator()(S t, const Eigen::Ref<const VectorX<S>>& x) const {
    if (x.size() != d) throw DimensionMismatch("Mlp: input dimension");
    VectorX<S> h(input_dim());
    h.head(d) = x;
    time_features(t, h.tail(2 * n_freq));
    for (Index l = 0; l < layers(); ++l) {
      VectorX<S> z = w[l] * h + b[l];
      if (l + 1 < layers())
        h = z.unaryExpr([](S v) { return silu(v); });
      else
        h = std::move(z);
    }
    return h;
  }

  // rows of X with per-row times; returns B x d velocities
  MatrixRM<S> forward_batch(const VectorX<S>& ts, const MatrixRM<S>& X) const {
    const Index B = X.rows();
    if (X.cols() != d || ts.size() != B) throw DimensionMismatch("Mlp: batch shapes");
    MatrixRM<S> h(B, input_dim());
    h.leftCols(d) = X;
    for (Index i = 0; i < B; ++i) {
      auto tail = h.row(i).tail(2 * n_freq);
      for (Index j = 0; j < n_freq; ++j) {
        const S arg = static_cast<S>(kTwoPi) * static_cast<S>(double(Index(1) << j)) * ts(i);
        tail(2 * j) = std::sin(arg);
        tail(2 * j + 1) = std::cos(arg);
      }
    }
    for (Index l = 0; l < layers(); ++l) {
      MatrixRM<S> z = (h * w[l].transpose()).rowwise() + b[l].transpose();
      if (l + 1 < layers())
        h = z.unaryExpr([](S v) { return silu(v); });
      else
        h = std::move(z);
    }
    return h;
  }

  // directional derivative of the field in x: d/da v(t, x + a u) at a = 0,
  // computed by forward-mode tangent propagation (time features are constant)
  MatrixRM<S> jvp_batch(const VectorX<S>& ts, const MatrixRM<S>& X, const MatrixRM<S>& U) const {
    const Index B = X.rows();
    if (U.rows() != B || U.cols() != d) throw DimensionMismatch("Mlp: jvp shapes");
    MatrixRM<S> h(B, input_dim());
    h.leftCols(d) = X;
    for (Index i = 0; i < B; ++i) {
      auto tail = h.row(i).tail(2 * n_freq);
      for (Index j = 0; j < n_freq; ++j) {
        const S arg = static_cast<S>(kTwoPi) * static_cast<S>(double(Index(1) << j)) * ts(i);
        tail(2 * j) = std::sin(arg);
        tail(2 * j + 1) = std::cos(arg);
      }
    }
    MatrixRM<S> u(B, input_dim());
    u.setZero();
    u.leftCols(d) = U;
    for (Index l = 0; l < layers(); ++l) {
      MatrixRM<S> z = (h * w[l].transpose()).rowwise() + b[l].transpose();
      MatrixRM<S> tz = u * w[l].transpose();
      if (l + 1 < layers()) {
        u = tz.binaryExpr(z, [](S tv, S zv) { return tv * silu_prime(zv); });
        h = z.unaryExpr([](S v) { return silu(v); });
      } else {
        u = std::move(tz);
        h = std::move(z);
      }
    }
    return u;
  }
};

template <class S>
struct MlpGrads {
  std::vector<MatrixRM<S>> w;
  std::vector<VectorX<S>> b;

  static MlpGrads zeros_like(const Mlp<S>& net) {
    MlpGrads g;
    for (std::size_t l = 0; l < net.w.size(); ++l) {
      g.w.push_back(MatrixRM<S>::Zero(net.w[l].rows(), net.w[l].cols()));
      g.b.push_back(VectorX<S>::Zero(net.b[l].size()));
    }
    return g;
  }

  void add(const MlpGrads& o) {
    for (std::size_t l = 0; l < w.size(); ++l) {
      w[l] += o.w[l];
      b[l] += o.b[l];
    }
  }
};

// ---------------------------------------------------------------------------
// Loss and exact reverse-mode gradients for the flow matching regression
// L = mean_k || x1_k - x0_k - v(xt_k, t_k) ||^2.
// ---------------------------------------------------------------------------

namespace detail {

// forward + backward on a contiguous row range; returns the sum (not mean)
// of squared residuals, gradients scaled by the caller
template <class S>
S chunk_backprop(const Mlp<S>& net, const VectorX<S>& ts, const MatrixRM<S>& xt,
                 const MatrixRM<S>& target, Index r0, Index r1, MlpGrads<S>& grads) {
  const Index B = r1 - r0;
  const Index L = net.layers();
  std::vector<MatrixRM<S>> acts(static_cast<std::size_t>(L));  // pre-activations z_l
  std::vector<MatrixRM<S>> inputs(static_cast<std::size_t>(L));

  MatrixRM<S> h(B, net.input_dim());
  h.leftCols(net.d) = xt.middleRows(r0, B);
  for (Index i = 0; i < B; ++i) {
    auto tail = h.row(i).tail(2 * net.n_freq);
    for (Index j = 0; j < net.n_freq; ++j) {
      const S arg = static_cast<S>(kTwoPi) * static_cast<S>(double(Index(1) << j)) * ts(r0 + i);
      tail(2 * j) = std::sin(arg);
      tail(2 * j + 1) = std::cos(arg);
    }
  }
  for (Index l = 0; l < L; ++l) {
    inputs[static_cast<std::size_t>(l)] = h;
    MatrixRM<S> z = (h * net.w[l].transpose()).rowwise() + net.b[l].transpose();
    if (l + 1 < L) {
      h = z.unaryExpr([](S v) { return silu(v); });
      acts[static_cast<std::size_t>(l)] = std::move(z);
    } else {
      h = z;
      acts[static_cast<std::size_t>(l)] = std::move(z);
    }
  }

  MatrixRM<S> resid = h - target.middleRows(r0, B);
  S loss_sum = resid.squaredNorm();

  MatrixRM<S> delta = S(2) * resid;  // dL/dz_last for sum-of-squares
  for (Index l = L - 1; l >= 0; --l) {
    grads.w[static_cast<std::size_t>(l)].noalias() +=
        delta.transpose() * inputs[static_cast<std::size_t>(l)];
    grads.b[static_cast<std::size_t>(l)] += delta.colwise().sum().transpose();
    if (l > 0) {
      MatrixRM<S> up = delta * net.w[l];
      delta = up.binaryExpr(acts[static_cast<std::size_t>(l - 1)],
                            [](S g, S z) { return g * silu_prime(z); });
    }
  }
  return loss_sum;
}

}  // namespace detail

/// Mean squared residual over the batch plus exact parameter gradients.
/// Batch rows are processed in fixed 128-row chunks whose partial gradients
/// are combined in chunk order, so results do not depend on the worker count.
template <class S>
std::pair<S, MlpGrads<S>> loss_and_grad(const Mlp<S>& net, const VectorX<S>& ts,
                                        const MatrixRM<S>& x0, const MatrixRM<S>& x1) {
  const Index B = x0.rows();
  if (x1.rows() != B || ts.size() != B || x0.cols() != net.d || x1.cols() != net.d)
    throw DimensionMismatch("loss_and_grad: batch shapes");

  MatrixRM<S> xt(B, net.d), target(B, net.d);
  for (Index i = 0; i < B; ++i) {
    const S t = ts(i);
    xt.row(i) = (S(1) - t) * x0.row(i) + t * x1.row(i);
    target.row(i) = x1.row(i) - x0.row(i);
  }

  const Index chunk = 128;
  const std::size_t n_chunks = static_cast<std::size_t>((B + chunk - 1) / chunk);
  std::vector<MlpGrads<S>> partial(n_chunks);
  std::vector<S> losses(n_chunks, S(0));
  parallel_chunks(ThreadPool::global(), static_cast<std::size_t>(B),
                  static_cast<std::size_t>(chunk),
                  [&](std::size_t c, std::size_t rb, std::size_t re) {
                    partial[c] = MlpGrads<S>::zeros_like(net);
                    losses[c] = detail::chunk_backprop(net, ts, xt, target,
                                                       static_cast<Index>(rb),
                                                       static_cast<Index>(re), partial[c]);
                  });
  MlpGrads<S> grads = std::move(partial[0]);
  S loss = losses[0];
  for (std::size_t c = 1; c < n_chunks; ++c) {
    grads.add(partial[c]);
    loss += losses[c];
  }
  const S inv_b = S(1) / static_cast<S>(B);
  for (std::size_t l = 0; l < grads.w.size(); ++l) {
    grads.w[l] *= inv_b;
    grads.b[l] *= inv_b;
  }
  loss *= inv_b;
  if (!std::isfinite(static_cast<double>(loss))) throw NonFinite("loss_and_grad: loss");
  return {loss, std::move(grads)};
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class S>
struct AdamState {
  std::vector<MatrixRM<S>> mw, vw;
  std::vector<VectorX<S>> mb, vb;
  long step = 0;

  static AdamState zeros_like(const Mlp<S>& net) {
    AdamState st;
    for (std::size_t l = 0; l < net.w.size(); ++l) {
      st.mw.push_back(MatrixRM<S>::Zero(net.w[l].rows(), net.w[l].cols()));
      st.vw.push_back(MatrixRM<S>::Zero(net.w[l].rows(), net.w[l].cols()));
      st.mb.push_back(VectorX<S>::Zero(net.b[l].size()));
      st.vb.push_back(VectorX<S>::Zero(net.b[l].size()));
    }
    return st;
  }
};

/// Standard Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8).
template <class S>
void adam_update(Mlp<S>& net, const MlpGrads<S>& grads, AdamState<S>& st, S lr,
                 S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8)) {
  st.step += 1;
  const S c1 = S(1) - std::pow(beta1, static_cast<S>(st.step));
  const S c2 = S(1) - std::pow(beta2, static_cast<S>(st.step));
  for (std::size_t l = 0; l < net.w.size(); ++l) {
    st.mw[l] = beta1 * st.mw[l] + (S(1) - beta1) * grads.w[l];
    st.vw[l] = beta2 * st.vw[l] + (S(1) - beta2) * grads.w[l].cwiseProduct(grads.w[l]);
    net.w[l].array() -=
        lr * (st.mw[l].array() / c1) / ((st.vw[l].array() / c2).sqrt() + eps);
    st.mb[l] = beta1 * st.mb[l] + (S(1) - beta1) * grads.b[l];
    st.vb[l] = beta2 * st.vb[l] + (S(1) - beta2) * grads.b[l].cwiseProduct(grads.b[l]);
    net.b[l].array() -=
        lr * (st.mb[l].array() / c1) / ((st.vb[l].array() / c2).sqrt() + eps);
    if (!net.w[l].allFinite() || !net.b[l].allFinite())
      throw NonFinite("adam_update: parameters");
  }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class CouplingMode { kIndependent, kBatchOt, kPaired };

inline const char* mode_name(CouplingMode m) {
  switch (m) {
    case CouplingMode::kIndependent: return "ifm";
    case CouplingMode::kBatchOt: return "otfm";
    case CouplingMode::kPaired: return "paired";
  }
  return "?";
}

struct TrainConfig {
  CouplingMode mode = CouplingMode::kBatchOt;
  double relative_eps = 0.01;    // batch_ot only
  Index ot_batch_n = 4096;       // coupling batch; >= grad_batch when batch_ot
  Index grad_batch = 2048;
  Index steps = 8192;
  double lr = 1e-3;
  std::vector<Index> hidden;     // empty -> default_hidden(d)
  Index n_freq = 0;              // 0 -> max(1, d/8)
  bool warmstart = true;
  std::string pairs_path;        // batch_ot only: load precomputed pairs
  sinkhorn::SinkhornConfig ot;   // tau, max_iters, shard_size, pca

  void validate() const {
    if (steps < 1 || grad_batch < 1) throw InvalidArgument("TrainConfig: steps/grad_batch");
    if (!(lr > 0)) throw InvalidArgument("TrainConfig: lr must be positive");
    if (mode == CouplingMode::kBatchOt && ot_batch_n < grad_batch)
      throw InvalidArgument("TrainConfig: ot_batch_n must be >= grad_batch");
    if (!pairs_path.empty() && mode != CouplingMode::kBatchOt)
      throw InvalidArgument("TrainConfig: precomputed pairs require batch_ot mode");
  }
};

// Synthetic flow task: sources are keyed standard normals; data points are a
// fixed pure function of their id, so inline training and the precomputed
// pair store see bit-identical values.
struct SyntheticTask {
  synthbench::PiecewiseBrenierMap map;
  std::uint64_t seed = 0;

  Index d() const { return map.d; }

  std::uint64_t noise_key(std::uint64_t slot) const {
    return rng::derive(rng::derive(seed, rng::salt::kNoise), slot);
  }

  Eigen::VectorXd noise(std::uint64_t slot) const {
    return pairstore::noise_from_key(noise_key(slot), map.d);
  }

  Eigen::VectorXd data(std::uint64_t id) const {
    Eigen::VectorXd z =
        pairstore::noise_from_key(rng::derive(rng::derive(seed, rng::salt::kData), id), map.d);
    return synthbench::apply_map(map, z);
  }

  Eigen::VectorXd paired_target(std::uint64_t slot) const {
    return synthbench::apply_map(map, noise(slot).eval());
  }
};

struct LogRow {
  Index step = 0;
  double loss = 0;
  CouplingMode mode = CouplingMode::kIndependent;
  Index n = 0;
  double relative_eps = 0;
  double entropy = 0;
  Index sinkhorn_iters = 0;
};

inline std::string log_csv_header() {
  return "step,loss,mode,n,relative_eps,entropy,sinkhorn_iters";
}

inline std::string log_csv_row(const LogRow& r) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%lld,%.9g,%s,%lld,%.6g,%.6f,%lld",
                static_cast<long long>(r.step), r.loss, mode_name(r.mode),
                static_cast<long long>(r.n), r.relative_eps, r.entropy,
                static_cast<long long>(r.sinkhorn_iters));
  return std::string(buf);
}

template <class S>
struct TrainResult {
  Mlp<S> net;
  std::vector<LogRow> log;
};

/// One-step flow matching: per outer batch draw sources and targets, couple
/// them (identity / Sinkhorn + stratified sampling / ground-truth pairs),
/// then consume the batch in grad_batch-sized Adam steps.
template <class S = double>
TrainResult<S> train(const SyntheticTask& task, const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Index d = task.d();
  TrainResult<S> result;
  result.net = Mlp<S>::init(d, cfg.hidden.empty() ? default_hidden(d) : cfg.hidden,
                            cfg.n_freq > 0 ? cfg.n_freq : std::max<Index>(1, d / 8), seed);
  AdamState<S> adam = AdamState<S>::zeros_like(result.net);

  const bool batch_ot = cfg.mode == CouplingMode::kBatchOt;
  const Index n = batch_ot ? cfg.ot_batch_n : cfg.grad_batch;
  const std::uint64_t time_key = rng::derive(seed, rng::salt::kTime);
  const std::uint64_t pair_key = rng::derive(seed, rng::salt::kPairs);

  std::optional<pairstore::PairFileReader> pair_file;
  if (!cfg.pairs_path.empty()) {
    pair_file.emplace(cfg.pairs_path);
    if (pair_file->header().d != d)
      throw InvalidArgument("train: pair file dimension mismatch");
  }

  // warm-start state across OT batches
  std::optional<sinkhorn::DualPotentials> prev_duals;
  PointBatch prev_x0, prev_x1;

  Index step = 0;
  for (Index b = 0; step < cfg.steps; ++b) {
    PointBatch x0(n, d), x1(n, d);
    std::vector<Index> pair_of_row(static_cast<std::size_t>(n));
    double entropy = 0.0;
    Index ot_iters = 0;

    if (pair_file) {
      auto batch = pair_file->read(static_cast<std::uint64_t>(b) * n, n);
      for (Index i = 0; i < n; ++i) {
        x0.mat().row(i) = batch.noise.mat().row(i);
        x1.mat().row(i) =
            task.data(batch.data_ids[static_cast<std::size_t>(i)]).transpose();
        pair_of_row[static_cast<std::size_t>(i)] = i;  // records are already coupled
      }
      entropy = pair_file->header().mean_entropy;
    } else {
      const std::uint64_t base = static_cast<std::uint64_t>(b) * static_cast<std::uint64_t>(n);
      for (Index i = 0; i < n; ++i) {
        const std::uint64_t slot = base + static_cast<std::uint64_t>(i);
        x0.mat().row(i) = task.noise(slot).transpose();
        if (cfg.mode == CouplingMode::kPaired)
          x1.mat().row(i) = task.paired_target(slot).transpose();
        else
          x1.mat().row(i) = task.data(slot).transpose();
      }
      if (batch_ot) {
        sinkhorn::SinkhornConfig ot = cfg.ot;
        ot.relative_eps = cfg.relative_eps;
        std::optional<sinkhorn::DualPotentials> init;
        if (cfg.warmstart && prev_duals)
          init = sinkhorn::extend_warmstart(*prev_duals, prev_x0, prev_x1, x0, x1,
                                            ot.shard_size);
        auto solved = sinkhorn::solve<S>(x0, x1, ot, init);
        ot_iters = solved.report.iters_used;
        auto pairs = coupling::sample_pairs(
            solved.duals, x0, x1, rng::derive(pair_key, static_cast<std::uint64_t>(b)),
            ot.shard_size);
        pair_of_row = pairs.pairs;
        entropy = coupling::renormalized_entropy(solved.duals, x0, x1, ot.shard_size);
        if (cfg.warmstart) {
          prev_duals = std::move(solved.duals);
          prev_x0 = x0;
          prev_x1 = x1;
        }
      } else {
        for (Index i = 0; i < n; ++i) pair_of_row[static_cast<std::size_t>(i)] = i;
      }
    }

    const Index chunks = (n + cfg.grad_batch - 1) / cfg.grad_batch;
    for (Index c = 0; c < chunks && step < cfg.steps; ++c) {
      const Index r0 = c * cfg.grad_batch;
      const Index rows = std::min(cfg.grad_batch, n - r0);
      MatrixRM<S> bx0(rows, d), bx1(rows, d);
      VectorX<S> ts(rows);
      const std::uint64_t base = static_cast<std::uint64_t>(b) * static_cast<std::uint64_t>(n);
      for (Index i = 0; i < rows; ++i) {
        const Index row = r0 + i;
        bx0.row(i) = x0.mat().row(row).cast<S>();
        bx1.row(i) = x1.mat().row(pair_of_row[static_cast<std::size_t>(row)]).cast<S>();
        ts(i) = static_cast<S>(
            rng::uniform01(rng::word(time_key, base + static_cast<std::uint64_t>(row))));
      }
      auto [loss, grads] = loss_and_grad(result.net, ts, bx0, bx1);
      adam_update(result.net, grads, adam, static_cast<S>(cfg.lr));
      ++step;
      LogRow row;
      row.step = step;
      row.loss = static_cast<double>(loss);
      row.mode = cfg.mode;
      row.n = n;
      row.relative_eps = batch_ot ? cfg.relative_eps : 0.0;
      row.entropy = entropy;
      row.sinkhorn_iters = ot_iters;
      result.log.push_back(row);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "OTVF", little-endian, parameters stored as float64.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class S>
void save_checkpoint(const Mlp<S>& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_checkpoint: cannot open " + path);
  os.write("OTVF", 4);
  binio::put_u32(os, kCheckpointVersion);
  binio::put_u64(os, static_cast<std::uint64_t>(net.d));
  binio::put_u64(os, static_cast<std::uint64_t>(net.n_freq));
  binio::put_u64(os, static_cast<std::uint64_t>(net.layers()));
  for (Index l = 0; l < net.layers(); ++l) {
    binio::put_u64(os, static_cast<std::uint64_t>(net.w[l].rows()));
    binio::put_u64(os, static_cast<std::uint64_t>(net.w[l].cols()));
    for (Index i = 0; i < net.w[l].rows(); ++i)
      for (Index j = 0; j < net.w[l].cols(); ++j)
        binio::put_f64(os, static_cast<double>(net.w[l](i, j)));
    for (Index i = 0; i < net.b[l].size(); ++i)
      binio::put_f64(os, static_cast<double>(net.b[l](i)));
  }
  if (!os) throw Error("save_checkpoint: write failed");
}

inline Mlp<double> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "OTVF", 4) != 0) throw CorruptFile("load_checkpoint: bad magic");
  if (binio::get_u32(is) != kCheckpointVersion)
    throw CorruptFile("load_checkpoint: unsupported version");
  Mlp<double> net;
  net.d = static_cast<Index>(binio::get_u64(is));
  net.n_freq = static_cast<Index>(binio::get_u64(is));
  const Index layers = static_cast<Index>(binio::get_u64(is));
  if (!is || net.d < 1 || layers < 1 || layers > 64)
    throw CorruptFile("load_checkpoint: bad header");
  for (Index l = 0; l < layers; ++l) {
    const Index rows = static_cast<Index>(binio::get_u64(is));
    const Index cols = static_cast<Index>(binio::get_u64(is));
    if (!is || rows < 1 || cols < 1 || rows > (Index(1) << 20) || cols > (Index(1) << 20))
      throw CorruptFile("load_checkpoint: bad layer shape");
    MatrixRM<double> w(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) w(i, j) = binio::get_f64(is);
    Eigen::VectorXd b(rows);
    for (Index i = 0; i < rows; ++i) b(i) = binio::get_f64(is);
    net.w.push_back(std::move(w));
    net.b.push_back(std::move(b));
  }
  if (!is) throw CorruptFile("load_checkpoint: truncated file");
  return net;
}

}  // namespace otfm::flowmatch
