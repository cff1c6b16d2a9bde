// Synthetic ground-truth transport task: a convex piecewise quadratic
// potential u(x) = max_i u_i(x) whose gradient T = grad u is the known Monge
// map. Sources are standard Gaussian; targets are pushforwards through T.
#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "otfm/binio.hpp"
#include "otfm/common.hpp"
#include "otfm/rng.hpp"

namespace otfm::synthbench {

// u_i(x) = 0.5 ||x||^2 + 0.5 (x - m_i)^T A_i (x - m_i) + offset_i with
// offset_i = -0.5 m_i^T A_i m_i, A_i symmetric PSD of rank d/2. The offset
// makes every u_i vanish at the origin, so all potentials stay in play when
// sampling sources from a centered Gaussian.
struct PiecewiseBrenierMap {
  Index d = 0;
  Index k = 0;
  std::vector<Eigen::MatrixXd> A;
  std::vector<Eigen::VectorXd> m;
  std::vector<double> offsets;
};

/// Draws the benchmark map: k = max(1, d/16) potentials, A_i = G_i G_i^T with
/// G_i a d x (d/2) standard-normal matrix (Wishart(d/2, I_d)), means from
/// N(0, 3 I_d) centered so they sum to zero.
inline PiecewiseBrenierMap generate_map(Index d, std::uint64_t seed) {
  if (d < 2) throw InvalidArgument("generate_map: need d >= 2");
  PiecewiseBrenierMap map;
  map.d = d;
  map.k = std::max<Index>(1, d / 16);
  const Index cols = std::max<Index>(1, d / 2);

  rng::Stream stream(seed);
  for (Index i = 0; i < map.k; ++i) {
    Eigen::MatrixXd G(d, cols);
    for (Index r = 0; r < d; ++r)
      for (Index c = 0; c < cols; ++c) G(r, c) = stream.normal();
    map.A.emplace_back(G * G.transpose());
  }
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  const double sqrt3 = std::sqrt(3.0);
  for (Index i = 0; i < map.k; ++i) {
    Eigen::VectorXd mi(d);
    for (Index r = 0; r < d; ++r) mi(r) = sqrt3 * stream.normal();
    map.m.push_back(mi);
    mean += mi;
  }
  mean /= static_cast<double>(map.k);
  for (auto& mi : map.m) mi -= mean;
  for (Index i = 0; i < map.k; ++i)
    map.offsets.push_back(-0.5 * map.m[i].dot(map.A[i] * map.m[i]));
  return map;
}

/// Potential value and selecting index at x; ties break to the lowest index.
inline std::pair<double, Index> potential(const PiecewiseBrenierMap& map,
                                          const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() != map.d) throw DimensionMismatch("potential: dimension mismatch");
  const double base = 0.5 * x.squaredNorm();
  double best = -std::numeric_limits<double>::infinity();
  Index arg = 0;
  for (Index i = 0; i < map.k; ++i) {
    Eigen::VectorXd xm = x - map.m[i];
    double v = base + 0.5 * xm.dot(map.A[i] * xm) + map.offsets[i];
    if (v > best) {
      best = v;
      arg = i;
    }
  }
  return {best, arg};
}

/// T(x) = x + A_{i*}(x - m_{i*}), the gradient of u at x (a.e.).
inline Eigen::VectorXd apply_map(const PiecewiseBrenierMap& map,
                                 const Eigen::Ref<const Eigen::VectorXd>& x) {
  Index i = potential(map, x).second;
  return x + map.A[i] * (x - map.m[i]);
}

inline PointBatch apply_map(const PiecewiseBrenierMap& map, const PointBatch& X) {
  if (X.d != map.d) throw DimensionMismatch("apply_map: dimension mismatch");
  PointBatch out(X.n, X.d);
  for (Index i = 0; i < X.n; ++i)
    out.mat().row(i) = apply_map(map, X.row(i).eval()).transpose();
  return out;
}

inline PointBatch gaussian_batch(Index n, Index d, std::uint64_t key) {
  PointBatch out(n, d);
  for (Index i = 0; i < n; ++i) {
    rng::Stream s(rng::derive(key, static_cast<std::uint64_t>(i)));
    for (Index j = 0; j < d; ++j) out.at(i, j) = s.normal();
  }
  return out;
}

struct SampledTask {
  PointBatch x0;         // source draw
  PointBatch x1;         // T(fresh source draw) -- unpaired
  PointBatch x0_paired;  // shared draw Z
  PointBatch x1_paired;  // T(Z), perfect supervision
};

/// Unpaired and perfectly-paired sample sets for one task instance.
inline SampledTask sample_task(const PiecewiseBrenierMap& map, Index n, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("sample_task: need n >= 1");
  SampledTask t;
  t.x0 = gaussian_batch(n, map.d, rng::derive(seed, rng::salt::kNoise));
  t.x1 = apply_map(map, gaussian_batch(n, map.d, rng::derive(seed, rng::salt::kData)));
  t.x0_paired = gaussian_batch(n, map.d, rng::derive(seed, rng::salt::kNoise + 100));
  t.x1_paired = apply_map(map, t.x0_paired);
  return t;
}

// ---------------------------------------------------------------------------
// Binary serialization: magic "PBMP", version, d, k, then A / m / offsets as
// little-endian float64 row-major.
// ---------------------------------------------------------------------------



inline constexpr std::uint32_t kMapVersion = 1;

inline void save_map(const PiecewiseBrenierMap& map, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_map: cannot open " + path);
  os.write("PBMP", 4);
  binio::put_u32(os, kMapVersion);
  binio::put_u64(os, static_cast<std::uint64_t>(map.d));
  binio::put_u64(os, static_cast<std::uint64_t>(map.k));
  for (const auto& A : map.A)
    for (Index r = 0; r < map.d; ++r)
      for (Index c = 0; c < map.d; ++c) binio::put_f64(os, A(r, c));
  for (const auto& m : map.m)
    for (Index r = 0; r < map.d; ++r) binio::put_f64(os, m(r));
  for (double o : map.offsets) binio::put_f64(os, o);
  if (!os) throw Error("save_map: write failed for " + path);
}

inline PiecewiseBrenierMap load_map(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_map: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PBMP", 4) != 0) throw CorruptFile("load_map: bad magic");
  if (binio::get_u32(is) != kMapVersion) throw CorruptFile("load_map: unsupported version");
  PiecewiseBrenierMap map;
  map.d = static_cast<Index>(binio::get_u64(is));
  map.k = static_cast<Index>(binio::get_u64(is));
  if (!is || map.d < 1 || map.k < 1 || map.d > (Index(1) << 20) || map.k > (Index(1) << 20))
    throw CorruptFile("load_map: bad header");
  for (Index i = 0; i < map.k; ++i) {
    Eigen::MatrixXd A(map.d, map.d);
    for (Index r = 0; r < map.d; ++r)
      for (Index c = 0; c < map.d; ++c) A(r, c) = binio::get_f64(is);
    map.A.push_back(std::move(A));
  }
  for (Index i = 0; i < map.k; ++i) {
    Eigen::VectorXd m(map.d);
    for (Index r = 0; r < map.d; ++r) m(r) = binio::get_f64(is);
    map.m.push_back(std::move(m));
  }
  map.offsets.resize(static_cast<std::size_t>(map.k));
  for (auto& o : map.offsets) o = binio::get_f64(is);
  if (!is) throw CorruptFile("load_map: truncated file");
  return map;
}

}  // namespace otfm::synthbench
