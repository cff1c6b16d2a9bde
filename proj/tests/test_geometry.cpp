#include <catch2/catch_amalgamated.hpp>

#include "otfm/geometry.hpp"
#include "otfm/oracle.hpp"
#include "otfm/rng.hpp"

using namespace otfm;

namespace {

PointBatch random_batch(Index n, Index d, std::uint64_t seed) {
  PointBatch b(n, d);
  rng::Stream s(seed);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) b.at(i, j) = s.normal();
  return b;
}

PointBatch from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  PointBatch b(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& r : rows) {
    Index j = 0;
    for (double v : r) b.at(i, j++) = v;
    ++i;
  }
  return b;
}

}  // namespace

TEST_CASE("cost_block hand values", "[geometry]") {
  auto X = from_rows({{1, 0}});
  auto Y = from_rows({{0, 1}});
  REQUIRE(geometry::cost_block(X, Y)(0, 0) == 0.0);

  auto X2 = from_rows({{1, 2}});
  auto Y2 = from_rows({{3, 4}});
  REQUIRE(geometry::cost_block(X2, Y2)(0, 0) == -11.0);
}

TEST_CASE("cost_block matches a scalar-loop oracle", "[geometry]") {
  auto X = random_batch(8, 3, 1);
  auto Y = random_batch(8, 3, 2);
  auto blk = geometry::cost_block(X, Y);
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j) {
      double dot = 0;
      for (Index k = 0; k < 3; ++k) dot += X.at(i, k) * Y.at(j, k);
      REQUIRE(blk(i, j) == Catch::Approx(-dot).margin(1e-6));
    }
}

TEST_CASE("cost_block is bilinear", "[geometry]") {
  auto X = random_batch(5, 4, 3);
  auto Y = random_batch(6, 4, 4);
  PointBatch X2 = X;
  X2.mat() *= 2.0;
  MatrixXdRM a = geometry::cost_block(X2, Y);
  MatrixXdRM b = geometry::cost_block(X, Y);
  REQUIRE((a - 2.0 * b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cost_block rejects dimension mismatch", "[geometry]") {
  auto X = random_batch(4, 3, 5);
  auto Y = random_batch(4, 2, 6);
  REQUIRE_THROWS_AS(geometry::cost_block(X, Y), DimensionMismatch);
}

TEST_CASE("cost_std matches the dense oracle", "[geometry]") {
  auto X = random_batch(100, 4, 7);
  auto Y = random_batch(100, 4, 8);
  auto scale = geometry::cost_std(X, Y, /*cap=*/0);
  REQUIRE_FALSE(scale.subsampled);

  // dense oracle
  MatrixXdRM C = geometry::cost_block(X, Y);
  double mean = C.mean();
  double var = (C.array() - mean).square().sum() / double(C.size());
  double ref = std::sqrt(var);
  REQUIRE(scale.std == Catch::Approx(ref).epsilon(1e-5));
}

TEST_CASE("cost_std rejects degenerate costs", "[geometry]") {
  auto Z = from_rows({{0, 0}, {0, 0}});
  REQUIRE_THROWS_AS(geometry::cost_std(Z, Z), DegenerateCost);
}

TEST_CASE("cost_std subsamples above the cap", "[geometry]") {
  auto X = random_batch((Index(1) << 14) + 1, 2, 9);
  auto scale = geometry::cost_std(X, X);
  REQUIRE(scale.subsampled);
  REQUIRE(scale.sample_size <= Index(1) << 14);
}

TEST_CASE("cost_std is permutation invariant without subsampling", "[geometry]") {
  auto X = random_batch(64, 3, 10);
  auto Y = random_batch(64, 3, 11);
  PointBatch Xp(64, 3);
  for (Index i = 0; i < 64; ++i) Xp.mat().row(i) = X.mat().row(63 - i);
  double a = geometry::cost_std(X, Y, 0).std;
  double b = geometry::cost_std(Xp, Y, 0).std;
  REQUIRE(a == Catch::Approx(b).epsilon(1e-12));
}

TEST_CASE("pca_fit recovers exact low-rank structure", "[geometry]") {
  // data on a 1-D line in d=3
  PointBatch Y(50, 3);
  rng::Stream s(12);
  Eigen::Vector3d dir(1.0, -2.0, 0.5);
  dir.normalize();
  for (Index i = 0; i < 50; ++i) Y.mat().row(i) = (s.normal() * dir).transpose();
  auto p = geometry::pca_fit(Y, 1);
  REQUIRE(p.explained_variance_ratio >= 0.999);

  // full basis on full-rank data
  auto Yf = random_batch(100, 4, 13);
  auto pf = geometry::pca_fit(Yf, 4);
  REQUIRE(pf.explained_variance_ratio == Catch::Approx(1.0).margin(1e-6));
  REQUIRE((pf.directions * pf.directions.transpose() - Eigen::MatrixXd::Identity(4, 4))
              .cwiseAbs()
              .maxCoeff() < 1e-6);
}

TEST_CASE("pca reconstruction error equals the discarded spectrum", "[geometry]") {
  auto Y = random_batch(60, 6, 14);
  const Index k = 3;
  auto p = geometry::pca_fit(Y, k);

  double recon_err = 0.0;
  for (Index i = 0; i < Y.n; ++i) {
    Eigen::VectorXd y = Y.row(i);
    Eigen::VectorXd rec = p.directions.transpose() * (p.directions * (y - p.mean)) + p.mean;
    recon_err += (y - rec).squaredNorm();
  }
  recon_err /= double(Y.n);

  // SVD oracle on the centered matrix
  Eigen::MatrixXd centered = Y.mat().rowwise() - Y.mat().colwise().mean();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered);
  double discarded = 0.0;
  for (Index j = k; j < 6; ++j) discarded += svd.singularValues()(j) * svd.singularValues()(j);
  discarded /= double(Y.n);
  REQUIRE(recon_err == Catch::Approx(discarded).epsilon(1e-4));
}

TEST_CASE("pca_fit flags rank deficiency", "[geometry]") {
  PointBatch Y(40, 4);
  rng::Stream s(15);
  Eigen::Vector4d dir(1, 1, 0, 0);
  for (Index i = 0; i < 40; ++i) Y.mat().row(i) = (s.normal() * dir).transpose();
  REQUIRE_THROWS_AS(geometry::pca_fit(Y, 3), RankDeficient);
}

TEST_CASE("pca_project basics", "[geometry]") {
  auto Y = random_batch(80, 5, 16);
  auto p = geometry::pca_fit(Y, 5);

  // the mean projects to zero
  PointBatch meanb(1, 5);
  meanb.mat().row(0) = p.mean.transpose();
  auto proj = geometry::pca_project(p, meanb);
  REQUIRE(proj.mat().cwiseAbs().maxCoeff() < 1e-9);

  // k = d is an isometry of the centered points
  auto X = random_batch(10, 5, 17);
  auto Xp = geometry::pca_project(p, X);
  for (Index i = 0; i < 10; ++i) {
    double full = (X.row(i) - p.mean).norm();
    REQUIRE(Xp.mat().row(i).norm() == Catch::Approx(full).margin(1e-6));
  }
}

TEST_CASE("pca projection preserves dot products on exact low-rank data", "[geometry]") {
  // rank-2 data embedded in d=6
  rng::Stream s(18);
  Eigen::MatrixXd W(2, 6);
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 6; ++j) W(i, j) = s.normal();
  PointBatch Y(64, 6), X(64, 6);
  for (Index i = 0; i < 64; ++i) {
    Eigen::Vector2d a(s.normal(), s.normal()), b(s.normal(), s.normal());
    Y.mat().row(i) = (W.transpose() * a).transpose();
    X.mat().row(i) = (W.transpose() * b).transpose();
  }
  auto p = geometry::pca_fit(Y, 2);
  auto Xp = geometry::pca_project(p, X);
  auto Yp = geometry::pca_project(p, Y);
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j) {
      double proj = Xp.mat().row(i).dot(Yp.mat().row(j));
      double full = (X.row(i) - p.mean).dot(Y.row(j) - p.mean);
      REQUIRE(proj == Catch::Approx(full).margin(1e-5 * (1.0 + std::abs(full))));
    }
}

TEST_CASE("optimal pairing in projected cost matches the full cost on low-rank clouds",
          "[geometry]") {
  // Projection only shifts the full cost by rank-1 row/column terms on
  // exactly rank-k data, and those are absorbed by the assignment
  // constraints, so the optimal pairing is identical.
  rng::Stream s(19);
  Eigen::MatrixXd W(3, 10);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 10; ++j) W(i, j) = s.normal();
  PointBatch X(32, 10), Y(32, 10);
  for (Index i = 0; i < 32; ++i) {
    Eigen::Vector3d a(s.normal(), s.normal(), s.normal()), b(s.normal(), s.normal(), s.normal());
    X.mat().row(i) = (W.transpose() * a).transpose();
    Y.mat().row(i) = (W.transpose() * b).transpose();
  }
  auto p = geometry::pca_fit(Y, 3);
  auto Xp = geometry::pca_project(p, X);
  auto Yp = geometry::pca_project(p, Y);
  auto full = oracle::hungarian(geometry::cost_block(X, Y));
  auto proj = oracle::hungarian(geometry::cost_block(Xp, Yp));
  REQUIRE(full.perm == proj.perm);
}
