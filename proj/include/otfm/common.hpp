// Core types and error hierarchy shared by every module.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace otfm {

using Index = Eigen::Index;

template <class S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatrixXdRM = MatrixRM<double>;

// ---------------------------------------------------------------------------
// Errors. `Error` for bad usage/configuration, `NumericalError` for failures
// that arise from the data (the CLI maps these to exit codes 1 and 2).
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : Error {
  using Error::Error;
};

struct DimensionMismatch : Error {
  using Error::Error;
};
struct InvalidArgument : Error {
  using Error::Error;
};
struct SizeGuard : Error {
  using Error::Error;
};
struct BlockTooLarge : Error {
  using Error::Error;
};
struct CorruptFile : Error {
  using Error::Error;
};
struct InsufficientTrials : Error {
  using Error::Error;
};

struct DegenerateCost : NumericalError {
  using NumericalError::NumericalError;
};
struct NonFinite : NumericalError {
  using NumericalError::NumericalError;
};
struct RankDeficient : NumericalError {
  using NumericalError::NumericalError;
};
struct StepSizeUnderflow : NumericalError {
  using NumericalError::NumericalError;
};

// ---------------------------------------------------------------------------
// PointBatch: n x d row-major array of coordinates, the unit of solver input.
// ---------------------------------------------------------------------------

struct PointBatch {
  Index n = 0;
  Index d = 0;
  std::vector<double> data;  // row-major, n*d

  PointBatch() = default;
  PointBatch(Index n_, Index d_) : n(n_), d(d_), data(static_cast<std::size_t>(n_ * d_), 0.0) {}

  double& at(Index i, Index j) { return data[static_cast<std::size_t>(i * d + j)]; }
  double at(Index i, Index j) const { return data[static_cast<std::size_t>(i * d + j)]; }

  Eigen::Map<const MatrixXdRM> mat() const {
    return Eigen::Map<const MatrixXdRM>(data.data(), n, d);
  }
  Eigen::Map<MatrixXdRM> mat() { return Eigen::Map<MatrixXdRM>(data.data(), n, d); }

  Eigen::Map<const Eigen::VectorXd> row(Index i) const {
    return Eigen::Map<const Eigen::VectorXd>(data.data() + i * d, d);
  }

  // n >= 1, d >= 1, all entries finite.
  void validate() const {
    if (n < 1 || d < 1) throw InvalidArgument("PointBatch: need n >= 1 and d >= 1");
    if (!mat().allFinite()) throw NonFinite("PointBatch: non-finite entry");
  }
};

inline void require_same_dim(const PointBatch& a, const PointBatch& b, const char* where) {
  if (a.d != b.d)
    throw DimensionMismatch(std::string(where) + ": dimension mismatch (" +
                            std::to_string(a.d) + " vs " + std::to_string(b.d) + ")");
}

}  // namespace otfm
