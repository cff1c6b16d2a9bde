// Adaptive over-relaxation shared by the sharded solver and the dense
// reference solver, so the two produce step-aligned iterate sequences.
//
// theta_t = min(theta_max, 2 / (1 + sqrt(1 - rho^2))) with rho the geometric
// per-iteration decay of the marginal error over a 20-iteration window,
// reset to 1 whenever the error increases. Engaged only from
// momentum_start_iter onwards.
#pragma once

#include <cmath>
#include <deque>

#include "otfm/common.hpp"

namespace otfm {

class MomentumController {
 public:
  MomentumController(Index start_iter, double theta_max = 1.95, Index window = 20)
      : start_iter_(start_iter), theta_max_(theta_max), window_(window) {}

  // Feed the marginal error observed at `iter` (before this iteration's
  // update); returns the relaxation factor to apply to the update.
  double theta(Index iter, double err) {
    double prev = history_.empty() ? err : history_.back();
    history_.push_back(err);
    if (static_cast<Index>(history_.size()) > window_ + 1) history_.pop_front();
    if (iter < start_iter_) return 1.0;
    if (!std::isfinite(err) || err > prev) return 1.0;
    if (static_cast<Index>(history_.size()) < window_ + 1) return 1.0;
    double e_old = history_.front();
    if (!(e_old > 0.0) || !std::isfinite(e_old) || err >= e_old) return 1.0;
    double rho = std::pow(err / e_old, 1.0 / static_cast<double>(window_));
    rho = std::min(rho, 1.0 - 1e-12);
    return std::min(theta_max_, 2.0 / (1.0 + std::sqrt(1.0 - rho * rho)));
  }

 private:
  Index start_iter_;
  double theta_max_;
  Index window_;
  std::deque<double> history_;
};

}  // namespace otfm
