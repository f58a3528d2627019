#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "stage/grid.hpp"
#include "stage/rng.hpp"

namespace stage {

// Per-step variance schedule with cumulative products. Steps are indexed
// 1..T; alpha_bar(0) == 1, which makes the t=1 reverse step deterministic.
class DiffusionSchedule {
 public:
  static DiffusionSchedule linear(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw std::invalid_argument("schedule: steps must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start <= beta_end))
      throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
    DiffusionSchedule s;
    s.beta_.resize(steps + 1, 0.0);
    s.alpha_.resize(steps + 1, 1.0);
    s.alpha_bar_.resize(steps + 1, 1.0);
    for (int t = 1; t <= steps; ++t) {
      const double frac = steps > 1 ? static_cast<double>(t - 1) / (steps - 1) : 0.0;
      s.beta_[t] = beta_start * (1.0 - frac) + beta_end * frac;
      s.alpha_[t] = 1.0 - s.beta_[t];
      s.alpha_bar_[t] = s.alpha_bar_[t - 1] * s.alpha_[t];
    }
    return s;
  }

  int steps() const noexcept { return static_cast<int>(beta_.size()) - 1; }

  double beta(int t) const { check(t, 1); return beta_[t]; }
  double alpha(int t) const { check(t, 1); return alpha_[t]; }
  double alpha_bar(int t) const { check(t, 0); return alpha_bar_[t]; }

 private:
  void check(int t, int lo) const {
    if (t < lo || t > steps())
      throw std::invalid_argument("schedule: step " + std::to_string(t) + " out of range [" +
                                  std::to_string(lo) + ", " + std::to_string(steps()) + "]");
  }

  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
};

// Coefficients of the Gaussian posterior over x_{t-1} given (x_t, x_0):
// mean = coef_x0 * x_0 + coef_xt * x_t, with the stated variance.
struct PosteriorParams {
  double coef_x0;
  double coef_xt;
  double variance;
};

inline PosteriorParams posterior_params(const DiffusionSchedule& sched, int t) {
  if (t < 1 || t > sched.steps())
    throw std::invalid_argument("posterior_params: step out of range");
  if (t == 1) {
    // alpha_bar(0) == 1 collapses the posterior to a point mass at x_0.
    return PosteriorParams{1.0, 0.0, 0.0};
  }
  const double ab_prev = sched.alpha_bar(t - 1);
  const double one_minus_ab = 1.0 - sched.alpha_bar(t);
  const double beta = sched.beta(t);
  return PosteriorParams{
      std::sqrt(ab_prev) * beta / one_minus_ab,
      std::sqrt(sched.alpha(t)) * (1.0 - ab_prev) / one_minus_ab,
      (1.0 - ab_prev) / one_minus_ab * beta,
  };
}

namespace detail {

// x_t = sqrt(alpha_bar_t) * clean + sqrt(1 - alpha_bar_t) * eps. At t=0 the
// clean field is returned verbatim and no draws are consumed.
inline GridTensor noised_at(const DiffusionSchedule& sched, const GridTensor& clean, int t,
                            RngStream& rng) {
  if (t == 0) return clean;
  const double scale = std::sqrt(sched.alpha_bar(t));
  const double noise_scale = std::sqrt(1.0 - sched.alpha_bar(t));
  const GridTensor eps = gaussian_field(rng, clean.height(), clean.width());
  std::vector<double> out(clean.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * clean[i] + noise_scale * eps[i];
  return GridTensor(clean.height(), clean.width(), std::move(out));
}

}  // namespace detail

// Forward marginal q(x_t | x_0) for 1 <= t <= T.
inline GridTensor forward_marginal(const DiffusionSchedule& sched, const GridTensor& x0, int t,
                                   RngStream& rng) {
  if (t < 1 || t > sched.steps())
    throw std::invalid_argument("forward_marginal: step out of range");
  return detail::noised_at(sched, x0, t, rng);
}

// Same marginal applied to a clean background; accepts t = 0 (returns the
// background unchanged) so reverse loops can reference the final step.
inline GridTensor forward_background(const DiffusionSchedule& sched, const GridTensor& x_back,
                                     int t, RngStream& rng) {
  if (t < 0 || t > sched.steps())
    throw std::invalid_argument("forward_background: step out of range");
  return detail::noised_at(sched, x_back, t, rng);
}

// Forward marginal for a binary mask treated as a real-valued field; t = 0
// returns the mask verbatim.
inline GridTensor forward_mask(const DiffusionSchedule& sched, const BinaryMask& m0, int t,
                               RngStream& rng) {
  if (t < 0 || t > sched.steps())
    throw std::invalid_argument("forward_mask: step out of range");
  return detail::noised_at(sched, m0.as_grid(), t, rng);
}

}  // namespace stage
