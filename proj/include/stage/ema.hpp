#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "stage/grid.hpp"
#include "stage/rng.hpp"

namespace stage {

// Explicit-mask-alignment schedule: the soft mask starts all-ones at t = T
// and converges linearly to the hard mask at the threshold step.
struct EmaConfig {
  int steps;           // T
  int threshold_step;  // t_s, strictly below T
};

inline void validate(const EmaConfig& cfg) {
  if (cfg.steps < 2 || cfg.threshold_step < 1 || cfg.threshold_step >= cfg.steps)
    throw std::invalid_argument("ema: need 1 <= threshold_step < steps");
}

// zeta(t) = (t - t_s) / (T - t_s) above the threshold, 0 at or below it.
inline double zeta(const EmaConfig& cfg, int t) {
  validate(cfg);
  if (t < 0 || t > cfg.steps) throw std::invalid_argument("zeta: step out of range");
  if (t <= cfg.threshold_step) return 0.0;
  return static_cast<double>(t - cfg.threshold_step) /
         static_cast<double>(cfg.steps - cfg.threshold_step);
}

// M^p_t: ones inside the hard mask at every t, zeta(t) outside.
inline SoftMask progressive_mask(const EmaConfig& cfg, const BinaryMask& m0, int t) {
  const double z = zeta(cfg, t);
  std::vector<double> out(m0.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = m0[i];
    out[i] = m + z * (1.0 - m);
  }
  return SoftMask(m0.height(), m0.width(), std::move(out));
}

// Per-pixel prediction errors of the two branches against their targets.
struct PixelErrorField {
  GridTensor delta_p;  // anomaly-branch error
  GridTensor delta_b;  // background-branch error

  PixelErrorField(GridTensor dp, GridTensor db) : delta_p(std::move(dp)), delta_b(std::move(db)) {
    require_same_shape(delta_p.height(), delta_p.width(), delta_b.height(), delta_b.width(),
                       "PixelErrorField");
  }

  int height() const noexcept { return delta_p.height(); }
  int width() const noexcept { return delta_p.width(); }
  std::size_t size() const noexcept { return delta_p.size(); }
};

namespace detail {

// Squared blended error [w*dp + (1-w)*db]^2 at a single pixel.
inline double blended_error(double w, double dp, double db) {
  const double e = w * dp + (1.0 - w) * db;
  return e * e;
}

// Two errors differing by less than this are treated as equal: the blended
// error is then constant in w and every weight is optimal.
inline constexpr double kDegenerateTol = 1e-12;

}  // namespace detail

// Per-pixel squared blended reconstruction error for a weight field.
inline GridTensor pixel_error(const PixelErrorField& field, const SoftMask& w) {
  require_same_shape(field.height(), field.width(), w.height(), w.width(), "pixel_error");
  std::vector<double> out(field.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = detail::blended_error(w[i], field.delta_p[i], field.delta_b[i]);
  return GridTensor(field.height(), field.width(), std::move(out));
}

// Per-pixel minimizer of the blended error over w in [0, 1]: the stationary
// point -delta_b / (delta_p - delta_b) clamped to the unit interval. Pixels
// whose two errors coincide have a constant error curve; they take the given
// fallback weight (any value is optimal there).
inline SoftMask optimal_weight(const PixelErrorField& field, const SoftMask& degenerate_fill) {
  require_same_shape(field.height(), field.width(), degenerate_fill.height(),
                     degenerate_fill.width(), "optimal_weight");
  std::vector<double> out(field.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double diff = field.delta_p[i] - field.delta_b[i];
    if (std::abs(diff) < detail::kDegenerateTol) {
      out[i] = degenerate_fill[i];
    } else {
      out[i] = std::clamp(-field.delta_b[i] / diff, 0.0, 1.0);
    }
  }
  return SoftMask(field.height(), field.width(), std::move(out));
}

inline SoftMask optimal_weight(const PixelErrorField& field) {
  return optimal_weight(field, SoftMask(field.height(), field.width(), 0.5));
}

// Total excess error of a weight field over the per-pixel optimum, and the
// convexity bound on it. The excess compares against the achievable (clamped)
// optimum; the bound uses the deviation from the unconstrained stationary
// weight, which dominates the excess exactly:
//   E(w) - E(w*) = D^2 [(w - w_u)^2 - (w* - w_u)^2] <= D^2 (w - w_u)^2.
struct ExcessBound {
  double excess;
  double bound;
};

inline ExcessBound excess_error_bound(const PixelErrorField& field, const SoftMask& w_ema) {
  require_same_shape(field.height(), field.width(), w_ema.height(), w_ema.width(),
                     "excess_error_bound");
  double excess = 0.0;
  double bound = 0.0;
  for (std::size_t i = 0; i < field.size(); ++i) {
    const double dp = field.delta_p[i];
    const double db = field.delta_b[i];
    const double diff = dp - db;
    if (std::abs(diff) < detail::kDegenerateTol) continue;  // constant in w: zero on both sides
    const double w_u = -db / diff;
    const double w_star = std::clamp(w_u, 0.0, 1.0);
    excess += detail::blended_error(w_ema[i], dp, db) - detail::blended_error(w_star, dp, db);
    const double dev = w_ema[i] - w_u;
    bound += diff * diff * dev * dev;
  }
  return ExcessBound{excess, bound};
}

// Schedule-valued variant: every pixel carries the uniform weight zeta(t)
// (the all-background case of the progressive mask).
inline ExcessBound excess_error_bound(const PixelErrorField& field, const EmaConfig& cfg, int t) {
  return excess_error_bound(field, SoftMask(field.height(), field.width(), zeta(cfg, t)));
}

// One row of the near-optimality sweep.
struct TheoremRow {
  int steps;            // T
  int threshold_step;   // t_s
  double excess;        // summed over all fields and pixels
  double bound;         // sum_i D_i^2 * (1/(T - t_s))^2, the schedule-step cap
  bool holds;           // excess <= bound for every field individually
};

// Numerical check of the near-optimality statement: when the schedule tracks
// the per-pixel optimal weight to within one step of the linear schedule
// (interior optima deviate by at most 1/(T - t_s); boundary optima are
// attained exactly at the schedule's endpoints), the total excess stays
// under sum_i D_i^2 / (T - t_s)^2. Fields are regenerated identically for
// each T so the bound column contracts exactly 4x per doubling when the
// threshold step scales proportionally.
inline TheoremRow theorem_trial(int steps, double ts_fraction, int field_count, int height,
                                int width, std::uint64_t seed) {
  if (steps < 10 || ts_fraction <= 0.0 || ts_fraction >= 1.0 || field_count < 1)
    throw std::invalid_argument("theorem_trial: invalid sweep parameters");
  const int t_s = std::max(1, static_cast<int>(std::lround(ts_fraction * steps)));
  const double step = 1.0 / static_cast<double>(steps - t_s);
  const RngStream root(seed);

  double total_excess = 0.0;
  double total_bound = 0.0;
  bool holds = true;
  for (int f = 0; f < field_count; ++f) {
    RngStream rng = root.split(static_cast<std::uint64_t>(f));
    double excess = 0.0;
    double bound = 0.0;
    for (int i = 0; i < height * width; ++i) {
      const double dp = rng.next_gaussian();
      const double db = rng.next_gaussian();
      const double u = rng.next_uniform();
      const double diff = dp - db;
      if (std::abs(diff) < detail::kDegenerateTol) continue;
      const double w_u = -db / diff;
      const double w_star = std::clamp(w_u, 0.0, 1.0);
      if (w_star == w_u) {
        // Interior optimum: deviate by a fraction of one schedule step.
        double w_ema = w_star + u * step;
        if (w_ema > 1.0) w_ema = w_star - u * step;
        excess += detail::blended_error(w_ema, dp, db) - detail::blended_error(w_star, dp, db);
      }
      // Boundary optima contribute zero excess: the schedule reaches 0 and 1
      // exactly at its endpoints.
      bound += diff * diff * step * step;
    }
    if (!(excess <= bound * (1.0 + 1e-12))) holds = false;
    total_excess += excess;
    total_bound += bound;
  }
  return TheoremRow{steps, t_s, total_excess, total_bound, holds};
}

inline std::vector<TheoremRow> theorem_sweep(const std::vector<int>& sweep, double ts_fraction,
                                             int field_count, int height, int width,
                                             std::uint64_t seed) {
  std::vector<TheoremRow> rows;
  rows.reserve(sweep.size());
  for (int steps : sweep)
    rows.push_back(theorem_trial(steps, ts_fraction, field_count, height, width, seed));
  return rows;
}

}  // namespace stage
