#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "stage/schedule.hpp"

namespace stage {

struct ScalarMoments {
  double mean;
  double variance;
};

// Brute-force posterior moments of x_{t-1} given (x_t, x_0) on a scalar
// grid: the product of the single-step likelihood and the forward-marginal
// prior is integrated by the midpoint rule. Independent route against the
// closed-form posterior coefficients. At t = 1 the prior over x_0 is a point
// mass, so the posterior is exact.
inline ScalarMoments grid_bayes_posterior(const DiffusionSchedule& sched, int t, double x0,
                                          double xt, int points = 20000) {
  if (t < 1 || t > sched.steps())
    throw std::invalid_argument("grid_bayes_posterior: step out of range");
  if (points < 100) throw std::invalid_argument("grid_bayes_posterior: too few grid points");
  if (t == 1) return ScalarMoments{x0, 0.0};

  const double a = sched.alpha(t);
  const double b = sched.beta(t);
  const double like_center = xt / std::sqrt(a);
  const double like_std = std::sqrt(b / a);
  const double prior_center = std::sqrt(sched.alpha_bar(t - 1)) * x0;
  const double prior_std = std::sqrt(1.0 - sched.alpha_bar(t - 1));

  const double lo = std::min(like_center - 12.0 * like_std, prior_center - 12.0 * prior_std);
  const double hi = std::max(like_center + 12.0 * like_std, prior_center + 12.0 * prior_std);
  const double dx = (hi - lo) / points;

  double wsum = 0.0;
  double xsum = 0.0;
  for (int i = 0; i < points; ++i) {
    const double x = lo + (i + 0.5) * dx;
    const double zl = (xt - std::sqrt(a) * x) / std::sqrt(b);
    const double zp = (x - prior_center) / prior_std;
    const double w = std::exp(-0.5 * (zl * zl + zp * zp));
    wsum += w;
    xsum += w * x;
  }
  const double mean = xsum / wsum;
  double vsum = 0.0;
  for (int i = 0; i < points; ++i) {
    const double x = lo + (i + 0.5) * dx;
    const double zl = (xt - std::sqrt(a) * x) / std::sqrt(b);
    const double zp = (x - prior_center) / prior_std;
    const double w = std::exp(-0.5 * (zl * zl + zp * zp));
    vsum += w * (x - mean) * (x - mean);
  }
  return ScalarMoments{mean, vsum / wsum};
}

struct PosteriorCheckRow {
  int t;
  ScalarMoments analytic;
  ScalarMoments oracle;
  double mean_diff;
  double var_diff;
};

// Compares the closed-form posterior against the grid oracle at every step.
inline std::vector<PosteriorCheckRow> posterior_check(const DiffusionSchedule& sched, double x0,
                                                      double xt, int points = 20000) {
  std::vector<PosteriorCheckRow> rows;
  rows.reserve(sched.steps());
  for (int t = 1; t <= sched.steps(); ++t) {
    const PosteriorParams p = posterior_params(sched, t);
    const ScalarMoments analytic{p.coef_x0 * x0 + p.coef_xt * xt, p.variance};
    const ScalarMoments oracle = grid_bayes_posterior(sched, t, x0, xt, points);
    rows.push_back(PosteriorCheckRow{t, analytic, oracle,
                                     std::abs(analytic.mean - oracle.mean),
                                     std::abs(analytic.variance - oracle.variance)});
  }
  return rows;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Two-sided Kolmogorov-Smirnov statistic against N(mu, sigma^2).
inline double ks_statistic(std::vector<double> samples, double mu, double sigma) {
  if (samples.empty() || !(sigma > 0.0))
    throw std::invalid_argument("ks_statistic: need samples and sigma > 0");
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = normal_cdf((samples[i] - mu) / sigma);
    d = std::max(d, std::max(f - static_cast<double>(i) / n,
                             static_cast<double>(i + 1) / n - f));
  }
  return d;
}

// Asymptotic critical value of the KS statistic at the 1% level.
inline double ks_critical_1pct(std::size_t n) {
  return 1.62762 / std::sqrt(static_cast<double>(n));
}

}  // namespace stage
