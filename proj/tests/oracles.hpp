#pragma once

// Independent oracles used by the test suites. Each one re-derives its
// result by brute force (quadrature, grid search, finite differences, or a
// straight-line transcription of the sampling loop) rather than calling the
// library path it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "stage/denoiser.hpp"
#include "stage/grid.hpp"
#include "stage/rng.hpp"
#include "stage/schedule.hpp"

namespace oracles {

struct Moments {
  double mean;
  double variance;
};

// Posterior moments of x_{t-1} given (x_t, x_0), by trapezoid quadrature of
// likelihood x prior over a wide bracket.
inline Moments bayes_posterior_moments(const stage::DiffusionSchedule& sched, int t, double x0,
                                       double xt, int points = 40000) {
  if (t == 1) return Moments{x0, 0.0};  // point-mass prior at x0
  const double alpha = sched.alpha(t);
  const double beta = sched.beta(t);
  const double prior_mu = std::sqrt(sched.alpha_bar(t - 1)) * x0;
  const double prior_sd = std::sqrt(1.0 - sched.alpha_bar(t - 1));
  const double like_mu = xt / std::sqrt(alpha);
  const double like_sd = std::sqrt(beta / alpha);

  const double lo = std::min(prior_mu - 10.0 * prior_sd, like_mu - 10.0 * like_sd);
  const double hi = std::max(prior_mu + 10.0 * prior_sd, like_mu + 10.0 * like_sd);
  const double dx = (hi - lo) / (points - 1);

  std::vector<double> weight(points);
  double wsum = 0.0;
  double m1 = 0.0;
  for (int i = 0; i < points; ++i) {
    const double x = lo + i * dx;
    const double rl = (xt - std::sqrt(alpha) * x);
    const double rp = (x - prior_mu);
    double w = std::exp(-0.5 * rl * rl / beta - 0.5 * rp * rp / (prior_sd * prior_sd));
    if (i == 0 || i == points - 1) w *= 0.5;
    weight[i] = w;
    wsum += w;
    m1 += w * x;
  }
  const double mean = m1 / wsum;
  double m2 = 0.0;
  for (int i = 0; i < points; ++i) {
    const double x = lo + i * dx;
    m2 += weight[i] * (x - mean) * (x - mean);
  }
  return Moments{mean, m2 / wsum};
}

// Posterior mean of x_0 given x_t for prior N(prior_mu, prior_var) under the
// forward marginal x_t ~ N(sqrt(ab) x_0, 1 - ab); brute-force quadrature.
inline double bayes_x0_mean(double prior_mu, double prior_var, double alpha_bar, double xt,
                            int points = 100000) {
  const double prior_sd = std::sqrt(prior_var);
  const double sab = std::sqrt(alpha_bar);
  const double like_var = 1.0 - alpha_bar;
  const double like_mu = xt / sab;
  const double like_sd = std::sqrt(like_var) / sab;
  const double lo = std::min(prior_mu - 10.0 * prior_sd, like_mu - 10.0 * like_sd);
  const double hi = std::max(prior_mu + 10.0 * prior_sd, like_mu + 10.0 * like_sd);
  const double dx = (hi - lo) / (points - 1);
  double wsum = 0.0;
  double m1 = 0.0;
  for (int i = 0; i < points; ++i) {
    const double x = lo + i * dx;
    const double rl = xt - sab * x;
    const double rp = x - prior_mu;
    double w = std::exp(-0.5 * rl * rl / like_var - 0.5 * rp * rp / prior_var);
    if (i == 0 || i == points - 1) w *= 0.5;
    wsum += w;
    m1 += w * x;
  }
  return m1 / wsum;
}

// Exhaustive 1001-point search for the weight minimizing the blended
// squared error.
inline std::pair<double, double> grid_search_weight(double dp, double db, int points = 1001) {
  double best_w = 0.0;
  double best_e = db * db;
  for (int i = 0; i < points; ++i) {
    const double w = static_cast<double>(i) / (points - 1);
    const double r = w * dp + (1.0 - w) * db;
    const double e = r * r;
    if (e < best_e) {
      best_e = e;
      best_w = w;
    }
  }
  return {best_w, best_e};
}

// Central finite difference of a loss functional with respect to one scalar.
template <typename Loss>
double central_difference(Loss&& loss, double& param, double h = 1e-5) {
  const double saved = param;
  param = saved + h;
  const double up = loss();
  param = saved - h;
  const double down = loss();
  param = saved;
  return (up - down) / (2.0 * h);
}

// Straight-line transcription of the graded dual-branch sampling loop with
// closed-form Gaussian branch predictors. Maintained independently of the
// library sampler; shares only the RNG substrate.
struct GradedReference {
  stage::GridTensor image;
  stage::GridTensor anomaly_latent;
  std::vector<char> anomaly_only_at;  // per processed step, T down to 1
};

inline GradedReference graded_reference(const stage::DiffusionSchedule& sched, int t_s,
                                        const std::vector<std::pair<int, int>>& intervals,
                                        const stage::GridTensor& aware_prior_mean,
                                        double aware_prior_var,
                                        const stage::GridTensor& only_prior_mean,
                                        double only_prior_var, const stage::BinaryMask& m0,
                                        const stage::GridTensor& x_back, stage::RngStream& rng) {
  const int T = sched.steps();
  const int h = m0.height();
  const int w = m0.width();
  const std::size_t n = m0.size();

  const auto active = [&](int t) {
    for (const auto& [a, b] : intervals)
      if (t >= std::min(a, b) && t <= std::max(a, b)) return true;
    return false;
  };

  // Conjugate-Gaussian estimate of the clean field, via the noise estimate.
  const auto denoise_to_x0 = [&](const std::vector<double>& x, int t,
                                 const stage::GridTensor& prior_mean, double prior_var) {
    const double ab = sched.alpha_bar(t);
    const double sqrt_ab = std::sqrt(ab);
    const double omb = 1.0 - ab;
    const double sqrt_omb = std::sqrt(omb);
    const double k1 = sqrt_ab * prior_var;
    const double den = ab * prior_var + omb;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double ex0 = (k1 * x[i] + omb * prior_mean[i]) / den;
      const double eps = (x[i] - sqrt_ab * ex0) / sqrt_omb;
      out[i] = (x[i] - sqrt_omb * eps) / sqrt_ab;
    }
    return out;
  };

  const auto forward = [&](const std::vector<double>& clean, int t) {
    if (t == 0) return clean;
    const double s = std::sqrt(sched.alpha_bar(t));
    const double nn = std::sqrt(1.0 - sched.alpha_bar(t));
    const stage::GridTensor eps = stage::gaussian_field(rng, h, w);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = s * clean[i] + nn * eps[i];
    return out;
  };

  const std::vector<double>& mask_values = m0.as_grid().values();
  const std::vector<double>& back_values = x_back.values();

  std::vector<double> x_hat = stage::gaussian_field(rng, h, w).values();
  std::vector<double> mask_t = forward(mask_values, T);
  std::vector<double> x_hat_p(n);
  for (std::size_t i = 0; i < n; ++i)
    x_hat_p[i] = mask_values[i] * x_hat[i] + (1.0 - mask_values[i]) * mask_t[i];

  std::vector<char> branch_flags;
  for (int t = T; t >= 1; --t) {
    const double z_prev =
        (t - 1) <= t_s ? 0.0
                       : static_cast<double>(t - 1 - t_s) / static_cast<double>(T - t_s);
    const std::vector<double> xb_prev = forward(back_values, t - 1);
    const std::vector<double> mask_prev = forward(mask_values, t - 1);

    // Posterior coefficients for this step.
    double c0 = 1.0;
    double ct = 0.0;
    double var = 0.0;
    if (t > 1) {
      const double ab_prev = sched.alpha_bar(t - 1);
      const double one_minus_ab = 1.0 - sched.alpha_bar(t);
      c0 = std::sqrt(ab_prev) * sched.beta(t) / one_minus_ab;
      ct = std::sqrt(sched.alpha(t)) * (1.0 - ab_prev) / one_minus_ab;
      var = (1.0 - ab_prev) / one_minus_ab * sched.beta(t);
    }

    const bool only = active(t);
    branch_flags.push_back(only ? 1 : 0);
    if (only) {
      const std::vector<double> x0h = denoise_to_x0(x_hat_p, t, only_prior_mean, only_prior_var);
      std::vector<double> xp(n);
      for (std::size_t i = 0; i < n; ++i) xp[i] = c0 * x0h[i] + ct * x_hat_p[i];
      if (var > 0.0) {
        const double sigma = std::sqrt(var);
        const stage::GridTensor eps = stage::gaussian_field(rng, h, w);
        for (std::size_t i = 0; i < n; ++i) xp[i] = xp[i] + sigma * eps[i];
      }
      for (std::size_t i = 0; i < n; ++i)
        x_hat_p[i] = mask_values[i] * xp[i] + (1.0 - mask_values[i]) * mask_prev[i];
      for (std::size_t i = 0; i < n; ++i)
        x_hat[i] = mask_values[i] * x_hat_p[i] + (1.0 - mask_values[i]) * xb_prev[i];
    } else {
      const std::vector<double> x0h = denoise_to_x0(x_hat, t, aware_prior_mean, aware_prior_var);
      std::vector<double> mixed(n);
      for (std::size_t i = 0; i < n; ++i)
        mixed[i] = mask_values[i] * x0h[i] + (1.0 - mask_values[i]) * back_values[i];
      std::vector<double> xr(n);
      for (std::size_t i = 0; i < n; ++i) xr[i] = c0 * mixed[i] + ct * x_hat[i];
      if (var > 0.0) {
        const double sigma = std::sqrt(var);
        const stage::GridTensor eps = stage::gaussian_field(rng, h, w);
        for (std::size_t i = 0; i < n; ++i) xr[i] = xr[i] + sigma * eps[i];
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double wp = mask_values[i] + z_prev * (1.0 - mask_values[i]);
        x_hat[i] = wp * xr[i] + (1.0 - wp) * xb_prev[i];
      }
      for (std::size_t i = 0; i < n; ++i)
        x_hat_p[i] = mask_values[i] * x_hat[i] + (1.0 - mask_values[i]) * mask_prev[i];
    }
  }

  return GradedReference{stage::GridTensor(h, w, std::move(x_hat)),
                         stage::GridTensor(h, w, std::move(x_hat_p)),
                         std::move(branch_flags)};
}

inline double mean_of(const stage::GridTensor& g) {
  double s = 0.0;
  for (double v : g) s += v;
  return s / static_cast<double>(g.size());
}

inline double variance_of(const stage::GridTensor& g) {
  const double m = mean_of(g);
  double s = 0.0;
  for (double v : g) s += (v - m) * (v - m);
  return s / static_cast<double>(g.size());
}

}  // namespace oracles
