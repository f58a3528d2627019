#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "stage/denoiser.hpp"
#include "stage/ema.hpp"
#include "stage/grid.hpp"
#include "stage/rng.hpp"
#include "stage/schedule.hpp"

namespace stage {

// Inclusive step range in which the anomaly-only branch drives sampling.
struct StepInterval {
  int lo;
  int hi;
};

// Full sampler configuration.
struct GradedPlan {
  const DiffusionSchedule* schedule = nullptr;
  EmaConfig ema{};
  std::vector<StepInterval> intervals;  // sorted, non-overlapping, inside [0, T]
  std::uint64_t seed = 0;
};

// Normalizes interval endpoints (either order accepted), sorts them and
// validates the plan.
inline GradedPlan make_graded_plan(const DiffusionSchedule& sched, const EmaConfig& ema,
                                   std::vector<std::pair<int, int>> raw_intervals,
                                   std::uint64_t seed) {
  validate(ema);
  if (ema.steps != sched.steps())
    throw std::invalid_argument("graded plan: ema steps must match the schedule");
  GradedPlan plan;
  plan.schedule = &sched;
  plan.ema = ema;
  plan.seed = seed;
  for (const auto& [a, b] : raw_intervals)
    plan.intervals.push_back(StepInterval{std::min(a, b), std::max(a, b)});
  std::sort(plan.intervals.begin(), plan.intervals.end(),
            [](const StepInterval& x, const StepInterval& y) { return x.lo < y.lo; });
  for (std::size_t i = 0; i < plan.intervals.size(); ++i) {
    if (plan.intervals[i].lo < 0 || plan.intervals[i].hi > sched.steps())
      throw std::invalid_argument("graded plan: interval outside [0, T]");
    if (i > 0 && plan.intervals[i].lo <= plan.intervals[i - 1].hi)
      throw std::invalid_argument("graded plan: intervals overlap");
  }
  return plan;
}

inline bool interval_active(const std::vector<StepInterval>& intervals, int t) {
  for (const StepInterval& iv : intervals)
    if (t >= iv.lo && t <= iv.hi) return true;
  return false;
}

// One reverse step given a point estimate of the clean latent:
// x_{t-1} = coef_x0 * x0_hat + coef_xt * x_t + sigma * eps. Deterministic at
// t = 1 where the posterior variance vanishes.
inline GridTensor posterior_sample(const DiffusionSchedule& sched, const GridTensor& x0_hat,
                                   const GridTensor& x_t, int t, RngStream& rng) {
  require_same_shape(x0_hat.height(), x0_hat.width(), x_t.height(), x_t.width(),
                     "posterior_sample");
  const PosteriorParams p = posterior_params(sched, t);
  std::vector<double> out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = p.coef_x0 * x0_hat[i] + p.coef_xt * x_t[i];
  if (p.variance > 0.0) {
    const double sigma = std::sqrt(p.variance);
    const GridTensor eps = gaussian_field(rng, x_t.height(), x_t.width());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] + sigma * eps[i];
  }
  return GridTensor(x_t.height(), x_t.width(), std::move(out));
}

// Baseline reverse step with a predicted clean latent.
inline GridTensor ddpm_step(const DiffusionSchedule& sched, const Denoiser& model,
                            const GridTensor& x_t, int t, RngStream& rng, const SoftMask& cond) {
  const GridTensor x0_hat = predict_x0(sched, model, DenoiserInput{x_t, t, cond});
  return posterior_sample(sched, x0_hat, x_t, t, rng);
}

inline GridTensor ddpm_step(const DiffusionSchedule& sched, const Denoiser& model,
                            const GridTensor& x_t, int t, RngStream& rng) {
  return ddpm_step(sched, model, x_t, t, rng, SoftMask(x_t.height(), x_t.width(), 1.0));
}

// Background-conditioned mixture step: the predicted clean latent is used
// inside the mask and the clean background outside, then a single posterior
// sample is drawn with one shared noise field (the regions are disjoint, so
// this equals independent regional draws).
inline GridTensor anomaly_inference_step(const DiffusionSchedule& sched, const Denoiser& model,
                                         const GridTensor& x_t, const GridTensor& x_back,
                                         const BinaryMask& m0, int t, RngStream& rng,
                                         const SoftMask& cond) {
  require_same_shape(x_t.height(), x_t.width(), x_back.height(), x_back.width(),
                     "anomaly_inference_step");
  require_same_shape(x_t.height(), x_t.width(), m0.height(), m0.width(),
                     "anomaly_inference_step");
  const GridTensor x0_hat = predict_x0(sched, model, DenoiserInput{x_t, t, cond});
  const GridTensor mixed = compose(m0, x0_hat, x_back);
  return posterior_sample(sched, mixed, x_t, t, rng);
}

inline GridTensor anomaly_inference_step(const DiffusionSchedule& sched, const Denoiser& model,
                                         const GridTensor& x_t, const GridTensor& x_back,
                                         const BinaryMask& m0, int t, RngStream& rng) {
  return anomaly_inference_step(sched, model, x_t, x_back, m0, t, rng, SoftMask(m0));
}

struct StepTrace {
  int t;              // step being consumed (T down to 1)
  bool anomaly_only;  // which branch produced this step
  double zeta_next;   // schedule value of the mask used for fusion, zeta(t-1)
};

struct BranchDenoisers {
  const Denoiser* aware = nullptr;
  const Denoiser* only = nullptr;
};

struct GradedResult {
  GridTensor image;           // x0_hat: final composite latent
  GridTensor anomaly_latent;  // x0_hat_p: final anomaly-only latent
  std::vector<StepTrace> trace;
};

// Dual-branch graded sampling loop. Inside an active interval the
// anomaly-only branch advances the anomaly latent and the composite is
// re-anchored to the hard mask; elsewhere the anomaly-aware branch advances
// the composite under the progressive mask. Both state fields update every
// step, and the final composite uses the clean background exactly.
inline GradedResult graded_sample(const GradedPlan& plan, const BranchDenoisers& branches,
                                  const BinaryMask& m0, const GridTensor& x_back,
                                  RngStream& rng) {
  if (plan.schedule == nullptr || branches.aware == nullptr || branches.only == nullptr)
    throw std::invalid_argument("graded_sample: plan and branches must be fully populated");
  validate(plan.ema);
  const DiffusionSchedule& sched = *plan.schedule;
  if (plan.ema.steps != sched.steps())
    throw std::invalid_argument("graded_sample: ema steps must match the schedule");
  for (std::size_t i = 0; i < plan.intervals.size(); ++i) {
    if (plan.intervals[i].lo > plan.intervals[i].hi || plan.intervals[i].lo < 0 ||
        plan.intervals[i].hi > sched.steps())
      throw std::invalid_argument("graded_sample: invalid interval");
    if (i > 0 && plan.intervals[i].lo <= plan.intervals[i - 1].hi)
      throw std::invalid_argument("graded_sample: intervals overlap");
  }
  require_same_shape(m0.height(), m0.width(), x_back.height(), x_back.width(), "graded_sample");

  const int T = sched.steps();
  const int h = m0.height();
  const int w = m0.width();
  const SoftMask hard(m0);

  GridTensor x_hat = gaussian_field(rng, h, w);
  const GridTensor mask_init = forward_mask(sched, m0, T, rng);
  GridTensor x_hat_p = compose(m0, x_hat, mask_init);

  std::vector<StepTrace> trace;
  trace.reserve(T);
  for (int t = T; t >= 1; --t) {
    const SoftMask mp_prev = progressive_mask(plan.ema, m0, t - 1);
    const GridTensor xb_prev = forward_background(sched, x_back, t - 1, rng);
    const GridTensor mask_prev = forward_mask(sched, m0, t - 1, rng);
    const bool only = interval_active(plan.intervals, t);
    if (only) {
      const GridTensor xp = ddpm_step(sched, *branches.only, x_hat_p, t, rng, hard);
      x_hat_p = compose(m0, xp, mask_prev);
      x_hat = compose(m0, x_hat_p, xb_prev);
    } else {
      const GridTensor xr =
          anomaly_inference_step(sched, *branches.aware, x_hat, x_back, m0, t, rng, mp_prev);
      x_hat = soft_compose(mp_prev, xr, xb_prev);
      x_hat_p = compose(m0, x_hat, mask_prev);
    }
    trace.push_back(StepTrace{t, only, zeta(plan.ema, t - 1)});
  }
  return GradedResult{std::move(x_hat), std::move(x_hat_p), std::move(trace)};
}

// Largest absolute deviation from the clean background outside the mask;
// zero when the mask covers everything.
inline double background_fidelity(const GridTensor& image, const GridTensor& x_back,
                                  const BinaryMask& m0) {
  require_same_shape(image.height(), image.width(), x_back.height(), x_back.width(),
                     "background_fidelity");
  require_same_shape(image.height(), image.width(), m0.height(), m0.width(),
                     "background_fidelity");
  double worst = 0.0;
  for (std::size_t i = 0; i < image.size(); ++i)
    if (m0[i] == 0.0) worst = std::max(worst, std::abs(image[i] - x_back[i]));
  return worst;
}

}  // namespace stage
