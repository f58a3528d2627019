#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stage/ema.hpp"
#include "stage/grid.hpp"
#include "stage/rng.hpp"
#include "stage/schedule.hpp"

namespace stage {

// Inputs to a noise predictor: the noisy latent, its step, and the mask
// conditioning channel.
struct DenoiserInput {
  const GridTensor& x_t;
  int t;
  const SoftMask& cond_mask;
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual GridTensor predict_eps(const DenoiserInput& input) const = 0;
};

// Closed-form predictor for pixelwise Gaussian data x0 ~ N(prior_mean,
// prior_var). Under the forward marginal the posterior mean of x0 given x_t
// is conjugate:
//   E[x0|x_t] = (sqrt(ab)*s2*x_t + (1-ab)*m) / (ab*s2 + 1-ab),
// and the implied noise estimate inverts the marginal. Ignores the mask
// conditioning channel.
class AnalyticGaussianDenoiser final : public Denoiser {
 public:
  AnalyticGaussianDenoiser(const DiffusionSchedule& sched, GridTensor prior_mean,
                           double prior_var)
      : sched_(&sched), prior_mean_(std::move(prior_mean)), prior_var_(prior_var) {
    if (!(prior_var > 0.0) || !std::isfinite(prior_var))
      throw std::invalid_argument("AnalyticGaussianDenoiser: prior_var must be positive");
  }

  GridTensor posterior_mean(const GridTensor& x_t, int t) const {
    require_same_shape(x_t.height(), x_t.width(), prior_mean_.height(), prior_mean_.width(),
                       "AnalyticGaussianDenoiser");
    const double ab = sched_->alpha_bar(require_step(t));
    const double sqrt_ab = std::sqrt(ab);
    const double omb = 1.0 - ab;
    const double k1 = sqrt_ab * prior_var_;
    const double den = ab * prior_var_ + omb;
    std::vector<double> out(x_t.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = (k1 * x_t[i] + omb * prior_mean_[i]) / den;
    return GridTensor(x_t.height(), x_t.width(), std::move(out));
  }

  GridTensor predict_eps(const DenoiserInput& input) const override {
    const GridTensor ex0 = posterior_mean(input.x_t, input.t);
    const double ab = sched_->alpha_bar(input.t);
    const double sqrt_ab = std::sqrt(ab);
    const double sqrt_omb = std::sqrt(1.0 - ab);
    std::vector<double> out(input.x_t.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = (input.x_t[i] - sqrt_ab * ex0[i]) / sqrt_omb;
    return GridTensor(input.x_t.height(), input.x_t.width(), std::move(out));
  }

  const DiffusionSchedule& schedule() const noexcept { return *sched_; }
  const GridTensor& prior_mean() const noexcept { return prior_mean_; }
  double prior_var() const noexcept { return prior_var_; }

 private:
  int require_step(int t) const {
    if (t < 1 || t > sched_->steps())
      throw std::invalid_argument("denoiser: step out of range");
    return t;
  }

  const DiffusionSchedule* sched_;
  GridTensor prior_mean_;
  double prior_var_;
};

// Minimal trainable predictor: timestep buckets share a scalar gain, a bias
// field and a scalar coefficient on the mask conditioning channel:
//   eps_hat = gain * x_t + bias + mask_gain * cond.
class LinearDenoiser final : public Denoiser {
 public:
  LinearDenoiser(const DiffusionSchedule& sched, int bucket_count, int height, int width)
      : sched_(&sched), buckets_(bucket_count), height_(height), width_(width) {
    if (bucket_count < 1 || sched.steps() % bucket_count != 0)
      throw std::invalid_argument("LinearDenoiser: bucket count must evenly divide the steps");
    gain_.assign(buckets_, 0.0);
    mask_gain_.assign(buckets_, 0.0);
    bias_.assign(buckets_, GridTensor(height, width, 0.0));
  }

  int bucket_count() const noexcept { return buckets_; }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  const DiffusionSchedule& schedule() const noexcept { return *sched_; }

  int bucket_of(int t) const {
    if (t < 1 || t > sched_->steps())
      throw std::invalid_argument("denoiser: step out of range");
    return (t - 1) * buckets_ / sched_->steps();
  }

  double gain(int k) const { return gain_.at(k); }
  double mask_gain(int k) const { return mask_gain_.at(k); }
  const GridTensor& bias(int k) const { return bias_.at(k); }
  double& gain(int k) { return gain_.at(k); }
  double& mask_gain(int k) { return mask_gain_.at(k); }
  GridTensor& bias(int k) { return bias_.at(k); }

  GridTensor predict_eps(const DenoiserInput& input) const override {
    require_same_shape(input.x_t.height(), input.x_t.width(), height_, width_, "LinearDenoiser");
    require_same_shape(input.cond_mask.height(), input.cond_mask.width(), height_, width_,
                       "LinearDenoiser");
    const int k = bucket_of(input.t);
    const double a = gain_[k];
    const double c = mask_gain_[k];
    const GridTensor& b = bias_[k];
    std::vector<double> out(input.x_t.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = a * input.x_t[i] + b[i] + c * input.cond_mask[i];
    return GridTensor(height_, width_, std::move(out));
  }

 private:
  const DiffusionSchedule* sched_;
  int buckets_;
  int height_;
  int width_;
  std::vector<double> gain_;
  std::vector<double> mask_gain_;
  std::vector<GridTensor> bias_;
};

// x0_hat = (x_t - sqrt(1 - ab) * eps_hat) / sqrt(ab).
inline GridTensor predict_x0(const DiffusionSchedule& sched, const Denoiser& model,
                             const DenoiserInput& input) {
  if (input.t < 1 || input.t > sched.steps())
    throw std::invalid_argument("predict_x0: step out of range");
  const GridTensor eps = model.predict_eps(input);
  const double sqrt_ab = std::sqrt(sched.alpha_bar(input.t));
  const double sqrt_omb = std::sqrt(1.0 - sched.alpha_bar(input.t));
  std::vector<double> out(input.x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (input.x_t[i] - sqrt_omb * eps[i]) / sqrt_ab;
  return GridTensor(input.x_t.height(), input.x_t.width(), std::move(out));
}

// Dual-branch objective: mean absolute residual of the full branch plus the
// mask-weighted mean absolute residual of the masked branch.
inline double loss_dual_branch(const GridTensor& eps1, const GridTensor& eps_hat_full,
                               const GridTensor& eps2, const GridTensor& eps_hat_masked,
                               const SoftMask& m_p) {
  require_same_shape(eps1.height(), eps1.width(), eps_hat_full.height(), eps_hat_full.width(),
                     "loss_dual_branch");
  require_same_shape(eps2.height(), eps2.width(), eps_hat_masked.height(),
                     eps_hat_masked.width(), "loss_dual_branch");
  require_same_shape(eps1.height(), eps1.width(), eps2.height(), eps2.width(),
                     "loss_dual_branch");
  require_same_shape(eps1.height(), eps1.width(), m_p.height(), m_p.width(),
                     "loss_dual_branch");
  const double n = static_cast<double>(eps1.size());
  double term1 = 0.0;
  double term2 = 0.0;
  for (std::size_t i = 0; i < eps1.size(); ++i) {
    term1 += std::abs(eps1[i] - eps_hat_full[i]);
    term2 += std::abs(m_p[i] * (eps2[i] - eps_hat_masked[i]));
  }
  return term1 / n + term2 / n;
}

// One training example: a clean latent with its hard mask.
struct TrainExample {
  GridTensor x0;
  BinaryMask m0;
};

// Frozen noise for one example so a loss evaluation is a deterministic
// function of the parameters (what the finite-difference check needs).
struct NoiseDraw {
  int t;
  GridTensor eps1;
  GridTensor eps2;
};

inline NoiseDraw draw_noise(const DiffusionSchedule& sched, int height, int width,
                            RngStream& rng) {
  const int t = std::min(sched.steps(),
                         1 + static_cast<int>(rng.next_uniform() * sched.steps()));
  GridTensor e1 = gaussian_field(rng, height, width);
  GridTensor e2 = gaussian_field(rng, height, width);
  return NoiseDraw{t, std::move(e1), std::move(e2)};
}

struct BucketGrads {
  double gain = 0.0;
  double mask_gain = 0.0;
  GridTensor bias;
};

struct DualBranchEval {
  double loss = 0.0;
  std::vector<BucketGrads> grads;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Loss and exact subgradients of the dual-branch objective at the model's
// current parameters, for a fixed batch and fixed noise. The subgradient of
// |r| is sign(r), taken as 0 at r = 0. The full branch is conditioned on the
// progressive mask, the masked branch on the hard mask.
inline DualBranchEval eval_dual_branch(const LinearDenoiser& model, const EmaConfig& ema,
                                       std::span<const TrainExample> batch,
                                       std::span<const NoiseDraw> draws) {
  if (batch.empty() || batch.size() != draws.size())
    throw std::invalid_argument("eval_dual_branch: batch and draws must match and be non-empty");
  const DiffusionSchedule& sched = model.schedule();
  const int h = model.height();
  const int w = model.width();

  DualBranchEval eval;
  eval.grads.resize(model.bucket_count());
  for (auto& g : eval.grads) g.bias = GridTensor(h, w, 0.0);

  const double inv_n = 1.0 / static_cast<double>(static_cast<std::size_t>(h) * w);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  const auto sign = [](double r) { return r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0); };

  for (std::size_t e = 0; e < batch.size(); ++e) {
    const TrainExample& ex = batch[e];
    const NoiseDraw& nd = draws[e];
    require_same_shape(ex.x0.height(), ex.x0.width(), h, w, "eval_dual_branch");
    const int t = nd.t;
    const double s = std::sqrt(sched.alpha_bar(t));
    const double n = std::sqrt(1.0 - sched.alpha_bar(t));

    std::vector<double> xt(ex.x0.size()), xtp(ex.x0.size());
    for (std::size_t i = 0; i < xt.size(); ++i) {
      xt[i] = s * ex.x0[i] + n * nd.eps1[i];
      xtp[i] = s * (ex.m0[i] * ex.x0[i]) + n * nd.eps2[i];
    }
    const GridTensor x_t(h, w, std::move(xt));
    const GridTensor x_tp(h, w, std::move(xtp));

    const SoftMask mp = progressive_mask(ema, ex.m0, t);
    const SoftMask hard(ex.m0);
    const GridTensor ehat1 = model.predict_eps(DenoiserInput{x_t, t, mp});
    const GridTensor ehat2 = model.predict_eps(DenoiserInput{x_tp, t, hard});

    const int k = model.bucket_of(t);
    BucketGrads& g = eval.grads[k];
    double loss = 0.0;
    for (std::size_t i = 0; i < x_t.size(); ++i) {
      const double r1 = nd.eps1[i] - ehat1[i];
      const double r2 = nd.eps2[i] - ehat2[i];
      loss += std::abs(r1) + mp[i] * std::abs(r2);
      const double s1 = sign(r1);
      const double s2 = mp[i] * sign(r2);
      g.gain += -inv_n * inv_batch * (s1 * x_t[i] + s2 * x_tp[i]);
      g.bias[i] += -inv_n * inv_batch * (s1 + s2);
      g.mask_gain += -inv_n * inv_batch * (s1 * mp[i] + s2 * ex.m0[i]);
    }
    eval.loss += loss * inv_n * inv_batch;
  }
  return eval;
}

inline double dual_branch_loss(const LinearDenoiser& model, const EmaConfig& ema,
                               std::span<const TrainExample> batch,
                               std::span<const NoiseDraw> draws) {
  return eval_dual_branch(model, ema, batch, draws).loss;
}

// Draws fresh noise for the batch, takes one subgradient step, and returns
// the pre-update loss. Aborts on a non-finite loss.
inline double train_step(LinearDenoiser& model, const EmaConfig& ema,
                         std::span<const TrainExample> batch, RngStream& rng, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr))
    throw std::invalid_argument("train_step: learning rate must be finite and >= 0");
  std::vector<NoiseDraw> draws;
  draws.reserve(batch.size());
  for (std::size_t e = 0; e < batch.size(); ++e)
    draws.push_back(draw_noise(model.schedule(), model.height(), model.width(), rng));

  const DualBranchEval eval = eval_dual_branch(model, ema, batch, draws);
  if (!std::isfinite(eval.loss))
    throw TrainingError("train_step: loss is not finite (diverged parameters or data)");

  for (int k = 0; k < model.bucket_count(); ++k) {
    model.gain(k) -= lr * eval.grads[k].gain;
    model.mask_gain(k) -= lr * eval.grads[k].mask_gain;
    GridTensor& b = model.bias(k);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] -= lr * eval.grads[k].bias[i];
  }
  return eval.loss;
}

}  // namespace stage
