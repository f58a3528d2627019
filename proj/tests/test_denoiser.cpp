#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "stage/denoiser.hpp"
#include "stage/grid.hpp"
#include "stage/schedule.hpp"

using stage::AnalyticGaussianDenoiser;
using stage::BinaryMask;
using stage::DenoiserInput;
using stage::DiffusionSchedule;
using stage::EmaConfig;
using stage::GridTensor;
using stage::LinearDenoiser;
using stage::NoiseDraw;
using stage::RngStream;
using stage::SoftMask;
using stage::TrainExample;

namespace {

// Test double returning a fixed noise field regardless of input.
struct FixedEps final : stage::Denoiser {
  GridTensor eps;
  explicit FixedEps(GridTensor e) : eps(std::move(e)) {}
  GridTensor predict_eps(const DenoiserInput&) const override { return eps; }
};

}  // namespace

TEST_CASE("analytic denoiser validates inputs") {
  const DiffusionSchedule s = DiffusionSchedule::linear(100, 1e-3, 0.02);
  CHECK_THROWS_AS(AnalyticGaussianDenoiser(s, GridTensor(2, 2), 0.0), std::invalid_argument);
  const AnalyticGaussianDenoiser d(s, GridTensor(2, 2, 1.0), 1.0);
  const GridTensor x(2, 2, 0.3);
  const SoftMask cond(2, 2, 1.0);
  CHECK_THROWS_AS(d.predict_eps(DenoiserInput{x, 0, cond}), std::invalid_argument);
  CHECK_THROWS_AS(d.predict_eps(DenoiserInput{x, 101, cond}), std::invalid_argument);
}

TEST_CASE("point-mass prior limit") {
  const DiffusionSchedule s = DiffusionSchedule::linear(100, 1e-3, 0.05);
  const double m = 1.7;
  const AnalyticGaussianDenoiser d(s, GridTensor(1, 1, m), 1e-12);
  const int t = 60;
  const GridTensor x(1, 1, 0.4);
  const GridTensor eps = d.predict_eps(DenoiserInput{x, t, SoftMask(1, 1, 1.0)});
  const double ab = s.alpha_bar(t);
  const double expected = (x[0] - std::sqrt(ab) * m) / std::sqrt(1.0 - ab);
  CHECK(eps[0] == Catch::Approx(expected).margin(1e-6));
}

TEST_CASE("posterior mean fixed point at the prior mode") {
  const DiffusionSchedule s = DiffusionSchedule::linear(100, 1e-3, 0.05);
  const double m = -0.8;
  const AnalyticGaussianDenoiser d(s, GridTensor(3, 3, m), 0.7);
  for (int t : {1, 17, 100}) {
    const GridTensor x(3, 3, std::sqrt(s.alpha_bar(t)) * m);
    const GridTensor ex0 = d.posterior_mean(x, t);
    for (double v : ex0) CHECK(v == Catch::Approx(m).epsilon(1e-12));
  }
}

TEST_CASE("scalar conjugate case against brute-force Bayes") {
  // One-step schedule with beta = 0.5 gives alpha_bar exactly 0.5.
  const DiffusionSchedule s = DiffusionSchedule::linear(1, 0.5, 0.5);
  const AnalyticGaussianDenoiser d(s, GridTensor(1, 1, 0.0), 1.0);
  const GridTensor x(1, 1, 1.0);
  const GridTensor ex0 = d.posterior_mean(x, 1);
  CHECK(ex0[0] == Catch::Approx(std::sqrt(0.5)).epsilon(1e-12));
  const double oracle = oracles::bayes_x0_mean(0.0, 1.0, 0.5, 1.0, 100000);
  CHECK(std::abs(ex0[0] - oracle) <= 1e-6);
}

TEST_CASE("conjugate posterior mean matches quadrature across steps") {
  const DiffusionSchedule s = DiffusionSchedule::linear(50, 5e-3, 0.08);
  RngStream rng(31);
  for (int trial = 0; trial < 6; ++trial) {
    const double m = rng.next_gaussian();
    const double s2 = 0.2 + rng.next_uniform();
    const double xt = rng.next_gaussian();
    const int t = 1 + static_cast<int>(rng.next_uniform() * 50);
    const AnalyticGaussianDenoiser d(s, GridTensor(1, 1, m), s2);
    const double got = d.posterior_mean(GridTensor(1, 1, xt), t)[0];
    const double want = oracles::bayes_x0_mean(m, s2, s.alpha_bar(t), xt, 100000);
    CHECK(std::abs(got - want) <= 1e-6);
  }
}

TEST_CASE("predict_x0 inverts the forward marginal given the true noise") {
  const DiffusionSchedule s = DiffusionSchedule::linear(200, 1e-4, 0.02);
  RngStream rng(32);
  const GridTensor x0 = gaussian_field(rng, 6, 6);
  const GridTensor eps = gaussian_field(rng, 6, 6);
  const int t = 120;
  const double sa = std::sqrt(s.alpha_bar(t));
  const double sn = std::sqrt(1.0 - s.alpha_bar(t));
  std::vector<double> noisy(x0.size());
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] = sa * x0[i] + sn * eps[i];
  const GridTensor x_t(6, 6, std::move(noisy));

  const FixedEps oracle_model{eps};
  const GridTensor recovered =
      predict_x0(s, oracle_model, DenoiserInput{x_t, t, SoftMask(6, 6, 1.0)});
  for (std::size_t i = 0; i < recovered.size(); ++i)
    CHECK(recovered[i] == Catch::Approx(x0[i]).margin(1e-12));
}

TEST_CASE("predict_x0 near-identity at t=1") {
  const DiffusionSchedule s = DiffusionSchedule::linear(1000, 1e-4, 0.02);
  const AnalyticGaussianDenoiser d(s, GridTensor(4, 4, 0.0), 1.0);
  RngStream rng(33);
  const GridTensor x_t = gaussian_field(rng, 4, 4);
  const GridTensor x0 = predict_x0(s, d, DenoiserInput{x_t, 1, SoftMask(4, 4, 1.0)});
  for (std::size_t i = 0; i < x0.size(); ++i) CHECK(std::abs(x0[i] - x_t[i]) < 0.05);
}

TEST_CASE("predict_x0 Monte Carlo mean recovers the prior mean") {
  const DiffusionSchedule s = DiffusionSchedule::linear(500, 1e-4, 0.02);
  const double m = 1.2;
  const double sd = 0.5;
  const AnalyticGaussianDenoiser d(s, GridTensor(100, 100, m), sd * sd);
  RngStream rng(34);
  GridTensor x0(100, 100);
  for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = m + sd * rng.next_gaussian();
  const int t = 350;
  const GridTensor x_t = forward_marginal(s, x0, t, rng);
  const GridTensor est = predict_x0(s, d, DenoiserInput{x_t, t, SoftMask(100, 100, 1.0)});
  const double se = std::sqrt(oracles::variance_of(est) / static_cast<double>(est.size()));
  CHECK(std::abs(oracles::mean_of(est) - m) <= 4.0 * se);
}

TEST_CASE("dual-branch loss pinned values") {
  const GridTensor zero(2, 2, 0.0);
  const SoftMask ones(2, 2, 1.0);

  // Perfect predictions.
  CHECK(loss_dual_branch(zero, zero, zero, zero, ones) == 0.0);

  // All-zero mask annihilates the second term.
  const GridTensor big(2, 2, 100.0);
  CHECK(loss_dual_branch(zero, zero, big, zero, SoftMask(2, 2, 0.0)) == 0.0);

  // Hand-summed 2x2 case: residual1 = [[1,-1],[0,0]], residual2 = [[2,0],[0,0]],
  // m_p = [[0.5,1],[1,1]] -> 0.5 + 0.25.
  const GridTensor eps1(2, 2, {1.0, -1.0, 0.0, 0.0});
  const GridTensor eps2(2, 2, {2.0, 0.0, 0.0, 0.0});
  const SoftMask mp(2, 2, {0.5, 1.0, 1.0, 1.0});
  CHECK(loss_dual_branch(eps1, zero, eps2, zero, mp) == 0.75);

  CHECK_THROWS_AS(loss_dual_branch(eps1, GridTensor(1, 4), eps2, zero, mp),
                  std::invalid_argument);
}

TEST_CASE("loss is homogeneous and permutation invariant") {
  RngStream rng(35);
  const GridTensor zero(3, 3, 0.0);
  for (int trial = 0; trial < 20; ++trial) {
    const GridTensor r1 = gaussian_field(rng, 3, 3);
    const GridTensor r2 = gaussian_field(rng, 3, 3);
    std::vector<double> mv(9);
    for (auto& v : mv) v = rng.next_uniform();
    const SoftMask mp(3, 3, mv);

    const double base = loss_dual_branch(r1, zero, r2, zero, mp);
    CHECK(base >= 0.0);

    const double lambda = -2.5;
    std::vector<double> r1s(9), r2s(9);
    for (std::size_t i = 0; i < 9; ++i) {
      r1s[i] = lambda * r1[i];
      r2s[i] = lambda * r2[i];
    }
    const double scaled =
        loss_dual_branch(GridTensor(3, 3, r1s), zero, GridTensor(3, 3, r2s), zero, mp);
    CHECK(scaled == Catch::Approx(std::abs(lambda) * base).epsilon(1e-12));

    // Reverse all pixels together with the mask.
    std::vector<double> p1(9), p2(9), pm(9);
    for (std::size_t i = 0; i < 9; ++i) {
      p1[i] = r1[8 - i];
      p2[i] = r2[8 - i];
      pm[i] = mv[8 - i];
    }
    const double permuted = loss_dual_branch(GridTensor(3, 3, p1), zero, GridTensor(3, 3, p2),
                                             zero, SoftMask(3, 3, pm));
    CHECK(permuted == Catch::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("linear denoiser bucket mapping and validation") {
  const DiffusionSchedule s = DiffusionSchedule::linear(200, 1e-4, 0.02);
  CHECK_THROWS_AS(LinearDenoiser(s, 7, 4, 4), std::invalid_argument);  // 7 does not divide 200
  LinearDenoiser m(s, 10, 4, 4);
  CHECK(m.bucket_of(1) == 0);
  CHECK(m.bucket_of(20) == 0);
  CHECK(m.bucket_of(21) == 1);
  CHECK(m.bucket_of(200) == 9);
  CHECK_THROWS_AS(m.bucket_of(0), std::invalid_argument);
  m.gain(3) = 0.5;
  m.mask_gain(3) = 0.25;
  m.bias(3)[5] = -1.0;
  const GridTensor x(4, 4, 2.0);
  const SoftMask cond(4, 4, 1.0);
  const GridTensor eps = m.predict_eps(DenoiserInput{x, 70, cond});
  CHECK(eps[0] == 0.5 * 2.0 + 0.25);
  CHECK(eps[5] == 0.5 * 2.0 - 1.0 + 0.25);
}

namespace {

struct GradCheckSetup {
  DiffusionSchedule sched = DiffusionSchedule::linear(200, 1e-4, 0.02);
  EmaConfig ema{200, 40};
  std::vector<TrainExample> batch;
  std::vector<NoiseDraw> draws;

  explicit GradCheckSetup(std::uint64_t seed) {
    RngStream rng(seed);
    for (int e = 0; e < 2; ++e) {
      std::vector<double> bits(36);
      for (auto& b : bits) b = rng.next_uniform() < 0.4 ? 1.0 : 0.0;
      batch.push_back(TrainExample{gaussian_field(rng, 6, 6), BinaryMask(6, 6, bits)});
      draws.push_back(stage::draw_noise(sched, 6, 6, rng));
    }
  }

  LinearDenoiser randomized_model(std::uint64_t seed) const {
    LinearDenoiser model(sched, 10, 6, 6);
    RngStream rng(seed);
    for (int k = 0; k < model.bucket_count(); ++k) {
      model.gain(k) = 0.3 * rng.next_gaussian();
      model.mask_gain(k) = 0.3 * rng.next_gaussian();
      for (std::size_t i = 0; i < model.bias(k).size(); ++i)
        model.bias(k)[i] = 0.3 * rng.next_gaussian();
    }
    return model;
  }

  // Every residual must sit comfortably away from the |.| kink so central
  // differences see a locally linear loss.
  bool away_from_kinks(const LinearDenoiser& model, double margin) const {
    for (std::size_t e = 0; e < batch.size(); ++e) {
      const int t = draws[e].t;
      const double sa = std::sqrt(sched.alpha_bar(t));
      const double sn = std::sqrt(1.0 - sched.alpha_bar(t));
      const SoftMask mp = progressive_mask(ema, batch[e].m0, t);
      const SoftMask hard(batch[e].m0);
      std::vector<double> xt(36), xtp(36);
      for (std::size_t i = 0; i < 36; ++i) {
        xt[i] = sa * batch[e].x0[i] + sn * draws[e].eps1[i];
        xtp[i] = sa * (batch[e].m0[i] * batch[e].x0[i]) + sn * draws[e].eps2[i];
      }
      const GridTensor x_t(6, 6, xt);
      const GridTensor x_tp(6, 6, xtp);
      const GridTensor e1 = model.predict_eps(DenoiserInput{x_t, t, mp});
      const GridTensor e2 = model.predict_eps(DenoiserInput{x_tp, t, hard});
      for (std::size_t i = 0; i < 36; ++i) {
        if (std::abs(draws[e].eps1[i] - e1[i]) < margin) return false;
        if (std::abs(draws[e].eps2[i] - e2[i]) < margin) return false;
      }
    }
    return true;
  }
};

}  // namespace

TEST_CASE("analytic subgradients agree with central finite differences") {
  const GradCheckSetup setup(41);
  int checked = 0;
  RngStream pick(43);
  for (std::uint64_t model_seed = 0; checked < 100; ++model_seed) {
    const LinearDenoiser model = setup.randomized_model(1000 + model_seed);
    if (!setup.away_from_kinks(model, 1e-3)) continue;
    const auto eval = stage::eval_dual_branch(model, setup.ema, setup.batch, setup.draws);

    // Probe the buckets actually hit by the drawn steps.
    for (const NoiseDraw& nd : setup.draws) {
      const int k = model.bucket_of(nd.t);
      LinearDenoiser probe = model;
      const auto loss = [&] {
        return stage::dual_branch_loss(probe, setup.ema, setup.batch, setup.draws);
      };
      const double fd_gain = oracles::central_difference(loss, probe.gain(k));
      const double fd_mask = oracles::central_difference(loss, probe.mask_gain(k));
      const std::size_t pix = static_cast<std::size_t>(pick.next_uniform() * 36.0);
      const double fd_bias = oracles::central_difference(loss, probe.bias(k)[pix]);

      const auto rel = [](double a, double b) {
        return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)});
      };
      CHECK(rel(fd_gain, eval.grads[k].gain) <= 1e-4);
      CHECK(rel(fd_mask, eval.grads[k].mask_gain) <= 1e-4);
      CHECK(rel(fd_bias, eval.grads[k].bias[pix]) <= 1e-4);
      checked += 3;
    }
  }
  CHECK(checked >= 100);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  const GradCheckSetup setup(44);
  LinearDenoiser model = setup.randomized_model(5);
  const LinearDenoiser before = model;
  RngStream rng(45);
  (void)stage::train_step(model, setup.ema, setup.batch, rng, 0.0);
  for (int k = 0; k < model.bucket_count(); ++k) {
    CHECK(model.gain(k) == before.gain(k));
    CHECK(model.mask_gain(k) == before.mask_gain(k));
    for (std::size_t i = 0; i < model.bias(k).size(); ++i)
      CHECK(model.bias(k)[i] == before.bias(k)[i]);
  }
}

TEST_CASE("training on the constant-image task halves the loss") {
  const DiffusionSchedule sched = DiffusionSchedule::linear(200, 1e-4, 0.02);
  const EmaConfig ema{200, 40};
  LinearDenoiser model(sched, 10, 8, 8);

  RngStream rng(46);
  std::vector<TrainExample> batch;
  for (int b = 0; b < 4; ++b) {
    std::vector<double> bits(64, 0.0);
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = rng.next_uniform() < 0.25 ? 1.0 : 0.0;
    batch.push_back(TrainExample{GridTensor(8, 8, 1.0), BinaryMask(8, 8, bits)});
  }

  double first = 0.0;
  double last = 0.0;
  for (int step = 0; step < 500; ++step) {
    const double loss = stage::train_step(model, ema, batch, rng, 0.05);
    if (step == 0) first = loss;
    last = loss;
  }
  INFO("loss " << first << " -> " << last);
  CHECK(last <= 0.5 * first);
}

TEST_CASE("non-finite loss aborts training with a diagnostic") {
  const GradCheckSetup setup(47);
  LinearDenoiser model = setup.randomized_model(6);
  model.gain(0) = 1e308;
  model.gain(5) = 1e308;
  RngStream rng(48);
  bool aborted = false;
  for (int attempt = 0; attempt < 50 && !aborted; ++attempt) {
    try {
      (void)stage::train_step(model, setup.ema, setup.batch, rng, 0.01);
    } catch (const stage::TrainingError&) {
      aborted = true;
    }
  }
  CHECK(aborted);
}
