#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stage/stage.hpp"
#include "stage/verify.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerification = 2;

struct DenoiserBundle {
  std::unique_ptr<stage::Denoiser> aware;
  std::unique_ptr<stage::Denoiser> only;
};

std::unique_ptr<stage::Denoiser> build_denoiser(const stage::DenoiserSection& d,
                                                const stage::DiffusionSchedule& sched, int h,
                                                int w) {
  if (d.type == "analytic") {
    if (!(d.prior_var > 0.0))
      throw stage::ConfigError("config: analytic denoiser needs prior_var > 0");
    return std::make_unique<stage::AnalyticGaussianDenoiser>(
        sched, stage::GridTensor(h, w, d.prior_mean), d.prior_var);
  }
  if (!d.checkpoint.empty())
    return std::make_unique<stage::LinearDenoiser>(stage::load_checkpoint(sched, d.checkpoint));
  return std::make_unique<stage::LinearDenoiser>(sched, d.buckets, h, w);
}

std::string pair_name(int index, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "pair_%06d%s", index, suffix);
  return std::string(buf);
}

int resolved_workers(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

int cmd_synthesize(const std::string& config_path, int count_override, bool seed_given,
                   std::uint64_t seed_override, const std::string& out_override,
                   int workers_override, int pgm_previews, bool trace) {
  stage::RunConfig cfg =
      config_path.empty() ? stage::RunConfig{} : stage::load_config(config_path);
  if (count_override >= 0) cfg.synthesis.count = count_override;
  if (seed_given) cfg.seed = seed_override;
  if (!out_override.empty()) cfg.output_dir = out_override;
  if (workers_override > 0) cfg.synthesis.workers = workers_override;

  const stage::DiffusionSchedule sched =
      stage::DiffusionSchedule::linear(cfg.schedule.steps, cfg.schedule.beta_start,
                                       cfg.schedule.beta_end);
  const stage::EmaConfig ema{cfg.schedule.steps, cfg.ema.threshold_step};
  const stage::GradedPlan plan = stage::make_graded_plan(sched, ema, cfg.intervals, cfg.seed);
  const int h = cfg.synthesis.height;
  const int w = cfg.synthesis.width;
  DenoiserBundle bundle{build_denoiser(cfg.aware, sched, h, w),
                        build_denoiser(cfg.only, sched, h, w)};
  const stage::BranchDenoisers branches{bundle.aware.get(), bundle.only.get()};
  const double threshold = stage::resolve_threshold(cfg);
  const stage::MaskSpec mask_spec{cfg.mask.target_area_fraction, cfg.mask.smoothness, cfg.seed};
  stage::BackgroundSpec bg_spec;
  bg_spec.kind = cfg.background.kind == "constant" ? stage::BackgroundKind::constant
                                                   : stage::BackgroundKind::random_field;
  bg_spec.value = cfg.background.value;
  bg_spec.radius = cfg.background.radius;
  const int workers = resolved_workers(cfg.synthesis.workers);

  const std::filesystem::path out_dir(cfg.output_dir);
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream echo(out_dir / "config.json");
    echo << stage::effective_config(cfg).dump(2) << "\n";
  }

  const std::vector<stage::SynthesizedPair> batch =
      stage::synthesize_batch(plan, branches, mask_spec, bg_spec, h, w, threshold,
                              cfg.synthesis.count, workers);

  std::ofstream manifest(out_dir / "manifest.jsonl");
  double energy_sum = 0.0;
  double iou_sum = 0.0;
  double max_dev = 0.0;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const stage::SynthesizedPair& p = batch[j];
    const std::string image_name = pair_name(static_cast<int>(j), ".stge");
    const std::string mask_name = pair_name(static_cast<int>(j), ".mask.stge");
    stage::write_grid(p.image, (out_dir / image_name).string());
    stage::write_mask(p.mask, (out_dir / mask_name).string());
    if (static_cast<int>(j) < pgm_previews) {
      double lo = p.image[0];
      double hi = p.image[0];
      for (double v : p.image) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (!(lo < hi)) {
        lo -= 0.5;
        hi += 0.5;
      }
      stage::export_pgm(p.image, (out_dir / pair_name(static_cast<int>(j), ".pgm")).string(),
                        lo, hi);
    }
    if (trace) {
      std::ofstream tl(out_dir / pair_name(static_cast<int>(j), ".trace.log"));
      for (const stage::StepTrace& st : p.trace)
        tl << "t=" << st.t << " branch=" << (st.anomaly_only ? "anomaly-only" : "anomaly-aware")
           << " zeta=" << st.zeta_next << "\n";
    }
    manifest << nlohmann::json{{"index", j},
                               {"seed", p.seed},
                               {"image", image_name},
                               {"mask", mask_name},
                               {"energy_in_mask", p.report.energy_in_mask},
                               {"iou_thresholded", p.report.iou_thresholded},
                               {"background_max_dev", p.report.background_max_dev},
                               {"runtime_ms", p.report.runtime_ms}}
                    .dump()
             << "\n";
    energy_sum += p.report.energy_in_mask;
    iou_sum += p.report.iou_thresholded;
    max_dev = std::max(max_dev, p.report.background_max_dev);
  }
  const double n = batch.empty() ? 1.0 : static_cast<double>(batch.size());
  std::cout << "synthesize: wrote " << batch.size() << " pairs to " << out_dir.string() << "\n"
            << "  mean energy_in_mask   " << energy_sum / n << "\n"
            << "  mean iou_thresholded  " << iou_sum / n << "\n"
            << "  max background_dev    " << max_dev << "\n";
  return kExitOk;
}

int cmd_verify_theorem(std::vector<int> sweep, double ts_frac, int fields, int height, int width,
                       std::uint64_t seed) {
  if (sweep.empty()) sweep = {100, 200, 400, 800};
  const std::vector<stage::TheoremRow> rows =
      stage::theorem_sweep(sweep, ts_frac, fields, height, width, seed);
  std::printf("%8s %8s %16s %16s %8s\n", "T", "t_s", "excess", "bound", "holds");
  bool all_hold = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const stage::TheoremRow& r = rows[i];
    std::printf("%8d %8d %16.9e %16.9e %8s\n", r.steps, r.threshold_step, r.excess, r.bound,
                r.holds ? "yes" : "NO");
    all_hold = all_hold && r.holds;
    if (i > 0)
      std::printf("%28s contraction vs previous: %.4f\n", "",
                  rows[i - 1].bound / r.bound);
  }
  if (!all_hold) {
    std::cerr << "verify-theorem: excess exceeded bound\n";
    return kExitVerification;
  }
  return kExitOk;
}

int cmd_verify_posterior(int steps, double beta_start, double beta_end, double x0, double xt,
                         int grid_points, double tol) {
  const stage::DiffusionSchedule sched =
      stage::DiffusionSchedule::linear(steps, beta_start, beta_end);
  const std::vector<stage::PosteriorCheckRow> rows =
      stage::posterior_check(sched, x0, xt, grid_points);
  std::printf("%4s %16s %16s %12s %12s\n", "t", "mean(analytic)", "mean(oracle)", "|d mean|",
              "|d var|");
  bool ok = true;
  for (const stage::PosteriorCheckRow& r : rows) {
    std::printf("%4d %16.9f %16.9f %12.3e %12.3e\n", r.t, r.analytic.mean, r.oracle.mean,
                r.mean_diff, r.var_diff);
    ok = ok && r.mean_diff <= tol && r.var_diff <= tol;
  }
  if (!ok) {
    std::cerr << "verify-posterior: closed form deviates from the grid oracle beyond " << tol
              << "\n";
    return kExitVerification;
  }
  return kExitOk;
}

int cmd_train_toy(const std::string& out, int steps, double lr, int batch_size, int grid,
                  int buckets, int sched_steps, double beta_start, double beta_end,
                  double image_value, double mask_frac, double mask_smooth,
                  std::uint64_t seed) {
  const stage::DiffusionSchedule sched =
      stage::DiffusionSchedule::linear(sched_steps, beta_start, beta_end);
  const stage::EmaConfig ema{sched_steps, std::max(1, sched_steps / 5)};
  stage::LinearDenoiser model(sched, buckets, grid, grid);

  stage::RngStream rng(seed);
  std::vector<stage::TrainExample> batch;
  for (int b = 0; b < batch_size; ++b)
    batch.push_back(stage::TrainExample{
        stage::GridTensor(grid, grid, image_value),
        stage::generate_mask(
            stage::MaskSpec{mask_frac, mask_smooth, rng.split(100 + b).seed()}, grid, grid)});

  const std::filesystem::path out_dir(out);
  std::filesystem::create_directories(out_dir);
  std::ofstream curve(out_dir / "loss.csv");
  curve << "step,loss\n";
  double first = 0.0;
  double last = 0.0;
  for (int s = 0; s < steps; ++s) {
    const double loss = stage::train_step(model, ema, batch, rng, lr);
    if (s == 0) first = loss;
    last = loss;
    curve << s << "," << loss << "\n";
  }
  stage::save_checkpoint(model, (out_dir / "checkpoint.stgc").string());
  std::cout << "train-toy: " << steps << " steps, loss " << first << " -> " << last << " ("
            << (first > 0.0 ? 100.0 * (1.0 - last / first) : 0.0) << "% reduction)\n"
            << "  checkpoint: " << (out_dir / "checkpoint.stgc").string() << "\n";
  return kExitOk;
}

int cmd_sample_stats(std::uint64_t seed, int sched_steps, double beta_start, double beta_end,
                     int t_probe) {
  const stage::DiffusionSchedule sched =
      stage::DiffusionSchedule::linear(sched_steps, beta_start, beta_end);
  stage::RngStream rng(seed);
  bool ok = true;

  // Forward-marginal moments at the probe step: 1e5 i.i.d. pixel draws.
  {
    const double x0 = 0.7;
    const stage::GridTensor clean(250, 400, x0);
    const stage::GridTensor noisy = stage::forward_marginal(sched, clean, t_probe, rng);
    const double n = static_cast<double>(noisy.size());
    double mean = 0.0;
    for (double v : noisy) mean += v;
    mean /= n;
    const double ab = sched.alpha_bar(t_probe);
    const double expected = std::sqrt(ab) * x0;
    const double se = std::sqrt((1.0 - ab) / n);
    const bool pass = std::abs(mean - expected) <= 4.0 * se;
    ok = ok && pass;
    std::printf("forward-marginal mean @t=%d: %.6f vs %.6f (4se=%.6f)  %s\n", t_probe, mean,
                expected, 4.0 * se, pass ? "PASS" : "FAIL");
  }

  // Terminal-step distribution: KS against the closed-form marginal.
  {
    const double x0 = 0.7;
    const stage::GridTensor clean(250, 400, x0);
    const stage::GridTensor noisy = stage::forward_marginal(sched, clean, sched.steps(), rng);
    const double ab = sched.alpha_bar(sched.steps());
    const double d = stage::ks_statistic(noisy.values(), std::sqrt(ab) * x0,
                                         std::sqrt(1.0 - ab));
    const double crit = stage::ks_critical_1pct(noisy.size());
    const bool pass = d <= crit;
    ok = ok && pass;
    std::printf("KS @t=T: D=%.6f crit(1%%)=%.6f  %s\n", d, crit, pass ? "PASS" : "FAIL");
  }

  // Full reverse chain with the analytic denoiser on 1e4 parallel scalars.
  {
    const double prior_mean = 3.0;
    const double prior_var = 0.25;
    const stage::AnalyticGaussianDenoiser den(sched,
                                              stage::GridTensor(100, 100, prior_mean),
                                              prior_var);
    stage::GridTensor x = stage::gaussian_field(rng, 100, 100);
    for (int t = sched.steps(); t >= 1; --t) x = stage::ddpm_step(sched, den, x, t, rng);
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    const double tol = 4.0 * std::sqrt(prior_var) / 100.0;
    const bool pass = std::abs(mean - prior_mean) <= tol;
    ok = ok && pass;
    std::printf("full-chain recovered mean: %.6f vs %.6f (tol=%.6f)  %s\n", mean, prior_mean,
                tol, pass ? "PASS" : "FAIL");
  }

  return ok ? kExitOk : kExitVerification;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graded-diffusion anomaly synthesis toolkit"};
  app.require_subcommand(1);
  int rc = kExitOk;

  // synthesize
  auto* syn = app.add_subcommand("synthesize", "generate image-mask pairs plus a manifest");
  std::string syn_config;
  int syn_count = -1;
  std::uint64_t syn_seed = 0;
  bool syn_seed_given = false;
  std::string syn_out;
  int syn_workers = 0;
  int syn_pgm = 0;
  bool syn_trace = false;
  syn->add_option("--config", syn_config, "run configuration (JSON)");
  syn->add_option("--count", syn_count, "number of pairs to generate");
  syn->add_option("--seed", syn_seed, "base seed");
  syn->add_option("--out", syn_out, "output directory");
  syn->add_option("--workers", syn_workers, "worker threads (0 = hardware)");
  syn->add_option("--pgm", syn_pgm, "export the first N images as PGM previews");
  syn->add_flag("--trace", syn_trace, "write per-step branch traces");
  syn->callback([&] {
    syn_seed_given = syn->count("--seed") > 0;
    rc = cmd_synthesize(syn_config, syn_count, syn_seed_given, syn_seed, syn_out, syn_workers,
                        syn_pgm, syn_trace);
  });

  // verify-theorem
  auto* vt = app.add_subcommand("verify-theorem",
                                "sweep the near-optimality bound over total step counts");
  std::vector<int> vt_sweep;
  double vt_ts_frac = 0.2;
  int vt_fields = 100;
  int vt_height = 64;
  int vt_width = 64;
  std::uint64_t vt_seed = 7;
  vt->add_option("--sweep", vt_sweep, "step counts to test (default 100 200 400 800)");
  vt->add_option("--ts-frac", vt_ts_frac, "threshold step as a fraction of T");
  vt->add_option("--fields", vt_fields, "random error fields per T");
  vt->add_option("--height", vt_height, "field height");
  vt->add_option("--width", vt_width, "field width");
  vt->add_option("--seed", vt_seed, "rng seed");
  vt->callback([&] {
    rc = cmd_verify_theorem(vt_sweep, vt_ts_frac, vt_fields, vt_height, vt_width, vt_seed);
  });

  // verify-posterior
  auto* vp = app.add_subcommand("verify-posterior",
                                "compare posterior coefficients with a grid Bayes oracle");
  int vp_steps = 3;
  double vp_bs = 0.2;
  double vp_be = 0.6;
  double vp_x0 = 0.7;
  double vp_xt = -0.3;
  int vp_grid = 20000;
  double vp_tol = 1e-6;
  vp->add_option("--steps", vp_steps, "schedule length");
  vp->add_option("--beta-start", vp_bs, "first beta");
  vp->add_option("--beta-end", vp_be, "last beta");
  vp->add_option("--x0", vp_x0, "conditioning clean value");
  vp->add_option("--xt", vp_xt, "conditioning noisy value");
  vp->add_option("--grid", vp_grid, "oracle grid points");
  vp->add_option("--tol", vp_tol, "max absolute deviation");
  vp->callback([&] {
    rc = cmd_verify_posterior(vp_steps, vp_bs, vp_be, vp_x0, vp_xt, vp_grid, vp_tol);
  });

  // train-toy
  auto* tt = app.add_subcommand("train-toy",
                                "train the linear denoiser on a constant-image dataset");
  std::string tt_out = "out-train";
  int tt_steps = 500;
  double tt_lr = 0.001;
  int tt_batch = 4;
  int tt_grid = 16;
  int tt_buckets = 10;
  int tt_sched_steps = 200;
  double tt_bs = 1e-4;
  double tt_be = 0.02;
  double tt_value = 1.0;
  double tt_mask_frac = 0.25;
  double tt_mask_smooth = 2.0;
  std::uint64_t tt_seed = 1;
  tt->add_option("--out", tt_out, "output directory");
  tt->add_option("--steps", tt_steps, "training steps");
  tt->add_option("--lr", tt_lr, "learning rate");
  tt->add_option("--batch", tt_batch, "batch size");
  tt->add_option("--grid", tt_grid, "grid side length");
  tt->add_option("--buckets", tt_buckets, "timestep buckets");
  tt->add_option("--schedule-steps", tt_sched_steps, "schedule length");
  tt->add_option("--beta-start", tt_bs, "first beta");
  tt->add_option("--beta-end", tt_be, "last beta");
  tt->add_option("--value", tt_value, "constant image value");
  tt->add_option("--mask-frac", tt_mask_frac, "mask area fraction");
  tt->add_option("--mask-smooth", tt_mask_smooth, "mask blur radius");
  tt->add_option("--seed", tt_seed, "rng seed");
  tt->callback([&] {
    rc = cmd_train_toy(tt_out, tt_steps, tt_lr, tt_batch, tt_grid, tt_buckets, tt_sched_steps,
                       tt_bs, tt_be, tt_value, tt_mask_frac, tt_mask_smooth, tt_seed);
  });

  // sample-stats
  auto* ss = app.add_subcommand("sample-stats", "Monte Carlo distribution checks");
  std::uint64_t ss_seed = 5;
  int ss_steps = 1000;
  double ss_bs = 1e-4;
  double ss_be = 0.02;
  int ss_t = 500;
  ss->add_option("--seed", ss_seed, "rng seed");
  ss->add_option("--schedule-steps", ss_steps, "schedule length");
  ss->add_option("--beta-start", ss_bs, "first beta");
  ss->add_option("--beta-end", ss_be, "last beta");
  ss->add_option("--t", ss_t, "probe step for the forward-marginal check");
  ss->callback([&] { rc = cmd_sample_stats(ss_seed, ss_steps, ss_bs, ss_be, ss_t); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const stage::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const stage::GridFileError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return rc;
}
