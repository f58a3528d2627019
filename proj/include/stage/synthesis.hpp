#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "stage/grid.hpp"
#include "stage/rng.hpp"
#include "stage/sampler.hpp"

namespace stage {

// Separable Gaussian blur; the kernel is clipped at the border and
// renormalized so constant fields stay constant. sigma <= 0 is the identity.
inline GridTensor gaussian_blur(const GridTensor& g, double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma))
    throw std::invalid_argument("gaussian_blur: sigma must be finite and >= 0");
  if (sigma == 0.0) return g;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(radius + 1);
  for (int i = 0; i <= radius; ++i)
    kernel[i] = std::exp(-0.5 * static_cast<double>(i) * i / (sigma * sigma));

  const int h = g.height();
  const int w = g.width();
  GridTensor tmp(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      double norm = 0.0;
      for (int d = -radius; d <= radius; ++d) {
        const int cc = c + d;
        if (cc < 0 || cc >= w) continue;
        const double k = kernel[std::abs(d)];
        acc += k * g(r, cc);
        norm += k;
      }
      tmp(r, c) = acc / norm;
    }
  }
  GridTensor out(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      double norm = 0.0;
      for (int d = -radius; d <= radius; ++d) {
        const int rr = r + d;
        if (rr < 0 || rr >= h) continue;
        const double k = kernel[std::abs(d)];
        acc += k * tmp(rr, c);
        norm += k;
      }
      out(r, c) = acc / norm;
    }
  }
  return out;
}

// Random blob mask: a blurred Gaussian field thresholded at the empirical
// quantile matching the target area.
struct MaskSpec {
  double target_area_fraction;
  double smoothness;  // blur radius in pixels
  std::uint64_t seed;
};

inline BinaryMask generate_mask(const MaskSpec& spec, int height, int width) {
  if (!(spec.target_area_fraction > 0.0) || !(spec.target_area_fraction < 1.0))
    throw std::invalid_argument("generate_mask: target area fraction must lie in (0, 1)");
  if (!(spec.smoothness >= 0.0) || !std::isfinite(spec.smoothness))
    throw std::invalid_argument("generate_mask: smoothness must be finite and >= 0");
  RngStream rng(spec.seed);
  const GridTensor field = gaussian_blur(gaussian_field(rng, height, width), spec.smoothness);
  const std::size_t n = field.size();
  const std::size_t target =
      static_cast<std::size_t>(std::lround(spec.target_area_fraction * static_cast<double>(n)));
  if (target == 0) return BinaryMask(height, width, 0.0);
  if (target >= n) return BinaryMask(height, width, 1.0);

  std::vector<double> sorted(field.values());
  std::nth_element(sorted.begin(), sorted.begin() + (n - target - 1), sorted.end());
  const double threshold = sorted[n - target - 1];
  std::vector<double> mask(n);
  for (std::size_t i = 0; i < n; ++i) mask[i] = field[i] > threshold ? 1.0 : 0.0;
  return BinaryMask(height, width, std::move(mask));
}

enum class BackgroundKind { constant, random_field };

struct BackgroundSpec {
  BackgroundKind kind = BackgroundKind::constant;
  double value = 0.0;   // constant level
  double radius = 0.0;  // correlation length of the random field
};

// Constant plate or standardized smoothed noise.
inline GridTensor generate_background(const BackgroundSpec& spec, int height, int width,
                                      RngStream& rng) {
  switch (spec.kind) {
    case BackgroundKind::constant:
      if (!std::isfinite(spec.value))
        throw std::invalid_argument("generate_background: non-finite constant value");
      return GridTensor(height, width, spec.value);
    case BackgroundKind::random_field: {
      if (!(spec.radius >= 0.0) || !std::isfinite(spec.radius))
        throw std::invalid_argument("generate_background: radius must be finite and >= 0");
      GridTensor g = gaussian_blur(gaussian_field(rng, height, width), spec.radius);
      double mean = 0.0;
      for (double v : g) mean += v;
      mean /= static_cast<double>(g.size());
      double var = 0.0;
      for (double v : g) var += (v - mean) * (v - mean);
      var /= static_cast<double>(g.size());
      if (var == 0.0) return GridTensor(height, width, 0.0);
      const double inv_std = 1.0 / std::sqrt(var);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = (g[i] - mean) * inv_std;
      return g;
    }
  }
  throw std::invalid_argument("generate_background: unknown kind");
}

struct SynthesisReport {
  double energy_in_mask = 0.0;
  double iou_thresholded = 0.0;
  double background_max_dev = 0.0;
  double runtime_ms = 0.0;
};

// Residual-based alignment proxies: the fraction of absolute residual mass
// falling inside the mask (1 by convention when there is no residual), and
// the IoU between the thresholded residual and the mask.
inline SynthesisReport alignment_metrics(const GridTensor& image, const GridTensor& x_back,
                                         const BinaryMask& m0, double threshold) {
  if (!(threshold > 0.0) || !std::isfinite(threshold))
    throw std::invalid_argument("alignment_metrics: threshold must be positive");
  require_same_shape(image.height(), image.width(), x_back.height(), x_back.width(),
                     "alignment_metrics");
  require_same_shape(image.height(), image.width(), m0.height(), m0.width(),
                     "alignment_metrics");
  double total = 0.0;
  double inside = 0.0;
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double r = std::abs(image[i] - x_back[i]);
    total += r;
    if (m0[i] == 1.0) inside += r;
    const bool detected = r > threshold;
    const bool annotated = m0[i] == 1.0;
    inter += detected && annotated;
    uni += detected || annotated;
  }
  SynthesisReport rep;
  rep.energy_in_mask = total == 0.0 ? 1.0 : inside / total;
  rep.iou_thresholded =
      uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  rep.background_max_dev = background_fidelity(image, x_back, m0);
  return rep;
}

struct SynthesizedPair {
  GridTensor image;
  BinaryMask mask;
  GridTensor background;
  SynthesisReport report;
  std::uint64_t seed = 0;
  std::vector<StepTrace> trace;

  SynthesizedPair() : image(1, 1), mask(1, 1), background(1, 1) {}
  SynthesizedPair(GridTensor img, BinaryMask m, GridTensor bg, SynthesisReport rep,
                  std::uint64_t s, std::vector<StepTrace> tr)
      : image(std::move(img)), mask(std::move(m)), background(std::move(bg)), report(rep),
        seed(s), trace(std::move(tr)) {}
};

namespace detail {
inline constexpr std::uint64_t kBackgroundStream = 1;
inline constexpr std::uint64_t kSampleStream = 2;
}  // namespace detail

// One image-mask pair: mask, background, graded sampling, metrics.
inline SynthesizedPair synthesize_pair(const GradedPlan& plan, const BranchDenoisers& branches,
                                       const MaskSpec& mask_spec, const BackgroundSpec& bg_spec,
                                       int height, int width, double threshold) {
  const auto started = std::chrono::steady_clock::now();
  BinaryMask m0 = generate_mask(mask_spec, height, width);
  const RngStream base(plan.seed);
  RngStream bg_rng = base.split(detail::kBackgroundStream);
  GridTensor x_back = generate_background(bg_spec, height, width, bg_rng);
  RngStream sample_rng = base.split(detail::kSampleStream);
  GradedResult result = graded_sample(plan, branches, m0, x_back, sample_rng);
  SynthesisReport rep = alignment_metrics(result.image, x_back, m0, threshold);
  rep.runtime_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                             started)
                       .count();
  return SynthesizedPair(std::move(result.image), std::move(m0), std::move(x_back), rep,
                         plan.seed, std::move(result.trace));
}

// Batch of pairs on split streams. Every pair's content is a pure function
// of (plan.seed, index), so the result set is identical for any worker
// count.
inline std::vector<SynthesizedPair> synthesize_batch(
    const GradedPlan& plan, const BranchDenoisers& branches, const MaskSpec& mask_spec,
    const BackgroundSpec& bg_spec, int height, int width, double threshold, int count,
    int workers) {
  if (count < 0) throw std::invalid_argument("synthesize_batch: count must be >= 0");
  std::vector<SynthesizedPair> out(static_cast<std::size_t>(count));
  if (count == 0) return out;
  const RngStream root(plan.seed);
  const int n_workers = std::max(1, std::min(workers, count));

  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&](int first) {
    try {
      for (int j = first; j < count; j += n_workers) {
        GradedPlan local = plan;
        local.seed = root.split(2 * static_cast<std::uint64_t>(j)).seed();
        MaskSpec ms = mask_spec;
        ms.seed = root.split(2 * static_cast<std::uint64_t>(j) + 1).seed();
        out[static_cast<std::size_t>(j)] =
            synthesize_pair(local, branches, ms, bg_spec, height, width, threshold);
      }
    } catch (...) {
      const std::lock_guard<std::mutex> lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };

  if (n_workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (int k = 0; k < n_workers; ++k) pool.emplace_back(run, k);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace stage
