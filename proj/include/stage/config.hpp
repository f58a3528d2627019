#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace stage {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ScheduleSection {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct EmaSection {
  int threshold_step = 200;
};

struct DenoiserSection {
  std::string type = "analytic";  // "analytic" | "linear"
  double prior_mean = 0.0;
  double prior_var = 1.0;
  int buckets = 10;
  std::string checkpoint;  // optional pre-trained parameters for "linear"
};

struct MaskSection {
  double target_area_fraction = 0.1;
  double smoothness = 2.0;
};

struct BackgroundSection {
  std::string kind = "constant";  // "constant" | "random-field"
  double value = 0.0;
  double radius = 4.0;
};

struct SynthesisSection {
  int count = 500;
  int height = 32;
  int width = 32;
  double threshold = 0.0;  // 0 = derive from the denoiser prior offset
  int workers = 0;         // 0 = hardware concurrency
};

struct TrainSection {
  double learning_rate = 0.001;
  int batch_size = 4;
  int steps = 500;
};

struct RunConfig {
  ScheduleSection schedule;
  EmaSection ema;
  std::vector<std::pair<int, int>> intervals{{1000, 800}, {400, 300}};
  DenoiserSection aware;       // anomaly-aware branch
  DenoiserSection only;        // anomaly-only branch
  MaskSection mask;
  BackgroundSection background;
  SynthesisSection synthesis;
  TrainSection train;
  std::uint64_t seed = 0;
  std::string output_dir = "out";

  RunConfig() { only.prior_mean = 2.0; }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                       const std::string& scope) {
  if (!j.is_object()) throw ConfigError("config: " + scope + " must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const auto& k : allowed) known = known || k == item.key();
    if (!known) throw ConfigError("config: unknown key \"" + item.key() + "\" in " + scope);
  }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& target, const std::string& scope) {
  if (!j.contains(key)) return;
  try {
    target = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: bad value for \"" + std::string(key) + "\" in " + scope);
  }
}

inline void apply_denoiser(const nlohmann::json& j, DenoiserSection& d, const std::string& scope) {
  check_keys(j, {"type", "prior_mean", "prior_var", "buckets", "checkpoint"}, scope);
  read_field(j, "type", d.type, scope);
  read_field(j, "prior_mean", d.prior_mean, scope);
  read_field(j, "prior_var", d.prior_var, scope);
  read_field(j, "buckets", d.buckets, scope);
  read_field(j, "checkpoint", d.checkpoint, scope);
  if (d.type != "analytic" && d.type != "linear")
    throw ConfigError("config: " + scope + ".type must be \"analytic\" or \"linear\"");
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"schedule", "ema", "intervals", "aware", "only", "mask", "background",
                      "synthesis", "train", "seed", "output_dir"},
                     "top level");
  RunConfig cfg;
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    detail::check_keys(s, {"steps", "beta_start", "beta_end"}, "schedule");
    detail::read_field(s, "steps", cfg.schedule.steps, "schedule");
    detail::read_field(s, "beta_start", cfg.schedule.beta_start, "schedule");
    detail::read_field(s, "beta_end", cfg.schedule.beta_end, "schedule");
  }
  if (j.contains("ema")) {
    const auto& s = j.at("ema");
    detail::check_keys(s, {"threshold_step"}, "ema");
    detail::read_field(s, "threshold_step", cfg.ema.threshold_step, "ema");
  }
  if (j.contains("intervals")) {
    const auto& s = j.at("intervals");
    if (!s.is_array()) throw ConfigError("config: intervals must be an array of [a, b] pairs");
    cfg.intervals.clear();
    for (const auto& pair : s) {
      if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number_integer() ||
          !pair[1].is_number_integer())
        throw ConfigError("config: intervals must be an array of [a, b] pairs");
      cfg.intervals.emplace_back(pair[0].get<int>(), pair[1].get<int>());
    }
  }
  if (j.contains("aware")) detail::apply_denoiser(j.at("aware"), cfg.aware, "aware");
  if (j.contains("only")) detail::apply_denoiser(j.at("only"), cfg.only, "only");
  if (j.contains("mask")) {
    const auto& s = j.at("mask");
    detail::check_keys(s, {"target_area_fraction", "smoothness"}, "mask");
    detail::read_field(s, "target_area_fraction", cfg.mask.target_area_fraction, "mask");
    detail::read_field(s, "smoothness", cfg.mask.smoothness, "mask");
  }
  if (j.contains("background")) {
    const auto& s = j.at("background");
    detail::check_keys(s, {"kind", "value", "radius"}, "background");
    detail::read_field(s, "kind", cfg.background.kind, "background");
    detail::read_field(s, "value", cfg.background.value, "background");
    detail::read_field(s, "radius", cfg.background.radius, "background");
    if (cfg.background.kind != "constant" && cfg.background.kind != "random-field")
      throw ConfigError("config: background.kind must be \"constant\" or \"random-field\"");
  }
  if (j.contains("synthesis")) {
    const auto& s = j.at("synthesis");
    detail::check_keys(s, {"count", "height", "width", "threshold", "workers"}, "synthesis");
    detail::read_field(s, "count", cfg.synthesis.count, "synthesis");
    detail::read_field(s, "height", cfg.synthesis.height, "synthesis");
    detail::read_field(s, "width", cfg.synthesis.width, "synthesis");
    detail::read_field(s, "threshold", cfg.synthesis.threshold, "synthesis");
    detail::read_field(s, "workers", cfg.synthesis.workers, "synthesis");
  }
  if (j.contains("train")) {
    const auto& s = j.at("train");
    detail::check_keys(s, {"learning_rate", "batch_size", "steps"}, "train");
    detail::read_field(s, "learning_rate", cfg.train.learning_rate, "train");
    detail::read_field(s, "batch_size", cfg.train.batch_size, "train");
    detail::read_field(s, "steps", cfg.train.steps, "train");
  }
  detail::read_field(j, "seed", cfg.seed, "top level");
  detail::read_field(j, "output_dir", cfg.output_dir, "top level");
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// Full echo of the effective configuration (all defaults materialized), so a
// run can be reproduced from its output alone.
inline nlohmann::json effective_config(const RunConfig& cfg) {
  nlohmann::json intervals = nlohmann::json::array();
  for (const auto& [a, b] : cfg.intervals) intervals.push_back({a, b});
  const auto denoiser_json = [](const DenoiserSection& d) {
    return nlohmann::json{{"type", d.type},
                          {"prior_mean", d.prior_mean},
                          {"prior_var", d.prior_var},
                          {"buckets", d.buckets},
                          {"checkpoint", d.checkpoint}};
  };
  return nlohmann::json{
      {"schedule",
       {{"steps", cfg.schedule.steps},
        {"beta_start", cfg.schedule.beta_start},
        {"beta_end", cfg.schedule.beta_end}}},
      {"ema", {{"threshold_step", cfg.ema.threshold_step}}},
      {"intervals", intervals},
      {"aware", denoiser_json(cfg.aware)},
      {"only", denoiser_json(cfg.only)},
      {"mask",
       {{"target_area_fraction", cfg.mask.target_area_fraction},
        {"smoothness", cfg.mask.smoothness}}},
      {"background",
       {{"kind", cfg.background.kind},
        {"value", cfg.background.value},
        {"radius", cfg.background.radius}}},
      {"synthesis",
       {{"count", cfg.synthesis.count},
        {"height", cfg.synthesis.height},
        {"width", cfg.synthesis.width},
        {"threshold", cfg.synthesis.threshold},
        {"workers", cfg.synthesis.workers}}},
      {"train",
       {{"learning_rate", cfg.train.learning_rate},
        {"batch_size", cfg.train.batch_size},
        {"steps", cfg.train.steps}}},
      {"seed", cfg.seed},
      {"output_dir", cfg.output_dir},
  };
}

// Residual threshold for alignment metrics: explicit when set, otherwise half
// the prior offset between the two analytic branches.
inline double resolve_threshold(const RunConfig& cfg) {
  if (cfg.synthesis.threshold > 0.0) return cfg.synthesis.threshold;
  if (cfg.aware.type == "analytic" && cfg.only.type == "analytic") {
    const double offset = cfg.only.prior_mean - cfg.aware.prior_mean;
    const double derived = 0.5 * (offset < 0 ? -offset : offset);
    if (derived > 0.0) return derived;
  }
  throw ConfigError(
      "config: synthesis.threshold must be set explicitly (no analytic prior offset to derive "
      "it from)");
}

}  // namespace stage
