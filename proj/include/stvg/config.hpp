#pragma once

// Flat JSON key-value configuration shared by every tool subcommand, plus the
// JSON forms of training output. Keys are listed in docs/file_formats.md.

#include <cstdint>
#include <fstream>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "stvg/dataset_io.hpp"
#include "stvg/grpo.hpp"
#include "stvg/metrics.hpp"
#include "stvg/reward.hpp"
#include "stvg/sim_harness.hpp"

namespace stvg {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ToolConfig {
  RewardConfig reward;
  GrpoConfig grpo{HarnessConfig{}.grpo};
  double fps{kDefaultFps};
  std::vector<double> thresholds{kDefaultThresholds};
  unsigned jobs{1};
  HarnessConfig harness;
};

namespace detail {

template <class T>
void read_key(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace detail

/// Applies the keys present in `j` on top of `base`. Unknown keys are an error
/// so that typos do not silently fall back to defaults.
inline ToolConfig apply_config(const Json& j, ToolConfig base) {
  static const std::set<std::string> known = {
      "lambda_k",          "spatial_term",     "clamp_spatial",  "epsilon",         "beta",
      "delta",             "learning_rate",    "group_size",     "fps",             "thresholds",
      "jobs",              "episodes",         "episode_length", "frame_width",     "frame_height",
      "min_box_side",      "max_box_side",     "max_speed",      "min_span",        "max_span",
      "offset_radius",     "offset_step",      "refine_bins",    "iterations",      "updates_per_batch",
      "groups_per_episode", "eval_every",      "drawdown_tolerance", "seed"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  ToolConfig c = std::move(base);
  using detail::read_key;
  read_key(j, "lambda_k", c.reward.lambda_k);
  if (j.contains("spatial_term")) {
    std::string s;
    read_key(j, "spatial_term", s);
    try {
      c.reward.spatial_term = parse_spatial_term(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  read_key(j, "clamp_spatial", c.reward.clamp_spatial);
  read_key(j, "epsilon", c.grpo.epsilon);
  read_key(j, "beta", c.grpo.beta);
  read_key(j, "delta", c.grpo.delta);
  read_key(j, "learning_rate", c.grpo.learning_rate);
  read_key(j, "group_size", c.grpo.group_size);
  read_key(j, "fps", c.fps);
  read_key(j, "thresholds", c.thresholds);
  read_key(j, "jobs", c.jobs);

  HarnessConfig& h = c.harness;
  read_key(j, "episodes", h.episodes);
  read_key(j, "episode_length", h.episode.length);
  read_key(j, "frame_width", h.episode.dims.width);
  read_key(j, "frame_height", h.episode.dims.height);
  read_key(j, "min_box_side", h.episode.min_box_side);
  read_key(j, "max_box_side", h.episode.max_box_side);
  read_key(j, "max_speed", h.episode.max_speed);
  read_key(j, "min_span", h.episode.min_span);
  read_key(j, "max_span", h.episode.max_span);
  read_key(j, "offset_radius", h.offset_radius);
  read_key(j, "offset_step", h.offset_step);
  read_key(j, "refine_bins", h.refine_bins);
  read_key(j, "iterations", h.iterations);
  read_key(j, "updates_per_batch", h.updates_per_batch);
  read_key(j, "groups_per_episode", h.groups_per_episode);
  read_key(j, "eval_every", h.eval_every);
  read_key(j, "drawdown_tolerance", h.drawdown_tolerance);
  read_key(j, "seed", h.seed);
  // One set of reward/GRPO settings drives both scoring and the harness.
  h.reward = c.reward;
  h.grpo = c.grpo;

  if (!(c.reward.lambda_k >= 0.0)) throw ConfigError("lambda_k must be non-negative");
  if (!(c.fps > 0.0)) throw ConfigError("fps must be positive");
  if (c.jobs == 0) throw ConfigError("jobs must be at least 1");
  try {
    c.grpo.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline Json read_json_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

inline ToolConfig load_config(const std::string& path) { return apply_config(read_json_config(path), {}); }

// ---------------------------------------------------------------------------
// Output records

inline Json step_stats_to_json(const StepStats& s) {
  return {{"mean_reward", s.mean_reward}, {"objective", s.objective}, {"kl", s.kl},
          {"clip_fraction", s.clip_fraction}, {"grad_norm", s.grad_norm}};
}

inline Json expected_to_json(const ExpectedReward& e) {
  return {{"total", e.total}, {"r_t", e.r_t},           {"r_spa_think", e.r_spa_think},
          {"r_spa_pred", e.r_spa_pred}, {"r_k", e.r_k}, {"viou", e.viou}};
}

inline Json iteration_to_json(const IterationLog& l) {
  Json j = step_stats_to_json(l.stats);
  j["iteration"] = l.iteration;
  return j;
}

/// The final JSON summary written after the JSON-lines log.
inline Json training_summary_json(const TrainingReport& r, const HarnessConfig& cfg) {
  Json curve = Json::array();
  for (const auto& p : r.curve) curve.push_back({{"iteration", p.iteration}, {"expected_total", p.expected_total}});
  Json per_episode = Json::array();
  for (const auto& e : r.per_episode) per_episode.push_back(expected_to_json(e));
  Json greedy = Json::array();
  for (const auto& b : r.greedy_breakdowns) greedy.push_back(breakdown_to_json(b));
  return {{"seed", cfg.seed},
          {"iterations", cfg.iterations},
          {"optimum", kOptimalTotalReward},
          {"final_expected", expected_to_json(r.final_expected)},
          {"per_episode", per_episode},
          {"curve", curve},
          {"best_expected", r.best_expected},
          {"max_drawdown", r.max_drawdown},
          {"drawdown_ok", r.drawdown_ok},
          {"greedy_breakdowns", greedy},
          {"greedy_metrics", metrics_to_json(r.greedy_metrics)}};
}

/// Runs training, streaming one JSON line per iteration to `log`, and returns
/// the report.
inline TrainingReport train_with_log(const HarnessConfig& cfg, std::ostream* log) {
  return run_training(cfg, [log](const IterationLog& l) {
    if (log) *log << iteration_to_json(l).dump() << '\n';
  });
}

}  // namespace stvg
