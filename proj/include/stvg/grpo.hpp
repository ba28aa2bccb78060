#pragma once

// Group-relative advantages and the clipped, KL-regularized GRPO surrogate,
// with an analytic gradient for any policy that exposes d log pi / d theta.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stvg {

struct GroupSizeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NonFiniteGradientError : std::runtime_error {
  NonFiniteGradientError(std::string group, const std::string& what)
      : std::runtime_error("non-finite gradient in group '" + group + "': " + what),
        group_id(std::move(group)) {}
  std::string group_id;
};

struct GrpoConfig {
  double epsilon{0.2};
  double beta{0.04};
  double delta{1e-6};
  double learning_rate{1e-6};
  std::size_t group_size{8};

  void validate() const {
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
    if (!(beta >= 0.0)) throw std::invalid_argument("beta must be non-negative");
    if (!(delta > 0.0)) throw std::invalid_argument("delta must be positive");
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be non-negative");
    if (group_size < 2) throw GroupSizeError("group_size must be at least 2");
  }
};

/// n responses to one (video, query) pair: their rewards and sequence-level
/// log-probabilities under the current, behaviour (old) and reference policies.
struct RolloutGroup {
  std::string group_id;
  std::vector<double> rewards;
  std::vector<double> logp;
  std::vector<double> logp_old;
  std::vector<double> logp_ref;

  std::size_t size() const { return rewards.size(); }

  void validate() const {
    if (rewards.size() < 2) throw GroupSizeError("group '" + group_id + "' has fewer than 2 responses");
    const std::size_t n = rewards.size();
    if (logp.size() != n || logp_old.size() != n || logp_ref.size() != n) {
      throw std::invalid_argument("group '" + group_id + "' has mismatched log-prob lengths");
    }
    const auto finite = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    if (!finite(rewards) || !finite(logp) || !finite(logp_old) || !finite(logp_ref)) {
      throw std::invalid_argument("group '" + group_id + "' has a non-finite entry");
    }
  }
};

inline double mean(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

/// Population standard deviation (divides by n).
inline double population_stddev(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  const double mu = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - mu) * (x - mu);
  return std::sqrt(ss / static_cast<double>(xs.size()));
}

/// A_i = (R_i - mean) / (std + delta).
inline std::vector<double> group_advantages(std::span<const double> rewards, double delta = 1e-6) {
  if (rewards.size() < 2) throw GroupSizeError("advantages need a group of at least 2 rewards");
  const double mu = mean(rewards);
  const double denom = population_stddev(rewards) + delta;
  std::vector<double> adv(rewards.size());
  std::transform(rewards.begin(), rewards.end(), adv.begin(),
                 [&](double r) { return (r - mu) / denom; });
  return adv;
}

inline double clipped_term(double logp_new, double logp_old, double advantage, double epsilon) {
  const double ratio = std::exp(logp_new - logp_old);
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

/// Per-sample KL(pi || pi_ref) estimator r - log r - 1 with r = pi_ref / pi.
inline double kl_penalty(double logp_new, double logp_ref) {
  const double log_r = logp_ref - logp_new;
  return std::exp(log_r) - log_r - 1.0;
}

/// Value of the surrogate for one group plus its derivative with respect to
/// each response's current log-probability.
struct SurrogateEval {
  double objective{0.0};
  double kl{0.0};
  std::size_t clipped{0};
  std::vector<double> dlogp;
};

inline SurrogateEval evaluate_surrogate(const RolloutGroup& group, std::span<const double> advantages,
                                        const GrpoConfig& cfg) {
  const std::size_t n = group.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  SurrogateEval out;
  out.dlogp.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = advantages[i];
    const double ratio = std::exp(group.logp[i] - group.logp_old[i]);
    const double clipped = std::clamp(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
    const double kl = kl_penalty(group.logp[i], group.logp_ref[i]);
    const bool clip_active = clipped * a < ratio * a;
    out.objective += inv_n * (std::min(ratio * a, clipped * a) - cfg.beta * kl);
    out.kl += inv_n * kl;
    if (clip_active) {
      ++out.clipped;
    } else {
      out.dlogp[i] += inv_n * a * ratio;
    }
    // d/dlogp of (e^{ref-logp} - (ref-logp) - 1) = 1 - e^{ref-logp}
    out.dlogp[i] -= inv_n * cfg.beta * (1.0 - std::exp(group.logp_ref[i] - group.logp[i]));
  }
  return out;
}

/// Mean over the group of min(r A, clip(r) A) - beta KL, advantages from the
/// group's own rewards.
inline double grpo_objective(const RolloutGroup& group, const GrpoConfig& cfg) {
  group.validate();
  const auto adv = group_advantages(group.rewards, cfg.delta);
  return evaluate_surrogate(group, adv, cfg).objective;
}

// A policy the GRPO step can differentiate: categorical or otherwise, it must
// report log pi(a | context) and accumulate weight * d log pi / d theta.
template <class P>
concept DifferentiablePolicy = requires(P& p, const P& cp, const typename P::Action& a,
                                        std::size_t context, double w, std::span<double> grad) {
  { cp.log_prob(context, a) } -> std::convertible_to<double>;
  cp.add_log_prob_gradient(context, a, w, grad);
  { p.parameters() } -> std::same_as<std::span<double>>;
  { cp.parameter_count() } -> std::convertible_to<std::size_t>;
};

/// A rollout group together with the actions that produced it, so the
/// current-policy log-probabilities can be recomputed after each update.
template <class Action>
struct PolicyGroup {
  RolloutGroup rollouts;
  std::size_t context{0};
  std::vector<Action> actions;
};

struct StepStats {
  double mean_reward{0.0};
  double objective{0.0};
  double kl{0.0};
  double clip_fraction{0.0};
  double grad_norm{0.0};
};

/// Batch objective (mean over groups) and its gradient w.r.t. the policy
/// parameters, with log pi recomputed under `policy`.
template <DifferentiablePolicy P>
StepStats grpo_gradient(const P& policy, std::span<const PolicyGroup<typename P::Action>> groups,
                        const GrpoConfig& cfg, std::span<double> grad) {
  std::fill(grad.begin(), grad.end(), 0.0);
  StepStats stats;
  if (groups.empty()) return stats;
  const double inv_g = 1.0 / static_cast<double>(groups.size());
  std::size_t responses = 0;
  std::size_t clipped = 0;
  for (const auto& g : groups) {
    RolloutGroup current = g.rollouts;
    if (g.actions.size() != current.size()) {
      throw std::invalid_argument("group '" + current.group_id + "' has mismatched action count");
    }
    current.logp.resize(current.size());
    for (std::size_t i = 0; i < current.size(); ++i) {
      current.logp[i] = policy.log_prob(g.context, g.actions[i]);
    }
    current.validate();
    const auto adv = group_advantages(current.rewards, cfg.delta);
    const SurrogateEval eval = evaluate_surrogate(current, adv, cfg);
    for (std::size_t i = 0; i < current.size(); ++i) {
      if (!std::isfinite(eval.dlogp[i])) {
        throw NonFiniteGradientError(current.group_id, "response " + std::to_string(i));
      }
      if (eval.dlogp[i] != 0.0) {
        policy.add_log_prob_gradient(g.context, g.actions[i], inv_g * eval.dlogp[i], grad);
      }
    }
    if (!std::all_of(grad.begin(), grad.end(), [](double v) { return std::isfinite(v); })) {
      throw NonFiniteGradientError(current.group_id, "parameter gradient");
    }
    stats.objective += inv_g * eval.objective;
    stats.kl += inv_g * eval.kl;
    stats.mean_reward += inv_g * mean(current.rewards);
    responses += current.size();
    clipped += eval.clipped;
  }
  stats.clip_fraction = static_cast<double>(clipped) / static_cast<double>(responses);
  double sq = 0.0;
  for (double v : grad) sq += v * v;
  stats.grad_norm = std::sqrt(sq);
  return stats;
}

/// One gradient-ascent step on the batch objective. Only `policy` is mutated.
template <DifferentiablePolicy P>
StepStats toy_policy_step(P& policy, std::span<const PolicyGroup<typename P::Action>> groups,
                          const GrpoConfig& cfg) {
  std::vector<double> grad(policy.parameter_count(), 0.0);
  const StepStats stats = grpo_gradient(policy, groups, cfg, std::span<double>(grad));
  std::span<double> theta = policy.parameters();
  for (std::size_t k = 0; k < theta.size(); ++k) theta[k] += cfg.learning_rate * grad[k];
  return stats;
}

}  // namespace stvg
