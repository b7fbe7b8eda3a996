// SPDX-License-Identifier: Apache-2.0
#include "lowdino/schedules.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace lowdino::sched {

namespace {

std::int64_t clamp_t(std::int64_t t, std::int64_t T_c, const char* what) {
  if (t < 0 || t > T_c) {
    spdlog::warn("{}: iteration {} outside [0, {}], clamped", what, t, T_c);
    return std::clamp<std::int64_t>(t, 0, T_c);
  }
  return t;
}

// 1 at progress 0, 0 at progress 1.
double half_cosine(double progress) { return 0.5 * (1.0 + std::cos(std::numbers::pi * progress)); }

}  // namespace

void CosineSchedule::validate() const {
  if (!(eta_min <= eta_max)) throw std::invalid_argument("cosine schedule: eta_min must be <= eta_max");
  if (T_c < 1) throw std::invalid_argument("cosine schedule: T_c must be >= 1");
  if (warmup_iters < 0 || warmup_iters >= T_c)
    throw std::invalid_argument("cosine schedule: warmup_iters (" + std::to_string(warmup_iters) +
                                ") must be in [0, T_c = " + std::to_string(T_c) + ")");
}

double cosine_value(const CosineSchedule& s, std::int64_t t) {
  s.validate();
  t = clamp_t(t, s.T_c, "cosine_value");
  if (t < s.warmup_iters)
    return s.warmup_start + (s.eta_max - s.warmup_start) * static_cast<double>(t) / static_cast<double>(s.warmup_iters);
  const double span = static_cast<double>(s.T_c - s.warmup_iters);
  const double k = static_cast<double>(t - s.warmup_iters);
  const double progress = s.eq2_verbatim ? (span - k) / span : k / span;
  return s.eta_min + (s.eta_max - s.eta_min) * half_cosine(progress);
}

double momentum_schedule(double base, std::int64_t t, std::int64_t T_c, double end) {
  if (T_c < 1) throw std::invalid_argument("momentum_schedule: T_c must be >= 1");
  t = clamp_t(t, T_c, "momentum_schedule");
  return end - (end - base) * half_cosine(static_cast<double>(t) / static_cast<double>(T_c));
}

double weight_decay_schedule(double wd_start, double wd_end, std::int64_t t, std::int64_t T_c) {
  if (T_c < 1) throw std::invalid_argument("weight_decay_schedule: T_c must be >= 1");
  t = clamp_t(t, T_c, "weight_decay_schedule");
  return wd_end + (wd_start - wd_end) * half_cosine(static_cast<double>(t) / static_cast<double>(T_c));
}

ClipMode parse_clip_mode(const std::string& s) {
  if (s == "norm") return ClipMode::Norm;
  if (s == "element") return ClipMode::Element;
  throw std::invalid_argument("clip mode must be 'norm' or 'element', got '" + s + "'");
}

std::string to_string(ClipMode m) { return m == ClipMode::Norm ? "norm" : "element"; }

OptimizerState OptimizerState::for_params(const ParameterSet& params, double momentum_coef, double clip_grad,
                                          ClipMode mode) {
  OptimizerState s;
  s.momentum = params.zeros_like();
  s.momentum_coef = momentum_coef;
  s.clip_grad = clip_grad;
  s.clip_mode = mode;
  return s;
}

double global_norm(const ParameterSet& grads) {
  double s = 0;
  for (const auto& [name, g] : grads)
    for (float v : g.vec()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

double clip_gradients(ParameterSet& grads, double clip, ClipMode mode) {
  const double norm = global_norm(grads);
  if (clip <= 0) return norm;
  if (mode == ClipMode::Norm) {
    if (norm > clip) {
      const double f = clip / (norm + 1e-12);
      for (auto& [name, g] : grads)
        for (auto& v : g.vec()) v = static_cast<float>(v * f);
    }
  } else {
    const auto c = static_cast<float>(clip);
    for (auto& [name, g] : grads)
      for (auto& v : g.vec()) v = std::clamp(v, -c, c);
  }
  return norm;
}

bool decays(const Tensor<float>& param) { return param.rank() >= 2; }

StepStats sgd_step(ParameterSet& params, ParameterSet grads, OptimizerState& state, double lr, double wd) {
  check_same_layout(params, grads, "sgd_step gradients");
  check_same_layout(params, state.momentum, "sgd_step momentum buffers");
  for (const auto& [name, g] : grads)
    for (float v : g.vec())
      if (!std::isfinite(v)) throw NonFiniteGradient(name);

  StepStats stats;
  stats.grad_norm = clip_gradients(grads, state.clip_grad, state.clip_mode);
  stats.clipped_norm = global_norm(grads);
  state.lr = lr;
  state.wd = wd;
  const double mu = state.momentum_coef;
  for (auto& [name, p] : params) {
    const auto& g = grads.at(name);
    auto& buf = state.momentum.at(name);
    const double decay = decays(p) ? lr * wd : 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      double v = p[i];
      v -= decay * v;
      const double b = mu * buf[i] + g[i];
      buf[i] = static_cast<float>(b);
      p[i] = static_cast<float>(v - lr * b);
    }
  }
  ++params.version;
  return stats;
}

}  // namespace lowdino::sched
