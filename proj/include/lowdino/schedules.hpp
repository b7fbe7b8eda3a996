// SPDX-License-Identifier: Apache-2.0
#pragma once

// Scheduled scalars (learning rate, weight decay, teacher momentum) and the
// momentum-SGD step. All schedules are indexed by iteration.

#include <cstdint>
#include <stdexcept>
#include <string>

#include "lowdino/parameter_set.hpp"

namespace lowdino::sched {

struct CosineSchedule {
  double eta_min = 1e-6;
  double eta_max = 5e-4;
  std::int64_t T_c = 1;
  std::int64_t warmup_iters = 0;
  double warmup_start = 1e-6;
  /// Use cos(pi (T - t) / T) for the decay phase, which rises from eta_min to
  /// eta_max instead of decaying. Kept for comparison runs only.
  bool eq2_verbatim = false;

  void validate() const;
};

/// Linear warmup from warmup_start to eta_max, then cosine decay to eta_min
/// over the remaining iterations. t outside [0, T_c] is clamped with a warning.
double cosine_value(const CosineSchedule& s, std::int64_t t);

/// Teacher momentum, rising from `base` at t = 0 to `end` at t = T_c.
double momentum_schedule(double base, std::int64_t t, std::int64_t T_c, double end = 1.0);

/// Cosine from wd_start at t = 0 to wd_end at t = T_c.
double weight_decay_schedule(double wd_start, double wd_end, std::int64_t t, std::int64_t T_c);

enum class ClipMode { Norm, Element };

ClipMode parse_clip_mode(const std::string& s);
std::string to_string(ClipMode m);

struct OptimizerState {
  ParameterSet momentum;  // buffers mirror the parameter layout
  double momentum_coef = 0.9;
  double clip_grad = 2.0;  // <= 0 disables clipping
  ClipMode clip_mode = ClipMode::Norm;
  double lr = 0;
  double wd = 0;

  static OptimizerState for_params(const ParameterSet& params, double momentum_coef, double clip_grad,
                                   ClipMode mode);
};

class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient in parameter '" + param + "'"), param_(param) {}
  const std::string& param() const { return param_; }

 private:
  std::string param_;
};

double global_norm(const ParameterSet& grads);

/// Clips in place; returns the norm before clipping.
double clip_gradients(ParameterSet& grads, double clip, ClipMode mode);

/// Weight decay skips rank <= 1 entries (biases, norm gains and shifts).
bool decays(const Tensor<float>& param);

struct StepStats {
  double grad_norm = 0;     // before clipping
  double clipped_norm = 0;  // after clipping
};

/// Clip, decoupled weight decay, then momentum-SGD. Throws NonFiniteGradient
/// naming the first offending entry before touching any parameter.
StepStats sgd_step(ParameterSet& params, ParameterSet grads, OptimizerState& state, double lr, double wd);

}  // namespace lowdino::sched
