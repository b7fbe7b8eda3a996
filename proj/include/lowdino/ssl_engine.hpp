// SPDX-License-Identifier: Apache-2.0
#pragma once

// Self-distillation: teacher/student forward, centring, the multi-view
// cross-entropy, EMA teacher update and the pretraining loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lowdino/checkpoint.hpp"
#include "lowdino/config.hpp"
#include "lowdino/datapipe.hpp"
#include "lowdino/nets.hpp"
#include "lowdino/schedules.hpp"

namespace lowdino::ssl {

struct SSLConfig {
  double teacher_temp = 0.04;
  double student_temp = 0.1;
  int out_dim = 1024;
  double center_momentum = 0.9;  // 1 keeps the centre fixed
  bool ema_enabled = true;

  /// Requires 0 < teacher_temp <= student_temp, out_dim >= 2 and a centre
  /// momentum in [0, 1]. Equal temperatures are allowed here for controlled
  /// experiments; RunConfig insists on a strictly sharper teacher.
  void validate() const;
};

/// softmax((logits - center) / tau_t) per row.
template <typename T>
Tensor<T> teacher_probs(const Tensor<T>& logits, const Tensor<T>& center, double tau_t);

/// log_softmax(logits / tau_s) per row.
template <typename T>
Tensor<T> student_log_probs(const Tensor<T>& logits, double tau_s);

/// Mean row entropy of a [B, K] probability matrix.
template <typename T>
double mean_entropy(const Tensor<T>& probs);

/// Mean over images and ordered (teacher view, student view) pairs with
/// different views of -sum_k P_t log P_s. teacher: 2 x [B, K];
/// student: n x [B, K] log-probabilities, views 0 and 1 being the globals.
template <typename T>
double dino_loss(const std::vector<Tensor<T>>& teacher, const std::vector<Tensor<T>>& student_log);

/// Gradient of dino_loss with respect to each student view's raw logits.
template <typename T>
std::vector<Tensor<T>> dino_loss_grad(const std::vector<Tensor<T>>& teacher, const std::vector<Tensor<T>>& student_logits,
                                      double tau_s);

/// Pairs per image for n views: 2 (n - 1).
inline int pair_count(int n_views) { return 2 * (n_views - 1); }

/// c <- lambda c + (1 - lambda) mean over rows of the raw teacher logits.
Tensor<float> update_center(const Tensor<float>& center, const Tensor<float>& teacher_logits, double lambda);

/// teacher <- m teacher + (1 - m) student, entry by entry.
void ema_update(ParameterSet& teacher, const ParameterSet& student, double m);

/// Splits an image-major stack [B * V, K] into V views of [B, K].
template <typename T>
std::vector<Tensor<T>> split_views(const Tensor<T>& stacked, int views);
template <typename T>
Tensor<T> merge_views(const std::vector<Tensor<T>>& views);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainState {
  ParameterSet student;
  ParameterSet teacher;
  Tensor<float> center;
  sched::OptimizerState optim;
  std::int64_t t = 0;  // iterations completed
  int epoch = 0;       // epochs completed
};

struct StepScalars {
  double lr = 0;
  double wd = 0;
  double m = 0;
};

struct StepResult {
  double loss = 0;
  double teacher_entropy = 0;
  double grad_norm = 0;
};

/// One iteration on stacked crops (image-major; see data::stack_globals).
/// Order: teacher forward on globals, student forward on every crop, loss,
/// backward into the student, clip + SGD, EMA, centre update.
StepResult train_step(const nets::Model& model, const SSLConfig& cfg, TrainState& state, const Tensor<float>& globals,
                      const Tensor<float>& locals, const StepScalars& s);

/// Fresh student and identical teacher with a zero centre.
TrainState init_state(const nets::Model& model, const RunConfig& cfg);

struct MetricsRecord {
  std::int64_t t = 0;
  int epoch = 0;
  double loss = 0;
  double teacher_entropy = 0;
  double lr = 0;
  double wd = 0;
  double m = 0;
  double center_norm = 0;

  std::string to_line() const;
  static MetricsRecord from_line(const std::string& line);
};

struct PretrainOptions {
  std::filesystem::path out_dir;
  bool resume = false;
  /// Replaces the engine settings derived from the RunConfig; used by the
  /// centring control experiment, which needs teacher_temp == student_temp.
  std::optional<SSLConfig> engine_override;
  /// Stop (without writing the completion marker) after this many epochs in
  /// this invocation; simulates an interrupted run.
  std::optional<int> stop_after_epochs;
  std::function<void(const MetricsRecord&)> on_log;
};

struct PretrainResult {
  TrainState state;
  std::vector<MetricsRecord> log;
  std::filesystem::path final_checkpoint;
  bool complete = false;
};

/// Run directory layout: config.cfg, metrics.log, checkpoints/epoch_NNNN.ckpt,
/// last.ckpt, final.ckpt and a COMPLETE marker once finished.
PretrainResult pretrain(const RunConfig& cfg, const std::vector<data::ImageRecord>& train,
                        const PretrainOptions& opts);

/// Checkpoint of a state under a config.
Checkpoint make_checkpoint(const RunConfig& cfg, const TrainState& s);
TrainState state_from_checkpoint(const Checkpoint& ck, const RunConfig& cfg);

/// Engine settings implied by a run config.
SSLConfig ssl_config(const RunConfig& cfg);

/// Schedules for iteration t of a run with `iters_per_epoch` steps per epoch.
StepScalars schedule_at(const RunConfig& cfg, std::int64_t t, std::int64_t iters_per_epoch);

}  // namespace lowdino::ssl
