// SPDX-License-Identifier: Apache-2.0
#pragma once

// Offline distillation of a frozen teacher into a smaller student, from a
// teacher checkpoint or from precomputed teacher logits.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lowdino/checkpoint.hpp"
#include "lowdino/config.hpp"
#include "lowdino/datapipe.hpp"
#include "lowdino/nets.hpp"
#include "lowdino/schedules.hpp"

namespace lowdino::distill {

struct DistillConfig {
  double alpha = 1.0;  // weight of the soft term; 1 = soft labels only
  double temp = 2.0;
  bool scale_kl_by_T2 = true;

  /// alpha in [0, 1], temp > 0.
  void validate() const;
};

DistillConfig distill_config(const RunConfig& cfg);

struct LossParts {
  double total = 0;
  double ce = 0;  // hard-label cross-entropy, 0 when alpha == 1
  double kl = 0;  // mean KL(teacher || student) at temperature T, unscaled
};

/// (1 - alpha) CE(y, softmax(s)) + alpha c KL(softmax(t/T) || softmax(s/T)),
/// averaged over rows, with c = T^2 when scale_kl_by_T2 and 1 otherwise.
/// `labels` may be null only when alpha == 1 and is not read in that case.
template <typename T>
LossParts distill_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                       const std::vector<int>* labels, const DistillConfig& cfg);

/// Gradient of distill_loss(...).total with respect to the student logits.
template <typename T>
Tensor<T> distill_loss_grad(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                            const std::vector<int>* labels, const DistillConfig& cfg);

/// Teacher outputs keyed by record id.
struct TeacherLogits {
  Tensor<float> matrix;  // [N, K]
  std::vector<std::string> ids;
  std::string teacher_id;

  std::size_t rows() const { return ids.size(); }
  int dim() const { return matrix.rank() == 2 ? matrix.dim(1) : 0; }
  /// Rows for `ids` in order; throws naming the first id that is missing.
  Tensor<float> gather(const std::vector<std::string>& ids) const;

  bool operator==(const TeacherLogits&) const = default;
};

void save_teacher_logits(const TeacherLogits& t, const std::filesystem::path& path);
TeacherLogits load_teacher_logits(const std::filesystem::path& path);

/// Head logits of the canonical view of every record, `batch` at a time.
/// Throws on duplicate record ids.
TeacherLogits export_teacher_logits(const nets::Model& teacher, const ParameterSet& params,
                                    const std::vector<data::ImageRecord>& records, int size, int batch,
                                    const std::string& teacher_id);

/// Student network: scaled backbone, head, and with match_dim a bias-free
/// projection "proj.w" from the student's output width to the teacher's.
class StudentModel {
 public:
  StudentModel(nets::BackboneConfig backbone, nets::HeadConfig head, int teacher_dim, bool match_dim);

  const nets::Model& model() const { return model_; }
  const nets::Backbone& backbone() const { return model_.backbone(); }
  int teacher_dim() const { return teacher_dim_; }
  bool projects() const { return project_; }

  std::vector<nets::ParamSpec> param_specs() const;
  ParameterSet init(std::mt19937_64& rng) const { return nets::init_params(param_specs(), rng); }

  /// Logits in the teacher's output width.
  template <typename T>
  ad::Var<T> logits(const Binding<T>& p, ad::Var<T> x) const;

 private:
  nets::Model model_;
  int teacher_dim_;
  bool project_;
};

/// Student architecture implied by a run config and the teacher's output width.
StudentModel make_student(const RunConfig& cfg, int teacher_dim);

struct DistillState {
  ParameterSet student;
  sched::OptimizerState optim;
  std::int64_t t = 0;
  int epoch = 0;
};

DistillState init_student(const StudentModel& model, const RunConfig& cfg);

struct StepResult {
  LossParts loss;
  double grad_norm = 0;
};

/// One update of the student on images [B, 3, S, S] against fixed teacher
/// logits [B, K]. Nothing but the student and its optimizer state changes.
StepResult distill_step(const StudentModel& model, DistillState& state, const Tensor<float>& images,
                        const Tensor<float>& teacher_logits, const std::vector<int>* labels,
                        const DistillConfig& cfg, double lr, double wd);

/// Where the teacher signal comes from.
struct TeacherSource {
  // checkpoint source
  const nets::Model* model = nullptr;
  const ParameterSet* params = nullptr;
  // logits-file source
  const TeacherLogits* logits = nullptr;
};

struct EpochRecord {
  int epoch = 0;
  std::int64_t t = 0;
  double loss = 0;
  double kl = 0;
  double ce = 0;
  double lr = 0;

  std::string to_line() const;
};

struct DistillOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  std::function<void(const EpochRecord&, const DistillState&)> on_epoch;
};

struct DistillResult {
  DistillState state;
  std::vector<EpochRecord> log;
  std::filesystem::path final_checkpoint;
};

/// Distillation run over `train` for cfg.distill.epochs. With an out_dir the
/// run directory gets config.cfg, metrics.log, final.ckpt and COMPLETE.
DistillResult run_distillation(const RunConfig& cfg, const std::vector<data::ImageRecord>& train,
                               const TeacherSource& teacher, const DistillOptions& opts);

/// Checkpoint of a distilled student (no teacher entries).
Checkpoint make_student_checkpoint(const RunConfig& cfg, const DistillState& s, int teacher_dim);

}  // namespace lowdino::distill
