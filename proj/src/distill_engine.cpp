// SPDX-License-Identifier: Apache-2.0
#include "lowdino/distill_engine.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include "lowdino/container.hpp"
#include "lowdino/rng.hpp"

namespace lowdino::distill {

namespace fs = std::filesystem;

void DistillConfig::validate() const {
  if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("distill config: alpha must be in [0,1]");
  if (!(temp > 0)) throw std::invalid_argument("distill config: temp must be > 0");
}

DistillConfig distill_config(const RunConfig& cfg) {
  return {.alpha = cfg.distill.alpha, .temp = cfg.distill.temp, .scale_kl_by_T2 = cfg.distill.scale_kl_by_T2};
}

namespace {

// log_softmax(x[row] * scale) into out, in double.
template <typename T>
void log_softmax_row(const T* x, int K, double scale, std::vector<double>& out) {
  out.resize(static_cast<std::size_t>(K));
  double mx = -INFINITY;
  for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(x[k]) * scale);
  double z = 0;
  for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(x[k]) * scale - mx);
  const double lz = mx + std::log(z);
  for (int k = 0; k < K; ++k) out[k] = static_cast<double>(x[k]) * scale - lz;
}

template <typename T>
void check_inputs(const Tensor<T>& s, const Tensor<T>& t, const std::vector<int>* labels, const DistillConfig& cfg) {
  cfg.validate();
  if (s.rank() != 2 || t.rank() != 2)
    throw std::invalid_argument("distill_loss: logits must be [B,K], got " + shape_str(s.shape()) + " and " +
                                shape_str(t.shape()));
  if (s.shape() != t.shape())
    throw std::invalid_argument("distill_loss: student logits " + shape_str(s.shape()) + " vs teacher logits " +
                                shape_str(t.shape()));
  if (cfg.alpha < 1) {
    if (!labels) throw std::invalid_argument("distill_loss: alpha < 1 needs hard labels");
    if (labels->size() != static_cast<std::size_t>(s.dim(0)))
      throw std::invalid_argument("distill_loss: label count does not match the batch");
    for (int y : *labels)
      if (y < 0 || y >= s.dim(1))
        throw std::invalid_argument("distill_loss: label " + std::to_string(y) + " outside [0, K)");
  }
}

double kl_scale(const DistillConfig& cfg) { return cfg.scale_kl_by_T2 ? cfg.temp * cfg.temp : 1.0; }

}  // namespace

template <typename T>
LossParts distill_loss(const Tensor<T>& s, const Tensor<T>& t, const std::vector<int>* labels,
                       const DistillConfig& cfg) {
  check_inputs(s, t, labels, cfg);
  const int B = s.dim(0), K = s.dim(1);
  const bool hard = cfg.alpha < 1;
  std::vector<double> lq, lp, ls;
  LossParts out;
  for (int b = 0; b < B; ++b) {
    log_softmax_row(s.data() + static_cast<std::size_t>(b) * K, K, 1.0 / cfg.temp, lq);
    log_softmax_row(t.data() + static_cast<std::size_t>(b) * K, K, 1.0 / cfg.temp, lp);
    double kl = 0;
    for (int k = 0; k < K; ++k) {
      const double p = std::exp(lp[k]);
      if (p > 0) kl += p * (lp[k] - lq[k]);
    }
    out.kl += kl;
    if (hard) {
      log_softmax_row(s.data() + static_cast<std::size_t>(b) * K, K, 1.0, ls);
      out.ce -= ls[(*labels)[b]];
    }
  }
  out.kl /= B;
  out.ce /= B;
  out.total = (hard ? (1 - cfg.alpha) * out.ce : 0.0) + cfg.alpha * kl_scale(cfg) * out.kl;
  return out;
}

template <typename T>
Tensor<T> distill_loss_grad(const Tensor<T>& s, const Tensor<T>& t, const std::vector<int>* labels,
                            const DistillConfig& cfg) {
  check_inputs(s, t, labels, cfg);
  const int B = s.dim(0), K = s.dim(1);
  const bool hard = cfg.alpha < 1;
  const double soft = cfg.alpha * kl_scale(cfg) / (cfg.temp * B);
  const double ce = (1 - cfg.alpha) / B;
  std::vector<double> lq, lp, ls;
  Tensor<T> g(s.shape());
  for (int b = 0; b < B; ++b) {
    const std::size_t off = static_cast<std::size_t>(b) * K;
    log_softmax_row(s.data() + off, K, 1.0 / cfg.temp, lq);
    log_softmax_row(t.data() + off, K, 1.0 / cfg.temp, lp);
    if (hard) log_softmax_row(s.data() + off, K, 1.0, ls);
    for (int k = 0; k < K; ++k) {
      double v = soft * (std::exp(lq[k]) - std::exp(lp[k]));
      if (hard) v += ce * (std::exp(ls[k]) - (k == (*labels)[b] ? 1.0 : 0.0));
      g[off + k] = static_cast<T>(v);
    }
  }
  return g;
}

template LossParts distill_loss<float>(const Tensor<float>&, const Tensor<float>&, const std::vector<int>*,
                                       const DistillConfig&);
template LossParts distill_loss<double>(const Tensor<double>&, const Tensor<double>&, const std::vector<int>*,
                                        const DistillConfig&);
template Tensor<float> distill_loss_grad<float>(const Tensor<float>&, const Tensor<float>&, const std::vector<int>*,
                                                const DistillConfig&);
template Tensor<double> distill_loss_grad<double>(const Tensor<double>&, const Tensor<double>&,
                                                  const std::vector<int>*, const DistillConfig&);

// ---------------------------------------------------------------------------
// teacher logits

Tensor<float> TeacherLogits::gather(const std::vector<std::string>& want) const {
  std::unordered_map<std::string, std::size_t> index;
  index.reserve(ids.size());
  for (std::size_t r = 0; r < ids.size(); ++r) index.emplace(ids[r], r);
  const int K = dim();
  Tensor<float> out({static_cast<int>(want.size()), K});
  for (std::size_t i = 0; i < want.size(); ++i) {
    const auto it = index.find(want[i]);
    if (it == index.end())
      throw std::runtime_error("teacher logits (" + teacher_id + ") have no row for record id '" + want[i] + "'");
    std::copy_n(matrix.data() + it->second * K, K, out.data() + i * K);
  }
  return out;
}

void save_teacher_logits(const TeacherLogits& t, const fs::path& path) {
  if (t.matrix.rank() != 2 || static_cast<std::size_t>(t.matrix.dim(0)) != t.ids.size())
    throw std::invalid_argument("teacher logits: matrix rows do not match the id list");
  Container c;
  c.kind = "teacher-logits";
  c.meta = {{"N", t.ids.size()}, {"K", t.dim()}, {"teacher_id", t.teacher_id}, {"ids", t.ids}};
  c.add("logits", t.matrix);
  write_container(c, path);
}

TeacherLogits load_teacher_logits(const fs::path& path) {
  const Container c = read_container(path, "teacher-logits");
  TeacherLogits t;
  t.matrix = c.get("logits");
  t.ids = c.meta.at("ids").get<std::vector<std::string>>();
  t.teacher_id = c.meta.at("teacher_id").get<std::string>();
  const auto N = c.meta.at("N").get<std::size_t>();
  const int K = c.meta.at("K").get<int>();
  if (t.ids.size() != N || t.matrix.rank() != 2 || static_cast<std::size_t>(t.matrix.dim(0)) != N ||
      t.matrix.dim(1) != K)
    throw FormatError("teacher logits " + path.string() + ": header says " + std::to_string(N) + "x" +
                      std::to_string(K) + " but the payload is " + shape_str(t.matrix.shape()));
  const std::set<std::string> uniq(t.ids.begin(), t.ids.end());
  if (uniq.size() != t.ids.size()) throw FormatError("teacher logits " + path.string() + ": duplicate record ids");
  return t;
}

namespace {

Tensor<float> stack_views(const std::vector<data::ImageRecord>& records, const std::vector<std::size_t>& idx,
                          std::size_t from, std::size_t to, int size) {
  const std::size_t per = 3 * static_cast<std::size_t>(size) * size;
  Tensor<float> x({static_cast<int>(to - from), 3, size, size});
  for (std::size_t i = from; i < to; ++i) {
    const Tensor<float> v = data::canonical_view(records[idx[i]], size);
    std::copy_n(v.data(), per, x.data() + (i - from) * per);
  }
  return x;
}

template <typename M>
Tensor<float> forward_logits(const M& model, const ParameterSet& params, const Tensor<float>& x) {
  ad::Tape<float> tape(false);
  Binding<float> bind(tape, params, false);
  return model.logits(bind, tape.leaf(x)).value();
}

}  // namespace

TeacherLogits export_teacher_logits(const nets::Model& teacher, const ParameterSet& params,
                                    const std::vector<data::ImageRecord>& records, int size, int batch,
                                    const std::string& teacher_id) {
  if (batch < 1) throw std::invalid_argument("export_teacher_logits: batch must be >= 1");
  std::set<std::string> seen;
  for (const auto& r : records)
    if (!seen.insert(r.id).second) throw std::invalid_argument("export_teacher_logits: duplicate record id '" + r.id + "'");
  TeacherLogits out;
  out.teacher_id = teacher_id;
  const int K = teacher.head().config().out_dim;
  out.matrix = Tensor<float>({static_cast<int>(records.size()), K});
  std::vector<std::size_t> idx(records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t from = 0; from < records.size(); from += static_cast<std::size_t>(batch)) {
    const std::size_t to = std::min(records.size(), from + static_cast<std::size_t>(batch));
    const Tensor<float> z = forward_logits(teacher, params, stack_views(records, idx, from, to, size));
    std::copy_n(z.data(), z.size(), out.matrix.data() + from * K);
  }
  for (const auto& r : records) out.ids.push_back(r.id);
  return out;
}

// ---------------------------------------------------------------------------
// student

StudentModel::StudentModel(nets::BackboneConfig backbone, nets::HeadConfig head, int teacher_dim, bool match_dim)
    : model_(std::move(backbone), std::move(head)), teacher_dim_(teacher_dim), project_(match_dim) {
  const int own = model_.head().config().out_dim;
  if (teacher_dim_ < 2) throw std::invalid_argument("student: teacher output width must be >= 2");
  if (!project_ && own != teacher_dim_)
    throw std::invalid_argument("student output width " + std::to_string(own) + " differs from the teacher's " +
                                std::to_string(teacher_dim_) + "; enable distill.match_dim");
}

std::vector<nets::ParamSpec> StudentModel::param_specs() const {
  auto s = model_.param_specs();
  if (project_) s.push_back({"proj.w", {teacher_dim_, model_.head().config().out_dim}, nets::Init::HeNormal});
  return s;
}

template <typename T>
ad::Var<T> StudentModel::logits(const Binding<T>& p, ad::Var<T> x) const {
  auto z = model_.logits(p, x);
  if (project_) z = ad::linear<T>(z, p("proj.w"), std::nullopt);
  return z;
}

template ad::Var<float> StudentModel::logits<float>(const Binding<float>&, ad::Var<float>) const;
template ad::Var<double> StudentModel::logits<double>(const Binding<double>&, ad::Var<double>) const;

StudentModel make_student(const RunConfig& cfg, int teacher_dim) {
  nets::BackboneConfig bb = cfg.backbone;
  bb.width_mult *= cfg.distill.student_width_mult;
  nets::HeadConfig head = cfg.head_config();
  head.out_dim = cfg.distill.student_out_dim > 0 ? cfg.distill.student_out_dim : teacher_dim;
  return StudentModel(bb, head, teacher_dim, cfg.distill.match_dim);
}

DistillState init_student(const StudentModel& model, const RunConfig& cfg) {
  DistillState s;
  std::mt19937_64 rng(derive_seed({cfg.seed, 0x73747564ULL}));
  s.student = model.init(rng);
  s.optim = sched::OptimizerState::for_params(s.student, cfg.sgd_momentum, cfg.clip_grad,
                                              sched::parse_clip_mode(cfg.clip_mode));
  return s;
}

StepResult distill_step(const StudentModel& model, DistillState& state, const Tensor<float>& images,
                        const Tensor<float>& teacher_logits, const std::vector<int>* labels,
                        const DistillConfig& cfg, double lr, double wd) {
  ad::Tape<float> tape(true);
  Binding<float> sb(tape, state.student, true);
  const auto out = model.logits(sb, tape.leaf(images));
  StepResult r;
  r.loss = distill_loss(out.value(), teacher_logits, labels, cfg);
  if (!std::isfinite(r.loss.total))
    throw std::runtime_error("non-finite distillation loss at iteration " + std::to_string(state.t));
  tape.backward(out, distill_loss_grad(out.value(), teacher_logits, labels, cfg));
  r.grad_norm = sched::sgd_step(state.student, sb.gradients(), state.optim, lr, wd).grad_norm;
  ++state.t;
  return r;
}

std::string EpochRecord::to_line() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "epoch=%d t=%lld loss=%.9g kl=%.9g ce=%.9g lr=%.9g", epoch,
                static_cast<long long>(t), loss, kl, ce, lr);
  return buf;
}

Checkpoint make_student_checkpoint(const RunConfig& cfg, const DistillState& s, int teacher_dim) {
  Checkpoint ck;
  ck.config_text = echo_config(cfg);
  ck.student = s.student;
  ck.momentum = s.optim.momentum;
  ck.t = s.t;
  ck.epoch = s.epoch;
  ck.seed = cfg.seed;
  ck.extra = {{"kind", "distilled-student"}, {"teacher_dim", teacher_dim}};
  return ck;
}

DistillResult run_distillation(const RunConfig& cfg, const std::vector<data::ImageRecord>& train,
                               const TeacherSource& teacher, const DistillOptions& opts) {
  cfg.validate();
  const DistillConfig dc = distill_config(cfg);
  dc.validate();
  if (train.empty()) throw std::invalid_argument("distill: training set is empty");
  const bool from_file = teacher.logits != nullptr;
  if (!from_file && (!teacher.model || !teacher.params))
    throw std::invalid_argument("distill: no teacher given (checkpoint model or logits file)");
  if (from_file && cfg.distill.augmented)
    throw std::invalid_argument("distill: augmented views need a teacher checkpoint, not a logits file");
  const int K = from_file ? teacher.logits->dim() : teacher.model->head().config().out_dim;

  std::vector<int> labels;
  if (dc.alpha < 1) {
    for (const auto& r : train) {
      if (!r.label || *r.label < 0)
        throw std::invalid_argument("distill: alpha < 1 but record '" + r.id + "' has no label");
      labels.push_back(*r.label);
    }
  }

  // teacher rows in record order; the augmented mode recomputes per batch
  Tensor<float> fixed;
  if (!cfg.distill.augmented) {
    if (from_file) {
      std::vector<std::string> ids;
      for (const auto& r : train) ids.push_back(r.id);
      fixed = teacher.logits->gather(ids);
    } else {
      fixed = export_teacher_logits(*teacher.model, *teacher.params, train, cfg.backbone.global_size,
                                    cfg.batch_size_eval, "checkpoint").matrix;
    }
  }

  const fs::path dir = opts.out_dir;
  const bool write = !dir.empty();
  if (write) {
    if (fs::exists(dir / "COMPLETE"))
      throw std::runtime_error("run directory " + dir.string() + " holds a completed run and is immutable");
    if (fs::exists(dir / "metrics.log"))
      throw std::runtime_error("run directory " + dir.string() + " already has a distillation run");
    fs::create_directories(dir);
    write_file_atomic(dir / "config.cfg", echo_config(cfg));
  }

  const StudentModel student = make_student(cfg, K);
  DistillResult res;
  res.state = init_student(student, cfg);
  DistillState& st = res.state;

  const std::size_t N = train.size();
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  const auto ipe = static_cast<std::int64_t>((N + B - 1) / B);
  const std::int64_t T_c = ipe * cfg.distill.epochs;
  const sched::CosineSchedule lr_sched{.eta_min = cfg.distill.min_lr,
                                       .eta_max = cfg.distill.lr,
                                       .T_c = T_c,
                                       .warmup_iters = 0,
                                       .warmup_start = cfg.distill.min_lr};
  data::AugmentConfig aug = cfg.augment_config();
  aug.n_crops = 2;
  const int size = cfg.backbone.global_size;
  const std::size_t per = 3 * static_cast<std::size_t>(size) * size;
  std::string metrics;

  for (int e = 0; e < cfg.distill.epochs; ++e) {
    double loss = 0, kl = 0, ce = 0, lr = 0;
    int steps = 0;
    const auto order = data::epoch_order(N, cfg.seed, static_cast<std::uint64_t>(e));
    std::optional<data::BatchIterator> it;
    if (cfg.distill.augmented) it.emplace(train, cfg.batch_size, aug, cfg.seed, static_cast<std::uint64_t>(e));
    for (std::size_t from = 0; from < N; from += B) {
      const std::size_t to = std::min(N, from + B);
      std::vector<std::size_t> idx;
      Tensor<float> images, tl;
      if (it) {
        auto batch = it->next();
        idx = batch->indices;
        images = Tensor<float>({static_cast<int>(idx.size()), 3, size, size});
        for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(batch->crops[i].globals[0].data(), per, images.data() + i * per);
        tl = forward_logits(*teacher.model, *teacher.params, images);
      } else {
        idx.assign(order.begin() + static_cast<std::ptrdiff_t>(from), order.begin() + static_cast<std::ptrdiff_t>(to));
        images = stack_views(train, idx, 0, idx.size(), size);
        tl = Tensor<float>({static_cast<int>(idx.size()), K});
        for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(fixed.data() + idx[i] * K, K, tl.data() + i * K);
      }
      std::vector<int> y;
      for (std::size_t i : idx)
        if (!labels.empty()) y.push_back(labels[i]);
      lr = sched::cosine_value(lr_sched, st.t);
      const auto r = distill_step(student, st, images, tl, labels.empty() ? nullptr : &y, dc, lr,
                                  cfg.distill.weight_decay);
      loss += r.loss.total;
      kl += r.loss.kl;
      ce += r.loss.ce;
      ++steps;
    }
    st.epoch = e + 1;
    const EpochRecord rec{e, st.t, loss / steps, kl / steps, ce / steps, lr};
    res.log.push_back(rec);
    if (write) {
      metrics += rec.to_line() + "\n";
      write_file_atomic(dir / "metrics.log", metrics);
    }
    spdlog::debug("distill {}", rec.to_line());
    if (opts.on_epoch) opts.on_epoch(rec, st);
  }
  if (write) {
    res.final_checkpoint = dir / "final.ckpt";
    save_checkpoint(make_student_checkpoint(cfg, st, K), res.final_checkpoint);
    write_file_atomic(dir / "COMPLETE", "t=" + std::to_string(st.t) + "\n");
  }
  return res;
}

}  // namespace lowdino::distill
