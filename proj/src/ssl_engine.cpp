// SPDX-License-Identifier: Apache-2.0
#include "lowdino/ssl_engine.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lowdino/container.hpp"

namespace lowdino::ssl {

namespace fs = std::filesystem;

void SSLConfig::validate() const {
  if (!(teacher_temp > 0 && teacher_temp <= student_temp))
    throw std::invalid_argument("ssl config: need 0 < teacher_temp <= student_temp");
  if (out_dim < 2) throw std::invalid_argument("ssl config: out_dim must be >= 2");
  if (!(center_momentum >= 0 && center_momentum <= 1))
    throw std::invalid_argument("ssl config: center_momentum must be in [0,1]");
}

namespace {

template <typename T>
void check_matrix(const Tensor<T>& x, const char* what) {
  if (x.rank() != 2) throw std::invalid_argument(std::string(what) + ": expected [B,K], got " + shape_str(x.shape()));
}

// Row-wise softmax of (x - shift) * scale, in double.
template <typename T>
Tensor<T> row_softmax(const Tensor<T>& x, const Tensor<T>* shift, double scale, bool log) {
  check_matrix(x, "softmax");
  const int B = x.dim(0), K = x.dim(1);
  if (shift && shift->size() != static_cast<std::size_t>(K))
    throw std::invalid_argument("center has " + std::to_string(shift->size()) + " entries, logits have " +
                                std::to_string(K));
  Tensor<T> out(x.shape());
  std::vector<double> z(static_cast<std::size_t>(K));
  for (int b = 0; b < B; ++b) {
    double mx = -INFINITY;
    for (int k = 0; k < K; ++k) {
      const double v = x[static_cast<std::size_t>(b) * K + k];
      if (!std::isfinite(v)) throw std::invalid_argument("non-finite logit in row " + std::to_string(b));
      z[k] = (v - (shift ? static_cast<double>((*shift)[k]) : 0.0)) * scale;
      mx = std::max(mx, z[k]);
    }
    double sum = 0;
    for (int k = 0; k < K; ++k) sum += std::exp(z[k] - mx);
    const double lse = mx + std::log(sum);
    for (int k = 0; k < K; ++k) {
      const double lp = z[k] - lse;
      out[static_cast<std::size_t>(b) * K + k] = static_cast<T>(log ? lp : std::exp(lp));
    }
  }
  return out;
}

template <typename T>
void check_views(const std::vector<Tensor<T>>& teacher, std::size_t n_student) {
  if (teacher.size() != 2) throw std::invalid_argument("dino loss: teacher must supply exactly 2 global views");
  if (n_student < 2) throw std::invalid_argument("dino loss: need at least 2 student views");
}

}  // namespace

template <typename T>
Tensor<T> teacher_probs(const Tensor<T>& logits, const Tensor<T>& center, double tau_t) {
  return row_softmax(logits, center.size() ? &center : nullptr, 1.0 / tau_t, false);
}

template <typename T>
Tensor<T> student_log_probs(const Tensor<T>& logits, double tau_s) {
  return row_softmax<T>(logits, nullptr, 1.0 / tau_s, true);
}

template <typename T>
double mean_entropy(const Tensor<T>& probs) {
  check_matrix(probs, "mean_entropy");
  const int B = probs.dim(0), K = probs.dim(1);
  double h = 0;
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < K; ++k) {
      const double p = probs[static_cast<std::size_t>(b) * K + k];
      if (p > 0) h -= p * std::log(p);
    }
  return h / B;
}

template <typename T>
double dino_loss(const std::vector<Tensor<T>>& teacher, const std::vector<Tensor<T>>& student_log) {
  check_views(teacher, student_log.size());
  const auto& ref = teacher[0];
  for (const auto& v : teacher)
    if (v.shape() != ref.shape()) throw std::invalid_argument("dino loss: teacher views differ in shape");
  for (const auto& v : student_log)
    if (v.shape() != ref.shape()) throw std::invalid_argument("dino loss: student view shape differs from teacher");
  const int B = ref.dim(0);
  const int n = static_cast<int>(student_log.size());
  double total = 0;
  for (int iq = 0; iq < 2; ++iq)
    for (int v = 0; v < n; ++v) {
      if (v == iq) continue;
      for (std::size_t i = 0; i < ref.size(); ++i)
        total -= static_cast<double>(teacher[iq][i]) * static_cast<double>(student_log[v][i]);
    }
  return total / (static_cast<double>(B) * pair_count(n));
}

template <typename T>
std::vector<Tensor<T>> dino_loss_grad(const std::vector<Tensor<T>>& teacher, const std::vector<Tensor<T>>& student_logits,
                                      double tau_s) {
  check_views(teacher, student_logits.size());
  const int n = static_cast<int>(student_logits.size());
  const int B = teacher[0].dim(0);
  const double norm = 1.0 / (static_cast<double>(B) * pair_count(n) * tau_s);
  std::vector<Tensor<T>> out;
  for (int v = 0; v < n; ++v) {
    const Tensor<T> ps = row_softmax<T>(student_logits[v], nullptr, 1.0 / tau_s, false);
    const int cnt = v < 2 ? 1 : 2;
    Tensor<T> g(ps.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      double tsum = 0;
      for (int iq = 0; iq < 2; ++iq)
        if (iq != v) tsum += teacher[iq][i];
      g[i] = static_cast<T>((cnt * static_cast<double>(ps[i]) - tsum) * norm);
    }
    out.push_back(std::move(g));
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split_views(const Tensor<T>& stacked, int views) {
  check_matrix(stacked, "split_views");
  if (views < 1 || stacked.dim(0) % views != 0)
    throw std::invalid_argument("split_views: " + std::to_string(stacked.dim(0)) + " rows do not split into " +
                                std::to_string(views) + " views");
  const int B = stacked.dim(0) / views, K = stacked.dim(1);
  std::vector<Tensor<T>> out(static_cast<std::size_t>(views), Tensor<T>({B, K}));
  for (int b = 0; b < B; ++b)
    for (int v = 0; v < views; ++v)
      std::copy_n(stacked.data() + (static_cast<std::size_t>(b) * views + v) * K, K,
                  out[v].data() + static_cast<std::size_t>(b) * K);
  return out;
}

template <typename T>
Tensor<T> merge_views(const std::vector<Tensor<T>>& views) {
  if (views.empty()) throw std::invalid_argument("merge_views: no views");
  const int V = static_cast<int>(views.size()), B = views[0].dim(0), K = views[0].dim(1);
  Tensor<T> out({B * V, K});
  for (int b = 0; b < B; ++b)
    for (int v = 0; v < V; ++v)
      std::copy_n(views[v].data() + static_cast<std::size_t>(b) * K, K,
                  out.data() + (static_cast<std::size_t>(b) * V + v) * K);
  return out;
}

#define LOWDINO_SSL_INSTANTIATE(T)                                                                           \
  template Tensor<T> teacher_probs(const Tensor<T>&, const Tensor<T>&, double);                             \
  template Tensor<T> student_log_probs(const Tensor<T>&, double);                                           \
  template double mean_entropy(const Tensor<T>&);                                                           \
  template double dino_loss(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&);                  \
  template std::vector<Tensor<T>> dino_loss_grad(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&, \
                                                 double);                                                   \
  template std::vector<Tensor<T>> split_views(const Tensor<T>&, int);                                        \
  template Tensor<T> merge_views(const std::vector<Tensor<T>>&);
LOWDINO_SSL_INSTANTIATE(float)
LOWDINO_SSL_INSTANTIATE(double)
#undef LOWDINO_SSL_INSTANTIATE

Tensor<float> update_center(const Tensor<float>& center, const Tensor<float>& teacher_logits, double lambda) {
  check_matrix(teacher_logits, "update_center");
  const int B = teacher_logits.dim(0), K = teacher_logits.dim(1);
  if (B == 0) throw std::invalid_argument("update_center: empty batch");
  Tensor<float> out = center.size() ? center : Tensor<float>({K});
  if (out.size() != static_cast<std::size_t>(K)) throw std::invalid_argument("update_center: width mismatch");
  for (int k = 0; k < K; ++k) {
    double mean = 0;
    for (int b = 0; b < B; ++b) mean += teacher_logits[static_cast<std::size_t>(b) * K + k];
    mean /= B;
    out[k] = static_cast<float>(lambda * out[k] + (1.0 - lambda) * mean);
  }
  return out;
}

void ema_update(ParameterSet& teacher, const ParameterSet& student, double m) {
  check_same_layout(teacher, student, "ema_update");
  for (auto& [name, t] : teacher) {
    const auto& s = student.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(m * t[i] + (1.0 - m) * s[i]);
  }
  ++teacher.version;
}

StepResult train_step(const nets::Model& model, const SSLConfig& cfg, TrainState& state, const Tensor<float>& globals,
                      const Tensor<float>& locals, const StepScalars& s) {
  if (globals.rank() != 4 || globals.dim(0) % 2 != 0)
    throw std::invalid_argument("train_step: globals must be [2B,3,S,S], got " + shape_str(globals.shape()));
  const int B = globals.dim(0) / 2;
  const bool has_locals = locals.size() > 0 && locals.dim(0) > 0;
  const int n_local = has_locals ? locals.dim(0) / B : 0;
  if (has_locals && locals.dim(0) != n_local * B)
    throw std::invalid_argument("train_step: locals do not divide evenly over the batch");

  // (1) teacher on the globals
  ad::Tape<float> ttape(false);
  Binding<float> tb(ttape, state.teacher, false);
  const Tensor<float> tlog = model.logits(tb, ttape.leaf(globals)).value();
  std::vector<Tensor<float>> P;
  for (const auto& v : split_views(tlog, 2)) P.push_back(teacher_probs(v, state.center, cfg.teacher_temp));

  // (2) student on every crop
  ad::Tape<float> tape(true);
  Binding<float> sb(tape, state.student, true);
  const auto g_out = model.logits(sb, tape.leaf(globals));
  std::vector<Tensor<float>> zs = split_views(g_out.value(), 2);
  std::optional<ad::Var<float>> l_out;
  if (has_locals) {
    l_out = model.logits(sb, tape.leaf(locals));
    for (auto& v : split_views(l_out->value(), n_local)) zs.push_back(std::move(v));
  }

  // (3) loss
  std::vector<Tensor<float>> logp;
  for (const auto& z : zs) logp.push_back(student_log_probs(z, cfg.student_temp));
  StepResult r;
  r.loss = dino_loss(P, logp);
  r.teacher_entropy = 0.5 * (mean_entropy(P[0]) + mean_entropy(P[1]));
  if (!std::isfinite(r.loss)) throw NonFiniteLoss("non-finite loss at iteration " + std::to_string(state.t));

  // (4) backward into the student only
  const auto grads = dino_loss_grad(P, zs, cfg.student_temp);
  const Tensor<float> g_seed = merge_views(std::vector<Tensor<float>>(grads.begin(), grads.begin() + 2));
  if (has_locals) {
    const Tensor<float> l_seed = merge_views(std::vector<Tensor<float>>(grads.begin() + 2, grads.end()));
    const std::vector<ad::Var<float>> outs{g_out, *l_out};
    const Tensor<float>* seeds[] = {&g_seed, &l_seed};
    Tensor<float> seed({g_seed.dim(0) + l_seed.dim(0), g_seed.dim(1)});
    std::size_t off = 0;
    for (const auto* sd : seeds) {
      std::copy_n(sd->data(), sd->size(), seed.data() + off);
      off += sd->size();
    }
    tape.backward(ad::concat<float>(outs, 0), seed);
  } else {
    tape.backward(g_out, g_seed);
  }

  // (5) clip + SGD
  r.grad_norm = sched::sgd_step(state.student, sb.gradients(), state.optim, s.lr, s.wd).grad_norm;
  // (6) EMA
  if (cfg.ema_enabled) ema_update(state.teacher, state.student, s.m);
  // (7) centre
  state.center = update_center(state.center, tlog, cfg.center_momentum);
  ++state.t;
  return r;
}

SSLConfig ssl_config(const RunConfig& cfg) {
  SSLConfig s;
  s.teacher_temp = cfg.teacher_temp;
  s.student_temp = cfg.student_temp;
  s.out_dim = cfg.out_dim;
  s.center_momentum = cfg.center_momentum;
  return s;
}

StepScalars schedule_at(const RunConfig& cfg, std::int64_t t, std::int64_t iters_per_epoch) {
  const std::int64_t T_c = static_cast<std::int64_t>(cfg.n_epochs) * iters_per_epoch;
  sched::CosineSchedule lr{.eta_min = cfg.min_lr,
                           .eta_max = cfg.lr,
                           .T_c = T_c,
                           .warmup_iters = static_cast<std::int64_t>(cfg.warmup_epochs) * iters_per_epoch,
                           .warmup_start = cfg.min_lr,
                           .eq2_verbatim = cfg.eq2_verbatim};
  return {sched::cosine_value(lr, t), sched::weight_decay_schedule(cfg.weight_decay, cfg.weight_decay_end, t, T_c),
          sched::momentum_schedule(cfg.momentum_teacher, t, T_c)};
}

namespace {

ParameterSet load_pretrained_source(const fs::path& path, bool& has_teacher, ParameterSet* teacher) {
  const Container c = read_container(path);
  if (c.kind == "checkpoint") {
    Checkpoint ck = load_checkpoint(path);
    has_teacher = !ck.teacher.empty();
    if (teacher) *teacher = ck.teacher;
    return ck.backbone_source(true);
  }
  has_teacher = false;
  return load_parameters(path);
}

}  // namespace

TrainState init_state(const nets::Model& model, const RunConfig& cfg) {
  TrainState s;
  std::mt19937_64 rng(derive_seed({cfg.seed, 0x696e6974ULL}));
  s.student = model.init(rng);
  if (cfg.pretrained) {
    bool has_teacher = false;
    const ParameterSet src = load_pretrained_source(cfg.pretrained_path, has_teacher, nullptr);
    const ParameterSet bb = src.slice("backbone.");
    check_same_layout(bb, s.student.slice("backbone."), "pretrained backbone");
    for (const auto& [name, t] : bb) s.student.at(name) = t;
  }
  s.teacher = s.student;
  if (cfg.pretrained_teacher) {
    bool has_teacher = false;
    ParameterSet teacher;
    load_pretrained_source(cfg.pretrained_path, has_teacher, &teacher);
    if (!has_teacher) throw std::invalid_argument("pretrained_teacher: " + cfg.pretrained_path + " has no teacher");
    check_same_layout(teacher, s.student, "pretrained teacher");
    s.teacher = teacher;
  }
  s.center = Tensor<float>({cfg.out_dim});
  s.optim = sched::OptimizerState::for_params(s.student, cfg.sgd_momentum, cfg.clip_grad,
                                              sched::parse_clip_mode(cfg.clip_mode));
  return s;
}

Checkpoint make_checkpoint(const RunConfig& cfg, const TrainState& s) {
  Checkpoint ck;
  ck.config_text = echo_config(cfg);
  ck.student = s.student;
  ck.teacher = s.teacher;
  ck.center = s.center;
  ck.momentum = s.optim.momentum;
  ck.t = s.t;
  ck.epoch = s.epoch;
  ck.seed = cfg.seed;
  return ck;
}

TrainState state_from_checkpoint(const Checkpoint& ck, const RunConfig& cfg) {
  const nets::Model model(cfg.backbone, cfg.head_config());
  std::mt19937_64 rng(0);
  const ParameterSet layout = model.init(rng);
  check_same_layout(ck.student, layout, "checkpoint student");
  check_same_layout(ck.teacher, layout, "checkpoint teacher");
  check_same_layout(ck.momentum, layout, "checkpoint optimizer buffers");
  TrainState s;
  s.student = ck.student;
  s.teacher = ck.teacher;
  s.center = ck.center;
  s.optim = sched::OptimizerState::for_params(s.student, cfg.sgd_momentum, cfg.clip_grad,
                                              sched::parse_clip_mode(cfg.clip_mode));
  s.optim.momentum = ck.momentum;
  s.t = ck.t;
  s.epoch = ck.epoch;
  return s;
}

std::string MetricsRecord::to_line() const {
  char buf[512];
  std::snprintf(buf, sizeof buf, "t=%lld epoch=%d loss=%.9g teacher_entropy=%.9g lr=%.9g wd=%.9g m=%.9g center_norm=%.9g",
                static_cast<long long>(t), epoch, loss, teacher_entropy, lr, wd, m, center_norm);
  return buf;
}

MetricsRecord MetricsRecord::from_line(const std::string& line) {
  MetricsRecord r;
  std::istringstream in(line);
  std::string tok;
  int seen = 0;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("metrics line without key=value: " + line);
    const std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
    if (k == "t") r.t = std::stoll(v);
    else if (k == "epoch") r.epoch = std::stoi(v);
    else if (k == "loss") r.loss = std::stod(v);
    else if (k == "teacher_entropy") r.teacher_entropy = std::stod(v);
    else if (k == "lr") r.lr = std::stod(v);
    else if (k == "wd") r.wd = std::stod(v);
    else if (k == "m") r.m = std::stod(v);
    else if (k == "center_norm") r.center_norm = std::stod(v);
    else continue;
    ++seen;
  }
  if (seen != 8) throw FormatError("metrics line missing fields: " + line);
  return r;
}

namespace {

double l2(const Tensor<float>& t) {
  double s = 0;
  for (float v : t.vec()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

}  // namespace

PretrainResult pretrain(const RunConfig& cfg, const std::vector<data::ImageRecord>& train,
                        const PretrainOptions& opts) {
  cfg.validate();
  const SSLConfig ssl = opts.engine_override.value_or(ssl_config(cfg));
  ssl.validate();
  if (train.empty()) throw std::invalid_argument("pretrain: training set is empty");
  const nets::Model model(cfg.backbone, cfg.head_config());
  const auto ipe = static_cast<std::int64_t>((train.size() + cfg.batch_size - 1) / cfg.batch_size);

  const fs::path dir = opts.out_dir;
  const fs::path complete = dir / "COMPLETE", last = dir / "last.ckpt", metrics = dir / "metrics.log",
                 echo = dir / "config.cfg";
  if (fs::exists(complete))
    throw std::runtime_error("run directory " + dir.string() + " holds a completed run and is immutable");
  const std::string config_text = echo_config(cfg);

  PretrainResult res;
  std::vector<std::string> lines;
  if (opts.resume) {
    if (!fs::exists(last)) throw std::runtime_error("--resume: no checkpoint at " + last.string());
    if (fs::exists(echo) && read_file(echo) != config_text)
      throw std::runtime_error("--resume: config differs from the one recorded in " + echo.string());
    res.state = state_from_checkpoint(load_checkpoint(last), cfg);
    if (fs::exists(metrics)) {
      std::istringstream in(read_file(metrics));
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto rec = MetricsRecord::from_line(line);
        if (rec.t > res.state.t) break;
        res.log.push_back(rec);
        lines.push_back(line);
      }
    }
    spdlog::info("resuming {} at epoch {}, iteration {}", dir.string(), res.state.epoch, res.state.t);
  } else {
    if (fs::exists(last) || fs::exists(metrics))
      throw std::runtime_error("run directory " + dir.string() + " already has a run; pass --resume to continue it");
    res.state = init_state(model, cfg);
  }
  fs::create_directories(dir);
  write_file_atomic(echo, config_text);

  auto append_log = [&](const MetricsRecord& rec) {
    res.log.push_back(rec);
    lines.push_back(rec.to_line());
    std::string text;
    for (const auto& l : lines) text += l + "\n";
    write_file_atomic(metrics, text);
    if (opts.on_log) opts.on_log(rec);
  };

  TrainState& st = res.state;
  const data::AugmentConfig aug = cfg.augment_config();
  const bool per_iter = cfg.logging_unit == "iteration";
  int epochs_this_call = 0;
  for (int e = st.epoch; e < cfg.n_epochs; ++e) {
    data::BatchIterator it(train, cfg.batch_size, aug, cfg.seed, static_cast<std::uint64_t>(e));
    double loss_sum = 0, ent_sum = 0;
    int steps = 0;
    StepScalars s;
    while (auto batch = it.next()) {
      s = schedule_at(cfg, st.t, ipe);
      StepResult r;
      try {
        r = train_step(model, ssl, st, data::stack_globals(batch->crops), data::stack_locals(batch->crops), s);
      } catch (const NonFiniteLoss&) {
        std::string ids;
        for (const auto& c : batch->crops) ids += c.source_id + "\n";
        fs::create_directories(dir);
        write_file_atomic(dir / "abort_batch.txt", ids);
        save_checkpoint(make_checkpoint(cfg, st), dir / "abort.ckpt");
        spdlog::error("non-finite loss at iteration {}; batch ids in {}", st.t, (dir / "abort_batch.txt").string());
        throw;
      }
      loss_sum += r.loss;
      ent_sum += r.teacher_entropy;
      ++steps;
      if (per_iter && st.t % cfg.logging_freq == 0)
        append_log({st.t, e, r.loss, r.teacher_entropy, s.lr, s.wd, s.m, l2(st.center)});
    }
    st.epoch = e + 1;
    if (!per_iter && st.epoch % cfg.logging_freq == 0)
      append_log({st.t, e, loss_sum / steps, ent_sum / steps, s.lr, s.wd, s.m, l2(st.center)});
    const Checkpoint ck = make_checkpoint(cfg, st);
    if (cfg.checkpoint_freq > 0 && st.epoch % cfg.checkpoint_freq == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "epoch_%04d.ckpt", st.epoch);
      fs::create_directories(dir / "checkpoints");
      save_checkpoint(ck, dir / "checkpoints" / name);
    }
    save_checkpoint(ck, last);
    ++epochs_this_call;
    if (opts.stop_after_epochs && epochs_this_call >= *opts.stop_after_epochs && st.epoch < cfg.n_epochs) return res;
  }
  res.final_checkpoint = dir / "final.ckpt";
  save_checkpoint(make_checkpoint(cfg, st), res.final_checkpoint);
  write_file_atomic(complete, "t=" + std::to_string(st.t) + "\n");
  res.complete = true;
  return res;
}

}  // namespace lowdino::ssl
