// SPDX-License-Identifier: Apache-2.0
// lowdino command-line entry point.
//
// Exit codes: 0 success, 1 invalid arguments or config, 2 runtime failure.

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lowdino/checkpoint.hpp"
#include "lowdino/config.hpp"
#include "lowdino/container.hpp"
#include "lowdino/distill_engine.hpp"
#include "lowdino/eval.hpp"
#include "lowdino/ssl_engine.hpp"

using namespace lowdino;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> sets;
  std::string log_level = "info";
};

RunConfig resolve(const Globals& g) {
  Overrides ov;
  for (const auto& s : g.sets) ov.push_back(split_override(s));
  if (g.seed) ov.emplace_back("seed", std::to_string(*g.seed));
  return g.config.empty() ? parse_config("", ov) : load_config(g.config, ov);
}

fs::path need_out_dir(const Globals& g, const char* cmd) {
  if (g.out_dir.empty()) throw std::invalid_argument(std::string(cmd) + ": --out-dir is required");
  return g.out_dir;
}

std::vector<data::ImageRecord> load_records(const RunConfig& cfg) {
  auto ds = data::load_dataset(cfg.data);
  for (const auto& e : ds.errors) spdlog::warn("skipped {}: {}", e.id, e.message);
  if (ds.records.empty()) throw std::runtime_error("dataset " + cfg.data.kind + " has no usable records");
  spdlog::info("dataset {}: {} records", cfg.data.kind, ds.records.size());
  return std::move(ds.records);
}

// Backbone and parameters stored in a checkpoint.
struct LoadedBackbone {
  Checkpoint ck;
  RunConfig cfg;
  std::optional<nets::Backbone> backbone;
  const ParameterSet* params = nullptr;
};

LoadedBackbone load_backbone(const fs::path& path, bool prefer_teacher) {
  LoadedBackbone lb;
  lb.ck = load_checkpoint(path);
  lb.cfg = lb.ck.config();
  if (lb.ck.extra.value("kind", "") == "distilled-student") {
    const int K = lb.ck.extra.at("teacher_dim").get<int>();
    lb.backbone.emplace(distill::make_student(lb.cfg, K).backbone().config());
  } else {
    lb.backbone.emplace(lb.cfg.backbone);
  }
  lb.params = &lb.ck.backbone_source(prefer_teacher);
  return lb;
}

void print_line(const std::string& s) { std::printf("%s\n", s.c_str()); }

int cmd_pretrain(const Globals& g, bool resume) {
  const RunConfig cfg = resolve(g);
  const auto train = load_records(cfg);
  ssl::PretrainOptions opts;
  opts.out_dir = need_out_dir(g, "pretrain");
  opts.resume = resume;
  opts.on_log = [](const ssl::MetricsRecord& r) { spdlog::info("{}", r.to_line()); };
  const auto res = ssl::pretrain(cfg, train, opts);
  print_line("final_checkpoint=" + res.final_checkpoint.string());
  return 0;
}

int cmd_distill(const Globals& g, const std::string& teacher_path, const std::string& logits_path) {
  RunConfig cfg = resolve(g);
  std::string tp = teacher_path.empty() ? cfg.distill.teacher_path : teacher_path;
  std::string lp = logits_path.empty() ? cfg.distill.logits_path : logits_path;
  if (!teacher_path.empty()) lp.clear();
  if (!logits_path.empty()) tp.clear();
  if (tp.empty() == lp.empty())
    throw std::invalid_argument("distill: give exactly one of --teacher <checkpoint> or --logits <file>");
  const auto train = load_records(cfg);

  distill::TeacherSource src;
  std::optional<nets::Model> model;
  Checkpoint ck;
  distill::TeacherLogits logits;
  if (!tp.empty()) {
    ck = load_checkpoint(tp);
    const RunConfig tcfg = ck.config();
    model.emplace(tcfg.backbone, tcfg.head_config());
    src.model = &*model;
    src.params = &ck.backbone_source(true);
  } else {
    logits = distill::load_teacher_logits(lp);
    src.logits = &logits;
  }
  distill::DistillOptions opts;
  opts.out_dir = need_out_dir(g, "distill");
  opts.on_epoch = [](const distill::EpochRecord& r, const distill::DistillState&) {
    spdlog::info("{}", r.to_line());
  };
  const auto res = distill::run_distillation(cfg, train, src, opts);
  print_line("final_checkpoint=" + res.final_checkpoint.string());
  return 0;
}

int cmd_export_logits(const Globals& g, const std::string& ckpt, const std::string& out, std::string teacher_id) {
  const RunConfig cfg = resolve(g);
  const Checkpoint ck = load_checkpoint(ckpt);
  const RunConfig tcfg = ck.config();
  const nets::Model model(tcfg.backbone, tcfg.head_config());
  const auto recs = load_records(cfg);
  if (teacher_id.empty()) teacher_id = fs::path(ckpt).filename().string();
  const auto t = distill::export_teacher_logits(model, ck.backbone_source(true), recs, tcfg.backbone.global_size,
                                                cfg.batch_size_eval, teacher_id);
  distill::save_teacher_logits(t, out);
  print_line("rows=" + std::to_string(t.rows()) + " dim=" + std::to_string(t.dim()));
  return 0;
}

int cmd_export_embeddings(const Globals& g, const std::string& ckpt, const std::string& out, bool student) {
  const RunConfig cfg = resolve(g);
  const auto recs = load_records(cfg);
  const bool prefer_teacher = !student && cfg.eval.use_teacher;
  if (ckpt.empty()) {
    // random-init baseline: the initial state a pretrain run with this config starts from
    const nets::Model model(cfg.backbone, cfg.head_config());
    const auto st = ssl::init_state(model, cfg);
    const auto e = eval::extract_embeddings(model.backbone(), st.teacher, recs, cfg.backbone.global_size,
                                            cfg.batch_size_eval);
    eval::save_embeddings(e, out);
    print_line("rows=" + std::to_string(e.rows()) + " dim=" + std::to_string(e.dim()));
    return 0;
  }
  const auto lb = load_backbone(ckpt, prefer_teacher);
  const auto e = eval::extract_embeddings(*lb.backbone, *lb.params, recs, lb.backbone->config().global_size,
                                          cfg.batch_size_eval);
  eval::save_embeddings(e, out);
  print_line("rows=" + std::to_string(e.rows()) + " dim=" + std::to_string(e.dim()));
  return 0;
}

int cmd_eval_knn(const Globals& g, const std::string& train, const std::string& test, std::optional<int> k,
                 const std::string& weighting) {
  const RunConfig cfg = resolve(g);
  eval::KNNConfig kc;
  kc.k = k.value_or(cfg.eval.k);
  kc.vote_temp = cfg.eval.vote_temp;
  kc.weighting = eval::parse_weighting(weighting.empty() ? cfg.eval.weighting : weighting);
  const auto r = eval::knn_accuracy(eval::load_embeddings(train), eval::load_embeddings(test), kc);
  std::printf("knn_acc=%.6f\n", r.accuracy);
  for (const auto& [label, acc] : r.per_class) std::printf("class_%d_acc=%.6f\n", label, acc);
  return 0;
}

int cmd_eval_linear(const Globals& g, const std::string& train, const std::string& test,
                    std::optional<double> fraction) {
  const RunConfig cfg = resolve(g);
  eval::LinearProbeConfig pc;
  pc.epochs = cfg.eval.probe_epochs;
  pc.lr = cfg.eval.probe_lr;
  pc.batch_size = cfg.eval.probe_batch_size;
  pc.data_fraction = fraction.value_or(cfg.eval.probe_fraction);
  pc.stratified = cfg.eval.probe_stratified;
  pc.seed = cfg.seed;
  const auto r = eval::linear_probe(eval::load_embeddings(train), eval::load_embeddings(test), pc);
  std::printf("linear_acc=%.6f\ntrain_acc=%.6f\ntrain_rows=%zu\n", r.test_accuracy, r.train_accuracy, r.train_rows);
  return 0;
}

int cmd_count_params(const Globals& g) {
  const RunConfig cfg = resolve(g);
  const nets::Model model(cfg.backbone, cfg.head_config());
  const std::int64_t bb = nets::count_backbone_params(cfg.backbone);
  std::int64_t total = 0;
  for (const auto& s : model.param_specs()) {
    std::int64_t n = 1;
    for (int d : s.shape) n *= d;
    total += n;
  }
  std::printf("params=%lld\nhead_params=%lld\n", static_cast<long long>(bb), static_cast<long long>(total - bb));
  return 0;
}

int cmd_inspect(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  std::printf("t=%lld\nepoch=%d\nseed=%llu\n", static_cast<long long>(ck.t), ck.epoch,
              static_cast<unsigned long long>(ck.seed));
  std::printf("student_entries=%zu student_values=%lld student_checksum=%08x\n", ck.student.size(),
              static_cast<long long>(count_params(ck.student)), checksum(ck.student));
  if (!ck.teacher.empty())
    std::printf("teacher_entries=%zu teacher_values=%lld teacher_checksum=%08x\n", ck.teacher.size(),
                static_cast<long long>(count_params(ck.teacher)), checksum(ck.teacher));
  std::printf("center_dim=%zu\n", ck.center.size());
  if (!ck.extra.empty()) std::printf("extra=%s\n", ck.extra.dump().c_str());
  std::printf("--- config\n%s", ck.config_text.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lowdino: self-distillation pretraining, offline distillation and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "config file (key = value lines)");
  app.add_option("--seed", g.seed, "overrides the config seed");
  app.add_option("--out-dir", g.out_dir, "run directory");
  app.add_option("--set", g.sets, "config override key=value, repeatable")->allow_extra_args(false);
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error")->capture_default_str();

  bool resume = false;
  auto* pre = app.add_subcommand("pretrain", "self-distillation pretraining");
  pre->add_flag("--resume", resume, "continue from the run directory's last checkpoint");

  std::string teacher, logits;
  auto* dis = app.add_subcommand("distill", "distil a frozen teacher into a smaller student");
  dis->add_option("--teacher", teacher, "teacher checkpoint");
  dis->add_option("--logits", logits, "precomputed teacher logits file");

  std::string ckpt, out, teacher_id;
  auto* exl = app.add_subcommand("export-logits", "write teacher logits for every record");
  exl->add_option("--checkpoint", ckpt, "teacher checkpoint")->required();
  exl->add_option("--out", out, "output file")->required();
  exl->add_option("--teacher-id", teacher_id, "identifier stored in the file");

  bool student = false;
  auto* exe = app.add_subcommand("export-embeddings", "write backbone embeddings for every record");
  exe->add_option("--checkpoint", ckpt, "checkpoint; omit for a random-init backbone");
  exe->add_option("--out", out, "output file")->required();
  exe->add_flag("--student", student, "use the student even when a teacher is stored");

  std::string train, test, weighting;
  std::optional<int> k;
  auto* knn = app.add_subcommand("eval-knn", "weighted k-NN accuracy");
  knn->add_option("--train", train, "training embeddings")->required();
  knn->add_option("--test", test, "test embeddings")->required();
  knn->add_option("--k", k, "neighbours");
  knn->add_option("--weighting", weighting, "temperature|uniform");

  std::optional<double> fraction;
  auto* lin = app.add_subcommand("eval-linear", "linear probe on frozen embeddings");
  lin->add_option("--train", train, "training embeddings")->required();
  lin->add_option("--test", test, "test embeddings")->required();
  lin->add_option("--fraction", fraction, "fraction of labelled training rows");

  auto* cnt = app.add_subcommand("count-params", "backbone and head parameter counts");

  std::string inspect_path;
  auto* ins = app.add_subcommand("inspect-checkpoint", "summarise a checkpoint");
  ins->add_option("path", inspect_path, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    spdlog::set_level(spdlog::level::from_str(g.log_level));
    if (pre->parsed()) return cmd_pretrain(g, resume);
    if (dis->parsed()) return cmd_distill(g, teacher, logits);
    if (exl->parsed()) return cmd_export_logits(g, ckpt, out, teacher_id);
    if (exe->parsed()) return cmd_export_embeddings(g, ckpt, out, student);
    if (knn->parsed()) return cmd_eval_knn(g, train, test, k, weighting);
    if (lin->parsed()) return cmd_eval_linear(g, train, test, fraction);
    if (cnt->parsed()) return cmd_count_params(g);
    if (ins->parsed()) return cmd_inspect(inspect_path);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
