// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: flat `key = value` text with dotted sections. The
// top-level keys keep the hyper-parameter table's spellings.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lowdino/datapipe.hpp"
#include "lowdino/nets.hpp"

namespace lowdino {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DistillSettings {
  double alpha = 1.0;
  double temp = 2.0;
  bool scale_kl_by_T2 = true;
  bool match_dim = false;
  std::string teacher_source = "checkpoint";  // checkpoint | logits-file
  std::string teacher_path;
  std::string logits_path;
  bool augmented = false;  // recompute teacher logits on augmented views
  int epochs = 20;
  double lr = 0.05;
  double min_lr = 1e-4;
  double weight_decay = 0.0;
  double student_width_mult = 0.5;
  int student_out_dim = 0;  // 0 = teacher's K

  bool operator==(const DistillSettings&) const = default;
};

struct EvalSettings {
  int k = 20;
  double vote_temp = 0.07;
  std::string weighting = "temperature";  // temperature | uniform
  bool use_teacher = true;
  int probe_epochs = 30;
  double probe_lr = 0.01;
  int probe_batch_size = 64;
  double probe_fraction = 1.0;
  bool probe_stratified = true;

  bool operator==(const EvalSettings&) const = default;
};

struct RunConfig {
  int batch_size = 64;
  int logging_freq = 1;
  int n_crops = 4;
  int n_epochs = 100;
  int out_dim = 1024;
  std::string optim = "SGD";
  double clip_grad = 2.0;
  bool norm_last_layer = false;
  int batch_size_eval = 8;
  double teacher_temp = 0.04;
  double student_temp = 0.1;
  std::vector<int> device_ids{0};
  bool pretrained = false;
  double lr = 0.0005;
  double min_lr = 1e-6;
  int warmup_epochs = 10;
  double weight_decay = 0.04;
  double weight_decay_end = 0.4;
  double momentum_teacher = 0.9995;

  std::uint64_t seed = 0;
  double center_momentum = 0.9;
  std::string logging_unit = "epoch";  // epoch | iteration
  int checkpoint_freq = 0;             // epochs between checkpoints, 0 = final only
  std::string clip_mode = "norm";      // norm | element
  double sgd_momentum = 0.9;
  bool eq2_verbatim = false;
  std::string pretrained_path;
  bool pretrained_teacher = false;

  nets::BackboneConfig backbone = nets::BackboneConfig::make_preset("mobilevit-like", "desk");
  std::vector<int> head_hidden{512, 512};
  int head_bottleneck = 128;
  data::AugmentConfig augment;
  data::DatasetSource data;
  DistillSettings distill;
  EvalSettings eval;

  bool operator==(const RunConfig&) const = default;

  /// Throws ConfigError naming the key and the violated constraint.
  void validate() const;

  nets::HeadConfig head_config() const;
  data::AugmentConfig augment_config() const;
};

using Overrides = std::vector<std::pair<std::string, std::string>>;

/// Parses config text, then applies overrides in order. Unknown keys are
/// rejected with the closest known key. The result is validated.
RunConfig parse_config(const std::string& text, const Overrides& overrides = {});
RunConfig load_config(const std::filesystem::path& path, const Overrides& overrides = {});

/// Fully resolved config, one `key = value` line per known key.
std::string echo_config(const RunConfig& cfg);

/// Splits "key=value".
std::pair<std::string, std::string> split_override(const std::string& kv);

std::vector<std::string> known_keys();
std::string nearest_key(const std::string& key);

}  // namespace lowdino
