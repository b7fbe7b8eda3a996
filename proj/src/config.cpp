// SPDX-License-Identifier: Apache-2.0
#include "lowdino/config.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "lowdino/container.hpp"

namespace lowdino {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v, const char* what) {
  T out{};
  const auto s = trim(v);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) bad_value(key, v, what);
  return out;
}

int parse_int(const std::string& k, const std::string& v) { return parse_number<int>(k, v, "an integer"); }
double parse_double(const std::string& k, const std::string& v) { return parse_number<double>(k, v, "a number"); }

bool parse_bool(const std::string& k, const std::string& v) {
  std::string s = trim(v);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  bad_value(k, v, "a boolean");
}

std::vector<std::string> split_list(std::string v) {
  v = trim(v);
  if (!v.empty() && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::vector<int> parse_ints(const std::string& k, const std::string& v) {
  std::vector<int> out;
  for (const auto& s : split_list(v)) out.push_back(parse_int(k, s));
  return out;
}

data::Range parse_range(const std::string& k, const std::string& v) {
  const auto parts = split_list(v);
  if (parts.size() != 2) bad_value(k, v, "a pair 'lo,hi'");
  return {parse_double(k, parts[0]), parse_double(k, parts[1])};
}

std::string fmt_double(double d) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, d);
  return std::string(buf, ptr);
}
std::string fmt_bool(bool b) { return b ? "true" : "false"; }
std::string fmt_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}
std::string fmt_range(const data::Range& r) { return fmt_double(r.first) + "," + fmt_double(r.second); }

struct Key {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define LD_INT(key, field) \
  Key { key, [](const RunConfig& c) { return std::to_string(c.field); }, [](RunConfig& c, const std::string& v) { c.field = parse_int(key, v); } }
#define LD_DBL(key, field) \
  Key { key, [](const RunConfig& c) { return fmt_double(c.field); }, [](RunConfig& c, const std::string& v) { c.field = parse_double(key, v); } }
#define LD_BOOL(key, field) \
  Key { key, [](const RunConfig& c) { return fmt_bool(c.field); }, [](RunConfig& c, const std::string& v) { c.field = parse_bool(key, v); } }
#define LD_STR(key, field) \
  Key { key, [](const RunConfig& c) { return c.field; }, [](RunConfig& c, const std::string& v) { c.field = trim(v); } }
#define LD_INTS(key, field) \
  Key { key, [](const RunConfig& c) { return fmt_ints(c.field); }, [](RunConfig& c, const std::string& v) { c.field = parse_ints(key, v); } }
#define LD_RANGE(key, field) \
  Key { key, [](const RunConfig& c) { return fmt_range(c.field); }, [](RunConfig& c, const std::string& v) { c.field = parse_range(key, v); } }

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = {
      LD_INT("batch_size", batch_size),
      LD_INT("logging_freq", logging_freq),
      LD_INT("n_crops", n_crops),
      LD_INT("n_epochs", n_epochs),
      LD_INT("out_dim", out_dim),
      LD_STR("optim", optim),
      LD_DBL("clip_grad", clip_grad),
      LD_BOOL("norm_last_layer", norm_last_layer),
      LD_INT("batch_size_eval", batch_size_eval),
      LD_DBL("teacher_temp", teacher_temp),
      LD_DBL("student_temp", student_temp),
      Key{"device_ids", [](const RunConfig& c) { return "[" + fmt_ints(c.device_ids) + "]"; },
          [](RunConfig& c, const std::string& v) { c.device_ids = parse_ints("device_ids", v); }},
      LD_BOOL("pretrained", pretrained),
      LD_DBL("lr", lr),
      LD_DBL("min_lr", min_lr),
      LD_INT("warmup_epochs", warmup_epochs),
      LD_DBL("weight_decay", weight_decay),
      LD_DBL("weight_decay_end", weight_decay_end),
      LD_DBL("momentum_teacher", momentum_teacher),

      Key{"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
          [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v, "an unsigned integer"); }},
      LD_DBL("center_momentum", center_momentum),
      LD_STR("logging_unit", logging_unit),
      LD_INT("checkpoint_freq", checkpoint_freq),
      LD_STR("clip_mode", clip_mode),
      LD_DBL("sgd_momentum", sgd_momentum),
      LD_BOOL("eq2_verbatim", eq2_verbatim),
      LD_STR("pretrained_path", pretrained_path),
      LD_BOOL("pretrained_teacher", pretrained_teacher),

      LD_STR("backbone.family", backbone.family),
      LD_STR("backbone.preset", backbone.preset),
      LD_INT("backbone.stem", backbone.stem),
      LD_INTS("backbone.widths", backbone.widths),
      LD_INTS("backbone.depths", backbone.depths),
      LD_INTS("backbone.strides", backbone.strides),
      LD_INTS("backbone.attn_dims", backbone.attn_dims),
      LD_INTS("backbone.attn_layers", backbone.attn_layers),
      LD_INT("backbone.heads", backbone.heads),
      LD_INT("backbone.patch", backbone.patch),
      LD_INT("backbone.expand", backbone.expand),
      LD_INT("backbone.final_dim", backbone.final_dim),
      LD_DBL("backbone.width_mult", backbone.width_mult),
      LD_INTS("head.hidden", head_hidden),
      LD_INT("head.bottleneck", head_bottleneck),

      LD_RANGE("augment.global_scale", augment.global_scale),
      LD_RANGE("augment.local_scale", augment.local_scale),
      LD_RANGE("augment.aspect_ratio", augment.aspect_ratio),
      LD_INT("augment.global_size", augment.global_size),
      LD_INT("augment.local_size", augment.local_size),
      LD_DBL("augment.blur_p_global", augment.blur_p_global),
      LD_DBL("augment.blur_p_local", augment.blur_p_local),
      LD_RANGE("augment.blur_radius", augment.blur_radius),
      LD_DBL("augment.solarize_p_global", augment.solarize_p_global),
      LD_DBL("augment.solarize_threshold", augment.solarize_threshold),
      LD_DBL("augment.jitter_p", augment.jitter_p),
      LD_DBL("augment.jitter.brightness", augment.jitter.brightness),
      LD_DBL("augment.jitter.contrast", augment.jitter.contrast),
      LD_DBL("augment.jitter.saturation", augment.jitter.saturation),
      LD_DBL("augment.jitter.hue", augment.jitter.hue),
      LD_DBL("augment.grayscale_p", augment.grayscale_p),
      LD_DBL("augment.hflip_p", augment.hflip_p),
      LD_DBL("augment.vflip_p", augment.vflip_p),

      LD_STR("data.kind", data.kind),
      LD_STR("data.root", data.root),
      LD_INT("data.class_count", data.class_count),
      Key{"data.seed", [](const RunConfig& c) { return std::to_string(c.data.seed); },
          [](RunConfig& c, const std::string& v) {
            c.data.seed = parse_number<std::uint64_t>("data.seed", v, "an unsigned integer");
          }},
      LD_INT("data.n", data.n),
      LD_DBL("data.noise", data.noise),
      LD_INT("data.image_size", data.image_size),

      LD_DBL("distill.alpha", distill.alpha),
      LD_DBL("distill.temp", distill.temp),
      LD_BOOL("distill.scale_kl_by_T2", distill.scale_kl_by_T2),
      LD_BOOL("distill.match_dim", distill.match_dim),
      LD_STR("distill.teacher_source", distill.teacher_source),
      LD_STR("distill.teacher_path", distill.teacher_path),
      LD_STR("distill.logits_path", distill.logits_path),
      LD_BOOL("distill.augmented", distill.augmented),
      LD_INT("distill.epochs", distill.epochs),
      LD_DBL("distill.lr", distill.lr),
      LD_DBL("distill.min_lr", distill.min_lr),
      LD_DBL("distill.weight_decay", distill.weight_decay),
      LD_DBL("distill.student_width_mult", distill.student_width_mult),
      LD_INT("distill.student_out_dim", distill.student_out_dim),

      LD_INT("eval.k", eval.k),
      LD_DBL("eval.vote_temp", eval.vote_temp),
      LD_STR("eval.weighting", eval.weighting),
      LD_BOOL("eval.use_teacher", eval.use_teacher),
      LD_INT("eval.probe_epochs", eval.probe_epochs),
      LD_DBL("eval.probe_lr", eval.probe_lr),
      LD_INT("eval.probe_batch_size", eval.probe_batch_size),
      LD_DBL("eval.probe_fraction", eval.probe_fraction),
      LD_BOOL("eval.probe_stratified", eval.probe_stratified),
  };
  return keys;
}

#undef LD_INT
#undef LD_DBL
#undef LD_BOOL
#undef LD_STR
#undef LD_INTS
#undef LD_RANGE

std::size_t levenshtein(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

void require(bool ok, const std::string& key, const std::string& constraint) {
  if (!ok) throw ConfigError("invalid config: " + key + " " + constraint);
}

bool is_prob(double p) { return p >= 0 && p <= 1; }

}  // namespace

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& k : registry()) out.push_back(k.name);
  return out;
}

std::string nearest_key(const std::string& key) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& k : registry()) {
    const auto d = levenshtein(key, k.name);
    if (d < best_d) best_d = d, best = k.name;
  }
  return best;
}

std::pair<std::string, std::string> split_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not of the form key=value");
  return {trim(kv.substr(0, eq)), trim(kv.substr(eq + 1))};
}

nets::HeadConfig RunConfig::head_config() const {
  nets::HeadConfig h;
  h.hidden = head_hidden;
  h.bottleneck = head_bottleneck;
  h.out_dim = out_dim;
  h.norm_last_layer = norm_last_layer;
  return h;
}

data::AugmentConfig RunConfig::augment_config() const {
  data::AugmentConfig a = augment;
  a.n_crops = n_crops;
  return a;
}

void RunConfig::validate() const {
  require(teacher_temp > 0 && teacher_temp < student_temp, "teacher_temp/student_temp",
          "must satisfy 0 < teacher_temp < student_temp (got " + fmt_double(teacher_temp) + " and " +
              fmt_double(student_temp) + ")");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(logging_freq >= 1, "logging_freq", "must be >= 1");
  require(n_crops >= 2, "n_crops", "must be >= 2");
  require(n_epochs >= 1, "n_epochs", "must be >= 1");
  require(out_dim >= 2, "out_dim", "must be >= 2");
  require(optim == "SGD", "optim", "must be SGD (the only optimizer implemented)");
  require(clip_grad > 0, "clip_grad", "must be > 0");
  require(batch_size_eval >= 1, "batch_size_eval", "must be >= 1");
  require(min_lr >= 0 && min_lr <= lr, "min_lr", "must satisfy 0 <= min_lr <= lr");
  require(warmup_epochs >= 0 && warmup_epochs < n_epochs, "warmup_epochs", "must satisfy 0 <= warmup_epochs < n_epochs");
  require(weight_decay >= 0 && weight_decay_end >= 0, "weight_decay", "must be non-negative");
  require(is_prob(momentum_teacher), "momentum_teacher", "must be in [0,1]");
  require(center_momentum > 0 && center_momentum < 1, "center_momentum", "must be in (0,1)");
  require(logging_unit == "epoch" || logging_unit == "iteration", "logging_unit", "must be 'epoch' or 'iteration'");
  require(checkpoint_freq >= 0, "checkpoint_freq", "must be >= 0");
  require(clip_mode == "norm" || clip_mode == "element", "clip_mode", "must be 'norm' or 'element'");
  require(sgd_momentum >= 0 && sgd_momentum < 1, "sgd_momentum", "must be in [0,1)");
  require(!pretrained || !pretrained_path.empty(), "pretrained", "requires pretrained_path");
  require(!pretrained_teacher || !pretrained_path.empty(), "pretrained_teacher", "requires pretrained_path");
  require(head_bottleneck >= 1, "head.bottleneck", "must be >= 1");
  for (int h : head_hidden) require(h >= 1, "head.hidden", "entries must be >= 1");
  try {
    augment_config().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid config: augment: ") + e.what());
  }
  require(backbone.global_size == augment.global_size && backbone.local_size == augment.local_size,
          "augment.global_size/local_size", "must match the backbone input sizes");
  try {
    nets::Backbone check(backbone);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid config: backbone: ") + e.what());
  }
  require(data.kind == "synthetic-blobs" || data.kind == "image-folder" || data.kind == "cifar-binary", "data.kind",
          "must be one of synthetic-blobs, image-folder, cifar-binary");
  require(data.class_count >= 1, "data.class_count", "must be >= 1");
  require(distill.alpha >= 0 && distill.alpha <= 1, "distill.alpha", "must be in [0,1]");
  require(distill.temp > 0, "distill.temp", "must be > 0");
  require(distill.teacher_source == "checkpoint" || distill.teacher_source == "logits-file",
          "distill.teacher_source", "must be 'checkpoint' or 'logits-file'");
  require(!(distill.augmented && distill.teacher_source == "logits-file"), "distill.augmented",
          "needs teacher_source=checkpoint (precomputed logits cover canonical views only)");
  require(distill.epochs >= 1, "distill.epochs", "must be >= 1");
  require(distill.min_lr >= 0 && distill.min_lr <= distill.lr, "distill.min_lr", "must satisfy 0 <= min_lr <= lr");
  require(distill.student_width_mult > 0, "distill.student_width_mult", "must be > 0");
  require(distill.student_out_dim >= 0, "distill.student_out_dim", "must be >= 0");
  require(eval.k >= 1, "eval.k", "must be >= 1");
  require(eval.vote_temp > 0, "eval.vote_temp", "must be > 0");
  require(eval.weighting == "temperature" || eval.weighting == "uniform", "eval.weighting",
          "must be 'temperature' or 'uniform'");
  require(eval.probe_epochs >= 1, "eval.probe_epochs", "must be >= 1");
  require(eval.probe_lr > 0, "eval.probe_lr", "must be > 0");
  require(eval.probe_batch_size >= 1, "eval.probe_batch_size", "must be >= 1");
  require(eval.probe_fraction > 0 && eval.probe_fraction <= 1, "eval.probe_fraction", "must be in (0,1]");
}

RunConfig parse_config(const std::string& text, const Overrides& overrides) {
  std::map<std::string, const Key*> by_name;
  for (const auto& k : registry()) by_name[k.name] = &k;

  std::map<std::string, std::string> raw;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value, got '" + trim(line) + "'");
    raw[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  for (const auto& [k, v] : overrides) raw[k] = v;
  for (const auto& [k, v] : raw)
    if (!by_name.count(k)) throw ConfigError("unknown config key '" + k + "' (did you mean '" + nearest_key(k) + "'?)");
  if (raw.count("device_ids") && parse_ints("device_ids", raw["device_ids"]) != std::vector<int>{0})
    spdlog::warn("device_ids is accepted and ignored: training runs on one CPU device");

  RunConfig cfg;
  const std::string family = raw.count("backbone.family") ? raw["backbone.family"] : cfg.backbone.family;
  const std::string preset = raw.count("backbone.preset") ? raw["backbone.preset"] : cfg.backbone.preset;
  try {
    cfg.backbone = nets::BackboneConfig::make_preset(family, preset == "custom" ? "desk" : preset);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid config: backbone.preset: ") + e.what());
  }
  cfg.backbone.preset = preset;
  // crop sizes follow the backbone preset unless given explicitly
  cfg.augment.global_size = cfg.backbone.global_size;
  cfg.augment.local_size = cfg.backbone.local_size;

  for (const auto& k : registry())
    if (auto it = raw.find(k.name); it != raw.end()) k.set(cfg, it->second);
  cfg.backbone.global_size = cfg.augment.global_size;
  cfg.backbone.local_size = cfg.augment.local_size;
  cfg.augment.n_crops = cfg.n_crops;
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path, const Overrides& overrides) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_config(read_file(path), overrides);
}

std::string echo_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : registry()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace lowdino
