// SPDX-License-Identifier: Apache-2.0
#include "lowdino/nets.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lowdino::nets {

namespace {

using ad::Var;

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument("backbone config: " + msg);
}

int scaled(int c, double mult, int multiple) {
  if (mult == 1.0) return c;
  const int v = static_cast<int>(std::lround(c * mult / multiple)) * multiple;
  return std::max(multiple, v);
}

// ---- conv + group norm (+ SiLU) ------------------------------------------

void conv_norm_specs(std::vector<ParamSpec>& out, const std::string& p, int in, int co, int k, bool depthwise) {
  out.push_back({p + ".conv.w", {co, depthwise ? 1 : in, k, k}, Init::HeNormal});
  out.push_back({p + ".norm.g", {co}, Init::Ones});
  out.push_back({p + ".norm.b", {co}, Init::Zeros});
}

template <typename T>
Var<T> conv_norm(const Binding<T>& p, const std::string& name, Var<T> x, int stride, bool depthwise, bool act) {
  const Var<T> w = p(name + ".conv.w");
  const int k = w.value().dim(2);
  Var<T> y = depthwise ? ad::depthwise_conv2d<T>(x, w, std::nullopt, stride, k / 2)
                       : ad::conv2d<T>(x, w, std::nullopt, stride, k / 2);
  y = ad::group_norm(y, p(name + ".norm.g"), p(name + ".norm.b"), norm_groups(w.value().dim(0)));
  return act ? ad::silu(y) : y;
}

void basic_specs(std::vector<ParamSpec>& out, const std::string& p, int in, int co, int stride) {
  conv_norm_specs(out, p + ".conv1", in, co, 3, false);
  conv_norm_specs(out, p + ".conv2", co, co, 3, false);
  if (stride != 1 || in != co) conv_norm_specs(out, p + ".down", in, co, 1, false);
}

template <typename T>
Var<T> basic_block(const Binding<T>& p, const std::string& name, Var<T> x, int in, int co, int stride) {
  Var<T> y = conv_norm(p, name + ".conv1", x, stride, false, true);
  y = conv_norm(p, name + ".conv2", y, 1, false, false);
  const Var<T> skip = (stride != 1 || in != co) ? conv_norm(p, name + ".down", x, stride, false, false) : x;
  return ad::silu(ad::add(y, skip));
}

void linear_specs(std::vector<ParamSpec>& out, const std::string& p, int in, int co, bool bias = true) {
  out.push_back({p + ".w", {co, in}, Init::HeNormal});
  if (bias) out.push_back({p + ".b", {co}, Init::Zeros});
}

void norm_specs(std::vector<ParamSpec>& out, const std::string& p, int d) {
  out.push_back({p + ".g", {d}, Init::Ones});
  out.push_back({p + ".b", {d}, Init::Zeros});
}

template <typename T>
Var<T> linear(const Binding<T>& p, const std::string& name, Var<T> x) {
  return ad::linear<T>(x, p(name + ".w"), p(name + ".b"));
}

template <typename T>
void check_finite_rows(const Tensor<T>& z) {
  const std::size_t cols = static_cast<std::size_t>(z.dim(-1));
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!std::isfinite(z[i]))
      throw std::runtime_error("head input has a non-finite value in batch row " + std::to_string(i / cols));
  }
}

}  // namespace

int norm_groups(int channels) {
  for (int g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

ParameterSet init_params(const std::vector<ParamSpec>& specs, std::mt19937_64& rng) {
  ParameterSet out;
  for (const auto& s : specs) {
    Tensor<float> t(s.shape);
    switch (s.init) {
      case Init::Zeros:
        break;
      case Init::Ones:
        t.fill(1.0f);
        break;
      case Init::HeNormal:
      case Init::HeadLast: {
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < s.shape.size(); ++i) fan_in *= static_cast<std::size_t>(s.shape[i]);
        double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        if (s.init == Init::HeadLast) sd *= 0.1;
        std::normal_distribution<double> nd(0.0, sd);
        for (auto& v : t.vec()) v = static_cast<float>(nd(rng));
        break;
      }
    }
    out.add(s.name, std::move(t));
  }
  return out;
}

// ---- blocks ----------------------------------------------------------------

std::vector<ParamSpec> mv2_specs(const std::string& prefix, int in, int out, int expand) {
  std::vector<ParamSpec> s;
  const int hidden = in * expand;
  conv_norm_specs(s, prefix + ".expand", in, hidden, 1, false);
  conv_norm_specs(s, prefix + ".dw", hidden, hidden, 3, true);
  conv_norm_specs(s, prefix + ".project", hidden, out, 1, false);
  return s;
}

template <typename T>
Var<T> mv2_block(const Binding<T>& p, const std::string& prefix, Var<T> x, int in, int out, int /*expand*/,
                 int stride) {
  if (x.value().dim(1) != in)
    throw std::invalid_argument(prefix + ": expected " + std::to_string(in) + " input channels, got " +
                                std::to_string(x.value().dim(1)));
  Var<T> y = conv_norm(p, prefix + ".expand", x, 1, false, true);
  y = conv_norm(p, prefix + ".dw", y, stride, true, true);
  y = conv_norm(p, prefix + ".project", y, 1, false, false);
  return (stride == 1 && in == out) ? ad::add(x, y) : y;
}

std::vector<ParamSpec> mobilevit_specs(const std::string& prefix, int channels, int dim, int layers) {
  std::vector<ParamSpec> s;
  conv_norm_specs(s, prefix + ".local", channels, channels, 3, false);
  s.push_back({prefix + ".in_proj.w", {dim, channels, 1, 1}, Init::HeNormal});
  for (int l = 0; l < layers; ++l) {
    const std::string t = prefix + ".tf" + std::to_string(l);
    norm_specs(s, t + ".ln1", dim);
    linear_specs(s, t + ".qkv", dim, 3 * dim);
    linear_specs(s, t + ".proj", dim, dim);
    norm_specs(s, t + ".ln2", dim);
    linear_specs(s, t + ".fc1", dim, 2 * dim);
    linear_specs(s, t + ".fc2", 2 * dim, dim);
  }
  if (layers > 0) norm_specs(s, prefix + ".ln", dim);
  conv_norm_specs(s, prefix + ".out_proj", dim, channels, 1, false);
  conv_norm_specs(s, prefix + ".fusion", 2 * channels, channels, 3, false);
  return s;
}

template <typename T>
Var<T> mobilevit_block(const Binding<T>& p, const std::string& prefix, Var<T> x, int /*channels*/, int /*dim*/,
                       int layers, int heads, int patch) {
  const int h = x.value().dim(2), w = x.value().dim(3);
  if (h % patch != 0 || w % patch != 0)
    throw std::invalid_argument(prefix + ": feature map " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by patch " + std::to_string(patch));
  Var<T> y = conv_norm(p, prefix + ".local", x, 1, false, true);
  y = ad::conv2d<T>(y, p(prefix + ".in_proj.w"), std::nullopt, 1, 0);
  Var<T> seq = ad::unfold_patches(y, patch);
  for (int l = 0; l < layers; ++l) {
    const std::string t = prefix + ".tf" + std::to_string(l);
    Var<T> a = ad::layer_norm(seq, p(t + ".ln1.g"), p(t + ".ln1.b"));
    a = linear(p, t + ".proj", ad::self_attention(linear(p, t + ".qkv", a), heads));
    seq = ad::add(seq, a);
    Var<T> m = ad::layer_norm(seq, p(t + ".ln2.g"), p(t + ".ln2.b"));
    m = linear(p, t + ".fc2", ad::gelu(linear(p, t + ".fc1", m)));
    seq = ad::add(seq, m);
  }
  if (layers > 0) seq = ad::layer_norm(seq, p(prefix + ".ln.g"), p(prefix + ".ln.b"));
  y = ad::fold_patches(seq, patch, h, w);
  y = conv_norm(p, prefix + ".out_proj", y, 1, false, true);
  const std::vector<Var<T>> both{x, y};
  return conv_norm(p, prefix + ".fusion", ad::concat<T>(both, 1), 1, false, true);
}

// ---- backbone ---------------------------------------------------------------

BackboneConfig BackboneConfig::make_preset(const std::string& family, const std::string& name) {
  BackboneConfig c;
  c.family = family;
  c.preset = name;
  if (family == "mobilevit-like" && name == "desk") {
    c.stem = 16;
    c.widths = {24, 48, 64};
    c.depths = {1, 1, 1};
    c.strides = {2, 2, 2};
    c.attn_dims = {0, 48, 0};
    c.attn_layers = {0, 2, 0};
    c.heads = 2;
    c.patch = 2;
    c.expand = 2;
    c.final_dim = 128;
    c.global_size = 64;
    c.local_size = 32;
  } else if (family == "mobilevit-like" && name == "paper") {
    c.stem = 16;
    c.widths = {32, 64, 96, 128, 160};
    c.depths = {1, 3, 1, 1, 1};
    c.strides = {1, 2, 2, 2, 2};
    c.attn_dims = {0, 0, 144, 192, 240};
    c.attn_layers = {0, 0, 2, 4, 4};
    c.heads = 4;
    c.patch = 2;
    c.expand = 4;
    c.final_dim = 640;
    c.global_size = 256;
    c.local_size = 128;
  } else if (family == "resnet-like" && name == "desk") {
    c.stem = 16;
    c.widths = {16, 32, 64};
    c.depths = {1, 1, 1};
    c.strides = {1, 2, 2};
    c.global_size = 64;
    c.local_size = 32;
  } else if (family == "resnet-like" && name == "paper") {
    c.stem = 32;
    c.widths = {40, 80, 168, 340};
    c.depths = {2, 2, 2, 2};
    c.strides = {1, 2, 2, 2};
    c.global_size = 224;
    c.local_size = 96;
  } else {
    throw std::invalid_argument("unknown backbone preset '" + name + "' for family '" + family + "'");
  }
  if (family == "resnet-like") {
    c.attn_dims.assign(c.widths.size(), 0);
    c.attn_layers.assign(c.widths.size(), 0);
    c.heads = 1;
    c.patch = 1;
    c.expand = 1;
  }
  return c;
}

Backbone::Backbone(BackboneConfig cfg) : cfg_(std::move(cfg)) {
  const bool mvit = cfg_.family == "mobilevit-like";
  check(mvit || cfg_.family == "resnet-like", "unknown family '" + cfg_.family + "'");
  const std::size_t n = cfg_.widths.size();
  check(n > 0, "at least one stage required");
  check(cfg_.depths.size() == n && cfg_.strides.size() == n, "widths, depths and strides must have equal length");
  check(cfg_.width_mult > 0, "width_mult must be positive");
  check(cfg_.stem > 0 && cfg_.global_size > 0 && cfg_.local_size > 0, "sizes must be positive");
  if (mvit) {
    check(cfg_.attn_dims.size() == n && cfg_.attn_layers.size() == n,
          "attn_dims and attn_layers need one entry per stage");
    check(cfg_.heads >= 1 && cfg_.patch >= 1 && cfg_.expand >= 1, "heads, patch and expand must be positive");
  }
  for (std::size_t i = 0; i < n; ++i) {
    check(cfg_.widths[i] > 0 && cfg_.depths[i] > 0, "widths and depths must be positive");
    check(cfg_.strides[i] == 1 || cfg_.strides[i] == 2, "strides must be 1 or 2");
  }

  const double m = cfg_.width_mult;
  const int stem = scaled(cfg_.stem, m, 4);
  plan_.push_back({LayerSpec::Kind::Stem, "backbone.stem", 3, stem, 2});
  int prev = stem;
  for (std::size_t i = 0; i < n; ++i) {
    const int w = scaled(cfg_.widths[i], m, 4);
    const std::string stage = "backbone.s" + std::to_string(i);
    for (int b = 0; b < cfg_.depths[i]; ++b) {
      const int stride = b == 0 ? cfg_.strides[i] : 1;
      plan_.push_back({mvit ? LayerSpec::Kind::MV2 : LayerSpec::Kind::Basic, stage + ".b" + std::to_string(b),
                       prev, w, stride});
      prev = w;
    }
    if (mvit && cfg_.attn_dims[i] > 0) {
      const int multiple = std::lcm(4, cfg_.heads);
      const int d = scaled(cfg_.attn_dims[i], m, multiple);
      check(d % cfg_.heads == 0, "attention dim must be divisible by heads");
      check(cfg_.attn_layers[i] >= 0, "attn_layers must be non-negative");
      plan_.push_back({LayerSpec::Kind::MobileViT, stage + ".mvit", w, w, 1, d, cfg_.attn_layers[i]});
    }
  }
  if (cfg_.final_dim > 0) {
    const int f = scaled(cfg_.final_dim, m, 4);
    plan_.push_back({LayerSpec::Kind::Final, "backbone.final", prev, f, 1});
    prev = f;
  }
  embed_dim_ = prev;

  // patch divisibility at both declared input sides
  for (int side0 : {cfg_.global_size, cfg_.local_size}) {
    int side = side0;
    for (std::size_t li = 0; li < plan_.size(); ++li) {
      if (plan_[li].kind == LayerSpec::Kind::MobileViT && side % cfg_.patch != 0)
        throw std::invalid_argument("backbone config: patch size " + std::to_string(cfg_.patch) +
                                    " does not divide the " + std::to_string(side) + "px feature map at " +
                                    plan_[li].name + " for input size " + std::to_string(side0));
      side = side_after(li, side);
      check(side >= 1, "input size " + std::to_string(side0) + " too small for the stride plan");
    }
  }
}

int Backbone::side_after(std::size_t index, int side) const {
  const int s = plan_.at(index).stride;
  return s == 1 ? side : (side + 1) / 2;
}

std::vector<ParamSpec> Backbone::param_specs() const {
  std::vector<ParamSpec> out;
  for (const auto& l : plan_) {
    switch (l.kind) {
      case LayerSpec::Kind::Stem:
        conv_norm_specs(out, l.name, l.in, l.out, 3, false);
        break;
      case LayerSpec::Kind::MV2: {
        auto s = mv2_specs(l.name, l.in, l.out, cfg_.expand);
        out.insert(out.end(), s.begin(), s.end());
        break;
      }
      case LayerSpec::Kind::MobileViT: {
        auto s = mobilevit_specs(l.name, l.in, l.dim, l.layers);
        out.insert(out.end(), s.begin(), s.end());
        break;
      }
      case LayerSpec::Kind::Basic:
        basic_specs(out, l.name, l.in, l.out, l.stride);
        break;
      case LayerSpec::Kind::Final:
        conv_norm_specs(out, l.name, l.in, l.out, 1, false);
        break;
    }
  }
  return out;
}

template <typename T>
Var<T> Backbone::forward(const Binding<T>& p, Var<T> x) const {
  if (x.value().rank() != 4 || x.value().dim(1) != 3)
    throw std::invalid_argument("backbone input must be [N, 3, S, S], got " + shape_str(x.shape()));
  for (const auto& l : plan_) {
    switch (l.kind) {
      case LayerSpec::Kind::Stem:
        x = conv_norm(p, l.name, x, l.stride, false, true);
        break;
      case LayerSpec::Kind::MV2:
        x = mv2_block(p, l.name, x, l.in, l.out, cfg_.expand, l.stride);
        break;
      case LayerSpec::Kind::MobileViT:
        x = mobilevit_block(p, l.name, x, l.in, l.dim, l.layers, cfg_.heads, cfg_.patch);
        break;
      case LayerSpec::Kind::Basic:
        x = basic_block(p, l.name, x, l.in, l.out, l.stride);
        break;
      case LayerSpec::Kind::Final:
        x = conv_norm(p, l.name, x, 1, false, true);
        break;
    }
  }
  return ad::global_avg_pool(x);
}

std::int64_t count_backbone_params(const BackboneConfig& cfg) {
  std::int64_t n = 0;
  for (const auto& s : Backbone(cfg).param_specs()) n += static_cast<std::int64_t>(numel(s.shape));
  return n;
}

// ---- head ---------------------------------------------------------------------

Head::Head(HeadConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.out_dim < 2) throw std::invalid_argument("head config: out_dim must be >= 2");
  if (cfg_.in_dim < 1 || cfg_.bottleneck < 1) throw std::invalid_argument("head config: dims must be positive");
  for (int h : cfg_.hidden)
    if (h < 1) throw std::invalid_argument("head config: hidden dims must be positive");
}

std::vector<ParamSpec> Head::param_specs() const {
  std::vector<ParamSpec> out;
  int prev = cfg_.in_dim;
  for (std::size_t i = 0; i < cfg_.hidden.size(); ++i) {
    linear_specs(out, "head.mlp" + std::to_string(i), prev, cfg_.hidden[i]);
    prev = cfg_.hidden[i];
  }
  linear_specs(out, "head.bottleneck", prev, cfg_.bottleneck);
  out.push_back({"head.last.w", {cfg_.out_dim, cfg_.bottleneck}, Init::HeadLast});
  return out;
}

template <typename T>
Var<T> Head::bottleneck(const Binding<T>& p, Var<T> z) const {
  check_finite_rows(z.value());
  if (z.value().dim(-1) != cfg_.in_dim)
    throw std::invalid_argument("head expects " + std::to_string(cfg_.in_dim) + " input features, got " +
                                shape_str(z.shape()));
  for (std::size_t i = 0; i < cfg_.hidden.size(); ++i) z = ad::gelu(linear(p, "head.mlp" + std::to_string(i), z));
  return ad::l2_normalize(linear(p, "head.bottleneck", z));
}

template <typename T>
Var<T> Head::forward(const Binding<T>& p, Var<T> z) const {
  Var<T> w = p("head.last.w");
  if (cfg_.norm_last_layer) w = ad::l2_normalize(w);
  return ad::linear<T>(bottleneck(p, z), w, std::nullopt);
}

Model::Model(BackboneConfig backbone, HeadConfig head) : backbone_(std::move(backbone)), head_([&] {
  head.in_dim = backbone_.embed_dim();
  return head;
}()) {}

std::vector<ParamSpec> Model::param_specs() const {
  auto s = backbone_.param_specs();
  auto h = head_.param_specs();
  s.insert(s.end(), h.begin(), h.end());
  return s;
}

#define LOWDINO_INSTANTIATE_NETS(T)                                                                         \
  template Var<T> Backbone::forward(const Binding<T>&, Var<T>) const;                                       \
  template Var<T> Head::forward(const Binding<T>&, Var<T>) const;                                           \
  template Var<T> Head::bottleneck(const Binding<T>&, Var<T>) const;                                        \
  template Var<T> mv2_block(const Binding<T>&, const std::string&, Var<T>, int, int, int, int);             \
  template Var<T> mobilevit_block(const Binding<T>&, const std::string&, Var<T>, int, int, int, int, int);

LOWDINO_INSTANTIATE_NETS(float)
LOWDINO_INSTANTIATE_NETS(double)

}  // namespace lowdino::nets
