// SPDX-License-Identifier: Apache-2.0
#pragma once

// Low-parameter backbones (MobileViT-style and reduced ResNet) and the
// projection head. Networks are described by a layer plan built from the
// config; the same plan drives parameter declaration and the forward pass.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lowdino/autodiff.hpp"
#include "lowdino/parameter_set.hpp"

namespace lowdino::nets {

struct BackboneConfig {
  std::string family = "mobilevit-like";  // or "resnet-like"
  std::string preset = "desk";            // desk | paper | custom
  int stem = 16;
  std::vector<int> widths;
  std::vector<int> depths;
  std::vector<int> strides;
  // mobilevit-like only, one entry per stage. attn_dims[i] == 0 means the
  // stage has no MobileViT block; attn_layers[i] == 0 keeps the block's conv
  // path but runs no transformer layer.
  std::vector<int> attn_dims;
  std::vector<int> attn_layers;
  int heads = 2;
  int patch = 2;
  int expand = 2;
  int final_dim = 0;  // 1x1 conv before pooling, 0 = none
  int global_size = 64;
  int local_size = 32;
  double width_mult = 1.0;

  bool operator==(const BackboneConfig&) const = default;

  /// Named presets: family in {mobilevit-like, resnet-like}, name in {desk, paper}.
  static BackboneConfig make_preset(const std::string& family, const std::string& name);
};

struct HeadConfig {
  int in_dim = 0;
  std::vector<int> hidden{512, 512};
  int bottleneck = 128;
  int out_dim = 1024;
  bool norm_last_layer = false;

  bool operator==(const HeadConfig&) const = default;
};

enum class Init { HeNormal, Zeros, Ones, HeadLast };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::HeNormal;
};

/// Draws every declared parameter from its initialiser.
ParameterSet init_params(const std::vector<ParamSpec>& specs, std::mt19937_64& rng);

/// Group count used by every group-norm layer for `channels` channels.
int norm_groups(int channels);

struct LayerSpec {
  enum class Kind { Stem, MV2, MobileViT, Basic, Final };
  Kind kind;
  std::string name;
  int in = 0;
  int out = 0;
  int stride = 1;
  int dim = 0;     // attention embedding dim
  int layers = 0;  // transformer layers
};

class Backbone {
 public:
  /// Validates the config, including patch divisibility at both declared
  /// input sizes. Throws std::invalid_argument on violation.
  explicit Backbone(BackboneConfig cfg);

  const BackboneConfig& config() const { return cfg_; }
  const std::vector<LayerSpec>& plan() const { return plan_; }
  /// Width of the pooled embedding.
  int embed_dim() const { return embed_dim_; }

  std::vector<ParamSpec> param_specs() const;

  /// [N, 3, S, S] -> [N, embed_dim]; any S that passed construction checks.
  template <typename T>
  ad::Var<T> forward(const Binding<T>& p, ad::Var<T> x) const;

  /// Feature-map side after the layer at `index` for input side `side`.
  int side_after(std::size_t index, int side) const;

 private:
  BackboneConfig cfg_;
  std::vector<LayerSpec> plan_;
  int embed_dim_ = 0;
};

class Head {
 public:
  explicit Head(HeadConfig cfg);
  const HeadConfig& config() const { return cfg_; }
  std::vector<ParamSpec> param_specs() const;

  /// Embedding batch [N, in_dim] -> logits [N, out_dim]. Throws naming the
  /// first row containing a non-finite value.
  template <typename T>
  ad::Var<T> forward(const Binding<T>& p, ad::Var<T> z) const;

  /// L2-normalised bottleneck features [N, bottleneck].
  template <typename T>
  ad::Var<T> bottleneck(const Binding<T>& p, ad::Var<T> z) const;

 private:
  HeadConfig cfg_;
};

/// Backbone + head, parameters prefixed "backbone." and "head.".
class Model {
 public:
  Model(BackboneConfig backbone, HeadConfig head);

  const Backbone& backbone() const { return backbone_; }
  const Head& head() const { return head_; }
  std::vector<ParamSpec> param_specs() const;
  ParameterSet init(std::mt19937_64& rng) const { return init_params(param_specs(), rng); }

  template <typename T>
  ad::Var<T> embed(const Binding<T>& p, ad::Var<T> x) const {
    return backbone_.forward(p, x);
  }
  template <typename T>
  ad::Var<T> logits(const Binding<T>& p, ad::Var<T> x) const {
    return head_.forward(p, backbone_.forward(p, x));
  }

 private:
  Backbone backbone_;
  Head head_;
};

/// Parameters of a freshly built backbone, without allocating a model.
std::int64_t count_backbone_params(const BackboneConfig& cfg);

// Building blocks, exposed for unit tests. `prefix` is the parameter prefix.
template <typename T>
ad::Var<T> mv2_block(const Binding<T>& p, const std::string& prefix, ad::Var<T> x, int in, int out, int expand,
                     int stride);
std::vector<ParamSpec> mv2_specs(const std::string& prefix, int in, int out, int expand);

template <typename T>
ad::Var<T> mobilevit_block(const Binding<T>& p, const std::string& prefix, ad::Var<T> x, int channels, int dim,
                           int layers, int heads, int patch);
std::vector<ParamSpec> mobilevit_specs(const std::string& prefix, int channels, int dim, int layers);

}  // namespace lowdino::nets
