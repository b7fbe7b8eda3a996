#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lowdino/nets.hpp"

using namespace lowdino;
using namespace lowdino::nets;
using lowdino::testing::random_tensor;

namespace {

std::int64_t cna(std::int64_t in, std::int64_t out, std::int64_t k) { return in * out * k * k + 2 * out; }
std::int64_t dw(std::int64_t c, std::int64_t k) { return c * k * k + 2 * c; }
std::int64_t mv2(std::int64_t in, std::int64_t out, std::int64_t e) {
  return cna(in, in * e, 1) + dw(in * e, 3) + cna(in * e, out, 1);
}
std::int64_t mvit(std::int64_t c, std::int64_t d, std::int64_t layers) {
  const std::int64_t layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (2 * d * d + 2 * d) + (2 * d * d + d);
  return cna(c, c, 3) + d * c + layers * layer + (layers > 0 ? 2 * d : 0) + cna(d, c, 1) + cna(2 * c, c, 3);
}
std::int64_t basic(std::int64_t in, std::int64_t out, int stride) {
  return cna(in, out, 3) + cna(out, out, 3) + (stride != 1 || in != out ? cna(in, out, 1) : 0);
}

BackboneConfig tiny_mvit() {
  BackboneConfig c;
  c.family = "mobilevit-like";
  c.preset = "custom";
  c.stem = 4;
  c.widths = {4};
  c.depths = {1};
  c.strides = {1};
  c.attn_dims = {4};
  c.attn_layers = {1};
  c.heads = 2;
  c.patch = 2;
  c.expand = 2;
  c.final_dim = 0;
  c.global_size = 8;
  c.local_size = 4;
  return c;
}

Tensor<float> forward_embed(const Backbone& b, const ParameterSet& p, const Tensor<float>& x) {
  ad::Tape<float> tape(false);
  Binding<float> bind(tape, p, false);
  return b.forward(bind, tape.leaf(x)).value();
}

}  // namespace

TEST_CASE("count_params") {
  CHECK(count_params(ParameterSet{}) == 0);
  ParameterSet p;
  p.add("conv.w", Tensor<float>({16, 8, 3, 3}));
  p.add("conv.b", Tensor<float>({16}));
  CHECK(count_params(p) == 1168);
}

TEST_CASE("desk mobilevit count matches a closed-form sum of layer shapes") {
  const auto cfg = BackboneConfig::make_preset("mobilevit-like", "desk");
  const std::int64_t expected = cna(3, 16, 3) + mv2(16, 24, 2) + mv2(24, 48, 2) + mvit(48, 48, 2) + mv2(48, 64, 2) +
                                cna(64, 128, 1);
  CHECK(count_backbone_params(cfg) == expected);
  CHECK(expected >= 30'000);
  CHECK(expected <= 300'000);
  std::mt19937_64 rng(1);
  const Model model(cfg, HeadConfig{});
  CHECK(count_params(model.init(rng).slice("backbone.")) == expected);
}

TEST_CASE("desk resnet count matches a closed-form sum") {
  const auto cfg = BackboneConfig::make_preset("resnet-like", "desk");
  const std::int64_t expected = cna(3, 16, 3) + basic(16, 16, 1) + basic(16, 32, 2) + basic(32, 64, 2);
  CHECK(count_backbone_params(cfg) == expected);
}

TEST_CASE("paper presets land near the published sizes") {
  const double mv = static_cast<double>(count_backbone_params(BackboneConfig::make_preset("mobilevit-like", "paper")));
  const double rn = static_cast<double>(count_backbone_params(BackboneConfig::make_preset("resnet-like", "paper")));
  CHECK(std::abs(mv - 5.5e6) <= 0.1 * 5.5e6);
  CHECK(std::abs(rn - 4.9e6) <= 0.1 * 4.9e6);
}

TEST_CASE("mv2 block") {
  std::mt19937_64 rng(3);
  SUBCASE("zero weights reduce to the skip path") {
    auto specs = mv2_specs("b", 8, 8, 2);
    ParameterSet p;
    for (const auto& s : specs) p.add(s.name, Tensor<float>(s.shape));
    const auto x = random_tensor({2, 8, 6, 6}, rng).cast<float>();
    ad::Tape<float> tape(false);
    Binding<float> bind(tape, p, false);
    CHECK(mv2_block(bind, "b", tape.leaf(x), 8, 8, 2, 1).value() == x);
  }
  SUBCASE("stride 2 halves the side") {
    auto p = init_params(mv2_specs("b", 4, 6, 2), rng);
    ad::Tape<float> tape(false);
    Binding<float> bind(tape, p, false);
    const auto y = mv2_block(bind, "b", tape.leaf(Tensor<float>({1, 4, 32, 32}, 0.3f)), 4, 6, 2, 2);
    CHECK(y.shape() == Shape{1, 6, 16, 16});
  }
  SUBCASE("expansion width") {
    for (const auto& s : mv2_specs("b", 5, 7, 2))
      if (s.name == "b.expand.conv.w") CHECK(s.shape == Shape{10, 5, 1, 1});
  }
}

TEST_CASE("mobilevit block") {
  std::mt19937_64 rng(4);
  SUBCASE("output side equals input side") {
    auto p = init_params(mobilevit_specs("m", 6, 8, 2), rng);
    ad::Tape<float> tape(false);
    Binding<float> bind(tape, p, false);
    const auto y = mobilevit_block(bind, "m", tape.leaf(random_tensor({2, 6, 8, 8}, rng).cast<float>()), 6, 8, 2, 2, 2);
    CHECK(y.shape() == Shape{2, 6, 8, 8});
  }
  SUBCASE("L = 0 keeps only convolution and norm parameters") {
    const auto specs = mobilevit_specs("m", 6, 8, 0);
    for (const auto& s : specs) {
      INFO(s.name);
      CHECK(s.name.find(".tf") == std::string::npos);
      CHECK((s.name.find(".conv.") != std::string::npos || s.name.find(".norm.") != std::string::npos ||
             s.name == "m.in_proj.w"));
    }
    auto p = init_params(specs, rng);
    ad::Tape<float> tape(false);
    Binding<float> bind(tape, p, false);
    const auto y = mobilevit_block(bind, "m", tape.leaf(random_tensor({1, 6, 4, 4}, rng).cast<float>()), 6, 8, 0, 2, 2);
    CHECK(y.shape() == Shape{1, 6, 4, 4});
  }
}

TEST_CASE("backbone handles both crop sizes and rejects bad patch sizes") {
  const auto cfg = BackboneConfig::make_preset("mobilevit-like", "desk");
  const Model model(cfg, HeadConfig{});
  std::mt19937_64 rng(5);
  const auto p = model.init(rng);
  CHECK(forward_embed(model.backbone(), p, Tensor<float>({2, 3, 64, 64}, 0.5f)).shape() == Shape{2, 128});
  CHECK(forward_embed(model.backbone(), p, Tensor<float>({3, 3, 32, 32}, 0.5f)).shape() == Shape{3, 128});

  auto bad = cfg;
  bad.local_size = 20;  // 20 -> 10 -> 5 at the attention stage, patch 2
  CHECK_THROWS_WITH_AS(Backbone{bad}, doctest::Contains("patch size 2"), std::invalid_argument);
  auto bad2 = cfg;
  bad2.widths = {24, 0, 64};
  CHECK_THROWS_AS(Backbone{bad2}, std::invalid_argument);
}

TEST_CASE("forward is deterministic") {
  const Model model(BackboneConfig::make_preset("resnet-like", "desk"), HeadConfig{});
  std::mt19937_64 rng(6);
  const auto p = model.init(rng);
  const auto x = random_tensor({2, 3, 32, 32}, rng).cast<float>();
  CHECK(forward_embed(model.backbone(), p, x) == forward_embed(model.backbone(), p, x));
}

TEST_CASE("whole-network gradients match finite differences on a small net") {
  const auto cfg = tiny_mvit();
  HeadConfig hc;
  hc.hidden = {3};
  hc.bottleneck = 3;
  hc.out_dim = 3;
  const Model model(cfg, hc);
  std::mt19937_64 rng(7);
  const auto pf = model.init(rng);
  REQUIRE(count_params(pf) <= 1000);
  auto p = pf.cast<double>();
  for (auto& [name, t] : p)  // move norm gains away from 1 and biases from 0 so every path is exercised
    for (auto& v : t.vec()) v += 0.1 * std::normal_distribution<double>()(rng);
  const auto x = random_tensor({2, 3, 8, 8}, rng);
  const auto proj = random_tensor({2, 3}, rng);

  auto objective = [&](const BasicParameterSet<double>& params) {
    ad::Tape<double> tape(false);
    Binding<double> bind(tape, params, false);
    const auto y = model.logits(bind, tape.leaf(x)).value();
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * proj[i];
    return s;
  };

  ad::Tape<double> tape(true);
  Binding<double> bind(tape, p, true);
  const auto y = model.logits(bind, tape.leaf(x));
  tape.backward(y, proj);
  const auto grads = bind.gradients();

  double diff2 = 0, norm2 = 0;
  constexpr double eps = 1e-3;
  for (auto& [name, t] : p) {
    const auto& g = grads.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + eps;
      const double fp = objective(p);
      t[i] = orig - eps;
      const double fm = objective(p);
      t[i] = orig;
      const double num = (fp - fm) / (2 * eps);
      diff2 += (num - g[i]) * (num - g[i]);
      norm2 += num * num;
    }
  }
  CHECK(std::sqrt(diff2 / norm2) < 1e-4);
}

TEST_CASE("head") {
  HeadConfig hc;
  hc.in_dim = 16;
  const Head head(hc);
  std::mt19937_64 rng(8);
  auto p = init_params(head.param_specs(), rng);
  const auto z = random_tensor({4, 16}, rng).cast<float>();

  ad::Tape<float> tape(false);
  Binding<float> bind(tape, p, false);
  const auto logits = head.forward(bind, tape.leaf(z));
  CHECK(logits.shape() == Shape{4, 1024});
  const auto bn = head.bottleneck(bind, tape.leaf(z)).value();
  for (int r = 0; r < 4; ++r) {
    double n = 0;
    for (int k = 0; k < 128; ++k) n += bn[r * 128 + k] * bn[r * 128 + k];
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-5));
  }

  auto zeroed = p;
  zeroed.at("head.last.w").fill(0.0f);
  Binding<float> zb(tape, zeroed, false);
  for (float v : head.forward(zb, tape.leaf(z)).value().vec()) CHECK(v == 0.0f);

  auto bad = z;
  bad[2 * 16 + 3] = std::nanf("");
  CHECK_THROWS_WITH(head.forward(bind, tape.leaf(bad)), doctest::Contains("row 2"));

  HeadConfig normed = hc;
  normed.norm_last_layer = true;
  const Head nh(normed);
  auto scaled = p;
  for (auto& v : scaled.at("head.last.w").vec()) v *= 50.0f;
  Binding<float> nb(tape, scaled, false);
  const auto nl = nh.forward(nb, tape.leaf(z)).value();
  for (float v : nl.vec()) CHECK(std::abs(v) <= 1.0f + 1e-5f);
}
