#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "doctest.h"
#include "lowdino/schedules.hpp"

using namespace lowdino;
using namespace lowdino::sched;

TEST_CASE("cosine schedule endpoints and midpoint") {
  CosineSchedule s{.eta_min = 1e-6, .eta_max = 5e-4, .T_c = 1000, .warmup_iters = 100, .warmup_start = 1e-6};
  CHECK(cosine_value(s, 100) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(cosine_value(s, 1000) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(cosine_value(s, 550) == doctest::Approx(2.505e-4).epsilon(1e-12));
  CHECK(cosine_value(s, 0) == doctest::Approx(1e-6));
  CHECK(cosine_value(s, 50) == doctest::Approx(1e-6 + 0.5 * (5e-4 - 1e-6)));
  // continuity at the warmup boundary
  CHECK(cosine_value(s, 99) < cosine_value(s, 100));
  CHECK(cosine_value(s, 100) - cosine_value(s, 99) < 1e-5);
  CHECK(cosine_value(s, 101) <= cosine_value(s, 100));
}

TEST_CASE("cosine schedule against the closed form, and verbatim orientation") {
  CosineSchedule s{.eta_min = 0.1, .eta_max = 1.0, .T_c = 40, .warmup_iters = 0};
  for (int t = 0; t <= 40; ++t)
    CHECK(cosine_value(s, t) == doctest::Approx(0.1 + 0.45 * (1 + std::cos(std::numbers::pi * t / 40))));
  auto v = s;
  v.eq2_verbatim = true;
  CHECK(cosine_value(v, 0) == doctest::Approx(0.1));
  CHECK(cosine_value(v, 40) == doctest::Approx(1.0));
  for (int t = 0; t <= 40; ++t) CHECK(cosine_value(v, t) == doctest::Approx(cosine_value(s, 40 - t)));
}

TEST_CASE("cosine schedule stays within bounds and clamps out-of-range t") {
  CosineSchedule s{.eta_min = 2e-6, .eta_max = 3e-3, .T_c = 777, .warmup_iters = 31, .warmup_start = 2e-6};
  for (int t = 0; t <= 777; ++t) {
    const double v = cosine_value(s, t);
    CHECK(v >= s.eta_min - 1e-15);
    CHECK(v <= s.eta_max + 1e-15);
  }
  CHECK(cosine_value(s, 5000) == cosine_value(s, 777));
  CHECK(cosine_value(s, -3) == cosine_value(s, 0));
  auto bad = s;
  bad.warmup_iters = 777;
  CHECK_THROWS_AS(cosine_value(bad, 0), std::invalid_argument);
  bad = s;
  bad.eta_min = 1.0;
  CHECK_THROWS_AS(cosine_value(bad, 0), std::invalid_argument);
}

TEST_CASE("teacher momentum schedule") {
  CHECK(momentum_schedule(0.9995, 0, 500) == doctest::Approx(0.9995).epsilon(1e-15));
  CHECK(momentum_schedule(0.9995, 500, 500) == doctest::Approx(1.0).epsilon(1e-15));
  double prev = 0;
  for (int t = 0; t <= 500; ++t) {
    const double m = momentum_schedule(0.9995, t, 500);
    CHECK(m >= prev);
    CHECK(m >= 0.9995);
    CHECK(m <= 1.0);
    prev = m;
  }
}

TEST_CASE("weight decay schedule") {
  CHECK(weight_decay_schedule(0.04, 0.4, 0, 200) == doctest::Approx(0.04));
  CHECK(weight_decay_schedule(0.04, 0.4, 200, 200) == doctest::Approx(0.4));
  CHECK(weight_decay_schedule(0.04, 0.4, 100, 200) == doctest::Approx(0.22));
}

namespace {

ParameterSet one_scalar(float v) {
  ParameterSet p;
  p.add("w", Tensor<float>({1, 1}, v));
  return p;
}

}  // namespace

TEST_CASE("sgd step examples") {
  SUBCASE("p = 1, g = 1, lr 0.1 -> 0.9") {
    auto p = one_scalar(1.0f);
    auto st = OptimizerState::for_params(p, 0.0, 2.0, ClipMode::Norm);
    sgd_step(p, one_scalar(1.0f), st, 0.1, 0.0);
    CHECK(p.at("w")[0] == doctest::Approx(0.9));
  }
  SUBCASE("zero gradients and no decay leave parameters alone") {
    ParameterSet p;
    p.add("a.w", Tensor<float>({2, 3}, 0.7f));
    p.add("a.b", Tensor<float>({3}, -0.2f));
    const auto before = p;
    auto st = OptimizerState::for_params(p, 0.9, 2.0, ClipMode::Norm);
    sgd_step(p, p.zeros_like(), st, 0.5, 0.0);
    CHECK(p.at("a.w") == before.at("a.w"));
    CHECK(p.at("a.b") == before.at("a.b"));
  }
  SUBCASE("weight decay is decoupled and skips rank-1 entries") {
    ParameterSet p;
    p.add("w", Tensor<float>({2, 2}, 1.0f));
    p.add("b", Tensor<float>({2}, 1.0f));
    auto st = OptimizerState::for_params(p, 0.9, 2.0, ClipMode::Norm);
    sgd_step(p, p.zeros_like(), st, 0.1, 0.5);
    CHECK(p.at("w")[0] == doctest::Approx(0.95));
    CHECK(p.at("b")[0] == 1.0f);
  }
  SUBCASE("momentum accumulates") {
    auto p = one_scalar(0.0f);
    auto st = OptimizerState::for_params(p, 0.9, 0.0, ClipMode::Norm);
    sgd_step(p, one_scalar(1.0f), st, 1.0, 0.0);
    sgd_step(p, one_scalar(1.0f), st, 1.0, 0.0);
    CHECK(p.at("w")[0] == doctest::Approx(-(1.0 + 1.9)));
    CHECK(st.momentum.at("w")[0] == doctest::Approx(1.9));
  }
}

TEST_CASE("gradient clipping") {
  ParameterSet g;
  g.add("a", Tensor<float>({2}, std::vector<float>{2.0f, 0.0f}));
  g.add("b", Tensor<float>({2, 2}, std::vector<float>{0.0f, 2.0f * std::sqrt(3.0f), 0.0f, 0.0f}));
  CHECK(global_norm(g) == doctest::Approx(4.0));

  auto clipped = g;
  CHECK(clip_gradients(clipped, 2.0, ClipMode::Norm) == doctest::Approx(4.0));
  CHECK(global_norm(clipped) == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(clipped.at("a")[0] == doctest::Approx(1.0));

  auto small = g;
  clip_gradients(small, 10.0, ClipMode::Norm);
  CHECK(small == g);

  auto elem = g;
  clip_gradients(elem, 2.0, ClipMode::Element);
  CHECK(elem.at("a")[0] == 2.0f);
  CHECK(elem.at("b")[1] == 2.0f);

  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0.0f, 5.0f);
  for (int trial = 0; trial < 50; ++trial) {
    ParameterSet r;
    r.add("x", Tensor<float>({7, 3}));
    for (auto& v : r.at("x").vec()) v = n(rng);
    const double before = global_norm(r);
    clip_gradients(r, 2.0, ClipMode::Norm);
    CHECK(global_norm(r) <= 2.0 + 1e-6);
    if (before <= 2.0) CHECK(global_norm(r) == doctest::Approx(before));
  }
}

TEST_CASE("non-finite gradients are fatal and name the parameter") {
  ParameterSet p;
  p.add("ok.w", Tensor<float>({2, 2}, 1.0f));
  p.add("bad.w", Tensor<float>({2, 2}, 1.0f));
  auto g = p.zeros_like();
  g.at("bad.w")[3] = std::numeric_limits<float>::infinity();
  auto st = OptimizerState::for_params(p, 0.9, 2.0, ClipMode::Norm);
  const auto before = p;
  try {
    sgd_step(p, g, st, 0.1, 0.1);
    FAIL("expected NonFiniteGradient");
  } catch (const NonFiniteGradient& e) {
    CHECK(e.param() == "bad.w");
  }
  CHECK(p == before);
}

TEST_CASE("clip mode parsing") {
  CHECK(parse_clip_mode("norm") == ClipMode::Norm);
  CHECK(parse_clip_mode("element") == ClipMode::Element);
  CHECK_THROWS(parse_clip_mode("value"));
}
