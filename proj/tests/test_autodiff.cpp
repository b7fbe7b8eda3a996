#include "doctest.h"
#include "gradcheck.hpp"

using namespace lowdino;
using namespace lowdino::testing;
using ad::Tape;
using ad::Var;
using V = std::vector<Var<double>>;

namespace {
std::mt19937_64 rng(1234);
constexpr double kTol = 1e-4;
}  // namespace

TEST_CASE("conv2d gradients match finite differences") {
  for (int stride : {1, 2}) {
    for (int k : {1, 3}) {
      const int pad = k / 2;
      auto r = gradcheck(
          [&](Tape<double>&, const V& v) { return ad::conv2d(v[0], v[1], v[2], stride, pad); },
          {random_tensor({2, 3, 6, 6}, rng), random_tensor({4, 3, k, k}, rng), random_tensor({4}, rng)});
      CHECK(r.max_rel_error < kTol);
    }
  }
}

TEST_CASE("depthwise conv gradients") {
  for (int stride : {1, 2}) {
    auto r = gradcheck([&](Tape<double>&, const V& v) { return ad::depthwise_conv2d(v[0], v[1], v[2], stride, 1); },
                       {random_tensor({2, 3, 6, 6}, rng), random_tensor({3, 1, 3, 3}, rng), random_tensor({3}, rng)});
    CHECK(r.max_rel_error < kTol);
  }
}

TEST_CASE("linear gradients and the exact 2x3 weight-gradient case") {
  auto r = gradcheck([](Tape<double>&, const V& v) { return ad::linear(v[0], v[1], v[2]); },
                     {random_tensor({2, 4, 3}, rng), random_tensor({5, 3}, rng), random_tensor({5}, rng)});
  CHECK(r.max_rel_error < kTol);

  // x is 1x2 (batch 1, in 2), W is 3x2; dW = g^T x, hand computed.
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({1, 2}, {2.0, -1.0}), true);
  auto w = tape.leaf(Tensor<double>({3, 2}, {1, 2, 3, 4, 5, 6}), true);
  auto y = ad::linear(x, w, std::nullopt);
  CHECK(y.value().vec() == std::vector<double>{0.0, 2.0, 4.0});
  tape.backward(y, Tensor<double>({1, 3}, {1.0, 10.0, 100.0}));
  CHECK(tape.grad(w).vec() == std::vector<double>{2, -1, 20, -10, 200, -100});
  CHECK(tape.grad(x).vec() == std::vector<double>{1 + 30 + 500, 2 + 40 + 600});
}

TEST_CASE("normalisation gradients") {
  auto gn = gradcheck([](Tape<double>&, const V& v) { return ad::group_norm(v[0], v[1], v[2], 2); },
                      {random_tensor({2, 4, 3, 3}, rng), random_tensor({4}, rng), random_tensor({4}, rng)});
  CHECK(gn.max_rel_error < kTol);
  auto ln = gradcheck([](Tape<double>&, const V& v) { return ad::layer_norm(v[0], v[1], v[2]); },
                      {random_tensor({3, 2, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)});
  CHECK(ln.max_rel_error < kTol);
}

TEST_CASE("activation, structural and row-wise op gradients") {
  auto x = random_tensor({2, 3, 4, 4}, rng);
  CHECK(gradcheck([](Tape<double>&, const V& v) { return ad::silu(v[0]); }, {x}).max_rel_error < kTol);
  CHECK(gradcheck([](Tape<double>&, const V& v) { return ad::gelu(v[0]); }, {x}).max_rel_error < kTol);
  CHECK(gradcheck([](Tape<double>&, const V& v) { return ad::global_avg_pool(v[0]); }, {x}).max_rel_error < kTol);
  CHECK(gradcheck([](Tape<double>&, const V& v) { return ad::add(v[0], v[1]); }, {x, random_tensor({2, 3, 4, 4}, rng)})
            .max_rel_error < kTol);
  CHECK(gradcheck([](Tape<double>&, const V& v) { return ad::scale(v[0], -0.7); }, {x}).max_rel_error < kTol);
  CHECK(gradcheck(
            [](Tape<double>&, const V& v) {
              const V parts{v[0], v[1]};
              return ad::concat<double>(parts, 1);
            },
            {x, random_tensor({2, 2, 4, 4}, rng)})
            .max_rel_error < kTol);
  CHECK(gradcheck(
            [](Tape<double>&, const V& v) {
              auto u = ad::unfold_patches(v[0], 2);
              return ad::fold_patches(ad::scale(u, 2.0), 2, 4, 4);
            },
            {x})
            .max_rel_error < kTol);
  auto m = random_tensor({4, 7}, rng);
  CHECK(gradcheck([](Tape<double>&, const V& v) { return ad::softmax(v[0]); }, {m}).max_rel_error < kTol);
  CHECK(gradcheck([](Tape<double>&, const V& v) { return ad::log_softmax(v[0]); }, {m}).max_rel_error < kTol);
  CHECK(gradcheck([](Tape<double>&, const V& v) { return ad::l2_normalize(v[0]); }, {m}).max_rel_error < kTol);
  CHECK(gradcheck([](Tape<double>&, const V& v) { return ad::log(ad::softmax(v[0])); }, {m}).max_rel_error < kTol);
  CHECK(gradcheck([](Tape<double>&, const V& v) { return ad::sum(v[0]); }, {m}).max_rel_error < kTol);
}

TEST_CASE("self-attention gradients and probability rows") {
  auto qkv = random_tensor({3, 5, 12}, rng);
  auto r = gradcheck([](Tape<double>&, const V& v) { return ad::self_attention(v[0], 2); }, {qkv});
  CHECK(r.max_rel_error < kTol);
  const auto p = ad::attention_weights(qkv, 2);
  for (std::size_t row = 0; row < p.size() / 5; ++row) {
    double s = 0;
    for (int j = 0; j < 5; ++j) s += p[row * 5 + j];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("unfold/fold are inverse permutations") {
  auto x = random_tensor({2, 3, 4, 6}, rng);
  Tape<double> tape;
  auto v = tape.leaf(x);
  auto u = ad::unfold_patches(v, 2);
  CHECK(u.shape() == Shape{8, 6, 3});
  CHECK(ad::fold_patches(u, 2, 4, 6).value() == x);
  CHECK_THROWS(ad::unfold_patches(v, 4));
}

TEST_CASE("zero output gradient gives zero parameter gradients") {
  Tape<double> tape;
  auto x = tape.leaf(random_tensor({1, 2, 4, 4}, rng));
  auto w = tape.leaf(random_tensor({3, 2, 3, 3}, rng), true);
  auto y = ad::silu(ad::conv2d(x, w, std::nullopt, 1, 1));
  tape.backward(y, Tensor<double>(y.shape()));
  for (double g : tape.grad(w).vec()) CHECK(g == 0.0);
}

TEST_CASE("backward through an untracked output is an error") {
  Tape<double> tape;
  auto x = tape.leaf(random_tensor({2, 2}, rng));
  auto y = ad::softmax(x);
  CHECK_THROWS_AS(tape.backward(y, Tensor<double>(y.shape())), ad::GradientError);
}
