#pragma once

// Central finite-difference oracle for tape ops, in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "lowdino/autodiff.hpp"

namespace lowdino::testing {

using ad::Tape;
using ad::Var;
using Fn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.vec()) v = n(rng);
  return t;
}

/// Scalar objective sum(f(inputs) * R) with a fixed random projection R.
inline double projected(const Fn& f, const std::vector<Tensor<double>>& inputs, const Tensor<double>* proj,
                        Tensor<double>* out_shape_probe = nullptr) {
  Tape<double> tape(false);
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  const auto y = f(tape, vars);
  if (out_shape_probe) *out_shape_probe = y.value();
  double s = 0;
  for (std::size_t i = 0; i < y.value().size(); ++i) s += y.value()[i] * (proj ? (*proj)[i] : 1.0);
  return s;
}

struct GradcheckResult {
  double max_rel_error = 0;  // over inputs, ||a - n|| / max(||a||, ||n||)
  std::vector<Tensor<double>> analytic;
};

inline GradcheckResult gradcheck(const Fn& f, std::vector<Tensor<double>> inputs, std::uint64_t seed = 1,
                                 double eps = 1e-3, const std::vector<bool>& check = {}) {
  std::mt19937_64 rng(seed);
  Tensor<double> probe;
  projected(f, inputs, nullptr, &probe);
  const Tensor<double> proj = random_tensor(probe.shape(), rng);

  Tape<double> tape(true);
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
  const auto y = f(tape, vars);
  tape.backward(y, proj);

  GradcheckResult r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double> a = tape.grad(vars[k].id);
    r.analytic.push_back(a);
    if (!check.empty() && !check[k]) continue;
    double diff2 = 0, an2 = 0, nn2 = 0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + eps;
      const double fp = projected(f, inputs, &proj);
      inputs[k][i] = orig - eps;
      const double fm = projected(f, inputs, &proj);
      inputs[k][i] = orig;
      const double num = (fp - fm) / (2 * eps);
      diff2 += (a[i] - num) * (a[i] - num);
      an2 += a[i] * a[i];
      nn2 += num * num;
    }
    const double denom = std::max({std::sqrt(an2), std::sqrt(nn2), 1e-12});
    r.max_rel_error = std::max(r.max_rel_error, std::sqrt(diff2) / denom);
  }
  return r;
}

}  // namespace lowdino::testing
