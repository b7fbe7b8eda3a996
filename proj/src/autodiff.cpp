// SPDX-License-Identifier: Apache-2.0
#include "lowdino/autodiff.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "kernels.hpp"

namespace lowdino {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

}  // namespace lowdino

namespace lowdino::ad {

using kernels::mat;

namespace {

void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw std::invalid_argument(std::string(op) + ": " + what);
}

struct RowView {
  std::size_t rows;
  std::size_t cols;
};

RowView as_rows(const Shape& s) {
  const std::size_t cols = s.empty() ? 1 : static_cast<std::size_t>(s.back());
  return {cols == 0 ? 0 : numel(s) / cols, cols};
}

template <typename T>
std::vector<Var<T>> inputs_of(Var<T> a, Var<T> b, const std::optional<Var<T>>& c) {
  std::vector<Var<T>> v{a, b};
  if (c) v.push_back(*c);
  return v;
}

// Gather-style permutation op: out[i] = x[index[i]].
template <typename T>
Var<T> gather(Var<T> x, std::vector<std::size_t> index, Shape out_shape) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = xv[index[i]];
  return x.tape->record(std::move(out), {x},
                        [x, index = std::move(index)](Tape<T>& t, const Tensor<T>& g) {
                          Tensor<T>& dx = t.grad(x.id);
                          for (std::size_t i = 0; i < index.size(); ++i) dx[index[i]] += g[i];
                        });
}

template <typename T>
T gelu_value(T x) {
  return static_cast<T>(0.5) * x * (T{1} + std::erf(x * static_cast<T>(M_SQRT1_2)));
}
template <typename T>
T gelu_grad(T x) {
  const T cdf = static_cast<T>(0.5) * (T{1} + std::erf(x * static_cast<T>(M_SQRT1_2)));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(0.3989422804014327);
  return cdf + x * pdf;
}

template <typename T>
T sigmoid(T x) {
  return x >= 0 ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
}

// Row-wise softmax of `n` values with max subtraction.
template <typename T>
void softmax_row(const T* z, T* p, std::size_t n) {
  T m = z[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, z[j]);
  T s{0};
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = std::exp(z[j] - m);
    s += p[j];
  }
  const T inv = T{1} / s;
  for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
}

}  // namespace

// --------------------------------------------------------------------------
// convolution

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> b, int stride, int pad) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require(xv.rank() == 4 && wv.rank() == 4, "conv2d", "expects NCHW input and [Co,Ci,k,k] weight");
  require(wv.dim(1) == xv.dim(1), "conv2d",
          "channel mismatch: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
  require(wv.dim(2) == wv.dim(3), "conv2d", "square kernels only");
  require(stride >= 1 && pad >= 0, "conv2d", "bad stride/padding");
  const int n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int co = wv.dim(0), k = wv.dim(2);
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  require(ho >= 1 && wo >= 1, "conv2d", "output would be empty");
  if (b) require(b->value().size() == static_cast<std::size_t>(co), "conv2d", "bias size");
  const bool direct = k == 1 && stride == 1 && pad == 0;
  const int ckk = ci * k * k, hw = h * wd, howo = ho * wo;

  Tensor<T> out({n, co, ho, wo});
  std::vector<T> col(direct ? 0 : static_cast<std::size_t>(ckk) * howo);
  const auto wm = mat(wv.data(), co, ckk);
  for (int s = 0; s < n; ++s) {
    const T* xs = xv.data() + static_cast<std::ptrdiff_t>(s) * ci * hw;
    const T* src = xs;
    if (!direct) {
      kernels::im2col(xs, ci, h, wd, k, stride, pad, ho, wo, col.data());
      src = col.data();
    }
    auto om = mat(out.data() + static_cast<std::ptrdiff_t>(s) * co * howo, co, howo);
    om.noalias() = wm * mat(src, ckk, howo);
    if (b) {
      const T* bv = b->value().data();
      for (int c = 0; c < co; ++c) om.row(c).array() += bv[c];
    }
  }

  const auto ins = inputs_of(x, w, b);
  return x.tape->record(std::move(out), std::span<const Var<T>>(ins), [=](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(x.id);
    const Tensor<T>& wv = t.value(w.id);
    const bool gx = t.requires_grad(x.id), gw = t.requires_grad(w.id), gb = b && t.requires_grad(b->id);
    T* dw = gw ? t.grad(w.id).data() : nullptr;
    T* db = gb ? t.grad(b->id).data() : nullptr;
    T* dx = gx ? t.grad(x.id).data() : nullptr;
    std::vector<T> col(direct ? 0 : static_cast<std::size_t>(ckk) * howo);
    std::vector<T> dcol(direct || !gx ? 0 : static_cast<std::size_t>(ckk) * howo);
    const auto wm = mat(wv.data(), co, ckk);
    for (int s = 0; s < n; ++s) {
      const auto gm = mat(g.data() + static_cast<std::ptrdiff_t>(s) * co * howo, co, howo);
      const T* xs = xv.data() + static_cast<std::ptrdiff_t>(s) * ci * hw;
      if (gw) {
        const T* src = xs;
        if (!direct) {
          kernels::im2col(xs, ci, h, wd, k, stride, pad, ho, wo, col.data());
          src = col.data();
        }
        mat(dw, co, ckk).noalias() += gm * mat(src, ckk, howo).transpose();
      }
      if (gb) {
        for (int c = 0; c < co; ++c) {
          const T* row = g.data() + (static_cast<std::ptrdiff_t>(s) * co + c) * howo;
          T acc = 0;
          for (int i = 0; i < howo; ++i) acc += row[i];
          db[c] += acc;
        }
      }
      if (gx) {
        T* dxs = dx + static_cast<std::ptrdiff_t>(s) * ci * hw;
        if (direct) {
          mat(dxs, ci, hw).noalias() += wm.transpose() * gm;
        } else {
          mat(dcol.data(), ckk, howo).noalias() = wm.transpose() * gm;
          kernels::col2im(dcol.data(), ci, h, wd, k, stride, pad, ho, wo, dxs);
        }
      }
    }
  });
}

template <typename T>
Var<T> depthwise_conv2d(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> b, int stride, int pad) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require(xv.rank() == 4 && wv.rank() == 4 && wv.dim(1) == 1, "depthwise_conv2d",
          "expects NCHW input and [C,1,k,k] weight");
  require(wv.dim(0) == xv.dim(1), "depthwise_conv2d", "channel mismatch");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3), k = wv.dim(2);
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  require(ho >= 1 && wo >= 1, "depthwise_conv2d", "output would be empty");

  Tensor<T> out({n, c, ho, wo});
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const T* xc = xv.data() + (static_cast<std::ptrdiff_t>(s) * c + ch) * h * wd;
      const T* kc = wv.data() + static_cast<std::ptrdiff_t>(ch) * k * k;
      T* oc = out.data() + (static_cast<std::ptrdiff_t>(s) * c + ch) * ho * wo;
      const T bias = b ? b->value()[ch] : T{0};
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          T acc = bias;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += kc[ky * k + kx] * xc[iy * wd + ix];
            }
          }
          oc[oy * wo + ox] = acc;
        }
      }
    }
  }

  const auto ins = inputs_of(x, w, b);
  return x.tape->record(std::move(out), std::span<const Var<T>>(ins), [=](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(x.id);
    const Tensor<T>& wv = t.value(w.id);
    const bool gx = t.requires_grad(x.id), gw = t.requires_grad(w.id), gb = b && t.requires_grad(b->id);
    T* dw = gw ? t.grad(w.id).data() : nullptr;
    T* db = gb ? t.grad(b->id).data() : nullptr;
    T* dx = gx ? t.grad(x.id).data() : nullptr;
    for (int s = 0; s < n; ++s) {
      for (int ch = 0; ch < c; ++ch) {
        const std::ptrdiff_t xoff = (static_cast<std::ptrdiff_t>(s) * c + ch) * h * wd;
        const T* xc = xv.data() + xoff;
        const T* kc = wv.data() + static_cast<std::ptrdiff_t>(ch) * k * k;
        const T* gc = g.data() + (static_cast<std::ptrdiff_t>(s) * c + ch) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            const T go = gc[oy * wo + ox];
            if (gb) db[ch] += go;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= wd) continue;
                if (gw) dw[ch * k * k + ky * k + kx] += go * xc[iy * wd + ix];
                if (gx) dx[xoff + iy * wd + ix] += go * kc[ky * k + kx];
              }
            }
          }
        }
      }
    }
  });
}

// --------------------------------------------------------------------------
// dense

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require(wv.rank() == 2, "linear", "weight must be [out, in]");
  const int in = wv.dim(1), outd = wv.dim(0);
  require(xv.rank() >= 1 && xv.dim(-1) == in, "linear",
          "input " + shape_str(xv.shape()) + " incompatible with weight " + shape_str(wv.shape()));
  if (b) require(b->value().size() == static_cast<std::size_t>(outd), "linear", "bias size");
  const auto rows = static_cast<Eigen::Index>(xv.size() / static_cast<std::size_t>(in));
  Shape oshape = xv.shape();
  oshape.back() = outd;
  Tensor<T> out(oshape);
  auto om = mat(out.data(), rows, outd);
  om.noalias() = mat(xv.data(), rows, in) * mat(wv.data(), outd, in).transpose();
  if (b) {
    const auto bv = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->value().data(), outd);
    om.rowwise() += bv;
  }
  const auto ins = inputs_of(x, w, b);
  return x.tape->record(std::move(out), std::span<const Var<T>>(ins), [=](Tape<T>& t, const Tensor<T>& g) {
    const auto gm = mat(g.data(), rows, outd);
    if (t.requires_grad(x.id))
      mat(t.grad(x.id).data(), rows, in).noalias() += gm * mat(t.value(w.id).data(), outd, in);
    if (t.requires_grad(w.id))
      mat(t.grad(w.id).data(), outd, in).noalias() += gm.transpose() * mat(t.value(x.id).data(), rows, in);
    if (b && t.requires_grad(b->id)) {
      // plain loops: Eigen reductions over unaligned buffers are not reproducible
      T* db = t.grad(b->id).data();
      for (std::ptrdiff_t r = 0; r < rows; ++r)
        for (int o = 0; o < outd; ++o) db[o] += g[r * outd + o];
    }
  });
}

// --------------------------------------------------------------------------
// normalisation

template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, double eps) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 4, "group_norm", "expects NCHW");
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  require(groups >= 1 && c % groups == 0, "group_norm", "groups must divide channels");
  require(gamma.value().size() == static_cast<std::size_t>(c) &&
              beta.value().size() == static_cast<std::size_t>(c),
          "group_norm", "affine size");
  const int cg = c / groups;
  const std::size_t m = static_cast<std::size_t>(cg) * hw;
  Tensor<T> xhat(xv.shape());
  std::vector<T> rstd(static_cast<std::size_t>(n) * groups);
  Tensor<T> out(xv.shape());
  const T* ga = gamma.value().data();
  const T* be = beta.value().data();
  for (int s = 0; s < n; ++s) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + static_cast<std::size_t>(gi) * cg) * hw;
      double mean = 0;
      for (std::size_t i = 0; i < m; ++i) mean += xv[off + i];
      mean /= static_cast<double>(m);
      double var = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = xv[off + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double r = 1.0 / std::sqrt(var + eps);
      rstd[static_cast<std::size_t>(s) * groups + gi] = static_cast<T>(r);
      for (int cc = 0; cc < cg; ++cc) {
        const int ch = gi * cg + cc;
        for (int p = 0; p < hw; ++p) {
          const std::size_t i = off + static_cast<std::size_t>(cc) * hw + p;
          const T xh = static_cast<T>((xv[i] - mean) * r);
          xhat[i] = xh;
          out[i] = ga[ch] * xh + be[ch];
        }
      }
    }
  }
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, const Tensor<T>& g) {
        const T* ga = t.value(gamma.id).data();
        if (t.requires_grad(gamma.id) || t.requires_grad(beta.id)) {
          const bool gg = t.requires_grad(gamma.id), gbb = t.requires_grad(beta.id);
          T* dg = gg ? t.grad(gamma.id).data() : nullptr;
          T* db = gbb ? t.grad(beta.id).data() : nullptr;
          for (int s = 0; s < n; ++s) {
            for (int ch = 0; ch < c; ++ch) {
              const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
              T sg{0}, sgx{0};
              for (int p = 0; p < hw; ++p) {
                sg += g[off + p];
                sgx += g[off + p] * xhat[off + p];
              }
              if (gg) dg[ch] += sgx;
              if (gbb) db[ch] += sg;
            }
          }
        }
        if (!t.requires_grad(x.id)) return;
        T* dx = t.grad(x.id).data();
        for (int s = 0; s < n; ++s) {
          for (int gi = 0; gi < groups; ++gi) {
            const std::size_t off = (static_cast<std::size_t>(s) * c + static_cast<std::size_t>(gi) * cg) * hw;
            double sum_d = 0, sum_dx = 0;
            for (int cc = 0; cc < cg; ++cc) {
              const T gm = ga[gi * cg + cc];
              for (int p = 0; p < hw; ++p) {
                const std::size_t i = off + static_cast<std::size_t>(cc) * hw + p;
                const double d = static_cast<double>(g[i]) * gm;
                sum_d += d;
                sum_dx += d * xhat[i];
              }
            }
            const double r = rstd[static_cast<std::size_t>(s) * groups + gi];
            const double inv_m = 1.0 / static_cast<double>(m);
            for (int cc = 0; cc < cg; ++cc) {
              const T gm = ga[gi * cg + cc];
              for (int p = 0; p < hw; ++p) {
                const std::size_t i = off + static_cast<std::size_t>(cc) * hw + p;
                const double d = static_cast<double>(g[i]) * gm;
                dx[i] += static_cast<T>(r * (d - inv_m * sum_d - xhat[i] * inv_m * sum_dx));
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps) {
  const Tensor<T>& xv = x.value();
  const auto [rows, d] = as_rows(xv.shape());
  require(gamma.value().size() == d && beta.value().size() == d, "layer_norm", "affine size");
  Tensor<T> xhat(xv.shape());
  std::vector<T> rstd(rows);
  Tensor<T> out(xv.shape());
  const T* ga = gamma.value().data();
  const T* be = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    double mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<T>(rs);
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = static_cast<T>((xr[j] - mean) * rs);
      xhat[r * d + j] = xh;
      out[r * d + j] = ga[j] * xh + be[j];
    }
  }
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [=, rows = rows, d = d, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, const Tensor<T>& g) {
        const T* ga = t.value(gamma.id).data();
        if (t.requires_grad(gamma.id)) {
          T* dg = t.grad(gamma.id).data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) dg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (t.requires_grad(beta.id)) {
          T* db = t.grad(beta.id).data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) db[j] += g[r * d + j];
        }
        if (!t.requires_grad(x.id)) return;
        T* dx = t.grad(x.id).data();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_d = 0, sum_dx = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dd = static_cast<double>(g[r * d + j]) * ga[j];
            sum_d += dd;
            sum_dx += dd * xhat[r * d + j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            const double dd = static_cast<double>(g[r * d + j]) * ga[j];
            dx[r * d + j] += static_cast<T>(rstd[r] * (dd - inv_d * sum_d - xhat[r * d + j] * inv_d * sum_dx));
          }
        }
      });
}

// --------------------------------------------------------------------------
// elementwise

template <typename T>
Var<T> silu(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sigmoid(xv[i]);
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(x.id);
    Tensor<T>& dx = t.grad(x.id);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T s = sigmoid(xv[i]);
      dx[i] += g[i] * s * (T{1} + xv[i] * (T{1} - s));
    }
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = gelu_value(xv[i]);
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(x.id);
    Tensor<T>& dx = t.grad(x.id);
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += g[i] * gelu_grad(xv[i]);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require(a.shape() == b.shape(), "add",
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    for (Var<T> v : {a, b}) {
      if (!t.requires_grad(v.id)) continue;
      Tensor<T>& d = t.grad(v.id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, double s) {
  Tensor<T> out = x.value();
  const T sv = static_cast<T>(s);
  for (auto& v : out.vec()) v *= sv;
  return x.tape->record(std::move(out), {x}, [x, sv](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& dx = t.grad(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * sv;
  });
}

// --------------------------------------------------------------------------
// structural

template <typename T>
Var<T> concat(std::span<const Var<T>> xs, int axis) {
  require(!xs.empty(), "concat", "no inputs");
  const Shape& s0 = xs[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "concat", "axis out of range");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s0[i]);
  for (int i = axis + 1; i < rank; ++i) inner *= static_cast<std::size_t>(s0[i]);
  Shape oshape = s0;
  oshape[axis] = 0;
  std::vector<std::size_t> chunk;
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    require(static_cast<int>(s.size()) == rank, "concat", "rank mismatch");
    for (int i = 0; i < rank; ++i)
      require(i == axis || s[i] == s0[i], "concat", "shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
    oshape[axis] += s[axis];
    chunk.push_back(static_cast<std::size_t>(s[axis]) * inner);
  }
  const std::size_t row = static_cast<std::size_t>(oshape[axis]) * inner;
  Tensor<T> out(oshape);
  std::size_t col = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const T* src = xs[k].value().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src + o * chunk[k], chunk[k], out.data() + o * row + col);
    col += chunk[k];
  }
  std::vector<Var<T>> ins(xs.begin(), xs.end());
  return xs[0].tape->record(std::move(out), std::span<const Var<T>>(ins),
                            [ins, chunk, outer, row](Tape<T>& t, const Tensor<T>& g) {
                              std::size_t col = 0;
                              for (std::size_t k = 0; k < ins.size(); ++k) {
                                if (t.requires_grad(ins[k].id)) {
                                  T* d = t.grad(ins[k].id).data();
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t j = 0; j < chunk[k]; ++j)
                                      d[o * chunk[k] + j] += g[o * row + col + j];
                                }
                                col += chunk[k];
                              }
                            });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 4, "global_avg_pool", "expects NCHW");
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < static_cast<std::size_t>(n) * c; ++i) {
    double s = 0;
    for (int p = 0; p < hw; ++p) s += xv[i * hw + p];
    out[i] = static_cast<T>(s / hw);
  }
  return x.tape->record(std::move(out), {x}, [x, n, c, hw](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& dx = t.grad(x.id);
    const T inv = T{1} / static_cast<T>(hw);
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * c; ++i)
      for (int p = 0; p < hw; ++p) dx[i * hw + p] += g[i] * inv;
  });
}

namespace {

// index of x[b][c][y][x] for unfolded element [seq][token][c]
std::vector<std::size_t> unfold_index(int b, int c, int h, int w, int p) {
  const int nh = h / p, nw = w / p, tokens = nh * nw;
  std::vector<std::size_t> idx(static_cast<std::size_t>(b) * p * p * tokens * c);
  std::size_t o = 0;
  for (int bi = 0; bi < b; ++bi)
    for (int py = 0; py < p; ++py)
      for (int px = 0; px < p; ++px)
        for (int hy = 0; hy < nh; ++hy)
          for (int hx = 0; hx < nw; ++hx)
            for (int ch = 0; ch < c; ++ch) {
              const int y = hy * p + py, xx = hx * p + px;
              idx[o++] = ((static_cast<std::size_t>(bi) * c + ch) * h + y) * w + xx;
            }
  return idx;
}

}  // namespace

template <typename T>
Var<T> unfold_patches(Var<T> x, int patch) {
  const Shape& s = x.shape();
  require(s.size() == 4, "unfold_patches", "expects NCHW");
  require(patch >= 1 && s[2] % patch == 0 && s[3] % patch == 0, "unfold_patches",
          "patch size " + std::to_string(patch) + " does not divide " + shape_str(s));
  const int tokens = (s[2] / patch) * (s[3] / patch);
  return gather(x, unfold_index(s[0], s[1], s[2], s[3], patch), Shape{s[0] * patch * patch, tokens, s[1]});
}

template <typename T>
Var<T> fold_patches(Var<T> x, int patch, int height, int width) {
  const Shape& s = x.shape();
  require(s.size() == 3 && s[0] % (patch * patch) == 0, "fold_patches", "bad sequence tensor");
  require(height % patch == 0 && width % patch == 0 &&
              s[1] == (height / patch) * (width / patch),
          "fold_patches", "token count does not match target size");
  const int b = s[0] / (patch * patch), c = s[2];
  const auto fwd = unfold_index(b, c, height, width, patch);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return gather(x, std::move(inv), Shape{b, c, height, width});
}

// --------------------------------------------------------------------------
// attention

namespace {

template <typename T>
void attention_probs_into(const T* qkv, int tokens, int d, int heads, T* probs) {
  const int dh = d / heads;
  const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int hd = 0; hd < heads; ++hd) {
    kernels::ConstStridedMap<T> q(qkv + hd * dh, tokens, dh, Eigen::OuterStride<>(3 * d));
    kernels::ConstStridedMap<T> k(qkv + d + hd * dh, tokens, dh, Eigen::OuterStride<>(3 * d));
    auto pm = mat(probs + static_cast<std::ptrdiff_t>(hd) * tokens * tokens, tokens, tokens);
    pm.noalias() = (q * k.transpose()) * sc;
    for (int r = 0; r < tokens; ++r) softmax_row(pm.row(r).data(), pm.row(r).data(), static_cast<std::size_t>(tokens));
  }
}

}  // namespace

template <typename T>
Tensor<T> attention_weights(const Tensor<T>& qkv, int heads) {
  require(qkv.rank() == 3 && qkv.dim(2) % 3 == 0, "attention", "qkv must be [S, N, 3d]");
  const int seqs = qkv.dim(0), tokens = qkv.dim(1), d = qkv.dim(2) / 3;
  require(heads >= 1 && d % heads == 0, "attention", "heads must divide embed dim");
  Tensor<T> probs({seqs, heads, tokens, tokens});
  for (int s = 0; s < seqs; ++s)
    attention_probs_into(qkv.data() + static_cast<std::ptrdiff_t>(s) * tokens * 3 * d, tokens, d, heads,
                         probs.data() + static_cast<std::ptrdiff_t>(s) * heads * tokens * tokens);
  return probs;
}

template <typename T>
Var<T> self_attention(Var<T> qkv, int heads) {
  const Tensor<T>& qv = qkv.value();
  Tensor<T> probs = attention_weights(qv, heads);
  const int seqs = qv.dim(0), tokens = qv.dim(1), d = qv.dim(2) / 3, dh = d / heads;
  Tensor<T> out({seqs, tokens, d});
  for (int s = 0; s < seqs; ++s) {
    const T* base = qv.data() + static_cast<std::ptrdiff_t>(s) * tokens * 3 * d;
    for (int hd = 0; hd < heads; ++hd) {
      const auto pm = mat(probs.data() + (static_cast<std::ptrdiff_t>(s) * heads + hd) * tokens * tokens, tokens, tokens);
      kernels::ConstStridedMap<T> v(base + 2 * d + hd * dh, tokens, dh, Eigen::OuterStride<>(3 * d));
      kernels::StridedMap<T> o(out.data() + static_cast<std::ptrdiff_t>(s) * tokens * d + hd * dh, tokens, dh,
                               Eigen::OuterStride<>(d));
      o.noalias() = pm * v;
    }
  }
  return qkv.tape->record(
      std::move(out), {qkv},
      [=, probs = std::move(probs)](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& qv = t.value(qkv.id);
        Tensor<T>& dq = t.grad(qkv.id);
        const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        kernels::RowMat<T> dp(tokens, tokens), ds(tokens, tokens);
        for (int s = 0; s < seqs; ++s) {
          const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(s) * tokens * 3 * d;
          const T* base = qv.data() + off;
          T* dbase = dq.data() + off;
          for (int hd = 0; hd < heads; ++hd) {
            const auto pm = mat(probs.data() + (static_cast<std::ptrdiff_t>(s) * heads + hd) * tokens * tokens, tokens, tokens);
            const Eigen::OuterStride<> s3(3 * d);
            kernels::ConstStridedMap<T> q(base + hd * dh, tokens, dh, s3);
            kernels::ConstStridedMap<T> k(base + d + hd * dh, tokens, dh, s3);
            kernels::ConstStridedMap<T> v(base + 2 * d + hd * dh, tokens, dh, s3);
            kernels::StridedMap<T> dqm(dbase + hd * dh, tokens, dh, s3);
            kernels::StridedMap<T> dkm(dbase + d + hd * dh, tokens, dh, s3);
            kernels::StridedMap<T> dvm(dbase + 2 * d + hd * dh, tokens, dh, s3);
            kernels::ConstStridedMap<T> go(g.data() + static_cast<std::ptrdiff_t>(s) * tokens * d + hd * dh, tokens, dh,
                                           Eigen::OuterStride<>(d));
            dp.noalias() = go * v.transpose();
            dvm.noalias() += pm.transpose() * go;
            for (int r = 0; r < tokens; ++r) {
              T dot = 0;
              for (int c = 0; c < tokens; ++c) dot += dp(r, c) * pm(r, c);
              ds.row(r) = pm.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
            }
            dqm.noalias() += (ds * k) * sc;
            dkm.noalias() += (ds.transpose() * q) * sc;
          }
        }
      });
}

// --------------------------------------------------------------------------
// row-wise functions

template <typename T>
Var<T> l2_normalize(Var<T> x, double eps) {
  const Tensor<T>& xv = x.value();
  const auto [rows, d] = as_rows(xv.shape());
  Tensor<T> out(xv.shape());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(xv[r * d + j]) * xv[r * d + j];
    const double nrm = std::max(std::sqrt(s), eps);
    norms[r] = static_cast<T>(nrm);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<T>(xv[r * d + j] / nrm);
  }
  Tensor<T> saved = out;
  return x.tape->record(
      std::move(out), {x},
      [x, rows = rows, d = d, eps, y = std::move(saved), norms = std::move(norms)](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>& dx = t.grad(x.id);
        for (std::size_t r = 0; r < rows; ++r) {
          const T nrm = norms[r];
          if (nrm <= static_cast<T>(eps)) {
            for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += g[r * d + j] / nrm;
            continue;
          }
          double dot = 0;
          for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(y[r * d + j]) * g[r * d + j];
          for (std::size_t j = 0; j < d; ++j)
            dx[r * d + j] += static_cast<T>((g[r * d + j] - y[r * d + j] * dot) / nrm);
        }
      });
}

template <typename T>
Var<T> softmax(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const auto [rows, d] = as_rows(xv.shape());
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) softmax_row(xv.data() + r * d, out.data() + r * d, d);
  Tensor<T> saved = out;
  return x.tape->record(std::move(out), {x},
                        [x, rows = rows, d = d, y = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
                          Tensor<T>& dx = t.grad(x.id);
                          for (std::size_t r = 0; r < rows; ++r) {
                            T dot{0};
                            for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
                            for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
                          }
                        });
}

template <typename T>
Var<T> log_softmax(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const auto [rows, d] = as_rows(xv.shape());
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = xv.data() + r * d;
    T m = z[0];
    for (std::size_t j = 1; j < d; ++j) m = std::max(m, z[j]);
    T s{0};
    for (std::size_t j = 0; j < d; ++j) s += std::exp(z[j] - m);
    const T lse = m + std::log(s);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = z[j] - lse;
  }
  Tensor<T> saved = out;
  return x.tape->record(std::move(out), {x},
                        [x, rows = rows, d = d, y = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
                          Tensor<T>& dx = t.grad(x.id);
                          for (std::size_t r = 0; r < rows; ++r) {
                            T gs{0};
                            for (std::size_t j = 0; j < d; ++j) gs += g[r * d + j];
                            for (std::size_t j = 0; j < d; ++j)
                              dx[r * d + j] += g[r * d + j] - std::exp(y[r * d + j]) * gs;
                          }
                        });
}

template <typename T>
Var<T> log(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::log(xv[i]);
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(x.id);
    Tensor<T>& dx = t.grad(x.id);
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += g[i] / xv[i];
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  double s = 0;
  for (T v : x.value().vec()) s += v;
  return x.tape->record(Tensor<T>({1}, static_cast<T>(s)), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& dx = t.grad(x.id);
    for (auto& v : dx.vec()) v += g[0];
  });
}

#define LOWDINO_INSTANTIATE_OPS(T)                                                        \
  template Var<T> conv2d(Var<T>, Var<T>, std::optional<Var<T>>, int, int);                \
  template Var<T> depthwise_conv2d(Var<T>, Var<T>, std::optional<Var<T>>, int, int);      \
  template Var<T> linear(Var<T>, Var<T>, std::optional<Var<T>>);                          \
  template Var<T> group_norm(Var<T>, Var<T>, Var<T>, int, double);                        \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, double);                             \
  template Var<T> silu(Var<T>);                                                           \
  template Var<T> gelu(Var<T>);                                                           \
  template Var<T> add(Var<T>, Var<T>);                                                    \
  template Var<T> scale(Var<T>, double);                                                  \
  template Var<T> concat(std::span<const Var<T>>, int);                                   \
  template Var<T> global_avg_pool(Var<T>);                                                \
  template Var<T> unfold_patches(Var<T>, int);                                            \
  template Var<T> fold_patches(Var<T>, int, int, int);                                    \
  template Var<T> self_attention(Var<T>, int);                                            \
  template Tensor<T> attention_weights(const Tensor<T>&, int);                            \
  template Var<T> l2_normalize(Var<T>, double);                                           \
  template Var<T> softmax(Var<T>);                                                        \
  template Var<T> log_softmax(Var<T>);                                                    \
  template Var<T> log(Var<T>);                                                            \
  template Var<T> sum(Var<T>);

LOWDINO_INSTANTIATE_OPS(float)
LOWDINO_INSTANTIATE_OPS(double)

}  // namespace lowdino::ad
