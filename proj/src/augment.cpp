// SPDX-License-Identifier: Apache-2.0
#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "lowdino/datapipe.hpp"

namespace lowdino::data {

namespace {

bool is_prob(double p) { return p >= 0.0 && p <= 1.0; }

void check_range(const Tensor<float>& chw, const char* what) {
  if (chw.rank() != 3 || chw.dim(0) != 3)
    throw std::invalid_argument(std::string(what) + ": expected [3,H,W], got " + shape_str(chw.shape()));
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

double cubic(double x) {
  constexpr double a = -0.75;
  x = std::abs(x);
  if (x <= 1) return ((a + 2) * x - (a + 3)) * x * x + 1;
  if (x < 2) return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a;
  return 0;
}

// Per output position: four source indices (edge-replicated) and weights.
struct Taps {
  std::vector<std::array<int, 4>> idx;
  std::vector<std::array<double, 4>> w;
};

Taps make_taps(int start, int len, int limit, int out) {
  Taps t;
  t.idx.resize(static_cast<std::size_t>(out));
  t.w.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(len) / out;
  for (int o = 0; o < out; ++o) {
    const double src = start + (o + 0.5) * scale - 0.5;
    const int base = static_cast<int>(std::floor(src));
    const double frac = src - base;
    double total = 0;
    for (int k = 0; k < 4; ++k) {
      t.idx[o][k] = std::clamp(base - 1 + k, 0, limit - 1);
      t.w[o][k] = cubic(frac - (k - 1));
      total += t.w[o][k];
    }
    for (auto& w : t.w[o]) w /= total;
  }
  return t;
}

Tensor<float> gray_plane(const Tensor<float>& chw) {
  const int h = chw.dim(1), w = chw.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor<float> g({h, w});
  for (std::size_t i = 0; i < hw; ++i) g[i] = 0.299f * chw[i] + 0.587f * chw[hw + i] + 0.114f * chw[2 * hw + i];
  return g;
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const float d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0;
  if (d <= 0) {
    h = 0;
    return;
  }
  if (mx == r)
    h = (g - b) / d;
  else if (mx == g)
    h = 2 + (b - r) / d;
  else
    h = 4 + (r - g) / d;
  h /= 6;
  if (h < 0) h += 1;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float hh = h * 6;
  const int i = static_cast<int>(std::floor(hh)) % 6;
  const float f = hh - std::floor(hh);
  const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

}  // namespace

void AugmentConfig::validate() const {
  if (n_crops < 2) throw std::invalid_argument("n_crops must be >= 2");
  if (!(0 < local_scale.first && local_scale.first <= local_scale.second &&
        local_scale.second <= global_scale.second && global_scale.second <= 1))
    throw std::invalid_argument("scale ranges must satisfy 0 < local.lo <= local.hi <= global.hi <= 1");
  if (!(0 < global_scale.first && global_scale.first <= global_scale.second))
    throw std::invalid_argument("global_scale must satisfy 0 < lo <= hi");
  if (!(0 < aspect_ratio.first && aspect_ratio.first <= aspect_ratio.second))
    throw std::invalid_argument("aspect_ratio must satisfy 0 < lo <= hi");
  if (global_size < 1 || local_size < 1) throw std::invalid_argument("crop sizes must be >= 1");
  if (blur_radius.first > blur_radius.second) throw std::invalid_argument("blur_radius must satisfy lo <= hi");
  if (!(solarize_threshold >= 0 && solarize_threshold <= 1))
    throw std::invalid_argument("solarize_threshold must be in [0,1]");
  const std::pair<const char*, double> probs[] = {
      {"blur_p_global", blur_p_global}, {"blur_p_local", blur_p_local}, {"solarize_p_global", solarize_p_global},
      {"jitter_p", jitter_p},           {"grayscale_p", grayscale_p},   {"hflip_p", hflip_p},
      {"vflip_p", vflip_p}};
  for (const auto& [name, p] : probs)
    if (!is_prob(p)) throw std::invalid_argument(std::string(name) + " must be a probability in [0,1]");
}

Tensor<float> to_chw(const ImageRecord& img) {
  const int h = img.height(), w = img.width();
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor<float> out({3, h, w});
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) out[c * hw + i] = img.pixels[i * 3 + c];
  return out;
}

Tensor<float> resize_bicubic(const Tensor<float>& chw, int x0, int y0, int w, int h, int out_size) {
  check_range(chw, "resize_bicubic");
  const int H = chw.dim(1), W = chw.dim(2);
  if (w < 1 || h < 1 || x0 < 0 || y0 < 0 || x0 + w > W || y0 + h > H || out_size < 1)
    throw std::invalid_argument("resize_bicubic: window outside image");
  const Taps tx = make_taps(x0, w, W, out_size);
  const Taps ty = make_taps(y0, h, H, out_size);
  Tensor<float> out({3, out_size, out_size});
  std::vector<double> rows(static_cast<std::size_t>(H) * out_size);
  for (int c = 0; c < 3; ++c) {
    const float* src = chw.data() + static_cast<std::size_t>(c) * H * W;
    // horizontal pass over every source row the vertical taps can touch
    for (int y = 0; y < H; ++y)
      for (int o = 0; o < out_size; ++o) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) acc += tx.w[o][k] * src[static_cast<std::size_t>(y) * W + tx.idx[o][k]];
        rows[static_cast<std::size_t>(y) * out_size + o] = acc;
      }
    float* dst = out.data() + static_cast<std::size_t>(c) * out_size * out_size;
    for (int oy = 0; oy < out_size; ++oy)
      for (int ox = 0; ox < out_size; ++ox) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) acc += ty.w[oy][k] * rows[static_cast<std::size_t>(ty.idx[oy][k]) * out_size + ox];
        dst[static_cast<std::size_t>(oy) * out_size + ox] = clamp01(acc);
      }
  }
  return out;
}

std::pair<Tensor<float>, double> random_resized_crop(const Tensor<float>& chw, Range scale, Range ratio, int size,
                                                     Rng& rng) {
  check_range(chw, "random_resized_crop");
  const int H = chw.dim(1), W = chw.dim(2);
  const double total = static_cast<double>(H) * W;
  const double log_lo = std::log(ratio.first), log_hi = std::log(ratio.second);
  int degenerate = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = uniform(rng, scale.first, scale.second) * total;
    const double r = std::exp(uniform(rng, log_lo, log_hi));
    const int w = static_cast<int>(std::lround(std::sqrt(area * r)));
    const int h = static_cast<int>(std::lround(std::sqrt(area / r)));
    if (w < 1 || h < 1) {
      ++degenerate;
      continue;
    }
    if (w > W || h > H) continue;
    const double frac = w * static_cast<double>(h) / total;
    if (frac < scale.first || frac > scale.second) continue;
    const int x0 = std::uniform_int_distribution<int>(0, W - w)(rng);
    const int y0 = std::uniform_int_distribution<int>(0, H - h)(rng);
    return {resize_bicubic(chw, x0, y0, w, h, size), frac};
  }
  if (degenerate == 10)
    throw std::runtime_error("random_resized_crop: crop window degenerate (area < 1 px) after 10 attempts on a " +
                             std::to_string(W) + "x" + std::to_string(H) + " image");
  // Fallback: centred window of the target area with the aspect ratio closest
  // to the image's own, adjusted so the realised fraction stays in range.
  const double target = 0.5 * (scale.first + scale.second) * total;
  const double r = std::clamp(static_cast<double>(W) / H, ratio.first, ratio.second);
  int best_w = 0, best_h = 0;
  double best_err = 1e300;
  for (int h = 1; h <= H; ++h) {
    for (int w : {static_cast<int>(std::floor(target / h)), static_cast<int>(std::ceil(target / h))}) {
      if (w < 1 || w > W) continue;
      const double frac = w * static_cast<double>(h) / total;
      if (frac < scale.first || frac > scale.second) continue;
      const double err = std::abs(std::log(static_cast<double>(w) / h / r)) + std::abs(w * h - target) / total;
      if (err < best_err) best_err = err, best_w = w, best_h = h;
    }
  }
  if (best_w == 0)
    throw std::runtime_error("random_resized_crop: no window of a " + std::to_string(W) + "x" + std::to_string(H) +
                             " image has area fraction in the requested range");
  const int x0 = (W - best_w) / 2, y0 = (H - best_h) / 2;
  return {resize_bicubic(chw, x0, y0, best_w, best_h, size), best_w * static_cast<double>(best_h) / total};
}

Tensor<float> flip(const Tensor<float>& chw, Axis axis) {
  check_range(chw, "flip");
  const int H = chw.dim(1), W = chw.dim(2);
  Tensor<float> out(chw.shape());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int sy = axis == Axis::Vertical ? H - 1 - y : y;
        const int sx = axis == Axis::Horizontal ? W - 1 - x : x;
        out[(static_cast<std::size_t>(c) * H + y) * W + x] = chw[(static_cast<std::size_t>(c) * H + sy) * W + sx];
      }
  return out;
}

Tensor<float> grayscale(const Tensor<float>& chw) {
  check_range(chw, "grayscale");
  const Tensor<float> g = gray_plane(chw);
  Tensor<float> out(chw.shape());
  for (int c = 0; c < 3; ++c) std::copy(g.data(), g.data() + g.size(), out.data() + c * g.size());
  for (auto& v : out.vec()) v = clamp01(v);
  return out;
}

Tensor<float> color_jitter(const Tensor<float>& chw, const JitterStrengths& s, Rng& rng) {
  check_range(chw, "color_jitter");
  Tensor<float> out = chw;
  const std::size_t hw = out.size() / 3;
  const double fb = uniform(rng, std::max(0.0, 1 - s.brightness), 1 + s.brightness);
  const double fc = uniform(rng, std::max(0.0, 1 - s.contrast), 1 + s.contrast);
  const double fs = uniform(rng, std::max(0.0, 1 - s.saturation), 1 + s.saturation);
  const double dh = uniform(rng, -s.hue, s.hue);

  for (auto& v : out.vec()) v = clamp01(v * fb);

  const Tensor<float> g0 = gray_plane(out);
  double mean = 0;
  for (float v : g0.vec()) mean += v;
  mean /= static_cast<double>(hw);
  for (auto& v : out.vec()) v = clamp01((v - mean) * fc + mean);

  const Tensor<float> g1 = gray_plane(out);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] = clamp01((out[c * hw + i] - g1[i]) * fs + g1[i]);

  if (dh != 0) {
    for (std::size_t i = 0; i < hw; ++i) {
      float h, sat, val;
      rgb_to_hsv(out[i], out[hw + i], out[2 * hw + i], h, sat, val);
      h = static_cast<float>(h + dh);
      h -= std::floor(h);
      float r, g, b;
      hsv_to_rgb(h, sat, val, r, g, b);
      out[i] = clamp01(r), out[hw + i] = clamp01(g), out[2 * hw + i] = clamp01(b);
    }
  }
  return out;
}

Tensor<float> gaussian_blur(const Tensor<float>& chw, double radius) {
  check_range(chw, "gaussian_blur");
  if (!(radius > 0)) {
    spdlog::warn("gaussian_blur: radius {} <= 0, returning input unchanged", radius);
    return chw;
  }
  const int H = chw.dim(1), W = chw.dim(2);
  const int half = static_cast<int>(std::ceil(3 * radius));
  std::vector<double> k(static_cast<std::size_t>(2 * half + 1));
  double total = 0;
  for (int i = -half; i <= half; ++i) total += k[i + half] = std::exp(-0.5 * i * i / (radius * radius));
  for (auto& v : k) v /= total;

  Tensor<float> out(chw.shape());
  std::vector<double> tmp(static_cast<std::size_t>(H) * W);
  for (int c = 0; c < 3; ++c) {
    const float* src = chw.data() + static_cast<std::size_t>(c) * H * W;
    float* dst = out.data() + static_cast<std::size_t>(c) * H * W;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int i = -half; i <= half; ++i) acc += k[i + half] * src[static_cast<std::size_t>(y) * W + std::clamp(x + i, 0, W - 1)];
        tmp[static_cast<std::size_t>(y) * W + x] = acc;
      }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int i = -half; i <= half; ++i) acc += k[i + half] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, H - 1)) * W + x];
        dst[static_cast<std::size_t>(y) * W + x] = clamp01(acc);
      }
  }
  return out;
}

Tensor<float> solarize(const Tensor<float>& chw, double threshold) {
  Tensor<float> out = chw;
  for (auto& v : out.vec())
    if (v >= threshold) v = 1.0f - v;
  return out;
}

namespace {

Tensor<float> augment_view(const Tensor<float>& chw, const AugmentConfig& cfg, bool global, Rng& rng, CropInfo& info) {
  auto [img, frac] = random_resized_crop(chw, global ? cfg.global_scale : cfg.local_scale, cfg.aspect_ratio,
                                         global ? cfg.global_size : cfg.local_size, rng);
  info.area_fraction = frac;
  if ((info.hflip = bernoulli(rng, cfg.hflip_p))) img = flip(img, Axis::Horizontal);
  if ((info.vflip = bernoulli(rng, cfg.vflip_p))) img = flip(img, Axis::Vertical);
  if ((info.jitter = bernoulli(rng, cfg.jitter_p))) img = color_jitter(img, cfg.jitter, rng);
  if ((info.grayscale = bernoulli(rng, cfg.grayscale_p))) img = grayscale(img);
  if ((info.blur = bernoulli(rng, global ? cfg.blur_p_global : cfg.blur_p_local)))
    img = gaussian_blur(img, uniform(rng, cfg.blur_radius.first, cfg.blur_radius.second));
  if (global && (info.solarize = bernoulli(rng, cfg.solarize_p_global))) img = solarize(img, cfg.solarize_threshold);
  return img;
}

}  // namespace

CropSet generate_crops(const ImageRecord& img, const AugmentConfig& cfg, Rng& rng) {
  const Tensor<float> chw = to_chw(img);
  CropSet out;
  out.source_id = img.id;
  for (int v = 0; v < 2; ++v) {
    CropInfo info;
    out.globals.push_back(augment_view(chw, cfg, true, rng, info));
    out.global_info.push_back(info);
  }
  for (int v = 2; v < cfg.n_crops; ++v) {
    CropInfo info;
    out.locals.push_back(augment_view(chw, cfg, false, rng, info));
    out.local_info.push_back(info);
  }
  return out;
}

Tensor<float> canonical_view(const ImageRecord& img, int size) {
  return resize_bicubic(to_chw(img), 0, 0, img.width(), img.height(), size);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed({seed, epoch}));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

BatchIterator::BatchIterator(const std::vector<ImageRecord>& records, int batch_size, AugmentConfig cfg,
                             std::uint64_t seed, std::uint64_t epoch)
    : records_(&records), batch_size_(batch_size), cfg_(std::move(cfg)), seed_(seed), epoch_(epoch) {
  if (records.empty()) throw std::invalid_argument("batch iterator: dataset is empty");
  if (batch_size < 1) throw std::invalid_argument("batch iterator: batch_size must be >= 1");
  cfg_.validate();
  order_ = epoch_order(records.size(), seed, epoch);
}

std::size_t BatchIterator::batch_count() const {
  return (order_.size() + static_cast<std::size_t>(batch_size_) - 1) / static_cast<std::size_t>(batch_size_);
}

std::optional<Batch> BatchIterator::next() {
  if (pos_ >= order_.size()) return std::nullopt;
  const std::size_t end = std::min(order_.size(), pos_ + static_cast<std::size_t>(batch_size_));
  Batch b;
  for (; pos_ < end; ++pos_) {
    const std::size_t i = order_[pos_];
    Rng rng(derive_seed({seed_, epoch_, i}));
    b.indices.push_back(i);
    b.crops.push_back(generate_crops((*records_)[i], cfg_, rng));
  }
  return b;
}

namespace {

Tensor<float> stack(const std::vector<CropSet>& crops, bool globals) {
  std::vector<const Tensor<float>*> views;
  for (const auto& c : crops)
    for (const auto& v : globals ? c.globals : c.locals) views.push_back(&v);
  if (views.empty()) return Tensor<float>({0, 3, 1, 1});
  const Shape s = views.front()->shape();
  Tensor<float> out({static_cast<int>(views.size()), s[0], s[1], s[2]});
  const std::size_t per = views.front()->size();
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (views[i]->shape() != s) throw std::invalid_argument("stack: crops have mixed shapes");
    std::copy(views[i]->data(), views[i]->data() + per, out.data() + i * per);
  }
  return out;
}

}  // namespace

Tensor<float> stack_globals(const std::vector<CropSet>& crops) { return stack(crops, true); }
Tensor<float> stack_locals(const std::vector<CropSet>& crops) { return stack(crops, false); }

}  // namespace lowdino::data
