#include <filesystem>
#include <fstream>
#include <map>

#include "doctest.h"
#include "lowdino/container.hpp"
#include "lowdino/datapipe.hpp"

using namespace lowdino;
using namespace lowdino::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("lowdino_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ImageRecord constant_image(int h, int w, float v) { return {Tensor<float>({h, w, 3}, v), 0, "const"}; }

ImageRecord blob(std::uint64_t seed = 3) { return make_synthetic_blobs(seed, 3, 1, 0.05, 48).records.front(); }

bool all_in_unit(const Tensor<float>& t) {
  for (float v : t.vec())
    if (!(v >= 0.0f && v <= 1.0f)) return false;
  return true;
}

bool same_crops(const CropSet& a, const CropSet& b) {
  return a.globals == b.globals && a.locals == b.locals && a.source_id == b.source_id;
}

}  // namespace

TEST_CASE("synthetic blobs: count, balance and reproducibility") {
  const auto ds = make_synthetic_blobs(7, 3, 300, 0.05, 64);
  REQUIRE(ds.records.size() == 300);
  std::map<int, int> per_class;
  for (const auto& r : ds.records) {
    validate(r);
    ++per_class[*r.label];
  }
  CHECK(per_class == std::map<int, int>{{0, 100}, {1, 100}, {2, 100}});
  const auto again = load_dataset({.kind = "synthetic-blobs", .root = "", .class_count = 3, .seed = 7, .n = 300});
  for (std::size_t i = 0; i < 300; ++i) {
    CHECK(again.records[i].id == ds.records[i].id);
    CHECK(again.records[i].pixels == ds.records[i].pixels);
  }
  CHECK(make_synthetic_blobs(8, 3, 1, 0.05, 64).records[0].pixels != ds.records[0].pixels);
}

TEST_CASE("synthetic blobs: dominant channel follows the class") {
  const auto ds = make_synthetic_blobs(11, 3, 30, 0.0, 32);
  for (const auto& r : ds.records) {
    // brightest pixel by the class channel's margin over the others
    float best = -1;
    int best_c = -1;
    for (int i = 0; i < 32 * 32; ++i)
      for (int c = 0; c < 3; ++c) {
        const float m = r.pixels[i * 3 + c] - 0.5f * (r.pixels[i * 3 + (c + 1) % 3] + r.pixels[i * 3 + (c + 2) % 3]);
        if (m > best) best = m, best_c = c;
      }
    CHECK(best_c == *r.label % 3);
  }
}

TEST_CASE("cifar binary loader") {
  const auto dir = scratch_dir("cifar");
  std::string bytes(10000 * 3073, '\0');
  for (int r = 0; r < 10000; ++r) {
    bytes[r * 3073] = static_cast<char>(r % 10);
    bytes[r * 3073 + 1] = static_cast<char>(255);  // red channel, pixel 0
    bytes[r * 3073 + 1 + 1024 + 1] = static_cast<char>(51);  // green channel, pixel 1
  }
  write_file_atomic(dir / "test_batch.bin", bytes);
  const auto ds = load_dataset({.kind = "cifar-binary", .root = (dir / "test_batch.bin").string(), .class_count = 10});
  REQUIRE(ds.records.size() == 10000);
  for (std::size_t i = 0; i < ds.records.size(); ++i) CHECK(*ds.records[i].label == static_cast<int>(i % 10));
  const auto& px = ds.records[17].pixels;
  CHECK(px.shape() == Shape{32, 32, 3});
  CHECK(px[0] == doctest::Approx(1.0));
  CHECK(px[1] == 0.0f);
  CHECK(px[3 + 1] == doctest::Approx(0.2));

  write_file_atomic(dir / "short.bin", bytes.substr(0, 2 * 3073 + 100));
  try {
    load_cifar_binary(dir / "short.bin");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte offset 6146") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("image folder: one unreadable file among ten") {
  const auto dir = scratch_dir("folder");
  const auto imgs = make_synthetic_blobs(1, 2, 9, 0.05, 16).records;
  fs::create_directories(dir / "cat");
  fs::create_directories(dir / "dog");
  for (int i = 0; i < 9; ++i) {
    const auto cls = dir / (i % 2 ? "dog" : "cat");
    if (i % 3 == 0)
      write_ppm(imgs[i], cls / ("img" + std::to_string(i) + ".ppm"));
    else
      write_png(imgs[i], cls / ("img" + std::to_string(i) + ".png"));
  }
  std::ofstream(dir / "dog" / "broken.png") << "not a png";
  const auto ds = load_dataset({.kind = "image-folder", .root = dir.string()});
  CHECK(ds.records.size() == 9);
  REQUIRE(ds.errors.size() == 1);
  CHECK(ds.errors[0].id == "dog/broken.png");
  for (const auto& r : ds.records) {
    CHECK(*r.label == (r.id.starts_with("dog/") ? 1 : 0));
    CHECK(r.pixels.shape() == Shape{16, 16, 3});
  }
  // 8-bit storage round trip is within half a quantisation step
  const auto& first = ds.records[0];  // cat/img0.ppm
  for (std::size_t i = 0; i < first.pixels.size(); ++i)
    CHECK(std::abs(first.pixels[i] - imgs[0].pixels[i]) <= 0.5f / 255.0f + 1e-6f);
  CHECK_THROWS(load_dataset({.kind = "image-folder", .root = (dir / "missing").string()}));
  fs::remove_all(dir);
}

TEST_CASE("validate rejects bad records") {
  CHECK_THROWS_AS(validate(constant_image(4, 16, 0.5f)), std::invalid_argument);
  CHECK_THROWS_AS(validate(constant_image(16, 16, 1.5f)), std::invalid_argument);
  CHECK_NOTHROW(validate(constant_image(8, 8, 1.0f)));
}

TEST_CASE("pointwise transforms") {
  const auto c = to_chw(constant_image(12, 10, 0.9f));
  const auto sol = solarize(c, 0.5);
  for (float v : sol.vec()) CHECK(v == doctest::Approx(0.1));
  for (double r : {0.1, 0.5, 2.0}) {
    const auto blurred = gaussian_blur(c, r);
    for (float v : blurred.vec()) CHECK(v == doctest::Approx(0.9).epsilon(1e-6));
  }
  CHECK(gaussian_blur(c, 0.0) == c);

  const auto img = to_chw(blob());
  CHECK(flip(flip(img, Axis::Horizontal), Axis::Horizontal) == img);
  CHECK(flip(flip(img, Axis::Vertical), Axis::Vertical) == img);
  CHECK(flip(img, Axis::Horizontal) != img);
  const auto f = flip(img, Axis::Horizontal);
  const int w = img.dim(2);
  CHECK(f[5 * w + 0] == img[5 * w + w - 1]);

  // sum of pixels is preserved by a permutation
  double s0 = 0, s1 = 0;
  for (float v : img.vec()) s0 += v;
  for (float v : f.vec()) s1 += v;
  CHECK(s0 == doctest::Approx(s1));

  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    CHECK(all_in_unit(color_jitter(img, {0.8, 0.8, 0.8, 0.5}, rng)));
    CHECK(all_in_unit(gaussian_blur(img, uniform(rng, 0.1, 3.0))));
  }
  const auto g = grayscale(img);
  const std::size_t hw = g.size() / 3;
  for (std::size_t i = 0; i < hw; ++i) CHECK(g[i] == g[hw + i]);

  // zero jitter strengths leave the image unchanged up to hsv round trip
  const auto j = color_jitter(img, {0, 0, 0, 0}, rng);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(j[i] == doctest::Approx(img[i]).epsilon(1e-5));
}

TEST_CASE("bicubic resize reproduces the image at identity size and constants at any size") {
  const auto img = to_chw(blob());
  const auto same = resize_bicubic(img, 0, 0, img.dim(2), img.dim(1), img.dim(1));
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(same[i] == doctest::Approx(img[i]).epsilon(1e-5));
  const auto c = to_chw(constant_image(20, 30, 0.25f));
  const auto resized = resize_bicubic(c, 3, 2, 17, 9, 13);
  for (float v : resized.vec()) CHECK(v == doctest::Approx(0.25));
  CHECK_THROWS(resize_bicubic(c, 20, 0, 11, 5, 4));
}

TEST_CASE("generate_crops shapes and determinism") {
  AugmentConfig cfg;
  const auto img = blob();
  Rng a(42), b(42);
  const auto x = generate_crops(img, cfg, a);
  const auto y = generate_crops(img, cfg, b);
  CHECK(x.globals.size() == 2);
  CHECK(x.locals.size() == 2);
  CHECK(x.globals[0].shape() == Shape{3, 64, 64});
  CHECK(x.locals[1].shape() == Shape{3, 32, 32});
  CHECK(same_crops(x, y));
  CHECK(x.source_id == img.id);

  cfg.n_crops = 10;
  const auto z = generate_crops(img, cfg, a);
  CHECK(z.locals.size() == 8);
}

TEST_CASE("degenerate config gives identical full-image globals") {
  AugmentConfig cfg;
  cfg.global_scale = {1, 1};
  cfg.local_scale = {1, 1};
  cfg.blur_p_global = cfg.blur_p_local = cfg.solarize_p_global = 0;
  cfg.jitter_p = cfg.grayscale_p = cfg.hflip_p = cfg.vflip_p = 0;
  cfg.validate();
  const auto img = blob();
  Rng rng(9);
  const auto c = generate_crops(img, cfg, rng);
  CHECK(c.globals[0] == c.globals[1]);
  CHECK(c.globals[0] == canonical_view(img, cfg.global_size));
  CHECK(c.global_info[0].area_fraction == 1.0);
}

TEST_CASE("crop scales and augmentation rates over 10000 crops") {
  AugmentConfig cfg;
  cfg.global_size = 16;
  cfg.local_size = 8;
  cfg.vflip_p = 0.3;
  const auto img = blob();
  constexpr int kImages = 5000;  // 10000 global and 10000 local crops
  std::map<std::string, int> global_hits, local_hits;
  bool scales_ok = true, pixels_ok = true;
  for (int i = 0; i < kImages; ++i) {
    Rng rng(derive_seed({77, static_cast<std::uint64_t>(i)}));
    const auto c = generate_crops(img, cfg, rng);
    for (int v = 0; v < 2; ++v) {
      const auto& g = c.global_info[v];
      const auto& l = c.local_info[v];
      scales_ok &= g.area_fraction >= cfg.global_scale.first && g.area_fraction <= cfg.global_scale.second;
      scales_ok &= l.area_fraction >= cfg.local_scale.first && l.area_fraction <= cfg.local_scale.second;
      pixels_ok &= all_in_unit(c.globals[v]) && all_in_unit(c.locals[v]);
      for (auto [info, hits] : {std::pair{&g, &global_hits}, std::pair{&l, &local_hits}}) {
        (*hits)["hflip"] += info->hflip;
        (*hits)["vflip"] += info->vflip;
        (*hits)["jitter"] += info->jitter;
        (*hits)["grayscale"] += info->grayscale;
        (*hits)["blur"] += info->blur;
        (*hits)["solarize"] += info->solarize;
      }
    }
  }
  CHECK(scales_ok);
  CHECK(pixels_ok);
  const double n = 2.0 * kImages;
  auto rate_ok = [&](const std::map<std::string, int>& hits, const std::string& key, double p) {
    const double r = hits.at(key) / n;
    INFO(key << " rate " << r << " vs " << p);
    CHECK(std::abs(r - p) <= 0.03);
  };
  rate_ok(global_hits, "hflip", cfg.hflip_p);
  rate_ok(global_hits, "vflip", cfg.vflip_p);
  rate_ok(global_hits, "jitter", cfg.jitter_p);
  rate_ok(global_hits, "grayscale", cfg.grayscale_p);
  rate_ok(global_hits, "blur", cfg.blur_p_global);
  rate_ok(global_hits, "solarize", cfg.solarize_p_global);
  rate_ok(local_hits, "hflip", cfg.hflip_p);
  rate_ok(local_hits, "jitter", cfg.jitter_p);
  rate_ok(local_hits, "grayscale", cfg.grayscale_p);
  rate_ok(local_hits, "blur", cfg.blur_p_local);
  rate_ok(local_hits, "solarize", 0.0);
}

TEST_CASE("crop sampling on a tiny image stays in range or fails loudly") {
  Rng rng(3);
  const auto img = to_chw(constant_image(8, 8, 0.5f));
  for (int i = 0; i < 200; ++i) {
    auto [crop, frac] = random_resized_crop(img, {0.05, 0.4}, {0.75, 4.0 / 3.0}, 4, rng);
    CHECK(frac >= 0.05);
    CHECK(frac <= 0.4);
  }
  CHECK_THROWS_AS(random_resized_crop(img, {0.001, 0.002}, {1, 1}, 4, rng), std::runtime_error);
}

TEST_CASE("augment config validation") {
  AugmentConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  auto bad = cfg;
  bad.n_crops = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.local_scale = {0.3, 0.5};
  bad.global_scale = {0.4, 0.45};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.jitter_p = 1.2;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("jitter_p"), std::invalid_argument);
}

TEST_CASE("batch iterator") {
  const auto ds = make_synthetic_blobs(2, 3, 130, 0.05, 16);
  AugmentConfig cfg;
  cfg.global_size = 16;
  cfg.local_size = 8;

  SUBCASE("130 records in batches of 64") {
    BatchIterator it(ds.records, 64, cfg, 1, 0);
    CHECK(it.batch_count() == 3);
    std::vector<std::size_t> sizes, seen;
    while (auto b = it.next()) {
      sizes.push_back(b->indices.size());
      seen.insert(seen.end(), b->indices.begin(), b->indices.end());
    }
    CHECK(sizes == std::vector<std::size_t>{64, 64, 2});
    std::sort(seen.begin(), seen.end());
    for (std::size_t i = 0; i < seen.size(); ++i) CHECK(seen[i] == i);
  }

  SUBCASE("same seed, same batches; new epoch, new order") {
    BatchIterator a(ds.records, 32, cfg, 1, 0), b(ds.records, 32, cfg, 1, 0), c(ds.records, 32, cfg, 1, 1);
    CHECK(a.order() == b.order());
    CHECK(a.order() != c.order());
    auto ba = a.next(), bb = b.next();
    CHECK(ba->indices == bb->indices);
    for (std::size_t i = 0; i < ba->crops.size(); ++i) CHECK(same_crops(ba->crops[i], bb->crops[i]));
  }

  SUBCASE("crops do not depend on batch size") {
    BatchIterator a(ds.records, 7, cfg, 4, 2), b(ds.records, 130, cfg, 4, 2);
    auto whole = b.next();
    auto first = a.next();
    for (std::size_t i = 0; i < first->crops.size(); ++i) CHECK(same_crops(first->crops[i], whole->crops[i]));
  }

  SUBCASE("stacking is image-major") {
    BatchIterator it(ds.records, 3, cfg, 1, 0);
    auto b = it.next();
    const auto g = stack_globals(b->crops);
    CHECK(g.shape() == Shape{6, 3, 16, 16});
    const std::size_t per = 3 * 16 * 16;
    CHECK(std::equal(g.data() + 3 * per, g.data() + 4 * per, b->crops[1].globals[1].data()));
    CHECK(stack_locals(b->crops).shape() == Shape{6, 3, 8, 8});
  }

  std::vector<ImageRecord> empty;
  CHECK_THROWS_AS(BatchIterator(empty, 4, cfg, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(BatchIterator(ds.records, 0, cfg, 0, 0), std::invalid_argument);
}
