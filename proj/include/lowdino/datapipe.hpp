// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dataset ingestion and the multi-crop augmentation pipeline.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lowdino/rng.hpp"
#include "lowdino/tensor.hpp"

namespace lowdino::data {

/// Pixels are [H, W, 3] in [0, 1].
struct ImageRecord {
  Tensor<float> pixels;
  std::optional<int> label;
  std::string id;

  int height() const { return pixels.dim(0); }
  int width() const { return pixels.dim(1); }
};

/// Throws std::invalid_argument when pixels are out of range or the image is
/// smaller than 8x8.
void validate(const ImageRecord& img);

struct DatasetSource {
  std::string kind = "synthetic-blobs";  // image-folder | cifar-binary | synthetic-blobs
  std::string root;                      // directory or file for on-disk kinds
  int class_count = 3;
  std::uint64_t seed = 0;
  // synthetic-blobs parameters
  int n = 300;
  double noise = 0.05;
  int image_size = 64;

  bool operator==(const DatasetSource&) const = default;
};

struct LoadError {
  std::string id;
  std::string message;
};

struct Dataset {
  std::vector<ImageRecord> records;
  std::vector<LoadError> errors;
};

Dataset load_dataset(const DatasetSource& source);

Dataset load_image_folder(const std::filesystem::path& root);
/// Standard 3073-byte CIFAR-10 records. Throws FormatError with the byte
/// offset of the first malformed record.
Dataset load_cifar_binary(const std::filesystem::path& file, int class_count = 10);
Dataset make_synthetic_blobs(std::uint64_t seed, int class_count, int n, double noise, int image_size);

/// Image writers used by tests and tooling.
void write_ppm(const ImageRecord& img, const std::filesystem::path& path);
void write_png(const ImageRecord& img, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// augmentation

using Range = std::pair<double, double>;

struct JitterStrengths {
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;

  bool operator==(const JitterStrengths&) const = default;
};

struct AugmentConfig {
  int n_crops = 4;
  Range global_scale{0.4, 1.0};
  Range local_scale{0.05, 0.4};
  Range aspect_ratio{3.0 / 4.0, 4.0 / 3.0};
  int global_size = 64;
  int local_size = 32;
  double blur_p_global = 0.1;
  double blur_p_local = 0.5;
  Range blur_radius{0.1, 0.5};
  double solarize_p_global = 0.2;
  double solarize_threshold = 0.5;
  double jitter_p = 0.8;
  JitterStrengths jitter;
  double grayscale_p = 0.2;
  double hflip_p = 0.5;
  double vflip_p = 0.0;

  bool operator==(const AugmentConfig&) const = default;

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
};

/// Per-crop record of what the pipeline did; used for conformance checks.
struct CropInfo {
  double area_fraction = 0;
  bool hflip = false;
  bool vflip = false;
  bool jitter = false;
  bool grayscale = false;
  bool blur = false;
  bool solarize = false;
};

/// Crops are [3, S, S].
struct CropSet {
  std::vector<Tensor<float>> globals;
  std::vector<Tensor<float>> locals;
  std::vector<CropInfo> global_info;
  std::vector<CropInfo> local_info;
  std::string source_id;
};

/// Applies crop -> flip -> jitter/grayscale -> blur -> solarize to 2 global
/// and n_crops - 2 local views.
CropSet generate_crops(const ImageRecord& img, const AugmentConfig& cfg, Rng& rng);

/// Full image resized (bicubic) to size x size, no augmentation.
Tensor<float> canonical_view(const ImageRecord& img, int size);

// Individual transforms on [3, H, W] images.
Tensor<float> to_chw(const ImageRecord& img);
/// Bicubic resize of the window (x0, y0, w, h) of a [3, H, W] image.
Tensor<float> resize_bicubic(const Tensor<float>& chw, int x0, int y0, int w, int h, int out_size);
/// Samples a crop window with area fraction in `scale` and resizes it.
/// Returns the crop and its realised area fraction.
std::pair<Tensor<float>, double> random_resized_crop(const Tensor<float>& chw, Range scale, Range ratio, int size,
                                                     Rng& rng);
enum class Axis { Horizontal, Vertical };
Tensor<float> flip(const Tensor<float>& chw, Axis axis);
Tensor<float> color_jitter(const Tensor<float>& chw, const JitterStrengths& s, Rng& rng);
Tensor<float> grayscale(const Tensor<float>& chw);
/// Gaussian kernel truncated at 3 sigma; radius <= 0 returns the input.
Tensor<float> gaussian_blur(const Tensor<float>& chw, double radius);
Tensor<float> solarize(const Tensor<float>& chw, double threshold);

// ---------------------------------------------------------------------------
// batching

struct Batch {
  std::vector<std::size_t> indices;  // into the record list
  std::vector<CropSet> crops;
};

/// Stream of augmented batches for one epoch. Order is a seeded shuffle of
/// (seed, epoch); record i's crops come from the stream derive_seed(seed,
/// epoch, i), so output does not depend on batching or evaluation order.
class BatchIterator {
 public:
  BatchIterator(const std::vector<ImageRecord>& records, int batch_size, AugmentConfig cfg, std::uint64_t seed,
                std::uint64_t epoch);

  std::optional<Batch> next();
  std::size_t batch_count() const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const std::vector<ImageRecord>* records_;
  int batch_size_;
  AugmentConfig cfg_;
  std::uint64_t seed_;
  std::uint64_t epoch_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Seed-deterministic permutation of [0, n) for an epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

/// Stacks crops into [N*views, 3, S, S], image-major.
Tensor<float> stack_globals(const std::vector<CropSet>& crops);
Tensor<float> stack_locals(const std::vector<CropSet>& crops);

}  // namespace lowdino::data
