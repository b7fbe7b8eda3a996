// SPDX-License-Identifier: Apache-2.0
#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "lowdino/container.hpp"
#include "lowdino/datapipe.hpp"

namespace lowdino::data {

namespace fs = std::filesystem;

void validate(const ImageRecord& img) {
  const auto& p = img.pixels;
  if (p.rank() != 3 || p.dim(2) != 3)
    throw std::invalid_argument("image '" + img.id + "' must be HxWx3, got " + shape_str(p.shape()));
  if (p.dim(0) < 8 || p.dim(1) < 8)
    throw std::invalid_argument("image '" + img.id + "' is smaller than 8x8");
  for (float v : p.vec())
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("image '" + img.id + "' has pixels outside [0,1]");
}

namespace {

ImageRecord from_bytes(const unsigned char* rgb, int h, int w, std::optional<int> label, std::string id) {
  Tensor<float> px({h, w, 3});
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(rgb[i]) / 255.0f;
  return {std::move(px), label, std::move(id)};
}

std::vector<unsigned char> to_bytes(const ImageRecord& img) {
  std::vector<unsigned char> out(img.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
  return out;
}

std::string next_token(std::istream& in) {
  std::string tok;
  while (in >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    return tok;
  }
  throw std::runtime_error("truncated PPM header");
}

ImageRecord read_ppm(const fs::path& path, std::optional<int> label, std::string id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open");
  const std::string magic = next_token(in);
  if (magic != "P6" && magic != "P3") throw std::runtime_error("not a P3/P6 PPM");
  const int w = std::stoi(next_token(in));
  const int h = std::stoi(next_token(in));
  const int maxv = std::stoi(next_token(in));
  if (w <= 0 || h <= 0 || maxv <= 0 || maxv > 255) throw std::runtime_error("unsupported PPM dimensions");
  std::vector<unsigned char> rgb(static_cast<std::size_t>(w) * h * 3);
  if (magic == "P6") {
    in.get();
    in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (in.gcount() != static_cast<std::streamsize>(rgb.size())) throw std::runtime_error("truncated PPM payload");
  } else {
    for (auto& v : rgb) v = static_cast<unsigned char>(std::stoi(next_token(in)));
  }
  if (maxv != 255)
    for (auto& v : rgb) v = static_cast<unsigned char>(v * 255 / maxv);
  return from_bytes(rgb.data(), h, w, label, std::move(id));
}

ImageRecord read_png(const fs::path& path, std::optional<int> label, std::string id) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) throw std::runtime_error(image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> rgb(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgb.data(), 0, nullptr)) {
    png_image_free(&image);
    throw std::runtime_error(image.message);
  }
  return from_bytes(rgb.data(), static_cast<int>(image.height), static_cast<int>(image.width), label,
                    std::move(id));
}

}  // namespace

void write_ppm(const ImageRecord& img, const fs::path& path) {
  std::ostringstream os;
  os << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
  const auto bytes = to_bytes(img);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  write_file_atomic(path, os.str());
}

void write_png(const ImageRecord& img, const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  const auto bytes = to_bytes(img);
  if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr))
    throw std::runtime_error("png write failed: " + path.string());
}

Dataset load_image_folder(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::runtime_error("image folder not found: " + root.string());
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  Dataset ds;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[c]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const std::string id = classes[c].filename().string() + "/" + f.filename().string();
      std::string ext = f.extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
      try {
        ImageRecord rec;
        if (ext == ".png")
          rec = read_png(f, static_cast<int>(c), id);
        else if (ext == ".ppm")
          rec = read_ppm(f, static_cast<int>(c), id);
        else
          throw std::runtime_error("unsupported extension '" + ext + "'");
        validate(rec);
        ds.records.push_back(std::move(rec));
      } catch (const std::exception& e) {
        ds.errors.push_back({id, e.what()});
      }
    }
  }
  return ds;
}

Dataset load_cifar_binary(const fs::path& file, int class_count) {
  constexpr std::size_t kRecord = 3073;
  const std::string bytes = read_file(file);
  Dataset ds;
  const std::size_t n = bytes.size() / kRecord;
  if (bytes.size() % kRecord != 0)
    throw FormatError("malformed CIFAR binary " + file.string() + ": truncated record at byte offset " +
                      std::to_string(n * kRecord) + " (file size " + std::to_string(bytes.size()) + ")");
  ds.records.reserve(n);
  const std::string stem = file.stem().string();
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t off = r * kRecord;
    const int label = static_cast<unsigned char>(bytes[off]);
    if (label >= class_count)
      throw FormatError("malformed CIFAR binary " + file.string() + ": label " + std::to_string(label) +
                        " out of range at byte offset " + std::to_string(off));
    Tensor<float> px({32, 32, 3});
    for (int ch = 0; ch < 3; ++ch)
      for (int i = 0; i < 1024; ++i)
        px[static_cast<std::size_t>(i) * 3 + ch] =
            static_cast<unsigned char>(bytes[off + 1 + static_cast<std::size_t>(ch) * 1024 + i]) / 255.0f;
    ds.records.push_back({std::move(px), label, stem + ":" + std::to_string(r)});
  }
  return ds;
}

// Each image: a smooth two-colour background gradient in a random direction,
// plus one Gaussian blob whose dominant colour channel and centre position are
// set by the class, plus pixel noise.
Dataset make_synthetic_blobs(std::uint64_t seed, int class_count, int n, double noise, int image_size) {
  if (class_count < 1 || n < 0 || image_size < 8)
    throw std::invalid_argument("synthetic-blobs: need class_count >= 1, n >= 0, image_size >= 8");
  Dataset ds;
  ds.records.reserve(static_cast<std::size_t>(n));
  const double s = image_size;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed({seed, 0x626c6f62ULL, static_cast<std::uint64_t>(i)}));
    const int label = i % class_count;
    std::normal_distribution<double> gauss(0.0, noise);
    double bg0[3], bg1[3], blob[3];
    for (int c = 0; c < 3; ++c) {
      bg0[c] = uniform(rng, 0.1, 0.9);
      bg1[c] = uniform(rng, 0.1, 0.9);
    }
    const int dominant = label % 3;
    for (int c = 0; c < 3; ++c) blob[c] = c == dominant ? uniform(rng, 0.85, 1.0) : uniform(rng, 0.0, 0.3);
    const double dir = uniform(rng, 0.0, 2 * std::numbers::pi);
    const double angle = 2 * std::numbers::pi * label / class_count;
    const double cx = s * (0.5 + 0.22 * std::cos(angle)) + uniform(rng, -0.06, 0.06) * s;
    const double cy = s * (0.5 + 0.22 * std::sin(angle)) + uniform(rng, -0.06, 0.06) * s;
    const double sigma = uniform(rng, 0.10, 0.16) * s;

    Tensor<float> px({image_size, image_size, 3});
    for (int y = 0; y < image_size; ++y) {
      for (int x = 0; x < image_size; ++x) {
        const double u = ((x - s / 2) * std::cos(dir) + (y - s / 2) * std::sin(dir)) / s + 0.5;
        const double t = std::clamp(u, 0.0, 1.0);
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        const double a = std::exp(-d2 / (2 * sigma * sigma));
        for (int c = 0; c < 3; ++c) {
          const double bg = bg0[c] * (1 - t) + bg1[c] * t;
          const double v = bg * (1 - a) + blob[c] * a + (noise > 0 ? gauss(rng) : 0.0);
          px[(static_cast<std::size_t>(y) * image_size + x) * 3 + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    ds.records.push_back({std::move(px), label, "blobs-" + std::to_string(seed) + "-" + std::to_string(i)});
  }
  return ds;
}

Dataset load_dataset(const DatasetSource& source) {
  if (source.kind == "synthetic-blobs")
    return make_synthetic_blobs(source.seed, source.class_count, source.n, source.noise, source.image_size);
  if (source.root.empty()) throw std::invalid_argument("dataset kind '" + source.kind + "' needs a root path");
  if (source.kind == "image-folder") return load_image_folder(source.root);
  if (source.kind == "cifar-binary") return load_cifar_binary(source.root, source.class_count);
  throw std::invalid_argument("unknown dataset kind '" + source.kind + "'");
}

}  // namespace lowdino::data
