// SPDX-License-Identifier: Apache-2.0
#include "lowdino/container.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lowdino {

namespace {

constexpr char kMagic[8] = {'L', 'D', 'N', 'O', 'C', 'T', 'N', 'R'};

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& in, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

std::uint32_t crc(const char* p, std::size_t n, std::uint32_t seed = 0) {
  uLong c = seed == 0 ? crc32(0L, Z_NULL, 0) : seed;
  return static_cast<std::uint32_t>(crc32(c, reinterpret_cast<const Bytef*>(p), static_cast<uInt>(n)));
}

void append_floats(std::string& out, const Tensor<float>& t) {
  if constexpr (std::endian::native == std::endian::little) {
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
  } else {
    for (float f : t.vec()) put_le(out, std::bit_cast<std::uint32_t>(f));
  }
}

}  // namespace

const Tensor<float>& Container::get(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return e.tensor;
  throw FormatError("container of kind '" + kind + "' has no entry '" + name + "'");
}

std::string encode_container(const Container& c) {
  nlohmann::json header;
  header["kind"] = c.kind;
  header["meta"] = c.meta;
  header["entries"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : c.entries) {
    header["entries"].push_back(
        {{"name", e.name}, {"dtype", "f32"}, {"shape", e.tensor.shape()}, {"offset", offset}});
    offset += e.tensor.size() * sizeof(float);
  }
  const std::string h = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kContainerVersion);
  put_le<std::uint64_t>(out, h.size());
  const std::size_t body = out.size();
  out += h;
  for (const auto& e : c.entries) append_floats(out, e.tensor);
  put_le<std::uint32_t>(out, crc(out.data() + body, out.size() - body));
  return out;
}

Container decode_container(const std::string& bytes, const std::string& expected_kind) {
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw FormatError("not a lowdino container (bad magic)");
  const auto version = get_le<std::uint32_t>(bytes, 8);
  if (version != kContainerVersion)
    throw FormatError("container format version " + std::to_string(version) +
                      " is not supported (this build reads version " + std::to_string(kContainerVersion) + ")");
  const auto hlen = get_le<std::uint64_t>(bytes, 12);
  const std::size_t body = 20;
  if (hlen > bytes.size() - body - 4) throw FormatError("truncated container header");
  const std::uint32_t stored = get_le<std::uint32_t>(bytes, bytes.size() - 4);
  if (crc(bytes.data() + body, bytes.size() - body - 4) != stored)
    throw ChecksumError("container checksum mismatch: file is corrupt");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + body, bytes.begin() + static_cast<std::ptrdiff_t>(body + hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed container header: ") + e.what());
  }
  Container c;
  c.kind = header.at("kind").get<std::string>();
  if (!expected_kind.empty() && c.kind != expected_kind)
    throw FormatError("expected a '" + expected_kind + "' container, found '" + c.kind + "'");
  c.meta = header.value("meta", nlohmann::json::object());
  const std::size_t payload = body + hlen;
  const std::size_t payload_len = bytes.size() - 4 - payload;
  for (const auto& e : header.at("entries")) {
    if (e.at("dtype").get<std::string>() != "f32") throw FormatError("unsupported dtype in container");
    Shape shape = e.at("shape").get<Shape>();
    const auto off = e.at("offset").get<std::uint64_t>();
    const std::size_t n = numel(shape);
    if (off + n * sizeof(float) > payload_len)
      throw FormatError("entry '" + e.at("name").get<std::string>() + "' runs past the payload");
    std::vector<float> data(n);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(data.data(), bytes.data() + payload + off, n * sizeof(float));
    } else {
      for (std::size_t i = 0; i < n; ++i)
        data[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, payload + off + i * 4));
    }
    c.add(e.at("name").get<std::string>(), Tensor<float>(std::move(shape), std::move(data)));
  }
  return c;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_container(const Container& c, const std::filesystem::path& path) {
  write_file_atomic(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path, const std::string& expected_kind) {
  return decode_container(read_file(path), expected_kind);
}

}  // namespace lowdino
