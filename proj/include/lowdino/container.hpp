// SPDX-License-Identifier: Apache-2.0
#pragma once

// Versioned binary container shared by parameter sets, checkpoints, teacher
// logit files and embedding sets.
//
//   bytes 0..7     magic "LDNOCTNR"
//   u32 LE         format version
//   u64 LE         header length H
//   H bytes        JSON header: {"kind", "meta", "entries": [{name, dtype,
//                  shape, offset}]}, offsets relative to payload start
//   payload        little-endian float32 arrays, concatenated in entry order
//   u32 LE         CRC-32 over header bytes and payload

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lowdino/tensor.hpp"

namespace lowdino {

inline constexpr std::uint32_t kContainerVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

struct ContainerEntry {
  std::string name;
  Tensor<float> tensor;
};

struct Container {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ContainerEntry> entries;

  void add(std::string name, Tensor<float> t) { entries.push_back({std::move(name), std::move(t)}); }
  const Tensor<float>& get(const std::string& name) const;
};

std::string encode_container(const Container& c);
Container decode_container(const std::string& bytes, const std::string& expected_kind = "");

/// Atomic write: temp file in the same directory, then rename.
void write_container(const Container& c, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path, const std::string& expected_kind = "");

/// Atomic text/binary file write used for every artefact.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace lowdino
