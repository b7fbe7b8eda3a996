// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training checkpoints: student, teacher, centre, optimizer buffers, the
// iteration counter and the resolved config, in one container file.

#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "lowdino/config.hpp"
#include "lowdino/parameter_set.hpp"

namespace lowdino {

struct Checkpoint {
  std::string config_text;  // echo_config of the run that wrote it
  ParameterSet student;
  ParameterSet teacher;  // empty for distilled students
  Tensor<float> center;
  ParameterSet momentum;  // optimizer buffers, student layout
  std::int64_t t = 0;     // iterations completed
  int epoch = 0;          // epochs completed
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();

  RunConfig config() const { return parse_config(config_text); }
  /// Teacher if present and requested, student otherwise.
  const ParameterSet& backbone_source(bool prefer_teacher) const;

  bool operator==(const Checkpoint&) const = default;
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
/// Throws FormatError on version mismatch or ChecksumError on corruption.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace lowdino
