// SPDX-License-Identifier: Apache-2.0
#include "lowdino/checkpoint.hpp"

#include "lowdino/container.hpp"

namespace lowdino {

namespace {

constexpr const char* kKind = "checkpoint";

void add_set(Container& c, const std::string& prefix, const ParameterSet& p) {
  for (const auto& [name, t] : p) c.add(prefix + name, t);
}

}  // namespace

const ParameterSet& Checkpoint::backbone_source(bool prefer_teacher) const {
  return prefer_teacher && !teacher.empty() ? teacher : student;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  Container c;
  c.kind = kKind;
  c.meta = {{"config", ck.config_text}, {"t", ck.t},           {"epoch", ck.epoch},
            {"seed", ck.seed},          {"extra", ck.extra},   {"student_version", ck.student.version},
            {"teacher_version", ck.teacher.version}};
  add_set(c, "student/", ck.student);
  add_set(c, "teacher/", ck.teacher);
  add_set(c, "optim/momentum/", ck.momentum);
  if (ck.center.size() > 0) c.add("center", ck.center);
  write_container(c, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path, kKind);
  Checkpoint ck;
  try {
    ck.config_text = c.meta.at("config").get<std::string>();
    ck.t = c.meta.at("t").get<std::int64_t>();
    ck.epoch = c.meta.at("epoch").get<int>();
    ck.seed = c.meta.at("seed").get<std::uint64_t>();
    ck.extra = c.meta.at("extra");
    ck.student.version = c.meta.at("student_version").get<std::int64_t>();
    ck.teacher.version = c.meta.at("teacher_version").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path.string() + ": malformed header: " + e.what());
  }
  for (const auto& e : c.entries) {
    const std::string& n = e.name;
    if (n.starts_with("student/"))
      ck.student.add(n.substr(8), e.tensor);
    else if (n.starts_with("teacher/"))
      ck.teacher.add(n.substr(8), e.tensor);
    else if (n.starts_with("optim/momentum/"))
      ck.momentum.add(n.substr(15), e.tensor);
    else if (n == "center")
      ck.center = e.tensor;
    else
      throw FormatError("checkpoint " + path.string() + ": unexpected entry '" + n + "'");
  }
  return ck;
}

}  // namespace lowdino
