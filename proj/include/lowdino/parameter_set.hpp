// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "lowdino/autodiff.hpp"
#include "lowdino/tensor.hpp"

namespace lowdino {

/// Named collection of weight arrays. Entries are kept sorted by name so every
/// traversal (norms, updates, serialization) has one fixed order.
template <typename T>
class BasicParameterSet {
 public:
  using Map = std::map<std::string, Tensor<T>, std::less<>>;

  void add(std::string name, Tensor<T> value);
  bool contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }
  const Tensor<T>& at(std::string_view name) const;
  Tensor<T>& at(std::string_view name);
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Entries whose name starts with `prefix`, with the prefix kept.
  BasicParameterSet slice(std::string_view prefix) const;
  /// Inserts every entry of `other` under `prefix + name`.
  void merge(const BasicParameterSet& other, std::string_view prefix = "");

  /// Same names and shapes, all zeros.
  BasicParameterSet zeros_like() const;

  template <typename U>
  BasicParameterSet<U> cast() const {
    BasicParameterSet<U> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
    out.version = version;
    return out;
  }

  bool operator==(const BasicParameterSet&) const = default;

  std::int64_t version = 0;

 private:
  Map entries_;
};

using ParameterSet = BasicParameterSet<float>;

/// Sum over entries of shape products.
template <typename T>
std::int64_t count_params(const BasicParameterSet<T>& p) {
  std::int64_t n = 0;
  for (const auto& [name, t] : p) n += static_cast<std::int64_t>(t.size());
  return n;
}

/// Throws naming the first entry whose name or shape differs.
template <typename T>
void check_same_layout(const BasicParameterSet<T>& a, const BasicParameterSet<T>& b, std::string_view what);

/// Parameters registered as tape leaves, looked up by name inside forward code.
template <typename T>
class Binding {
 public:
  Binding(ad::Tape<T>& tape, const BasicParameterSet<T>& params, bool requires_grad);

  ad::Var<T> operator()(std::string_view name) const;
  ad::Tape<T>& tape() const { return *tape_; }

  /// Gradients accumulated on the tape, zero for untouched entries.
  BasicParameterSet<T> gradients() const;

 private:
  ad::Tape<T>* tape_;
  std::map<std::string, ad::Var<T>, std::less<>> vars_;
};

/// Writes a parameter set to the versioned container format.
void save_parameters(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_parameters(const std::filesystem::path& path);

/// 32-bit CRC of the flattened payload, used for frozen-state checks.
std::uint32_t checksum(const ParameterSet& params);

}  // namespace lowdino
