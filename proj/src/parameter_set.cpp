// SPDX-License-Identifier: Apache-2.0
#include "lowdino/parameter_set.hpp"

#include <zlib.h>

#include "lowdino/container.hpp"

namespace lowdino {

template <typename T>
void BasicParameterSet<T>::add(std::string name, Tensor<T> value) {
  auto [it, inserted] = entries_.emplace(std::move(name), std::move(value));
  if (!inserted) throw std::invalid_argument("duplicate parameter name: " + it->first);
}

template <typename T>
const Tensor<T>& BasicParameterSet<T>::at(std::string_view name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return it->second;
}

template <typename T>
Tensor<T>& BasicParameterSet<T>::at(std::string_view name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return it->second;
}

template <typename T>
BasicParameterSet<T> BasicParameterSet<T>::slice(std::string_view prefix) const {
  BasicParameterSet out;
  for (const auto& [name, t] : entries_)
    if (name.starts_with(prefix)) out.add(name, t);
  out.version = version;
  return out;
}

template <typename T>
void BasicParameterSet<T>::merge(const BasicParameterSet& other, std::string_view prefix) {
  for (const auto& [name, t] : other) add(std::string(prefix) + name, t);
}

template <typename T>
BasicParameterSet<T> BasicParameterSet<T>::zeros_like() const {
  BasicParameterSet out;
  for (const auto& [name, t] : entries_) out.add(name, Tensor<T>(t.shape()));
  return out;
}

template <typename T>
void check_same_layout(const BasicParameterSet<T>& a, const BasicParameterSet<T>& b, std::string_view what) {
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end() && ib != b.end(); ++ia, ++ib) {
    if (ia->first != ib->first)
      throw std::invalid_argument(std::string(what) + ": entry name mismatch '" + ia->first + "' vs '" +
                                  ib->first + "'");
    if (ia->second.shape() != ib->second.shape())
      throw std::invalid_argument(std::string(what) + ": shape mismatch for entry '" + ia->first + "' " +
                                  shape_str(ia->second.shape()) + " vs " + shape_str(ib->second.shape()));
  }
  if (ia != a.end())
    throw std::invalid_argument(std::string(what) + ": entry '" + ia->first + "' missing on one side");
  if (ib != b.end())
    throw std::invalid_argument(std::string(what) + ": entry '" + ib->first + "' missing on one side");
}

template <typename T>
Binding<T>::Binding(ad::Tape<T>& tape, const BasicParameterSet<T>& params, bool requires_grad) : tape_(&tape) {
  for (const auto& [name, t] : params) vars_.emplace(name, tape.leaf(t, requires_grad));
}

template <typename T>
ad::Var<T> Binding<T>::operator()(std::string_view name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("parameter not bound: " + std::string(name));
  return it->second;
}

template <typename T>
BasicParameterSet<T> Binding<T>::gradients() const {
  BasicParameterSet<T> out;
  for (const auto& [name, v] : vars_) {
    if (tape_->has_grad(v.id))
      out.add(name, tape_->grad(v.id));
    else
      out.add(name, Tensor<T>(v.shape()));
  }
  return out;
}

template class BasicParameterSet<float>;
template class BasicParameterSet<double>;
template class Binding<float>;
template class Binding<double>;
template void check_same_layout(const BasicParameterSet<float>&, const BasicParameterSet<float>&, std::string_view);
template void check_same_layout(const BasicParameterSet<double>&, const BasicParameterSet<double>&, std::string_view);

void save_parameters(const ParameterSet& params, const std::filesystem::path& path) {
  Container c;
  c.kind = "parameter-set";
  c.meta["version"] = params.version;
  for (const auto& [name, t] : params) c.add(name, t);
  write_container(c, path);
}

ParameterSet load_parameters(const std::filesystem::path& path) {
  Container c = read_container(path, "parameter-set");
  ParameterSet p;
  for (auto& e : c.entries) p.add(e.name, std::move(e.tensor));
  p.version = c.meta.value("version", std::int64_t{0});
  return p;
}

std::uint32_t checksum(const ParameterSet& params) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& [name, t] : params) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(name.data()), static_cast<uInt>(name.size()));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(t.data()), static_cast<uInt>(t.size() * sizeof(float)));
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace lowdino
