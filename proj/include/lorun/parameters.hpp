#pragma once

#include <map>
#include <string>
#include <vector>

#include "lorun/autodiff.hpp"

namespace lorun {

/// Named tensors with a trainable/frozen flag each, ordered by name.
template <typename Scalar>
class ParameterStore {
 public:
  struct Entry {
    Tensor<Scalar> value;
    bool trainable = true;
  };

  void set(const std::string& name, Tensor<Scalar> value, bool trainable) {
    entries_[name] = Entry{std::move(value), trainable};
  }

  /// Replaces the value of an existing entry; the shape must not change.
  void update(const std::string& name, Tensor<Scalar> value) {
    Entry& e = entry(name);
    if (e.value.shape() != value.shape())
      throw DimensionError("parameter " + name + ": update shape " + shape_str(value.shape()) + " differs from " +
                           shape_str(e.value.shape()));
    e.value = std::move(value);
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor<Scalar>& at(const std::string& name) const { return entry(name).value; }
  bool trainable(const std::string& name) const { return entry(name).trainable; }
  void set_trainable(const std::string& name, bool t) { entry(name).trainable = t; }
  void erase(const std::string& name) { entries_.erase(name); }

  Var<Scalar> bind(Graph<Scalar>& g, const std::string& name) const {
    const Entry& e = entry(name);
    return g.parameter(name, e.value, e.trainable);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, e] : entries_) out.push_back(n);
    return out;
  }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [n, e] : entries_)
      if (e.trainable) out.push_back(n);
    return out;
  }

  Index trainable_count() const {
    Index total = 0;
    for (const auto& [n, e] : entries_)
      if (e.trainable) total += e.value.size();
    return total;
  }

  Index total_count() const {
    Index total = 0;
    for (const auto& [n, e] : entries_) total += e.value.size();
    return total;
  }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

 private:
  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter " + name);
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter " + name);
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace lorun
