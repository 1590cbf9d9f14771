// Named trainable parameters and their gradients.
#pragma once

#include <compare>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "unigen/tensor.hpp"

namespace unigen {

struct ParamId {
  std::size_t index = 0;
  auto operator<=>(const ParamId&) const = default;
};

class ParamStore {
 public:
  ParamId add(std::string name, Tensor init) {
    if (by_name_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    ParamId id{entries_.size()};
    by_name_.emplace(name, id.index);
    entries_.push_back({std::move(name), std::move(init)});
    return id;
  }

  std::size_t count() const noexcept { return entries_.size(); }

  /// Total number of scalar parameters.
  std::size_t scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  Tensor& value(ParamId id) { return entries_.at(id.index).value; }
  const Tensor& value(ParamId id) const { return entries_.at(id.index).value; }
  const std::string& name(ParamId id) const { return entries_.at(id.index).name; }

  std::optional<ParamId> find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) return std::nullopt;
    return ParamId{it->second};
  }

  std::vector<ParamId> ids() const {
    std::vector<ParamId> out;
    out.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) out.push_back(ParamId{i});
    return out;
  }

  bool all_finite() const {
    for (const auto& e : entries_)
      if (!e.value.all_finite()) return false;
    return true;
  }

 private:
  struct Entry {
    std::string name;
    Tensor value;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

/// Per-parameter gradients. A missing entry means the gradient is zero.
class GradientRecord {
 public:
  void accumulate(ParamId id, const Tensor& g) {
    auto [it, inserted] = grads_.try_emplace(id, g);
    if (inserted) return;
    require_same_shape("GradientRecord::accumulate", it->second, g);
    for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
  }

  void merge(const GradientRecord& other) {
    for (const auto& [id, g] : other.grads_) accumulate(id, g);
  }

  void scale(double s) {
    for (auto& [id, g] : grads_)
      for (double& v : g.values()) v *= s;
  }

  const Tensor* find(ParamId id) const {
    auto it = grads_.find(id);
    return it == grads_.end() ? nullptr : &it->second;
  }

  std::size_t size() const noexcept { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::map<ParamId, Tensor> grads_;
};

}  // namespace unigen
