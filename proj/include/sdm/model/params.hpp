#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "sdm/core/autodiff.hpp"
#include "sdm/core/tensor.hpp"

namespace sdm {

/// Named model tensors. Ordered by name so iteration (and serialization) is
/// deterministic.
template <typename T>
class ParamSet {
 public:
  struct Entry {
    Tensor<T> value;
    bool trainable = true;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    auto [it, inserted] = entries_.emplace(name, Entry{std::move(value), trainable});
    if (!inserted) throw ShapeError("duplicate parameter '" + name + "'");
    return it->second.value;
  }
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor<T>& get(const std::string& name) { return find(name).value; }
  const Tensor<T>& get(const std::string& name) const { return const_cast<ParamSet*>(this)->find(name).value; }
  bool trainable(const std::string& name) const { return const_cast<ParamSet*>(this)->find(name).trainable; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.size();
    return n;
  }
  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<U>(), e.trainable);
    return out;
  }

 private:
  Entry& find(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ShapeError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

/// Puts parameters on a tape on first use, so each appears once per graph.
template <typename T>
class Binder {
 public:
  Binder(Tape<T>& tape, const ParamSet<T>& params) : tape_(tape), params_(params) {}

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var<T> v = tape_.parameter(params_.get(name), params_.trainable(name));
    bound_.emplace(name, v);
    return v;
  }
  Tape<T>& tape() { return tape_; }
  const Tape<T>& tape() const { return tape_; }
  const ParamSet<T>& params() const { return params_; }
  const std::unordered_map<std::string, Var<T>>& bound() const { return bound_; }

 private:
  Tape<T>& tape_;
  const ParamSet<T>& params_;
  std::unordered_map<std::string, Var<T>> bound_;
};

/// He-normal weights for a kernel whose fan-in is the product of all but the first dimension.
template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain = 2.0) {
  std::normal_distribution<double> n(0.0, std::sqrt(gain / double(fan_in)));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = T(n(rng));
  return t;
}

}  // namespace sdm
