#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "remote/autograd.hpp"
#include "remote/errors.hpp"

namespace remote {

/// Named trainable tensors in insertion order, each tagged with the group
/// reported by gradient checks.
template <std::floating_point T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    std::string group;
    BasicTensor<T> value;
  };

  BasicTensor<T>& add(const std::string& name, const std::string& group, BasicTensor<T> init) {
    if (index_.contains(name)) throw ContractError("duplicate parameter " + name);
    init.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back({name, group, std::move(init)});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  BasicTensor<T>& get(const std::string& name) { return entries_.at(lookup(name)).value; }
  const BasicTensor<T>& get(const std::string& name) const { return entries_.at(lookup(name)).value; }

  std::deque<Entry>& entries() { return entries_; }
  const std::deque<Entry>& entries() const { return entries_; }

  std::vector<std::string> groups() const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
      if (std::find(out.begin(), out.end(), e.group) == out.end()) out.push_back(e.group);
    return out;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  template <std::floating_point U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.group, e.value.template cast<U>());
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return it->second;
  }

  std::deque<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Lazily creates one tape leaf per parameter for a single forward pass.
template <std::floating_point T>
class Leaves {
 public:
  Leaves(Tape<T>& tape, ParameterStore<T>& store) : tape_(tape), store_(store) {}

  Var<T> operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    Var<T> v = tape_.leaf(store_.get(name));
    cache_.emplace(name, v);
    return v;
  }

  Tape<T>& tape() { return tape_; }

 private:
  Tape<T>& tape_;
  ParameterStore<T>& store_;
  std::map<std::string, Var<T>> cache_;
};

/// N(0, scale²/fan_in) entries; fan_in defaults to the row count of a weight
/// matrix.
template <std::floating_point T>
BasicTensor<T> scaled_normal(Shape shape, std::mt19937_64& rng, double scale = 1.0, double fan_in = 0.0) {
  BasicTensor<T> t(shape);
  if (fan_in <= 0.0) fan_in = shape.size() == 2 ? static_cast<double>(shape[0]) : 1.0;
  std::normal_distribution<double> dist(0.0, scale / std::sqrt(fan_in));
  for (auto& x : t.data()) x = static_cast<T>(dist(rng));
  return t;
}

}  // namespace remote
