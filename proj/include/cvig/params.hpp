#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cvig/rng.hpp"
#include "cvig/tape.hpp"
#include "cvig/tensor.hpp"

namespace cvig {

enum class InitKind { xavier, zeros, ones };

/// Declared parameter: name, shape and initialization rule. Non-trainable
/// entries (batch-norm running statistics) are stored and checkpointed but
/// excluded from parameter counts and gradients.
struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init = InitKind::xavier;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  bool trainable = true;
};

using ParamLayout = std::vector<ParamSpec>;

inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

inline void declare_affine(ParamLayout& layout, const std::string& prefix, std::size_t in, std::size_t out) {
  layout.push_back({prefix + ".weight", {in, out}, InitKind::xavier, in, out});
  layout.push_back({prefix + ".bias", {out}, InitKind::zeros});
}

/// Ordered collection of named parameter leaves.
template <class T>
class ParamStore {
 public:
  struct Entry {
    ParamSpec spec;
    ad::Var<T> var;
  };

  void add(ParamSpec spec, Tensor<T> value) {
    if (value.shape() != spec.shape)
      throw DimensionError("parameter '" + spec.name + "' expects shape " + to_string(spec.shape) + ", got " +
                           to_string(value.shape()));
    if (index_.count(spec.name)) throw std::invalid_argument("duplicate parameter '" + spec.name + "'");
    index_[spec.name] = entries_.size();
    entries_.push_back({std::move(spec), ad::leaf(std::move(value))});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const ad::Var<T>& var(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return entries_[it->second].var;
  }

  Tensor<T>& value(const std::string& name) { return var(name)->value; }
  const Tensor<T>& value(const std::string& name) const { return var(name)->value; }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& entries() noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.spec.trainable) n += e.var->value.size();
    return n;
  }

  void watch_all(ad::Tape<T>& tape) const {
    for (const auto& e : entries_)
      if (e.spec.trainable) tape.watch(e.spec.name, e.var);
  }

  ParamLayout layout() const {
    ParamLayout out;
    for (const auto& e : entries_) out.push_back(e.spec);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Deterministic initialization: entries are filled in layout order from one
/// splitmix64 stream; xavier weights are uniform in +-sqrt(6/(fan_in+fan_out)).
template <class T>
ParamStore<T> initialize(const ParamLayout& layout, std::uint64_t seed) {
  SplitMix64 rng(seed);
  ParamStore<T> store;
  for (const auto& spec : layout) {
    Tensor<T> v(spec.shape);
    switch (spec.init) {
      case InitKind::zeros: break;
      case InitKind::ones:
        for (auto& x : v.data()) x = T(1);
        break;
      case InitKind::xavier: {
        const double bound = xavier_bound(spec.fan_in, spec.fan_out);
        for (auto& x : v.data()) {
          T w = static_cast<T>(bound * (2.0 * rng.uniform() - 1.0));
          if (std::abs(static_cast<double>(w)) > bound) w = std::nextafter(w, T(0));
          x = w;
        }
        break;
      }
    }
    store.add(spec, std::move(v));
  }
  return store;
}

}  // namespace cvig
