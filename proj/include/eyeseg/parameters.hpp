#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "eyeseg/tensor.hpp"

namespace eyeseg {

enum class ParamKind {
  weight,      // learnable, weight decay applies
  norm_affine, // learnable batch-norm gamma/beta, no weight decay
  statistic,   // batch-norm running statistics, not learnable
};

// Kind implied by the naming scheme: ".stat." marks running statistics and
// a layer name ending in "bn" marks batch-norm affine parameters.
inline ParamKind kind_from_name(std::string_view name) {
  if (name.find(".stat.") != std::string_view::npos) return ParamKind::statistic;
  const auto last = name.rfind('.');
  if (last != std::string_view::npos && last >= 2 && name.substr(last - 2, 2) == "bn") {
    return ParamKind::norm_affine;
  }
  return ParamKind::weight;
}

inline bool is_learnable(ParamKind k) { return k != ParamKind::statistic; }

// Insertion-ordered named tensors. Copies share tensor storage; clone()
// gives an independent snapshot.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    ParamKind kind;
  };

  Tensor& add(std::string name, Tensor t) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    const ParamKind kind = kind_from_name(name);
    t.set_requires_grad(is_learnable(kind));
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(t), kind});
    return entries_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  // Number of learnable scalars (running statistics excluded).
  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (is_learnable(e.kind)) n += e.tensor.size();
    }
    return n;
  }

  ParameterStore clone() const {
    ParameterStore out;
    for (const auto& e : entries_) out.add(e.name, e.tensor.detach());
    return out;
  }

  // Copies values (not handles) from other; names and shapes must agree.
  void assign_values(const ParameterStore& other) {
    if (other.entries_.size() != entries_.size()) {
      throw std::invalid_argument("assign_values: stores differ in size");
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& src = other.entries_[i];
      auto& dst = entries_[i];
      if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
        throw std::invalid_argument("assign_values: entry mismatch at " + dst.name);
      }
      std::copy(src.tensor.data().begin(), src.tensor.data().end(), dst.tensor.data().begin());
    }
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Samples N(0, sqrt(2 / fan_in)).
inline std::vector<double> he_init(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng) {
  if (fan_in == 0) throw ShapeError("he_init: fan_in must be positive");
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return v;
}

inline std::vector<double> he_init(const Shape& shape, std::size_t fan_in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return he_init(shape, fan_in, rng);
}

}  // namespace eyeseg
