#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "cpt/tensor.hpp"

namespace cpt {

/// Named, shape-stamped parameter tensors in insertion order.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    tensors_.emplace_back(std::move(shape), T(0), true);
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const { return tensors_[lookup(name)]; }
  Tensor<T>& get(const std::string& name) { return tensors_[lookup(name)]; }

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor<T>& at(std::size_t i) { return tensors_[i]; }
  const Tensor<T>& at(std::size_t i) const { return tensors_[i]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  /// Deep copy with fresh gradient state.
  ParamStore clone() const {
    ParamStore out;
    for (std::size_t i = 0; i < size(); ++i) {
      auto& t = out.add(names_[i], tensors_[i].shape());
      std::copy(tensors_[i].data().begin(), tensors_[i].data().end(), t.mutable_data().begin());
    }
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T, typename Rng>
void init_uniform(Tensor<T>& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : t.mutable_data()) v = static_cast<T>(u(rng));
}

template <typename T>
void init_constant(Tensor<T>& t, T value) {
  for (auto& v : t.mutable_data()) v = value;
}

}  // namespace cpt
