#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "deepmts/tensor.hpp"

namespace deepmts::nn {

template <class T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;  // same shape as value; stays zero for non-trainable entries
  bool trainable = true;
};

/// Named parameters keyed by layer path ("backbone.enc0.conv0.weight").
/// std::map keeps references stable, which the tape relies on.
template <class T>
class ParamStore {
 public:
  using Map = std::map<std::string, Param<T>>;

  Param<T>& add(const std::string& key, Tensor<T> value, bool trainable = true) {
    if (params_.count(key) != 0) throw ValidationError("duplicate parameter key: " + key);
    Tensor<T> grad(value.shape());
    auto [it, ok] = params_.emplace(key, Param<T>{std::move(value), std::move(grad), trainable});
    return it->second;
  }

  bool contains(const std::string& key) const { return params_.count(key) != 0; }

  Param<T>& at(const std::string& key) {
    auto it = params_.find(key);
    if (it == params_.end()) throw ValidationError("unknown parameter key: " + key);
    return it->second;
  }
  const Param<T>& at(const std::string& key) const {
    auto it = params_.find(key);
    if (it == params_.end()) throw ValidationError("unknown parameter key: " + key);
    return it->second;
  }

  void zero_grad() {
    for (auto& [key, p] : params_) p.grad.fill(T{0});
  }

  /// Number of trainable scalars.
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [key, p] : params_) {
      if (p.trainable) n += p.value.size();
    }
    return n;
  }

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  Map params_;
};

}  // namespace deepmts::nn
