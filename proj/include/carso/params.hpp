#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "carso/autograd.hpp"
#include "carso/rng.hpp"
#include "carso/tensor.hpp"

namespace carso {

// Named collection of learnable tensors (and non-learnable buffers, e.g.
// batchnorm running statistics) for one network. Parameter nodes are
// persistent leaves reused across graphs; freezing drops requires_grad so no
// graph can route gradients into them.
template <typename T>
class ParamStore {
 public:
  ag::Var<T>& param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end())
      throw std::runtime_error("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  const ag::Var<T>& param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end())
      throw std::runtime_error("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  ag::Var<T>& buffer(const std::string& name) {
    auto it = buffers_.find(name);
    if (it == buffers_.end())
      throw std::runtime_error("ParamStore: unknown buffer '" + name + "'");
    return it->second;
  }

  bool has_param(const std::string& name) const { return params_.count(name) != 0; }
  bool has_buffer(const std::string& name) const { return buffers_.count(name) != 0; }

  void add_param(const std::string& name, ag::Var<T> v) {
    if (!params_.emplace(name, std::move(v)).second)
      throw std::runtime_error("ParamStore: duplicate parameter '" + name + "'");
  }

  void add_buffer(const std::string& name, ag::Var<T> v) {
    if (!buffers_.emplace(name, std::move(v)).second)
      throw std::runtime_error("ParamStore: duplicate buffer '" + name + "'");
  }

  // Kaiming-style uniform init over fan_in, deterministic in creation order
  ag::Var<T>& create_param(const std::string& name, Shape shape, int fan_in,
                           Rng& rng) {
    std::vector<T> data(numel(shape));
    const double bound = fan_in > 0 ? std::sqrt(1.0 / fan_in) : 0.0;
    for (auto& x : data) x = static_cast<T>(rng.uniform(-bound, bound));
    add_param(name, ag::Var<T>::leaf(std::move(shape), std::move(data), true));
    return param(name);
  }

  ag::Var<T>& create_const_param(const std::string& name, Shape shape, T fill) {
    add_param(name, ag::Var<T>::leaf(std::move(shape),
                                     std::vector<T>(numel(shape), fill), true));
    return param(name);
  }

  ag::Var<T>& create_buffer(const std::string& name, Shape shape, T fill) {
    add_buffer(name, ag::Var<T>::leaf(std::move(shape),
                                      std::vector<T>(numel(shape), fill), false));
    return buffer(name);
  }

  void zero_grad() {
    for (auto& [k, v] : params_) v.node()->zero_grad();
  }

  void freeze() {
    frozen_ = true;
    for (auto& [k, v] : params_) v.node()->requires_grad = false;
  }

  bool frozen() const { return frozen_; }

  std::map<std::string, ag::Var<T>>& params() { return params_; }
  const std::map<std::string, ag::Var<T>>& params() const { return params_; }
  std::map<std::string, ag::Var<T>>& buffers() { return buffers_; }
  const std::map<std::string, ag::Var<T>>& buffers() const { return buffers_; }

  // FNV-1a over every parameter and buffer payload, for freezing checks
  std::uint64_t content_hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const std::vector<T>& v) {
      const unsigned char* p = reinterpret_cast<const unsigned char*>(v.data());
      for (std::size_t i = 0; i < v.size() * sizeof(T); ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& [k, v] : params_) mix(v.value());
    for (const auto& [k, v] : buffers_) mix(v.value());
    return h;
  }

 private:
  std::map<std::string, ag::Var<T>> params_;
  std::map<std::string, ag::Var<T>> buffers_;
  bool frozen_ = false;
};

}  // namespace carso
