#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "carso/params.hpp"
#include "carso/tensor.hpp"

namespace carso::optim {

// Stateful parameter-update rule over a ParamStore. State tensors are exposed
// by name so checkpoints can carry them across restarts.
template <typename T>
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(ParamStore<T>& store, double lr) = 0;
  virtual nlohmann::json meta() const = 0;
  virtual std::vector<std::pair<std::string, TensorData<T>>> state_tensors() const = 0;
  virtual void restore(const nlohmann::json& meta,
                       const std::map<std::string, TensorData<T>>& tensors) = 0;
};

namespace detail {

template <typename T>
const std::vector<T>* grad_of(const ag::Var<T>& p) {
  return p.grad().empty() ? nullptr : &p.grad();
}

}  // namespace detail

// Adam with bias correction; missing gradients count as zero.
template <typename T>
class Adam : public Optimizer<T> {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore<T>& store, double lr) override {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (auto& [name, p] : store.params()) {
      auto& m = slot(m_, name, p.size());
      auto& v = slot(v_, name, p.size());
      const auto* g = detail::grad_of(p);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g ? static_cast<double>((*g)[i]) : 0.0;
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.value()[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  nlohmann::json meta() const override {
    return {{"type", "adam"}, {"t", t_}, {"beta1", beta1_}, {"beta2", beta2_}, {"eps", eps_}};
  }

  std::vector<std::pair<std::string, TensorData<T>>> state_tensors() const override {
    std::vector<std::pair<std::string, TensorData<T>>> out;
    for (const auto& [k, v] : m_) out.emplace_back("adam.m." + k, to_tensor(v));
    for (const auto& [k, v] : v_) out.emplace_back("adam.v." + k, to_tensor(v));
    return out;
  }

  void restore(const nlohmann::json& meta,
               const std::map<std::string, TensorData<T>>& tensors) override {
    t_ = meta.at("t");
    m_.clear();
    v_.clear();
    for (const auto& [k, t] : tensors) {
      if (k.rfind("adam.m.", 0) == 0)
        m_[k.substr(7)] = std::vector<double>(t.v.begin(), t.v.end());
      else if (k.rfind("adam.v.", 0) == 0)
        v_[k.substr(7)] = std::vector<double>(t.v.begin(), t.v.end());
    }
  }

 protected:
  static std::vector<double>& slot(std::map<std::string, std::vector<double>>& m,
                                   const std::string& name, std::size_t n) {
    auto& v = m[name];
    if (v.size() != n) v.assign(n, 0.0);
    return v;
  }
  static TensorData<T> to_tensor(const std::vector<double>& v) {
    TensorData<T> t({static_cast<int>(v.size())});
    for (std::size_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<T>(v[i]);
    return t;
  }

  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// Rectified Adam: falls back to an unadapted momentum step while the variance
// estimate is untrustworthy, then applies the rectification factor.
template <typename T>
class RAdam : public Adam<T> {
 public:
  using Adam<T>::Adam;

  void step(ParamStore<T>& store, double lr) override {
    ++this->t_;
    const long t = this->t_;
    const double b1 = this->beta1_, b2 = this->beta2_, eps = this->eps_;
    const double bc1 = 1.0 - std::pow(b1, t);
    const double b2t = std::pow(b2, t);
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
    const bool rectify = rho_t > 4.0;
    double r_t = 1.0;
    if (rectify)
      r_t = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                      ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    for (auto& [name, p] : store.params()) {
      auto& m = this->slot(this->m_, name, p.size());
      auto& v = this->slot(this->v_, name, p.size());
      const auto* g = detail::grad_of(p);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g ? static_cast<double>((*g)[i]) : 0.0;
        m[i] = b1 * m[i] + (1.0 - b1) * gi;
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
        const double mhat = m[i] / bc1;
        if (rectify) {
          const double vhat = std::sqrt(v[i] / (1.0 - b2t));
          p.value()[i] -= static_cast<T>(lr * r_t * mhat / (vhat + eps));
        } else {
          p.value()[i] -= static_cast<T>(lr * mhat);
        }
      }
    }
  }

  nlohmann::json meta() const override {
    auto j = Adam<T>::meta();
    j["type"] = "radam";
    return j;
  }
};

// Lookahead wrapper: every k fast steps the slow weights move a fraction
// alpha toward the fast weights and the fast weights are reset onto them.
template <typename T>
class Lookahead : public Optimizer<T> {
 public:
  Lookahead(std::unique_ptr<Optimizer<T>> inner, double alpha = 0.8, int k = 6)
      : inner_(std::move(inner)), alpha_(alpha), k_(k) {
    if (!(alpha_ > 0.0 && alpha_ <= 1.0) || k_ < 1)
      throw std::invalid_argument("lookahead: need alpha in (0,1] and k >= 1");
  }

  void step(ParamStore<T>& store, double lr) override {
    if (slow_.empty())
      for (const auto& [name, p] : store.params()) slow_[name] = p.value();
    inner_->step(store, lr);
    if (++since_sync_ < k_) return;
    since_sync_ = 0;
    for (auto& [name, p] : store.params()) {
      auto& s = slow_[name];
      if (s.size() != p.size()) s.assign(p.value().begin(), p.value().end());
      for (std::size_t i = 0; i < p.size(); ++i) {
        s[i] = s[i] + static_cast<T>(alpha_) * (p.value()[i] - s[i]);
        p.value()[i] = s[i];
      }
    }
  }

  nlohmann::json meta() const override {
    return {{"type", "lookahead"}, {"alpha", alpha_}, {"k", k_},
            {"since_sync", since_sync_}, {"inner", inner_->meta()}};
  }

  std::vector<std::pair<std::string, TensorData<T>>> state_tensors() const override {
    auto out = inner_->state_tensors();
    for (const auto& [k, v] : slow_) {
      TensorData<T> t({static_cast<int>(v.size())});
      t.v = v;
      out.emplace_back("lookahead.slow." + k, std::move(t));
    }
    return out;
  }

  void restore(const nlohmann::json& meta,
               const std::map<std::string, TensorData<T>>& tensors) override {
    since_sync_ = meta.at("since_sync");
    inner_->restore(meta.at("inner"), tensors);
    slow_.clear();
    for (const auto& [k, t] : tensors)
      if (k.rfind("lookahead.slow.", 0) == 0) slow_[k.substr(15)] = t.v;
  }

 private:
  std::unique_ptr<Optimizer<T>> inner_;
  double alpha_;
  int k_;
  int since_sync_ = 0;
  std::map<std::string, std::vector<T>> slow_;
};

// "adam" | "radam" | "radam-lookahead"
template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(const std::string& name,
                                             double beta1 = 0.9, double beta2 = 0.999,
                                             double eps = 1e-8) {
  if (name == "adam") return std::make_unique<Adam<T>>(beta1, beta2, eps);
  if (name == "radam") return std::make_unique<RAdam<T>>(beta1, beta2, eps);
  if (name == "radam-lookahead")
    return std::make_unique<Lookahead<T>>(std::make_unique<RAdam<T>>(beta1, beta2, eps));
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

template <typename T>
std::unique_ptr<Optimizer<T>> optimizer_from_meta(const nlohmann::json& meta) {
  const std::string type = meta.at("type");
  if (type == "lookahead") {
    auto opt = std::make_unique<Lookahead<T>>(
        optimizer_from_meta<T>(meta.at("inner")), meta.at("alpha"), meta.at("k"));
    return opt;
  }
  if (type == "adam")
    return std::make_unique<Adam<T>>(meta.at("beta1"), meta.at("beta2"), meta.at("eps"));
  if (type == "radam")
    return std::make_unique<RAdam<T>>(meta.at("beta1"), meta.at("beta2"), meta.at("eps"));
  throw std::invalid_argument("unknown optimizer type '" + type + "'");
}

}  // namespace carso::optim
