#pragma once

#include <stdexcept>

#include "carso/autograd.hpp"
#include "carso/tensor.hpp"

namespace carso {

// KL(q(z|x) || N(0, I)) = sum 0.5 * (mu^2 + e^logvar - 1 - logvar),
// composed from differentiable primitives
template <typename T>
ag::Var<T> kl_std_normal(const ag::Var<T>& mu, const ag::Var<T>& logvar) {
  check_shape(mu.shape() == logvar.shape(), "kl_std_normal", mu.shape(), logvar.shape());
  auto term = ag::sub(ag::add_scalar(ag::add(ag::mul(mu, mu), ag::exp_(logvar)), T(-1)),
                      logvar);
  return ag::scale(ag::sum(term), T(0.5));
}

template <typename T>
struct VaeLoss {
  ag::Var<T> total;  // recon + beta * kl
  double recon = 0;  // detached component values, for logging
  double kl = 0;
  double beta = 0;
};

// summed binary cross-entropy reconstruction plus beta-weighted KL; the
// reconstruction target must live in [0,1]
template <typename T>
VaeLoss<T> vae_loss(const ag::Var<T>& xhat, const TensorData<T>& target,
                    const ag::Var<T>& mu, const ag::Var<T>& logvar, T beta) {
  for (auto v : target.v)
    if (!(v >= T(0) && v <= T(1)))
      throw std::domain_error("vae_loss: reconstruction target outside [0,1]");
  if (beta < T(0)) throw std::domain_error("vae_loss: negative beta");
  VaeLoss<T> out;
  auto recon = ag::bce_sum(xhat, target);
  auto kl = kl_std_normal(mu, logvar);
  out.recon = static_cast<double>(recon.value()[0]);
  out.kl = static_cast<double>(kl.value()[0]);
  out.beta = static_cast<double>(beta);
  out.total = ag::add(recon, ag::scale(kl, beta));
  return out;
}

}  // namespace carso
