#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "carso/autograd.hpp"
#include "carso/rng.hpp"
#include "carso/tensor.hpp"

namespace carso::attacks {

enum class Family { fgsm, pgd, eot_pgd };

struct AttackSpec {
  Family family = Family::pgd;
  double epsilon = 8.0 / 255.0;  // linf bound, pixel units
  double step_size = 0.01;       // alpha
  int steps = 40;
  int eot_iterations = 1;
  bool random_init = true;
  double clip_lo = 0.0;
  double clip_hi = 1.0;

  void validate() const {
    if (epsilon < 0) throw std::invalid_argument("attack: epsilon < 0");
    if (steps < 1) throw std::invalid_argument("attack: steps < 1");
    if (eot_iterations < 1) throw std::invalid_argument("attack: eot_iterations < 1");
    if (family != Family::fgsm && epsilon > 0 &&
        (step_size <= 0 || step_size > epsilon))
      throw std::invalid_argument("attack: need 0 < alpha <= epsilon for pgd");
  }

  // training-attack hyperparameters (40-step PGD, alpha 0.01)
  static AttackSpec paper_train_pgd(double eps) {
    return {Family::pgd, eps, std::min(0.01, eps), 40, 1, true, 0.0, 1.0};
  }
  // stochastic-defence evaluation preset (200 steps, alpha 0.007, 20 EoT)
  static AttackSpec paper_eval_eot(double eps, double alpha = 0.007) {
    return {Family::eot_pgd, eps, std::min(alpha, eps), 200, 20, true, 0.0, 1.0};
  }
};

// Differentiable scalar loss of a batch of inputs; labels and parameters are
// baked into the closure.
template <typename T>
using LossFn = std::function<ag::Var<T>(const ag::Var<T>&)>;

// Same, for stochastic pipelines: fresh randomness is drawn from the rng.
template <typename T>
using StochasticLossFn = std::function<ag::Var<T>(const ag::Var<T>&, Rng&)>;

template <typename T>
struct AttackResult {
  TensorData<T> x_adv;
  bool zero_gradient = false;  // sign(grad) vanished everywhere
};

// Euclidean projection onto the linf ball: elementwise clamp to [-eps, eps]
template <typename T>
void project_linf(TensorData<T>& delta, T eps) {
  for (auto& d : delta.v) d = std::min(eps, std::max(-eps, d));
}

namespace detail {

template <typename T>
int sign(T x) {
  return x > T(0) ? 1 : (x < T(0) ? -1 : 0);
}

// gradient of the loss at clip(x + delta)
template <typename T>
std::vector<T> input_gradient(const LossFn<T>& loss, const TensorData<T>& x_cur) {
  auto xv = ag::Var<T>::from(x_cur, true);
  auto l = loss(xv);
  ag::backward(l);
  if (xv.grad().empty()) return std::vector<T>(x_cur.size(), T(0));
  return xv.grad();
}

}  // namespace detail

template <typename T>
AttackResult<T> fgsm(const LossFn<T>& loss, const TensorData<T>& x, T eps,
                     T clip_lo = T(0), T clip_hi = T(1)) {
  auto g = detail::input_gradient(loss, x);
  AttackResult<T> res;
  res.x_adv = x;
  bool any = false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    int s = detail::sign(g[i]);
    any = any || s != 0;
    res.x_adv.v[i] = std::min(clip_hi, std::max(clip_lo, x.v[i] + eps * s));
  }
  res.zero_gradient = !any;
  return res;
}

template <typename T>
TensorData<T> pgd(const LossFn<T>& loss, const TensorData<T>& x,
                  const AttackSpec& spec, Rng rng) {
  spec.validate();
  const T eps = static_cast<T>(spec.epsilon);
  const T alpha = static_cast<T>(spec.step_size);
  TensorData<T> delta(x.shape);
  if (spec.random_init) {
    Rng init = rng.derive(0xD17);
    for (auto& d : delta.v) d = static_cast<T>(init.uniform(-spec.epsilon, spec.epsilon));
  }
  TensorData<T> x_cur = x;
  auto clip_feasible = [&] {
    for (std::size_t i = 0; i < x.size(); ++i) {
      T v = std::min(static_cast<T>(spec.clip_hi),
                     std::max(static_cast<T>(spec.clip_lo), x.v[i] + delta.v[i]));
      delta.v[i] = v - x.v[i];
      x_cur.v[i] = v;
    }
  };
  clip_feasible();
  for (int k = 0; k < spec.steps; ++k) {
    auto g = detail::input_gradient(loss, x_cur);
    for (std::size_t i = 0; i < x.size(); ++i)
      delta.v[i] += alpha * detail::sign(g[i]);
    project_linf(delta, eps);
    clip_feasible();
  }
  return x_cur;
}

// Mean input gradient over one explicit rng stream per EoT draw.
template <typename T>
std::vector<T> eot_mean_gradient(const StochasticLossFn<T>& loss,
                                 const TensorData<T>& x_cur,
                                 std::vector<Rng>& streams) {
  std::vector<T> acc(x_cur.size(), T(0));
  for (auto& st : streams) {
    auto xv = ag::Var<T>::from(x_cur, true);
    auto l = loss(xv, st);
    ag::backward(l);
    if (!xv.grad().empty())
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += xv.grad()[i];
  }
  for (auto& g : acc) g /= static_cast<T>(streams.size());
  return acc;
}

template <typename T>
TensorData<T> eot_pgd(const StochasticLossFn<T>& loss, const TensorData<T>& x,
                      const AttackSpec& spec, Rng rng) {
  spec.validate();
  const T eps = static_cast<T>(spec.epsilon);
  const T alpha = static_cast<T>(spec.step_size);
  TensorData<T> delta(x.shape);
  if (spec.random_init) {
    Rng init = rng.derive(0xD17);
    for (auto& d : delta.v) d = static_cast<T>(init.uniform(-spec.epsilon, spec.epsilon));
  }
  TensorData<T> x_cur = x;
  auto clip_feasible = [&] {
    for (std::size_t i = 0; i < x.size(); ++i) {
      T v = std::min(static_cast<T>(spec.clip_hi),
                     std::max(static_cast<T>(spec.clip_lo), x.v[i] + delta.v[i]));
      delta.v[i] = v - x.v[i];
      x_cur.v[i] = v;
    }
  };
  clip_feasible();
  for (int k = 0; k < spec.steps; ++k) {
    std::vector<Rng> streams;
    for (int e = 0; e < spec.eot_iterations; ++e)
      streams.push_back(rng.derive(1000003ULL * static_cast<std::uint64_t>(k) + e));
    auto g = eot_mean_gradient(loss, x_cur, streams);
    for (std::size_t i = 0; i < x.size(); ++i)
      delta.v[i] += alpha * detail::sign(g[i]);
    project_linf(delta, eps);
    clip_feasible();
  }
  return x_cur;
}

// ---- adversarially balanced batches ----

enum class AttackTag { clean, fgsm_half, pgd_half, fgsm_full, pgd_full };

inline std::string attack_tag_name(AttackTag t) {
  switch (t) {
    case AttackTag::clean: return "clean";
    case AttackTag::fgsm_half: return "fgsm_eps/2";
    case AttackTag::pgd_half: return "pgd_eps/2";
    case AttackTag::fgsm_full: return "fgsm_eps";
    case AttackTag::pgd_full: return "pgd_eps";
  }
  return "?";
}

template <typename T>
struct BalancedBatch {
  TensorData<T> inputs;         // mixed clean/perturbed examples
  TensorData<T> clean_targets;  // always the unperturbed inputs
  std::vector<AttackTag> tags;  // one per example
};

// Builds a LossFn for a row subset, given the subset's labels.
template <typename T>
using SubsetLossBuilder = std::function<LossFn<T>(const std::vector<int>&)>;

// 4-way split sizes for m perturbed examples; the variant receiving the
// remainder rotates with the batch counter so no attack type dominates
// long-run composition.
inline std::vector<int> balanced_split_sizes(int m, long batch_index) {
  std::vector<int> sizes(4, m / 4);
  int extra = m % 4;
  for (int i = 0; i < extra; ++i)
    sizes[(batch_index + i) % 4] += 1;
  return sizes;
}

template <typename T>
BalancedBatch<T> balanced_adversarial_batch(const TensorData<T>& batch,
                                            const std::vector<int>& labels,
                                            double frac, T eps,
                                            const SubsetLossBuilder<T>& loss_builder,
                                            const AttackSpec& pgd_proto,
                                            long batch_index, Rng rng) {
  if (frac < 0.0 || frac > 1.0)
    throw std::invalid_argument("balanced batch: frac outside [0,1]");
  const int B = batch.shape[0];
  if (static_cast<int>(labels.size()) != B)
    throw std::invalid_argument("balanced batch: label count mismatch");
  const std::size_t row = batch.size() / std::max(B, 1);

  BalancedBatch<T> out;
  out.inputs = batch;
  out.clean_targets = batch;
  out.tags.assign(B, AttackTag::clean);

  const int m = static_cast<int>(std::lround(frac * B));
  if (m == 0 || eps == T(0)) return out;
  auto sizes = balanced_split_sizes(m, batch_index);

  const AttackTag variant_tags[4] = {AttackTag::fgsm_half, AttackTag::pgd_half,
                                     AttackTag::fgsm_full, AttackTag::pgd_full};
  int offset = 0;
  for (int v = 0; v < 4; ++v) {
    const int cnt = sizes[v];
    if (cnt == 0) continue;
    // gather the subset rows
    Shape sub_shape = batch.shape;
    sub_shape[0] = cnt;
    TensorData<T> sub(sub_shape);
    std::vector<int> sub_labels(cnt);
    for (int i = 0; i < cnt; ++i) {
      std::copy(batch.v.begin() + (offset + i) * row,
                batch.v.begin() + (offset + i + 1) * row, sub.v.begin() + i * row);
      sub_labels[i] = labels[offset + i];
    }
    auto loss = loss_builder(sub_labels);
    const T variant_eps = (v < 2) ? eps / T(2) : eps;
    TensorData<T> adv;
    if (v == 0 || v == 2) {
      adv = fgsm(loss, sub, variant_eps, static_cast<T>(pgd_proto.clip_lo),
                 static_cast<T>(pgd_proto.clip_hi)).x_adv;
    } else {
      AttackSpec s = pgd_proto;
      s.family = Family::pgd;
      s.epsilon = static_cast<double>(variant_eps);
      s.step_size = std::min(s.step_size, s.epsilon);
      adv = pgd(loss, sub, s, rng.derive(0xBA7C4 + v + 7919 * batch_index));
    }
    for (int i = 0; i < cnt; ++i) {
      std::copy(adv.v.begin() + i * row, adv.v.begin() + (i + 1) * row,
                out.inputs.v.begin() + (offset + i) * row);
      out.tags[offset + i] = variant_tags[v];
    }
    offset += cnt;
  }
  return out;
}

// Ablation composition: the same round(frac*B) examples all get full-budget
// PGD instead of the 4-way split.
template <typename T>
BalancedBatch<T> pgd_only_batch(const TensorData<T>& batch,
                                const std::vector<int>& labels, double frac, T eps,
                                const SubsetLossBuilder<T>& loss_builder,
                                const AttackSpec& pgd_proto, long batch_index,
                                Rng rng) {
  if (frac < 0.0 || frac > 1.0)
    throw std::invalid_argument("pgd-only batch: frac outside [0,1]");
  const int B = batch.shape[0];
  if (static_cast<int>(labels.size()) != B)
    throw std::invalid_argument("pgd-only batch: label count mismatch");
  BalancedBatch<T> out;
  out.inputs = batch;
  out.clean_targets = batch;
  out.tags.assign(B, AttackTag::clean);
  const int m = static_cast<int>(std::lround(frac * B));
  if (m == 0 || eps == T(0)) return out;
  const std::size_t row = batch.size() / std::max(B, 1);

  Shape sub_shape = batch.shape;
  sub_shape[0] = m;
  TensorData<T> sub(sub_shape);
  std::copy(batch.v.begin(), batch.v.begin() + m * row, sub.v.begin());
  std::vector<int> sub_labels(labels.begin(), labels.begin() + m);
  AttackSpec s = pgd_proto;
  s.family = Family::pgd;
  s.epsilon = static_cast<double>(eps);
  s.step_size = std::min(s.step_size, s.epsilon);
  auto adv = pgd(loss_builder(sub_labels), sub, s,
                 rng.derive(0xBA7C4 + 7919 * batch_index));
  std::copy(adv.v.begin(), adv.v.end(), out.inputs.v.begin());
  for (int i = 0; i < m; ++i) out.tags[i] = AttackTag::pgd_full;
  return out;
}

}  // namespace carso::attacks
