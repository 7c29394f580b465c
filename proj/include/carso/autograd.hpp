#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "carso/kernels.hpp"
#include "carso/tensor.hpp"

// Reverse-mode automatic differentiation on a dynamically built graph.
// Every op allocates an output node holding its value, links to its operand
// nodes and records a backward rule; backward() replays the rules in reverse
// topological order.

namespace carso::ag {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::size_t size() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
  void zero_grad() { grad.assign(value.size(), T(0)); }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var leaf(Shape shape, std::vector<T> data, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(data);
    if (numel(shape) != n->value.size())
      throw ShapeError("leaf: data length does not match shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Var(n);
  }

  static Var zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = numel(shape);
    return leaf(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Var from(const TensorData<T>& t, bool requires_grad = false) {
    return leaf(t.shape, t.v, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::vector<T>& value() { return node_->value; }
  const std::vector<T>& value() const { return node_->value; }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  std::size_t size() const { return node_->value.size(); }
  std::shared_ptr<Node<T>> node() const { return node_; }

  TensorData<T> detach() const { return TensorData<T>(node_->shape, node_->value); }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Var<T> make_op(Shape shape, std::vector<T> value,
               std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->shape = std::move(shape);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return Var<T>(n);
}

template <typename T>
void accumulate(const std::shared_ptr<Node<T>>& parent, const std::vector<T>& contrib) {
  if (!parent->requires_grad) return;
  parent->ensure_grad();
  for (std::size_t i = 0; i < contrib.size(); ++i) parent->grad[i] += contrib[i];
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_shape(a.shape() == b.shape(), "add", a.shape(), b.shape());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    detail::accumulate(n.parents[0], n.grad);
    detail::accumulate(n.parents[1], n.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_shape(a.shape() == b.shape(), "sub", a.shape(), b.shape());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    detail::accumulate(n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) {
      auto& p = *n.parents[1];
      p.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] -= n.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_shape(a.shape() == b.shape(), "mul", a.shape(), b.shape());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    if (n.parents[0]->requires_grad) {
      auto& p = *n.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        p.grad[i] += n.grad[i] * n.parents[1]->value[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& p = *n.parents[1];
      p.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        p.grad[i] += n.grad[i] * n.parents[0]->value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
  return detail::make_op<T>(a.shape(), std::move(out), {a}, [c](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
  return detail::make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& n) {
    detail::accumulate(n.parents[0], n.grad);
  });
}

template <typename T>
Var<T> exp_(const Var<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.value()[i]);
  return detail::make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      p.grad[i] += n.grad[i] * n.value[i];
  });
}

template <typename T>
Var<T> log_(const Var<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.value()[i]);
  return detail::make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      p.grad[i] += n.grad[i] / p.value[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T x = a.value()[i];
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                       : std::exp(x) / (T(1) + std::exp(x));
  }
  return detail::make_op<T>(a.shape(), std::move(out), {a}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      p.grad[i] += n.grad[i] * n.value[i] * (T(1) - n.value[i]);
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T x = a.value()[i];
    out[i] = x >= T(0) ? x : slope * x;
  }
  return detail::make_op<T>(a.shape(), std::move(out), {a}, [slope](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      p.grad[i] += n.grad[i] * (p.value[i] >= T(0) ? T(1) : slope);
  });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(hi, std::max(lo, a.value()[i]));
  return detail::make_op<T>(a.shape(), std::move(out), {a}, [lo, hi](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      T x = p.value[i];
      if (x >= lo && x <= hi) p.grad[i] += n.grad[i];
    }
  });
}

// ---- reductions / reshaping ----

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = T(0);
  for (T x : a.value()) acc += x;
  return detail::make_op<T>({1}, {acc}, {a}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& p = *n.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[0];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape new_shape) {
  if (numel(new_shape) != a.size())
    throw ShapeError("reshape: element count mismatch " + shape_str(a.shape()) +
                     " -> " + shape_str(new_shape));
  return detail::make_op<T>(std::move(new_shape), a.value(), {a}, [](Node<T>& n) {
    detail::accumulate(n.parents[0], n.grad);
  });
}

// flatten trailing dims: (N, ...) -> (N, F)
template <typename T>
Var<T> flatten(const Var<T>& a) {
  if (a.shape().empty()) throw ShapeError("flatten: scalar input");
  int n = a.shape()[0];
  int f = static_cast<int>(a.size()) / std::max(n, 1);
  return reshape(a, {n, f});
}

// concat along feature dim after flattening each input to (N, F_i)
template <typename T>
Var<T> concat_features(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  int n = xs[0].shape()[0];
  std::vector<int> feats;
  int ftot = 0;
  for (const auto& x : xs) {
    check_shape(x.shape()[0] == n, "concat", xs[0].shape(), x.shape());
    int f = static_cast<int>(x.size()) / n;
    feats.push_back(f);
    ftot += f;
  }
  std::vector<T> out(static_cast<std::size_t>(n) * ftot);
  int off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& v = xs[k].value();
    for (int r = 0; r < n; ++r)
      std::copy(v.begin() + static_cast<std::size_t>(r) * feats[k],
                v.begin() + static_cast<std::size_t>(r + 1) * feats[k],
                out.begin() + static_cast<std::size_t>(r) * ftot + off);
    off += feats[k];
  }
  return detail::make_op<T>({n, ftot}, std::move(out), xs,
                            [n, feats, ftot](Node<T>& n_) {
                              int off = 0;
                              for (std::size_t k = 0; k < n_.parents.size(); ++k) {
                                auto& p = *n_.parents[k];
                                if (p.requires_grad) {
                                  p.ensure_grad();
                                  for (int r = 0; r < n; ++r)
                                    for (int j = 0; j < feats[k]; ++j)
                                      p.grad[static_cast<std::size_t>(r) * feats[k] + j] +=
                                          n_.grad[static_cast<std::size_t>(r) * ftot + off + j];
                                }
                                off += feats[k];
                              }
                            });
}

// ---- linear / conv ----

// x: (M, K), w: (N, K), b: (N) optional
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = Var<T>()) {
  if (x.shape().size() != 2 || w.shape().size() != 2 ||
      x.shape()[1] != w.shape()[1])
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) +
                     " vs weight " + shape_str(w.shape()));
  const int M = x.shape()[0], K = x.shape()[1], N = w.shape()[0];
  const bool has_b = b.defined();
  if (has_b && (b.shape() != Shape{N}))
    throw ShapeError("linear: bias shape " + shape_str(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(M) * N);
  auto mode = kernels::default_mode();
  kernels::linear_forward(x.value().data(), w.value().data(),
                          has_b ? b.value().data() : nullptr, out.data(), M, K,
                          N, mode);
  std::vector<Var<T>> parents = {x, w};
  if (has_b) parents.push_back(b);
  return detail::make_op<T>({M, N}, std::move(out), parents,
                            [M, K, N, has_b, mode](Node<T>& n) {
                              auto& px = *n.parents[0];
                              auto& pw = *n.parents[1];
                              if (px.requires_grad) {
                                px.ensure_grad();
                                kernels::linear_backward_x(n.grad.data(), pw.value.data(),
                                                           px.grad.data(), M, K, N, mode);
                              }
                              if (pw.requires_grad) {
                                pw.ensure_grad();
                                kernels::linear_backward_w(n.grad.data(), px.value.data(),
                                                           pw.grad.data(), M, K, N, mode);
                              }
                              if (has_b && n.parents[2]->requires_grad) {
                                auto& pb = *n.parents[2];
                                pb.ensure_grad();
                                kernels::linear_backward_b(n.grad.data(), pb.grad.data(), M, N, mode);
                              }
                            });
}

// x: (N, Cin, H, W), w: (Cout, Cin, ks, ks)
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride,
              int pad) {
  if (x.shape().size() != 4 || w.shape().size() != 4 ||
      x.shape()[1] != w.shape()[1] || w.shape()[2] != w.shape()[3])
    throw ShapeError("conv2d: incompatible shapes " + shape_str(x.shape()) +
                     " vs weight " + shape_str(w.shape()));
  const int n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const int cout = w.shape()[0], ks = w.shape()[2];
  const int ho = conv_out_extent(h, ks, stride, pad);
  const int wo = conv_out_extent(wd, ks, stride, pad);
  const bool has_b = b.defined();
  std::vector<T> out(static_cast<std::size_t>(n) * cout * ho * wo);
  auto mode = kernels::default_mode();
  kernels::conv2d_forward(x.value().data(), w.value().data(),
                          has_b ? b.value().data() : nullptr, out.data(), n,
                          cin, h, wd, cout, ks, stride, pad, mode);
  std::vector<Var<T>> parents = {x, w};
  if (has_b) parents.push_back(b);
  return detail::make_op<T>(
      {n, cout, ho, wo}, std::move(out), parents,
      [n, cin, h, wd, cout, ks, stride, pad, ho, wo, has_b, mode](Node<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        if (px.requires_grad) {
          px.ensure_grad();
          kernels::conv2d_backward_x(nd.grad.data(), pw.value.data(), px.grad.data(),
                                     n, cin, h, wd, cout, ks, stride, pad, mode);
        }
        if (pw.requires_grad) {
          pw.ensure_grad();
          kernels::conv2d_backward_w(nd.grad.data(), px.value.data(), pw.grad.data(),
                                     n, cin, h, wd, cout, ks, stride, pad, mode);
        }
        if (has_b && nd.parents[2]->requires_grad) {
          auto& pb = *nd.parents[2];
          pb.ensure_grad();
          kernels::conv2d_backward_b(nd.grad.data(), pb.grad.data(), n, cout, ho, wo, mode);
        }
      });
}

// x: (N, Cin, H, W), w: (Cin, Cout, ks, ks)
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                        int stride, int pad, int output_pad) {
  if (x.shape().size() != 4 || w.shape().size() != 4 ||
      x.shape()[1] != w.shape()[0] || w.shape()[2] != w.shape()[3])
    throw ShapeError("conv_transpose2d: incompatible shapes " +
                     shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const int n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const int cout = w.shape()[1], ks = w.shape()[2];
  const int ho = conv_transpose_out_extent(h, ks, stride, pad, output_pad);
  const int wo = conv_transpose_out_extent(wd, ks, stride, pad, output_pad);
  const bool has_b = b.defined();
  std::vector<T> out(static_cast<std::size_t>(n) * cout * ho * wo);
  auto mode = kernels::default_mode();
  kernels::convt2d_forward(x.value().data(), w.value().data(),
                           has_b ? b.value().data() : nullptr, out.data(), n,
                           cin, h, wd, cout, ks, stride, pad, output_pad, mode);
  std::vector<Var<T>> parents = {x, w};
  if (has_b) parents.push_back(b);
  return detail::make_op<T>(
      {n, cout, ho, wo}, std::move(out), parents,
      [n, cin, h, wd, cout, ks, stride, pad, output_pad, ho, wo, has_b, mode](Node<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        if (px.requires_grad) {
          px.ensure_grad();
          kernels::convt2d_backward_x(nd.grad.data(), pw.value.data(), px.grad.data(),
                                      n, cin, h, wd, cout, ks, stride, pad, output_pad, mode);
        }
        if (pw.requires_grad) {
          pw.ensure_grad();
          kernels::convt2d_backward_w(nd.grad.data(), px.value.data(), pw.grad.data(),
                                      n, cin, h, wd, cout, ks, stride, pad, output_pad, mode);
        }
        if (has_b && nd.parents[2]->requires_grad) {
          auto& pb = *nd.parents[2];
          pb.ensure_grad();
          kernels::conv2d_backward_b(nd.grad.data(), pb.grad.data(), n, cout, ho, wo, mode);
        }
      });
}

// ---- batch normalisation ----

// Shared by the 2d (N,C,H,W) and 1d (N,C) variants: normalises per channel
// over all remaining axes. In train mode batch statistics are used and the
// running buffers are updated in place (EMA, momentum as given); in eval mode
// the op is a deterministic affine map using the running statistics.
template <typename T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                 Var<T>& running_mean, Var<T>& running_var, bool train,
                 T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.shape().size() < 2) throw ShapeError("batchnorm: input rank < 2");
  const int C = x.shape()[1];
  check_shape(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
              "batchnorm", x.shape(), gamma.shape());
  const int N = x.shape()[0];
  int spatial = 1;
  for (std::size_t d = 2; d < x.shape().size(); ++d) spatial *= x.shape()[d];
  const std::size_t m = static_cast<std::size_t>(N) * spatial;

  std::vector<T> mean(C), var(C);
  if (train) {
    for (int c = 0; c < C; ++c) {
      T acc = T(0);
      for (int in = 0; in < N; ++in) {
        const T* row = x.value().data() + (static_cast<std::size_t>(in) * C + c) * spatial;
        for (int s = 0; s < spatial; ++s) acc += row[s];
      }
      mean[c] = acc / static_cast<T>(m);
      T vacc = T(0);
      for (int in = 0; in < N; ++in) {
        const T* row = x.value().data() + (static_cast<std::size_t>(in) * C + c) * spatial;
        for (int s = 0; s < spatial; ++s) {
          T d = row[s] - mean[c];
          vacc += d * d;
        }
      }
      var[c] = vacc / static_cast<T>(m);
    }
    // unbiased variance feeds the running estimate
    for (int c = 0; c < C; ++c) {
      T uvar = m > 1 ? var[c] * static_cast<T>(m) / static_cast<T>(m - 1) : var[c];
      running_mean.value()[c] = (T(1) - momentum) * running_mean.value()[c] + momentum * mean[c];
      running_var.value()[c] = (T(1) - momentum) * running_var.value()[c] + momentum * uvar;
    }
  } else {
    mean = running_mean.value();
    var = running_var.value();
  }

  std::vector<T> invstd(C), xhat(x.size()), out(x.size());
  for (int c = 0; c < C; ++c) invstd[c] = T(1) / std::sqrt(var[c] + eps);
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(in) * C + c) * spatial;
      for (int s = 0; s < spatial; ++s) {
        T xh = (x.value()[base + s] - mean[c]) * invstd[c];
        xhat[base + s] = xh;
        out[base + s] = gamma.value()[c] * xh + beta.value()[c];
      }
    }

  auto xhat_sh = std::make_shared<std::vector<T>>(std::move(xhat));
  auto invstd_sh = std::make_shared<std::vector<T>>(std::move(invstd));
  return detail::make_op<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [N, C, spatial, m, train, xhat_sh, invstd_sh](Node<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pg = *nd.parents[1];
        auto& pb = *nd.parents[2];
        const auto& xh = *xhat_sh;
        const auto& istd = *invstd_sh;
        std::vector<T> dgamma(C, T(0)), dbeta(C, T(0));
        for (int in = 0; in < N; ++in)
          for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(in) * C + c) * spatial;
            for (int s = 0; s < spatial; ++s) {
              dgamma[c] += nd.grad[base + s] * xh[base + s];
              dbeta[c] += nd.grad[base + s];
            }
          }
        if (pg.requires_grad) {
          pg.ensure_grad();
          for (int c = 0; c < C; ++c) pg.grad[c] += dgamma[c];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (int c = 0; c < C; ++c) pb.grad[c] += dbeta[c];
        }
        if (px.requires_grad) {
          px.ensure_grad();
          for (int in = 0; in < N; ++in)
            for (int c = 0; c < C; ++c) {
              const std::size_t base = (static_cast<std::size_t>(in) * C + c) * spatial;
              const T g = pg.value[c] * istd[c];
              for (int s = 0; s < spatial; ++s) {
                T dy = nd.grad[base + s];
                if (train) {
                  // dL/dx via batch-statistics chain rule
                  px.grad[base + s] +=
                      g * (dy - dbeta[c] / static_cast<T>(m) -
                           xh[base + s] * dgamma[c] / static_cast<T>(m));
                } else {
                  px.grad[base + s] += g * dy;
                }
              }
            }
        }
      });
}

// ---- softmax family ----

// softmax over the last dim of a (N, C) tensor, max-shifted
template <typename T>
Var<T> softmax(const Var<T>& x) {
  if (x.shape().size() != 2) throw ShapeError("softmax: expected (N,C) input");
  const int N = x.shape()[0], C = x.shape()[1];
  std::vector<T> out(x.size());
  for (int in = 0; in < N; ++in) {
    const T* row = x.value().data() + static_cast<std::size_t>(in) * C;
    T* orow = out.data() + static_cast<std::size_t>(in) * C;
    T mx = row[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    T z = T(0);
    for (int c = 0; c < C; ++c) {
      orow[c] = std::exp(row[c] - mx);
      z += orow[c];
    }
    for (int c = 0; c < C; ++c) orow[c] /= z;
  }
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [N, C](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    auto& p = *nd.parents[0];
    p.ensure_grad();
    for (int in = 0; in < N; ++in) {
      const std::size_t base = static_cast<std::size_t>(in) * C;
      T dot = T(0);
      for (int c = 0; c < C; ++c) dot += nd.grad[base + c] * nd.value[base + c];
      for (int c = 0; c < C; ++c)
        p.grad[base + c] += nd.value[base + c] * (nd.grad[base + c] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
  if (x.shape().size() != 2) throw ShapeError("log_softmax: expected (N,C) input");
  const int N = x.shape()[0], C = x.shape()[1];
  std::vector<T> out(x.size());
  for (int in = 0; in < N; ++in) {
    const T* row = x.value().data() + static_cast<std::size_t>(in) * C;
    T* orow = out.data() + static_cast<std::size_t>(in) * C;
    T mx = row[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    T z = T(0);
    for (int c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    T lse = mx + std::log(z);
    for (int c = 0; c < C; ++c) orow[c] = row[c] - lse;
  }
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [N, C](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    auto& p = *nd.parents[0];
    p.ensure_grad();
    for (int in = 0; in < N; ++in) {
      const std::size_t base = static_cast<std::size_t>(in) * C;
      T gsum = T(0);
      for (int c = 0; c < C; ++c) gsum += nd.grad[base + c];
      for (int c = 0; c < C; ++c)
        p.grad[base + c] += nd.grad[base + c] - std::exp(nd.value[base + c]) * gsum;
    }
  });
}

// mean categorical cross-entropy over the batch, labels as class indices
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 2 ||
      logits.shape()[0] != static_cast<int>(labels.size()))
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  const int N = logits.shape()[0], C = logits.shape()[1];
  auto ls = log_softmax(logits);
  T acc = T(0);
  for (int in = 0; in < N; ++in)
    acc -= ls.value()[static_cast<std::size_t>(in) * C + labels[in]];
  acc /= static_cast<T>(N);
  return detail::make_op<T>({1}, {acc}, {ls}, [N, C, labels](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    auto& p = *nd.parents[0];
    p.ensure_grad();
    const T g = nd.grad[0] / static_cast<T>(N);
    for (int in = 0; in < N; ++in)
      p.grad[static_cast<std::size_t>(in) * C + labels[in]] -= g;
  });
}

// summed pixel-wise binary cross-entropy against a constant target in [0,1]
template <typename T>
Var<T> bce_sum(const Var<T>& xhat, const TensorData<T>& target) {
  check_shape(xhat.shape() == target.shape, "bce_sum", xhat.shape(), target.shape);
  const T tiny = T(1e-12);
  T acc = T(0);
  for (std::size_t i = 0; i < xhat.size(); ++i) {
    T y = xhat.value()[i], t = target.v[i];
    acc -= t * std::log(std::max(y, tiny)) +
           (T(1) - t) * std::log(std::max(T(1) - y, tiny));
  }
  auto tgt = std::make_shared<std::vector<T>>(target.v);
  return detail::make_op<T>({1}, {acc}, {xhat}, [tgt, tiny](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    auto& p = *nd.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      T y = p.value[i], t = (*tgt)[i];
      T denom = std::max(y * (T(1) - y), tiny);
      p.grad[i] += nd.grad[0] * (y - t) / denom;
    }
  });
}

// ---- backward pass ----

template <typename T>
void backward(const Var<T>& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  // depth-first topological order over the recorded graph
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [nd, idx] = stack.back();
    if (idx < nd->parents.size()) {
      Node<T>* par = nd->parents[idx++].get();
      if (par->requires_grad && !seen.count(par)) {
        seen.insert(par);
        stack.emplace_back(par, 0);
      }
    } else {
      order.push_back(nd);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* nd = *it;
    if (nd->backprop && !nd->grad.empty()) nd->backprop(*nd);
  }
}

// central finite differences, the gradient oracle for backward()
template <typename T>
TensorData<T> finite_diff_grad(const std::function<T(const TensorData<T>&)>& f,
                               const TensorData<T>& x, T h) {
  TensorData<T> g(x.shape);
  TensorData<T> xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = xp.v[i];
    xp.v[i] = orig + h;
    T fp = f(xp);
    xp.v[i] = orig - h;
    T fm = f(xp);
    xp.v[i] = orig;
    g.v[i] = (fp - fm) / (T(2) * h);
  }
  return g;
}

}  // namespace carso::ag
