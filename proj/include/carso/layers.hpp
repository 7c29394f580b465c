#pragma once

#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "carso/autograd.hpp"
#include "carso/params.hpp"
#include "carso/tensor.hpp"

namespace carso {

namespace layer {

struct Conv2d {
  int cin, cout, ks, stride, pad;
  bool bias = false;
};
struct ConvT2d {
  int cin, cout, ks, stride, pad, outpad;
  bool bias = false;
};
struct BatchNorm {  // per-channel over remaining axes; covers 2d and 1d
  int ch;
};
struct LeakyReLU {
  double slope = 0.2;
};
struct Sigmoid {};
struct Linear {
  int in, out;
  bool bias = true;
};
struct Flatten {};
struct Unflatten {
  int c, h, w;
};

using Spec = std::variant<Conv2d, ConvT2d, BatchNorm, LeakyReLU, Sigmoid,
                          Linear, Flatten, Unflatten>;

}  // namespace layer

struct NamedLayer {
  std::string name;
  layer::Spec spec;
};

struct NetSpec {
  std::vector<NamedLayer> layers;
};

// ---- shape inference ----

inline Shape layer_out_shape(const layer::Spec& spec, const Shape& in) {
  using namespace layer;
  return std::visit(
      [&](auto&& l) -> Shape {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Conv2d>) {
          if (in.size() != 4 || in[1] != l.cin)
            throw ShapeError("conv2d spec expects (N," + std::to_string(l.cin) +
                             ",H,W), got " + shape_str(in));
          return {in[0], l.cout, conv_out_extent(in[2], l.ks, l.stride, l.pad),
                  conv_out_extent(in[3], l.ks, l.stride, l.pad)};
        } else if constexpr (std::is_same_v<L, ConvT2d>) {
          if (in.size() != 4 || in[1] != l.cin)
            throw ShapeError("conv_transpose2d spec expects (N," +
                             std::to_string(l.cin) + ",H,W), got " + shape_str(in));
          return {in[0], l.cout,
                  conv_transpose_out_extent(in[2], l.ks, l.stride, l.pad, l.outpad),
                  conv_transpose_out_extent(in[3], l.ks, l.stride, l.pad, l.outpad)};
        } else if constexpr (std::is_same_v<L, Linear>) {
          if (in.size() != 2 || in[1] != l.in)
            throw ShapeError("linear spec expects (N," + std::to_string(l.in) +
                             "), got " + shape_str(in));
          return {in[0], l.out};
        } else if constexpr (std::is_same_v<L, Flatten>) {
          int f = 1;
          for (std::size_t d = 1; d < in.size(); ++d) f *= in[d];
          return {in[0], f};
        } else if constexpr (std::is_same_v<L, Unflatten>) {
          if (in.size() != 2 || in[1] != l.c * l.h * l.w)
            throw ShapeError("unflatten: " + shape_str(in) + " cannot become (N," +
                             std::to_string(l.c) + "," + std::to_string(l.h) + "," +
                             std::to_string(l.w) + ")");
          return {in[0], l.c, l.h, l.w};
        } else {
          return in;  // batchnorm / activations preserve shape
        }
      },
      spec);
}

inline Shape net_out_shape(const NetSpec& net, Shape in) {
  for (const auto& nl : net.layers) in = layer_out_shape(nl.spec, in);
  return in;
}

// ---- parameter creation ----

template <typename T>
void init_net(const NetSpec& net, ParamStore<T>& store, const std::string& prefix,
              Rng& rng) {
  using namespace layer;
  for (const auto& nl : net.layers) {
    const std::string base = prefix + "." + nl.name;
    std::visit(
        [&](auto&& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d>) {
            store.create_param(base + ".w", {l.cout, l.cin, l.ks, l.ks},
                               l.cin * l.ks * l.ks, rng);
            if (l.bias)
              store.create_param(base + ".b", {l.cout}, l.cin * l.ks * l.ks, rng);
          } else if constexpr (std::is_same_v<L, ConvT2d>) {
            store.create_param(base + ".w", {l.cin, l.cout, l.ks, l.ks},
                               l.cin * l.ks * l.ks, rng);
            if (l.bias)
              store.create_param(base + ".b", {l.cout}, l.cin * l.ks * l.ks, rng);
          } else if constexpr (std::is_same_v<L, Linear>) {
            store.create_param(base + ".w", {l.out, l.in}, l.in, rng);
            if (l.bias) store.create_param(base + ".b", {l.out}, l.in, rng);
          } else if constexpr (std::is_same_v<L, BatchNorm>) {
            store.create_const_param(base + ".gamma", {l.ch}, T(1));
            store.create_const_param(base + ".beta", {l.ch}, T(0));
            store.create_buffer(base + ".running_mean", {l.ch}, T(0));
            store.create_buffer(base + ".running_var", {l.ch}, T(1));
          }
        },
        nl.spec);
  }
}

// ---- forward ----

// Runs the net; when `capture` is non-null, the output of every layer whose
// name is listed (its preactivation, for conv layers followed by norm and
// nonlinearity) is appended to `captured`.
template <typename T>
ag::Var<T> forward_net(const NetSpec& net, ParamStore<T>& store,
                       const std::string& prefix, ag::Var<T> x, bool train,
                       const std::set<std::string>* capture = nullptr,
                       std::vector<std::pair<std::string, ag::Var<T>>>* captured = nullptr) {
  using namespace layer;
  for (const auto& nl : net.layers) {
    const std::string base = prefix + "." + nl.name;
    x = std::visit(
        [&](auto&& l) -> ag::Var<T> {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d>) {
            return ag::conv2d(x, store.param(base + ".w"),
                              l.bias ? store.param(base + ".b") : ag::Var<T>(),
                              l.stride, l.pad);
          } else if constexpr (std::is_same_v<L, ConvT2d>) {
            return ag::conv_transpose2d(
                x, store.param(base + ".w"),
                l.bias ? store.param(base + ".b") : ag::Var<T>(), l.stride,
                l.pad, l.outpad);
          } else if constexpr (std::is_same_v<L, Linear>) {
            return ag::linear(x, store.param(base + ".w"),
                              l.bias ? store.param(base + ".b") : ag::Var<T>());
          } else if constexpr (std::is_same_v<L, BatchNorm>) {
            return ag::batchnorm(x, store.param(base + ".gamma"),
                                 store.param(base + ".beta"),
                                 store.buffer(base + ".running_mean"),
                                 store.buffer(base + ".running_var"), train);
          } else if constexpr (std::is_same_v<L, LeakyReLU>) {
            return ag::leaky_relu(x, static_cast<T>(l.slope));
          } else if constexpr (std::is_same_v<L, Sigmoid>) {
            return ag::sigmoid(x);
          } else if constexpr (std::is_same_v<L, Flatten>) {
            return ag::flatten(x);
          } else {  // Unflatten
            return ag::reshape(x, {x.shape()[0], l.c, l.h, l.w});
          }
        },
        nl.spec);
    if (capture && captured && capture->count(nl.name))
      captured->emplace_back(nl.name, x);
  }
  return x;
}

// ---- (de)serialisation of specs ----

inline nlohmann::json to_json(const layer::Spec& spec) {
  using namespace layer;
  nlohmann::json j;
  std::visit(
      [&](auto&& l) {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Conv2d>) {
          j = {{"kind", "conv2d"}, {"cin", l.cin}, {"cout", l.cout}, {"ks", l.ks},
               {"stride", l.stride}, {"pad", l.pad}, {"bias", l.bias}};
        } else if constexpr (std::is_same_v<L, ConvT2d>) {
          j = {{"kind", "conv_transpose2d"}, {"cin", l.cin}, {"cout", l.cout},
               {"ks", l.ks}, {"stride", l.stride}, {"pad", l.pad},
               {"outpad", l.outpad}, {"bias", l.bias}};
        } else if constexpr (std::is_same_v<L, BatchNorm>) {
          j = {{"kind", "batchnorm"}, {"ch", l.ch}};
        } else if constexpr (std::is_same_v<L, LeakyReLU>) {
          j = {{"kind", "leaky_relu"}, {"slope", l.slope}};
        } else if constexpr (std::is_same_v<L, Sigmoid>) {
          j = {{"kind", "sigmoid"}};
        } else if constexpr (std::is_same_v<L, Linear>) {
          j = {{"kind", "linear"}, {"in", l.in}, {"out", l.out}, {"bias", l.bias}};
        } else if constexpr (std::is_same_v<L, Flatten>) {
          j = {{"kind", "flatten"}};
        } else {
          j = {{"kind", "unflatten"}, {"c", l.c}, {"h", l.h}, {"w", l.w}};
        }
      },
      spec);
  return j;
}

inline layer::Spec layer_from_json(const nlohmann::json& j) {
  using namespace layer;
  const std::string kind = j.at("kind");
  if (kind == "conv2d")
    return Conv2d{j.at("cin"), j.at("cout"), j.at("ks"), j.at("stride"),
                  j.at("pad"), j.at("bias")};
  if (kind == "conv_transpose2d")
    return ConvT2d{j.at("cin"), j.at("cout"), j.at("ks"), j.at("stride"),
                   j.at("pad"), j.at("outpad"), j.at("bias")};
  if (kind == "batchnorm") return BatchNorm{j.at("ch")};
  if (kind == "leaky_relu") return LeakyReLU{j.at("slope")};
  if (kind == "sigmoid") return Sigmoid{};
  if (kind == "linear") return Linear{j.at("in"), j.at("out"), j.at("bias")};
  if (kind == "flatten") return Flatten{};
  if (kind == "unflatten") return Unflatten{j.at("c"), j.at("h"), j.at("w")};
  throw std::runtime_error("unknown layer kind '" + kind + "'");
}

inline nlohmann::json to_json(const NetSpec& net) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& nl : net.layers) {
    auto lj = to_json(nl.spec);
    lj["name"] = nl.name;
    j.push_back(lj);
  }
  return j;
}

inline NetSpec net_from_json(const nlohmann::json& j) {
  NetSpec net;
  for (const auto& lj : j)
    net.layers.push_back({lj.at("name"), layer_from_json(lj)});
  return net;
}

}  // namespace carso
