#pragma once

#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "carso/layers.hpp"
#include "carso/params.hpp"
#include "carso/rng.hpp"

namespace carso {

// Ordered per-layer preactivation tensors captured during one classifier
// forward pass; the conditioning set of the purifier.
template <typename T>
using InternalRepresentation = std::vector<std::pair<std::string, ag::Var<T>>>;

struct DatasetStats {
  std::vector<double> mean;  // per channel
  std::vector<double> std;   // per channel, strictly positive
};

struct ClassifierSpec {
  NetSpec net;
  std::vector<std::string> capture_layers;  // forward order
  int classes = 10;
  Shape input_shape;  // (C, H, W)

  nlohmann::json to_json_obj() const {
    return {{"net", to_json(net)},
            {"capture_layers", capture_layers},
            {"classes", classes},
            {"input_shape", input_shape}};
  }
  static ClassifierSpec from_json(const nlohmann::json& j) {
    ClassifierSpec s;
    s.net = net_from_json(j.at("net"));
    s.capture_layers = j.at("capture_layers").get<std::vector<std::string>>();
    s.classes = j.at("classes");
    s.input_shape = j.at("input_shape").get<Shape>();
    return s;
  }
};

struct PurifierSpec {
  NetSpec input_encoder;
  std::vector<std::pair<std::string, NetSpec>> repr_encoders;  // per capture layer
  NetSpec fc_repr;   // concat -> linear -> bn -> leaky_relu, output width fcrepr
  NetSpec joint;     // concat -> linear -> bn -> leaky_relu (trunk)
  NetSpec head_mu;   // fjoint -> fjoint
  NetSpec head_logvar;
  NetSpec decoder;
  int fcrepr = 128;
  int fjoint = 32;
  Shape image_shape;  // (C, H, W)

  nlohmann::json to_json_obj() const {
    nlohmann::json re = nlohmann::json::array();
    for (const auto& [name, net] : repr_encoders)
      re.push_back({{"layer", name}, {"net", to_json(net)}});
    return {{"input_encoder", to_json(input_encoder)},
            {"repr_encoders", re},
            {"fc_repr", to_json(fc_repr)},
            {"joint", to_json(joint)},
            {"head_mu", to_json(head_mu)},
            {"head_logvar", to_json(head_logvar)},
            {"decoder", to_json(decoder)},
            {"fcrepr", fcrepr},
            {"fjoint", fjoint},
            {"image_shape", image_shape}};
  }
  static PurifierSpec from_json(const nlohmann::json& j) {
    PurifierSpec s;
    s.input_encoder = net_from_json(j.at("input_encoder"));
    for (const auto& e : j.at("repr_encoders"))
      s.repr_encoders.emplace_back(e.at("layer"), net_from_json(e.at("net")));
    s.fc_repr = net_from_json(j.at("fc_repr"));
    s.joint = net_from_json(j.at("joint"));
    s.head_mu = net_from_json(j.at("head_mu"));
    s.head_logvar = net_from_json(j.at("head_logvar"));
    s.decoder = net_from_json(j.at("decoder"));
    s.fcrepr = j.at("fcrepr");
    s.fjoint = j.at("fjoint");
    s.image_shape = j.at("image_shape").get<Shape>();
    return s;
  }
};

template <typename T>
struct Classifier {
  ClassifierSpec spec;
  ParamStore<T> store;
};

template <typename T>
struct Purifier {
  PurifierSpec spec;
  ParamStore<T> store;
  mutable long encode_input_evals = 0;  // inference must never touch the input encoder
};

// ---- builders ----

// Desk-scale classifier: 4 conv blocks (conv -> batchnorm -> leaky_relu, the
// 2nd and 4th at stride 2) + 2 linear layers. The captured preactivations are
// the four conv outputs (first conv of each block; the stride-changing convs
// are among them).
inline ClassifierSpec make_desk_classifier_spec(int in_ch, int img_h, int img_w,
                                                int classes, int width = 16) {
  using namespace layer;
  ClassifierSpec s;
  s.classes = classes;
  s.input_shape = {in_ch, img_h, img_w};
  const int w1 = width, w2 = 2 * width;
  s.net.layers = {
      {"conv1", Conv2d{in_ch, w1, 3, 1, 1, false}},
      {"bn1", BatchNorm{w1}},
      {"act1", LeakyReLU{0.2}},
      {"conv2", Conv2d{w1, w1, 3, 2, 1, false}},
      {"bn2", BatchNorm{w1}},
      {"act2", LeakyReLU{0.2}},
      {"conv3", Conv2d{w1, w2, 3, 1, 1, false}},
      {"bn3", BatchNorm{w2}},
      {"act3", LeakyReLU{0.2}},
      {"conv4", Conv2d{w2, w2, 3, 2, 1, false}},
      {"bn4", BatchNorm{w2}},
      {"act4", LeakyReLU{0.2}},
      {"flat", Flatten{}},
  };
  Shape feat = net_out_shape(s.net, {1, in_ch, img_h, img_w});
  s.net.layers.push_back({"fc1", Linear{feat[1], 64, true}});
  s.net.layers.push_back({"act5", LeakyReLU{0.2}});
  s.net.layers.push_back({"fc2", Linear{64, classes, true}});
  s.capture_layers = {"conv1", "conv2", "conv3", "conv4"};
  return s;
}

// Channel-halving 3-layer representation encoder: ceil(c/2), ceil(c/4), ceil(c/8)
inline NetSpec make_repr_encoder_spec(int cin) {
  using namespace layer;
  auto ceil_div = [](int a, int b) { return (a + b - 1) / b; };
  const int c2 = ceil_div(cin, 2), c4 = ceil_div(cin, 4), c8 = ceil_div(cin, 8);
  NetSpec n;
  n.layers = {
      {"conv1", Conv2d{cin, c2, 3, 1, 0, false}}, {"bn1", BatchNorm{c2}},
      {"act1", LeakyReLU{0.2}},
      {"conv2", Conv2d{c2, c4, 3, 1, 0, false}},  {"bn2", BatchNorm{c4}},
      {"act2", LeakyReLU{0.2}},
      {"conv3", Conv2d{c4, c8, 3, 1, 0, false}},  {"bn3", BatchNorm{c8}},
      {"act3", LeakyReLU{0.2}},
  };
  return n;
}

// Two stride-2 conv blocks, 6 then 12 channels
inline NetSpec make_input_encoder_spec(int in_ch) {
  using namespace layer;
  NetSpec n;
  n.layers = {
      {"conv1", Conv2d{in_ch, 6, 3, 2, 1, false}}, {"bn1", BatchNorm{6}},
      {"act1", LeakyReLU{0.2}},
      {"conv2", Conv2d{6, 12, 3, 2, 1, false}},    {"bn2", BatchNorm{12}},
      {"act2", LeakyReLU{0.2}},
      {"flat", Flatten{}},
  };
  return n;
}

// Transposed-conv decoder ending in a sigmoid; supports 28x28 and 32x32 targets
inline NetSpec make_decoder_spec(int in_feats, int out_ch, int img_h, int img_w) {
  using namespace layer;
  NetSpec n;
  n.layers.push_back({"fc", Linear{in_feats, 64 * 3 * 3, true}});
  n.layers.push_back({"act0", LeakyReLU{0.2}});
  n.layers.push_back({"unflat", Unflatten{64, 3, 3}});
  if (img_h == 28 && img_w == 28) {
    n.layers.push_back({"deconv1", ConvT2d{64, 32, 3, 2, 0, 0, false}});  // 3 -> 7
    n.layers.push_back({"dbn1", BatchNorm{32}});
    n.layers.push_back({"dact1", LeakyReLU{0.2}});
    n.layers.push_back({"deconv2", ConvT2d{32, 16, 2, 2, 0, 0, false}});  // 7 -> 14
    n.layers.push_back({"dbn2", BatchNorm{16}});
    n.layers.push_back({"dact2", LeakyReLU{0.2}});
    n.layers.push_back({"deconv3", ConvT2d{16, 8, 2, 2, 0, 0, false}});   // 14 -> 28
    n.layers.push_back({"dbn3", BatchNorm{8}});
    n.layers.push_back({"dact3", LeakyReLU{0.2}});
    n.layers.push_back({"deconv4", ConvT2d{8, out_ch, 3, 1, 1, 0, true}});
  } else if (img_h == 32 && img_w == 32) {
    n.layers.push_back({"deconv1", ConvT2d{64, 32, 3, 2, 1, 0, false}});  // 3 -> 5
    n.layers.push_back({"dbn1", BatchNorm{32}});
    n.layers.push_back({"dact1", LeakyReLU{0.2}});
    n.layers.push_back({"deconv2", ConvT2d{32, 16, 3, 2, 1, 0, false}});  // 5 -> 9
    n.layers.push_back({"dbn2", BatchNorm{16}});
    n.layers.push_back({"dact2", LeakyReLU{0.2}});
    n.layers.push_back({"deconv3", ConvT2d{16, 16, 3, 2, 1, 0, false}});  // 9 -> 17
    n.layers.push_back({"dbn3", BatchNorm{16}});
    n.layers.push_back({"dact3", LeakyReLU{0.2}});
    n.layers.push_back({"deconv4", ConvT2d{16, 8, 3, 2, 1, 0, false}});   // 17 -> 33
    n.layers.push_back({"dbn4", BatchNorm{8}});
    n.layers.push_back({"dact4", LeakyReLU{0.2}});
    n.layers.push_back({"deconv5", ConvT2d{8, out_ch, 2, 1, 1, 0, true}});  // 33 -> 32
  } else {
    throw ShapeError("decoder: unsupported image size " + std::to_string(img_h) +
                     "x" + std::to_string(img_w));
  }
  n.layers.push_back({"out", Sigmoid{}});
  return n;
}

inline PurifierSpec make_purifier_spec(const ClassifierSpec& cls, int fcrepr,
                                       int fjoint) {
  PurifierSpec p;
  p.fcrepr = fcrepr;
  p.fjoint = fjoint;
  p.image_shape = cls.input_shape;
  const int in_ch = cls.input_shape[0];
  const int img_h = cls.input_shape[1], img_w = cls.input_shape[2];

  p.input_encoder = make_input_encoder_spec(in_ch);
  Shape input_feats = net_out_shape(p.input_encoder, {1, in_ch, img_h, img_w});

  // shapes of the captured preactivations, by walking the classifier net
  std::set<std::string> capture(cls.capture_layers.begin(), cls.capture_layers.end());
  Shape cur = {1, in_ch, img_h, img_w};
  std::vector<std::pair<std::string, Shape>> cap_shapes;
  for (const auto& nl : cls.net.layers) {
    cur = layer_out_shape(nl.spec, cur);
    if (capture.count(nl.name)) cap_shapes.emplace_back(nl.name, cur);
  }
  if (cap_shapes.size() != cls.capture_layers.size())
    throw ShapeError("purifier: capture layer missing from classifier net");

  int repr_feats = 0;
  for (const auto& [name, shape] : cap_shapes) {
    NetSpec enc = make_repr_encoder_spec(shape[1]);
    Shape out = net_out_shape(enc, shape);
    repr_feats += out[1] * out[2] * out[3];
    p.repr_encoders.emplace_back(name, std::move(enc));
  }

  using namespace layer;
  p.fc_repr.layers = {{"fc", Linear{repr_feats, fcrepr, false}},
                      {"bn", BatchNorm{fcrepr}},
                      {"act", LeakyReLU{0.2}}};
  p.joint.layers = {{"fc", Linear{input_feats[1] + fcrepr, fjoint, false}},
                    {"bn", BatchNorm{fjoint}},
                    {"act", LeakyReLU{0.2}}};
  p.head_mu.layers = {{"fc", Linear{fjoint, fjoint, true}}};
  p.head_logvar.layers = {{"fc", Linear{fjoint, fjoint, true}}};
  p.decoder = make_decoder_spec(fjoint + fcrepr, in_ch, img_h, img_w);
  return p;
}

template <typename T>
Classifier<T> make_classifier(const ClassifierSpec& spec, Rng rng) {
  Classifier<T> c;
  c.spec = spec;
  init_net(spec.net, c.store, "classifier", rng);
  return c;
}

template <typename T>
Purifier<T> make_purifier(const PurifierSpec& spec, Rng rng) {
  Purifier<T> p;
  p.spec = spec;
  init_net(spec.input_encoder, p.store, "input_enc", rng);
  for (const auto& [name, net] : spec.repr_encoders)
    init_net(net, p.store, "repr_enc." + name, rng);
  init_net(spec.fc_repr, p.store, "fc_repr", rng);
  init_net(spec.joint, p.store, "joint", rng);
  init_net(spec.head_mu, p.store, "head_mu", rng);
  init_net(spec.head_logvar, p.store, "head_logvar", rng);
  init_net(spec.decoder, p.store, "decoder", rng);
  return p;
}

// ---- operations ----

// classifier forward on raw [0,1] inputs; capture is observation-only
template <typename T>
ag::Var<T> classifier_forward(Classifier<T>& cls, const ag::Var<T>& x, bool train,
                              bool capture = false,
                              InternalRepresentation<T>* rep = nullptr) {
  std::set<std::string> cap;
  if (capture) cap.insert(cls.spec.capture_layers.begin(), cls.spec.capture_layers.end());
  return forward_net(cls.spec.net, cls.store, "classifier", x, train,
                     capture ? &cap : nullptr, capture ? rep : nullptr);
}

// per-channel standardisation with dataset statistics; differentiable in x
template <typename T>
ag::Var<T> standardize(const ag::Var<T>& x, const DatasetStats& stats) {
  if (x.shape().size() != 4 || x.shape()[1] != static_cast<int>(stats.mean.size()))
    throw ShapeError("standardize: input " + shape_str(x.shape()) + " vs " +
                     std::to_string(stats.mean.size()) + "-channel stats");
  const int N = x.shape()[0], C = x.shape()[1];
  const int spatial = x.shape()[2] * x.shape()[3];
  std::vector<T> out(x.size());
  std::vector<T> inv_std(C);
  for (int c = 0; c < C; ++c) {
    if (!(stats.std[c] > 0.0)) throw std::runtime_error("standardize: nonpositive std");
    inv_std[c] = static_cast<T>(1.0 / stats.std[c]);
  }
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(in) * C + c) * spatial;
      for (int s = 0; s < spatial; ++s)
        out[base + s] = (x.value()[base + s] - static_cast<T>(stats.mean[c])) * inv_std[c];
    }
  return ag::detail::make_op<T>(
      x.shape(), std::move(out), {x}, [N, C, spatial, inv_std](ag::Node<T>& nd) {
        if (!nd.parents[0]->requires_grad) return;
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (int in = 0; in < N; ++in)
          for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(in) * C + c) * spatial;
            for (int s = 0; s < spatial; ++s)
              p.grad[base + s] += nd.grad[base + s] * inv_std[c];
          }
      });
}

// compress the captured representation into the conditioning tensor (width fcrepr)
template <typename T>
ag::Var<T> encode_conditioning(Purifier<T>& pur, const InternalRepresentation<T>& rep,
                               bool train) {
  std::vector<ag::Var<T>> encoded;
  for (const auto& [name, enc] : pur.spec.repr_encoders) {
    const ag::Var<T>* entry = nullptr;
    for (const auto& [rname, t] : rep)
      if (rname == name) {
        entry = &t;
        break;
      }
    if (!entry)
      throw std::runtime_error("encode_conditioning: capture layer '" + name +
                               "' missing from representation");
    encoded.push_back(ag::flatten(
        forward_net(enc, pur.store, "repr_enc." + name, *entry, train)));
  }
  auto cat = ag::concat_features(encoded);
  return forward_net(pur.spec.fc_repr, pur.store, "fc_repr", cat, train);
}

// training-only input compression path; expects a standardized input
template <typename T>
ag::Var<T> encode_input(Purifier<T>& pur, const ag::Var<T>& x_std, bool train) {
  ++pur.encode_input_evals;
  return forward_net(pur.spec.input_encoder, pur.store, "input_enc", x_std, train);
}

template <typename T>
std::pair<ag::Var<T>, ag::Var<T>> joint_encode(Purifier<T>& pur,
                                               const ag::Var<T>& xc,
                                               const ag::Var<T>& cc, bool train) {
  auto cat = ag::concat_features<T>({xc, cc});
  auto trunk = forward_net(pur.spec.joint, pur.store, "joint", cat, train);
  auto mu = forward_net(pur.spec.head_mu, pur.store, "head_mu", trunk, train);
  auto logvar = forward_net(pur.spec.head_logvar, pur.store, "head_logvar", trunk, train);
  return {mu, logvar};
}

// z = mu + exp(clamp(logvar, -10, 10) / 2) * eps, eps ~ N(0,1) from rng
template <typename T>
ag::Var<T> reparameterize(const ag::Var<T>& mu, const ag::Var<T>& logvar, Rng& rng) {
  check_shape(mu.shape() == logvar.shape(), "reparameterize", mu.shape(), logvar.shape());
  std::vector<T> eps(mu.size());
  for (auto& e : eps) e = static_cast<T>(rng.normal());
  auto eps_v = ag::Var<T>::leaf(mu.shape(), std::move(eps), false);
  auto sigma = ag::exp_(ag::scale(ag::clamp(logvar, T(-10), T(10)), T(0.5)));
  return ag::add(mu, ag::mul(sigma, eps_v));
}

template <typename T>
ag::Var<T> decode(Purifier<T>& pur, const ag::Var<T>& z, const ag::Var<T>& cc,
                  bool train) {
  if (z.shape()[1] != pur.spec.fjoint || cc.shape()[1] != pur.spec.fcrepr)
    throw ShapeError("decode: z " + shape_str(z.shape()) + " / cc " +
                     shape_str(cc.shape()) + " vs (fjoint=" +
                     std::to_string(pur.spec.fjoint) + ", fcrepr=" +
                     std::to_string(pur.spec.fcrepr) + ")");
  auto cat = ag::concat_features<T>({z, cc});
  return forward_net(pur.spec.decoder, pur.store, "decoder", cat, train);
}

}  // namespace carso
