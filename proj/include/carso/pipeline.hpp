#pragma once

#include <algorithm>
#include <chrono>
#include <stdexcept>
#include <string>
#include <vector>

#include "carso/aggregation.hpp"
#include "carso/attacks.hpp"
#include "carso/data.hpp"
#include "carso/nets.hpp"

namespace carso::pipeline {

struct RobustPrediction {
  agg::LogitMatrix logits;  // one row per purification draw
  agg::AggregatedPrediction prediction;
};

// Stochastic defence: capture the classifier's internal representation of x,
// compress it into the conditioning vector, then decode n_samples latents
// drawn from the prior and re-classify each reconstruction. The training-only
// input encoder is never touched. Each example's draws come from its own
// counter-derived stream (base.derive(example_offset + i)), so results do not
// depend on batch composition.
inline std::vector<RobustPrediction> robust_predict(
    Classifier<float>& cls, Purifier<float>& pur, const DatasetStats& stats,
    const TensorData<float>& x, int n_samples, agg::Strategy strategy, Rng base,
    long example_offset = 0) {
  if (n_samples < 1) throw std::invalid_argument("robust_predict: n_samples < 1");
  (void)stats;  // classifier consumes raw [0,1] pixels; stats stay for parity with training
  const int B = x.shape[0];
  const int fjoint = pur.spec.fjoint;
  const int classes = cls.spec.classes;

  InternalRepresentation<float> rep;
  auto xv = ag::Var<float>::from(x, false);
  classifier_forward(cls, xv, false, true, &rep);
  auto cc = encode_conditioning(pur, rep, false);

  // pre-draw every example's latents from its own stream
  std::vector<std::vector<float>> zs(n_samples,
                                     std::vector<float>(static_cast<std::size_t>(B) * fjoint));
  for (int i = 0; i < B; ++i) {
    Rng er = base.derive(static_cast<std::uint64_t>(example_offset + i));
    for (int d = 0; d < n_samples; ++d)
      for (int j = 0; j < fjoint; ++j)
        zs[d][static_cast<std::size_t>(i) * fjoint + j] = static_cast<float>(er.normal());
  }

  std::vector<RobustPrediction> out(B);
  for (int i = 0; i < B; ++i) {
    out[i].logits.n_samples = n_samples;
    out[i].logits.n_classes = classes;
    out[i].logits.l.resize(static_cast<std::size_t>(n_samples) * classes);
  }
  for (int d = 0; d < n_samples; ++d) {
    auto z = ag::Var<float>::leaf({B, fjoint}, zs[d], false);
    auto xhat = decode(pur, z, cc, false);
    auto logits = classifier_forward(cls, xhat, false);
    for (int i = 0; i < B; ++i)
      for (int c = 0; c < classes; ++c)
        out[i].logits.at(d, c) =
            static_cast<double>(logits.value()[static_cast<std::size_t>(i) * classes + c]);
  }
  for (auto& r : out) r.prediction = agg::aggregate(r.logits, strategy);
  return out;
}

// Differentiable loss of the full purify-and-reclassify pipeline, for EoT
// attacks. Aggregation runs in-graph in the log domain; cross_entropy on the
// aggregated scores is the exact negative log of the aggregated probability.
inline attacks::StochasticLossFn<float> make_pipeline_loss(
    Classifier<float>& cls, Purifier<float>& pur, const std::vector<int>& labels,
    int n_samples, agg::Strategy strategy) {
  if (n_samples < 1) throw std::invalid_argument("pipeline loss: n_samples < 1");
  return [&cls, &pur, labels, n_samples, strategy](const ag::Var<float>& x, Rng& rng) {
    const int B = x.shape()[0];
    const int fjoint = pur.spec.fjoint;
    InternalRepresentation<float> rep;
    classifier_forward(cls, x, false, true, &rep);
    auto cc = encode_conditioning(pur, rep, false);

    ag::Var<float> scores;
    for (int d = 0; d < n_samples; ++d) {
      std::vector<float> zv(static_cast<std::size_t>(B) * fjoint);
      for (auto& v : zv) v = static_cast<float>(rng.normal());
      auto z = ag::Var<float>::leaf({B, fjoint}, std::move(zv), false);
      auto logits = classifier_forward(cls, decode(pur, z, cc, false), false);
      ag::Var<float> term;
      switch (strategy) {
        case agg::Strategy::carso:
          term = ag::exp_(ag::clamp(logits, -30.0f, 30.0f));
          break;
        case agg::Strategy::logit_mean:
          term = ag::scale(logits, 1.0f / n_samples);
          break;
        case agg::Strategy::prob_mean:
          term = ag::scale(ag::softmax(logits), 1.0f / n_samples);
          break;
      }
      scores = d == 0 ? term : ag::add(scores, term);
    }
    if (strategy == agg::Strategy::prob_mean)
      scores = ag::log_(scores);  // softmax(log p) == p, so CE below is -log p
    return ag::cross_entropy(scores, labels);
  };
}

// ---- evaluation ----

struct EvalOptions {
  bool use_pipeline = true;  // otherwise the bare classifier
  int n_samples = 8;
  agg::Strategy strategy = agg::Strategy::carso;
  bool attacked = false;
  attacks::AttackSpec attack;
  int limit = 0;  // cap on evaluated examples, 0 = whole split
  int batch_size = 16;
  std::uint64_t seed = 0;
};

struct EvalResult {
  int n = 0;
  int clean_correct = 0;
  int robust_correct = 0;  // == clean_correct when no attack requested
  std::vector<long> per_class_total;
  std::vector<long> per_class_robust_correct;
  double wall_seconds = 0;
  std::string attack_echo;

  double clean_accuracy() const { return n ? static_cast<double>(clean_correct) / n : 0; }
  double robust_accuracy() const { return n ? static_cast<double>(robust_correct) / n : 0; }
};

inline std::string attack_echo(const EvalOptions& o) {
  if (!o.attacked) return "none";
  std::string fam = o.attack.family == attacks::Family::fgsm
                        ? "fgsm"
                        : (o.attack.family == attacks::Family::pgd ? "pgd" : "eot-pgd");
  return fam + " eps=" + std::to_string(o.attack.epsilon) +
         " alpha=" + std::to_string(o.attack.step_size) +
         " steps=" + std::to_string(o.attack.steps) +
         " eot=" + std::to_string(o.attack.eot_iterations);
}

inline std::vector<int> predict_batch(Classifier<float>& cls, Purifier<float>* pur,
                                      const DatasetStats& stats,
                                      const TensorData<float>& x, const EvalOptions& o,
                                      long offset) {
  std::vector<int> pred(x.shape[0]);
  if (o.use_pipeline) {
    if (!pur) throw std::invalid_argument("evaluate: pipeline mode needs a purifier");
    auto rp = robust_predict(cls, *pur, stats, x, o.n_samples, o.strategy,
                             Rng(o.seed, 0xF00D), offset);
    for (std::size_t i = 0; i < rp.size(); ++i) pred[i] = rp[i].prediction.chosen_class;
  } else {
    auto logits = classifier_forward(cls, ag::Var<float>::from(x), false);
    const int C = cls.spec.classes;
    for (int i = 0; i < x.shape[0]; ++i) {
      const float* row = logits.value().data() + static_cast<std::size_t>(i) * C;
      pred[i] = static_cast<int>(std::max_element(row, row + C) - row);
    }
  }
  return pred;
}

inline EvalResult evaluate(Classifier<float>& cls, Purifier<float>* pur,
                           const DatasetStats& stats, const data::Dataset& ds,
                           const EvalOptions& o) {
  if (ds.size() == 0) throw std::runtime_error("evaluate: empty split");
  if (o.attacked) o.attack.validate();
  const int n = o.limit > 0 ? std::min(o.limit, ds.size()) : ds.size();
  const auto t0 = std::chrono::steady_clock::now();

  EvalResult res;
  res.n = n;
  res.per_class_total.assign(ds.classes, 0);
  res.per_class_robust_correct.assign(ds.classes, 0);
  res.attack_echo = attack_echo(o);

  long batch_counter = 0;
  for (int lo = 0; lo < n; lo += o.batch_size, ++batch_counter) {
    const int hi = std::min(lo + o.batch_size, n);
    const int B = hi - lo;
    Shape s = ds.images.shape;
    s[0] = B;
    TensorData<float> xb(s);
    const std::size_t row = ds.images.size() / ds.images.shape[0];
    std::copy(ds.images.v.begin() + lo * row, ds.images.v.begin() + hi * row,
              xb.v.begin());
    std::vector<int> yb(ds.labels.begin() + lo, ds.labels.begin() + hi);

    auto clean_pred = predict_batch(cls, pur, stats, xb, o, lo);
    std::vector<int> robust_pred = clean_pred;
    if (o.attacked) {
      TensorData<float> xadv;
      Rng arng = Rng(o.seed, 0xA77C).derive(batch_counter);
      if (o.use_pipeline && o.attack.family == attacks::Family::eot_pgd) {
        auto loss = make_pipeline_loss(cls, *pur, yb, o.n_samples, o.strategy);
        xadv = attacks::eot_pgd(loss, xb, o.attack, arng);
      } else if (o.attack.family == attacks::Family::fgsm) {
        auto loss = [&](const ag::Var<float>& x) {
          return ag::cross_entropy(classifier_forward(cls, x, false), yb);
        };
        xadv = attacks::fgsm<float>(loss, xb, static_cast<float>(o.attack.epsilon)).x_adv;
      } else {
        attacks::LossFn<float> loss = [&](const ag::Var<float>& x) {
          return ag::cross_entropy(classifier_forward(cls, x, false), yb);
        };
        auto spec = o.attack;
        spec.family = attacks::Family::pgd;
        xadv = attacks::pgd(loss, xb, spec, arng);
      }
      robust_pred = predict_batch(cls, pur, stats, xadv, o, lo);
    }

    for (int i = 0; i < B; ++i) {
      res.per_class_total[yb[i]]++;
      if (clean_pred[i] == yb[i]) res.clean_correct++;
      if (robust_pred[i] == yb[i]) {
        res.robust_correct++;
        res.per_class_robust_correct[yb[i]]++;
      }
    }
  }
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace carso::pipeline
