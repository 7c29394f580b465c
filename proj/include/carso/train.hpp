#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "carso/attacks.hpp"
#include "carso/checkpoint.hpp"
#include "carso/data.hpp"
#include "carso/losses.hpp"
#include "carso/nets.hpp"
#include "carso/optim.hpp"
#include "carso/schedules.hpp"

namespace carso::train {

struct ClassifierTrainConfig {
  int epochs = 5;
  int batch_size = 128;
  double lr = 1e-3;
  std::string optimizer = "adam";
  bool adversarial = true;
  attacks::AttackSpec attack;  // inner attack against the current parameters
  int log_every = 0;           // batches between log lines; 0 = epoch only

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("train: bad sizes");
    if (!(lr > 0)) throw std::invalid_argument("train: nonpositive lr");
    attack.validate();
  }
};

struct PurifierTrainConfig {
  int epochs = 8;
  int batch_size = 64;
  LrSchedule lr;
  int beta_b0 = 1;  // KL warm-up window, in epochs
  int beta_b1 = 4;
  double frac = 0.5;  // fraction of each batch perturbed
  double eps = 8.0 / 255.0;
  attacks::AttackSpec attack;  // pgd prototype for the balanced batches
  std::string optimizer = "radam-lookahead";
  int recon_draws = 8;  // z samples averaged in the reconstruction loss
  std::string attack_mix = "balanced";  // or "pgd-only" (ablation)
  int log_every = 0;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("train: bad sizes");
    lr.validate(epochs);
    if (beta_b0 < 0 || beta_b1 < beta_b0 || beta_b1 > epochs)
      throw std::invalid_argument("train: need 0 <= beta_b0 <= beta_b1 <= epochs");
    if (frac < 0 || frac > 1) throw std::invalid_argument("train: frac outside [0,1]");
    if (recon_draws < 1) throw std::invalid_argument("train: recon_draws < 1");
    if (attack_mix != "balanced" && attack_mix != "pgd-only")
      throw std::invalid_argument("train: unknown attack_mix '" + attack_mix + "'");
    attack.validate();
  }
};

struct EpochStats {
  int epoch = 0;
  double loss = 0;   // mean over batches
  double lr = 0;
  double beta = 0;   // purifier only
  double recon = 0;  // purifier only
  double kl = 0;     // purifier only
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double final_loss = 0;
};

namespace detail {

inline std::vector<int> shuffled_indices(int n, Rng& rng) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = n - 1; i > 0; --i)
    std::swap(idx[i], idx[static_cast<int>(rng.next_u64() % (i + 1))]);
  return idx;
}

inline void gather_rows(const TensorData<float>& src, const std::vector<int>& labels,
                        const std::vector<int>& idx, int lo, int hi,
                        TensorData<float>& out, std::vector<int>& out_labels) {
  const int B = hi - lo;
  Shape s = src.shape;
  s[0] = B;
  out = TensorData<float>(std::move(s));
  out_labels.resize(B);
  const std::size_t row = src.size() / src.shape[0];
  for (int i = 0; i < B; ++i) {
    const int r = idx[lo + i];
    std::copy(src.v.begin() + r * row, src.v.begin() + (r + 1) * row,
              out.v.begin() + i * row);
    out_labels[i] = labels[r];
  }
}

inline void require_finite(double loss, const std::string& where) {
  if (!std::isfinite(loss))
    throw std::runtime_error(where + ": non-finite loss, aborting training");
}

}  // namespace detail

// classifier attack loss evaluated in eval mode: the attack must not move
// batchnorm running statistics
inline attacks::LossFn<float> classifier_attack_loss(Classifier<float>& cls,
                                                     const std::vector<int>& labels) {
  return [&cls, labels](const ag::Var<float>& x) {
    return ag::cross_entropy(classifier_forward(cls, x, false), labels);
  };
}

inline TrainReport train_classifier_adversarial(Classifier<float>& cls,
                                                const data::Dataset& ds,
                                                const ClassifierTrainConfig& cfg,
                                                Rng rng, std::ostream* log = nullptr) {
  cfg.validate();
  if (ds.size() == 0) throw std::runtime_error("train: empty dataset");
  auto opt = optim::make_optimizer<float>(cfg.optimizer);
  TrainReport report;
  long batch_counter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = rng.derive(1000 + epoch);
    auto idx = detail::shuffled_indices(ds.size(), erng);
    double loss_sum = 0;
    int batches = 0;
    for (int lo = 0; lo < ds.size(); lo += cfg.batch_size, ++batch_counter) {
      const int hi = std::min(lo + cfg.batch_size, ds.size());
      TensorData<float> xb;
      std::vector<int> yb;
      detail::gather_rows(ds.images, ds.labels, idx, lo, hi, xb, yb);
      if (cfg.adversarial && cfg.attack.epsilon > 0) {
        auto atk_loss = classifier_attack_loss(cls, yb);
        xb = attacks::pgd(atk_loss, xb, cfg.attack, erng.derive(batch_counter));
      }
      cls.store.zero_grad();
      auto logits = classifier_forward(cls, ag::Var<float>::from(xb), true);
      auto loss = ag::cross_entropy(logits, yb);
      const double lval = loss.value()[0];
      detail::require_finite(lval, "train_classifier");
      ag::backward(loss);
      opt->step(cls.store, cfg.lr);
      loss_sum += lval;
      ++batches;
      if (log && cfg.log_every > 0 && batches % cfg.log_every == 0)
        *log << "epoch " << epoch << " batch " << batches << " loss " << lval << "\n";
    }
    EpochStats st;
    st.epoch = epoch;
    st.loss = loss_sum / std::max(batches, 1);
    st.lr = cfg.lr;
    report.epochs.push_back(st);
    report.final_loss = st.loss;
    if (log) *log << "classifier epoch " << epoch << " mean loss " << st.loss << "\n";
  }
  return report;
}

// One purifier training step's loss graph: conditioning from the frozen
// classifier's captured representation of the (possibly perturbed) input,
// reconstruction toward the clean image, averaged over recon_draws z samples.
inline VaeLoss<float> purifier_step_loss(Purifier<float>& pur, Classifier<float>& cls,
                                         const TensorData<float>& inputs,
                                         const TensorData<float>& clean_targets,
                                         const DatasetStats& stats, float beta,
                                         int draws, Rng& zrng) {
  InternalRepresentation<float> rep;
  auto xv = ag::Var<float>::from(inputs, false);
  classifier_forward(cls, xv, false, true, &rep);
  auto cc = encode_conditioning(pur, rep, true);
  auto xc = encode_input(pur, standardize(xv, stats), true);
  auto [mu, logvar] = joint_encode(pur, xc, cc, true);

  ag::Var<float> recon_sum;
  double recon_val = 0;
  for (int d = 0; d < draws; ++d) {
    auto z = reparameterize(mu, logvar, zrng);
    auto xhat = decode(pur, z, cc, true);
    auto r = ag::bce_sum(xhat, clean_targets);
    recon_val += r.value()[0];
    recon_sum = d == 0 ? r : ag::add(recon_sum, r);
  }
  auto recon = ag::scale(recon_sum, 1.0f / static_cast<float>(draws));
  for (auto v : clean_targets.v)
    if (!(v >= 0.0f && v <= 1.0f))
      throw std::domain_error("purifier loss: reconstruction target outside [0,1]");
  auto kl = kl_std_normal(mu, logvar);
  VaeLoss<float> out;
  out.recon = recon_val / draws;
  out.kl = kl.value()[0];
  out.beta = beta;
  out.total = ag::add(recon, ag::scale(kl, beta));
  return out;
}

inline TrainReport train_purifier(Purifier<float>& pur, Classifier<float>& cls,
                                  const data::Dataset& ds, const DatasetStats& stats,
                                  const PurifierTrainConfig& cfg, Rng rng,
                                  std::ostream* log = nullptr) {
  cfg.validate();
  if (ds.size() == 0) throw std::runtime_error("train: empty dataset");
  if (!cls.store.frozen())
    throw std::runtime_error("train_purifier: classifier must be frozen");
  const std::uint64_t cls_hash = cls.store.content_hash();

  auto opt = optim::make_optimizer<float>(cfg.optimizer);
  TrainReport report;
  long batch_counter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr.at(epoch);
    const float beta = static_cast<float>(beta_schedule(epoch, cfg.beta_b0, cfg.beta_b1));
    Rng erng = rng.derive(5000 + epoch);
    auto idx = detail::shuffled_indices(ds.size(), erng);
    double loss_sum = 0, recon_sum = 0, kl_sum = 0;
    int batches = 0;
    for (int lo = 0; lo < ds.size(); lo += cfg.batch_size, ++batch_counter) {
      const int hi = std::min(lo + cfg.batch_size, ds.size());
      TensorData<float> xb;
      std::vector<int> yb;
      detail::gather_rows(ds.images, ds.labels, idx, lo, hi, xb, yb);

      // adversarial composition is regenerated against the frozen classifier
      // every step
      attacks::SubsetLossBuilder<float> builder = [&cls](const std::vector<int>& ls) {
        return classifier_attack_loss(cls, ls);
      };
      auto bal = cfg.attack_mix == "pgd-only"
                     ? attacks::pgd_only_batch<float>(
                           xb, yb, cfg.frac, static_cast<float>(cfg.eps), builder,
                           cfg.attack, batch_counter, erng.derive(batch_counter))
                     : attacks::balanced_adversarial_batch<float>(
                           xb, yb, cfg.frac, static_cast<float>(cfg.eps), builder,
                           cfg.attack, batch_counter, erng.derive(batch_counter));

      pur.store.zero_grad();
      Rng zrng = erng.derive(0xEC0DE + batch_counter);
      auto vloss = purifier_step_loss(pur, cls, bal.inputs, bal.clean_targets, stats,
                                      beta, cfg.recon_draws, zrng);
      const double lval = vloss.total.value()[0];
      detail::require_finite(lval, "train_purifier");
      ag::backward(vloss.total);
      opt->step(pur.store, lr);
      loss_sum += lval;
      recon_sum += vloss.recon;
      kl_sum += vloss.kl;
      ++batches;
      if (log && cfg.log_every > 0 && batches % cfg.log_every == 0)
        *log << "epoch " << epoch << " batch " << batches << " loss " << lval
             << " (recon " << vloss.recon << ", kl " << vloss.kl << ")\n";
    }
    if (cls.store.content_hash() != cls_hash)
      throw std::runtime_error("train_purifier: frozen classifier was modified");
    EpochStats st;
    st.epoch = epoch;
    st.loss = loss_sum / std::max(batches, 1);
    st.lr = lr;
    st.beta = beta;
    st.recon = recon_sum / std::max(batches, 1);
    st.kl = kl_sum / std::max(batches, 1);
    report.epochs.push_back(st);
    report.final_loss = st.loss;
    if (log)
      *log << "purifier epoch " << epoch << " mean loss " << st.loss << " lr " << lr
           << " beta " << beta << "\n";
  }
  return report;
}

// ---- model checkpoints ----

inline nlohmann::json stats_to_json(const DatasetStats& s) {
  return {{"mean", s.mean}, {"std", s.std}};
}

inline DatasetStats stats_from_json(const nlohmann::json& j) {
  DatasetStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.std = j.at("std").get<std::vector<double>>();
  return s;
}

inline nlohmann::json rng_to_json(const Rng& r) {
  return {{"seed", r.seed()}, {"stream", r.stream()}, {"counter", r.counter()}};
}

inline Rng rng_from_json(const nlohmann::json& j) {
  Rng r(j.at("seed").get<std::uint64_t>(), j.at("stream").get<std::uint64_t>());
  r.set_counter(j.at("counter").get<std::uint64_t>());
  return r;
}

inline void save_classifier(const std::string& path, const Classifier<float>& cls,
                            const DatasetStats& stats, int epoch, const Rng& rng,
                            const optim::Optimizer<float>* opt = nullptr) {
  ckpt::Checkpoint<float> c;
  c.meta = {{"kind", "classifier"},
            {"spec", cls.spec.to_json_obj()},
            {"stats", stats_to_json(stats)},
            {"epoch", epoch},
            {"rng", rng_to_json(rng)},
            {"optimizer", opt ? opt->meta() : nlohmann::json()}};
  ckpt::append_store(c, cls.store);
  if (opt)
    for (auto& [name, t] : opt->state_tensors())
      c.tensors.emplace_back("opt:" + name, std::move(t));
  ckpt::save(path, c);
}

inline Classifier<float> load_classifier(const std::string& path,
                                         DatasetStats* stats = nullptr,
                                         int* epoch = nullptr) {
  auto c = ckpt::load<float>(path);
  if (c.meta.at("kind") != "classifier")
    throw std::runtime_error("checkpoint: '" + path + "' is not a classifier");
  auto cls = make_classifier<float>(ClassifierSpec::from_json(c.meta.at("spec")), Rng(0));
  ckpt::restore_store(c, cls.store);
  if (stats) *stats = stats_from_json(c.meta.at("stats"));
  if (epoch) *epoch = c.meta.at("epoch");
  return cls;
}

inline void save_purifier(const std::string& path, const Purifier<float>& pur,
                          const DatasetStats& stats, int epoch, const Rng& rng,
                          std::uint64_t classifier_hash,
                          const optim::Optimizer<float>* opt = nullptr) {
  ckpt::Checkpoint<float> c;
  c.meta = {{"kind", "purifier"},
            {"spec", pur.spec.to_json_obj()},
            {"stats", stats_to_json(stats)},
            {"epoch", epoch},
            {"rng", rng_to_json(rng)},
            {"classifier_hash", classifier_hash},
            {"optimizer", opt ? opt->meta() : nlohmann::json()}};
  ckpt::append_store(c, pur.store);
  if (opt)
    for (auto& [name, t] : opt->state_tensors())
      c.tensors.emplace_back("opt:" + name, std::move(t));
  ckpt::save(path, c);
}

inline Purifier<float> load_purifier(const std::string& path,
                                     DatasetStats* stats = nullptr,
                                     int* epoch = nullptr,
                                     std::uint64_t* classifier_hash = nullptr) {
  auto c = ckpt::load<float>(path);
  if (c.meta.at("kind") != "purifier")
    throw std::runtime_error("checkpoint: '" + path + "' is not a purifier");
  auto pur = make_purifier<float>(PurifierSpec::from_json(c.meta.at("spec")), Rng(0));
  ckpt::restore_store(c, pur.store);
  if (stats) *stats = stats_from_json(c.meta.at("stats"));
  if (epoch) *epoch = c.meta.at("epoch");
  if (classifier_hash) *classifier_hash = c.meta.at("classifier_hash");
  return pur;
}

// restores optimizer state saved alongside a model checkpoint
inline std::unique_ptr<optim::Optimizer<float>> load_optimizer(const std::string& path) {
  auto c = ckpt::load<float>(path);
  if (c.meta.at("optimizer").is_null()) return nullptr;
  auto opt = optim::optimizer_from_meta<float>(c.meta.at("optimizer"));
  std::map<std::string, TensorData<float>> state;
  for (auto& [name, t] : c.tensors)
    if (name.rfind("opt:", 0) == 0) state.emplace(name.substr(4), std::move(t));
  opt->restore(c.meta.at("optimizer"), state);
  return opt;
}

}  // namespace carso::train
