#include "carso/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace carso::agg {

namespace {

constexpr double kLogitClamp = 30.0;

void require_nonempty(const LogitMatrix& L) {
  if (L.n_samples < 1 || L.n_classes < 1 ||
      L.l.size() != static_cast<std::size_t>(L.n_samples) * L.n_classes)
    throw std::invalid_argument("aggregation: empty or malformed logit matrix");
}

int argmax_lowest_tie(const std::vector<double>& p) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(p.size()); ++i)
    if (p[i] > p[best]) best = i;
  return best;
}

std::vector<double> softmax_shifted(const std::vector<double>& s) {
  double mx = *std::max_element(s.begin(), s.end());
  std::vector<double> p(s.size());
  double z = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    p[i] = std::exp(s[i] - mx);
    z += p[i];
  }
  for (auto& x : p) x /= z;
  return p;
}

}  // namespace

Strategy strategy_from_name(const std::string& name) {
  if (name == "carso") return Strategy::carso;
  if (name == "logit-mean") return Strategy::logit_mean;
  if (name == "prob-mean") return Strategy::prob_mean;
  throw std::invalid_argument("unknown aggregation strategy '" + name + "'");
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::carso: return "carso";
    case Strategy::logit_mean: return "logit-mean";
    case Strategy::prob_mean: return "prob-mean";
  }
  return "?";
}

AggregatedPrediction aggregate_carso(const LogitMatrix& L) {
  require_nonempty(L);
  std::vector<double> s(L.n_classes, 0.0);
  for (int a = 0; a < L.n_samples; ++a)
    for (int c = 0; c < L.n_classes; ++c)
      s[c] += std::exp(std::clamp(L.at(a, c), -kLogitClamp, kLogitClamp));
  AggregatedPrediction out;
  out.probs = softmax_shifted(s);
  out.chosen_class = argmax_lowest_tie(out.probs);
  out.strategy = "carso";
  return out;
}

AggregatedPrediction aggregate_logit_mean(const LogitMatrix& L) {
  require_nonempty(L);
  std::vector<double> s(L.n_classes, 0.0);
  for (int a = 0; a < L.n_samples; ++a)
    for (int c = 0; c < L.n_classes; ++c) s[c] += L.at(a, c);
  for (auto& x : s) x /= L.n_samples;
  AggregatedPrediction out;
  out.probs = softmax_shifted(s);
  out.chosen_class = argmax_lowest_tie(out.probs);
  out.strategy = "logit-mean";
  return out;
}

AggregatedPrediction aggregate_prob_mean(const LogitMatrix& L) {
  require_nonempty(L);
  std::vector<double> p(L.n_classes, 0.0);
  for (int a = 0; a < L.n_samples; ++a) {
    std::vector<double> row(L.n_classes);
    for (int c = 0; c < L.n_classes; ++c) row[c] = L.at(a, c);
    auto sm = softmax_shifted(row);
    for (int c = 0; c < L.n_classes; ++c) p[c] += sm[c];
  }
  for (auto& x : p) x /= L.n_samples;
  AggregatedPrediction out;
  out.probs = std::move(p);
  out.chosen_class = argmax_lowest_tie(out.probs);
  out.strategy = "prob-mean";
  return out;
}

AggregatedPrediction aggregate(const LogitMatrix& L, Strategy s) {
  switch (s) {
    case Strategy::carso: return aggregate_carso(L);
    case Strategy::logit_mean: return aggregate_logit_mean(L);
    case Strategy::prob_mean: return aggregate_prob_mean(L);
  }
  throw std::logic_error("unreachable");
}

AggregatedPrediction aggregate_carso_product_form(const LogitMatrix& L) {
  require_nonempty(L);
  std::vector<double> prod(L.n_classes, 1.0);
  for (int a = 0; a < L.n_samples; ++a)
    for (int c = 0; c < L.n_classes; ++c)
      prod[c] *= std::exp(std::exp(L.at(a, c)));
  double z = 0.0;
  for (double x : prod) z += x;
  if (!std::isfinite(z))
    throw std::overflow_error("product-form aggregation overflowed");
  AggregatedPrediction out;
  out.probs.resize(L.n_classes);
  for (int c = 0; c < L.n_classes; ++c) out.probs[c] = prod[c] / z;
  out.chosen_class = argmax_lowest_tie(out.probs);
  out.strategy = "carso(product)";
  return out;
}

std::vector<ProbeReport> takeover_probe(const LogitMatrix& L, int target_sample,
                                        int target_class, ProbeMode mode,
                                        const std::vector<Strategy>& strategies) {
  require_nonempty(L);
  if (target_sample < 0 || target_sample >= L.n_samples || target_class < 0 ||
      target_class >= L.n_classes)
    throw std::invalid_argument("takeover_probe: target indices out of range");

  const double start = L.at(target_sample, target_class);
  const double end = mode == ProbeMode::deflate ? -40.0 : 40.0;
  const int grid = 81;

  std::vector<ProbeReport> reports;
  for (Strategy s : strategies) {
    ProbeReport rep;
    rep.strategy = s;
    rep.mode = mode;
    rep.flip_threshold = std::numeric_limits<double>::quiet_NaN();
    const int original = aggregate(L, s).chosen_class;
    LogitMatrix work = L;
    for (int i = 0; i < grid; ++i) {
      double v = start + (end - start) * i / (grid - 1);
      work.at(target_sample, target_class) = v;
      auto pred = aggregate(work, s);
      if (pred.chosen_class != original && std::isnan(rep.flip_threshold))
        rep.flip_threshold = v;
      rep.sweep.push_back({v, pred.probs, pred.chosen_class});
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace carso::agg
