#pragma once

#include <string>
#include <vector>

namespace carso::agg {

// Per-sample classifier logits: n_samples rows, n_classes columns, row-major.
struct LogitMatrix {
  int n_samples = 0;
  int n_classes = 0;
  std::vector<double> l;

  double at(int sample, int cls) const {
    return l[static_cast<std::size_t>(sample) * n_classes + cls];
  }
  double& at(int sample, int cls) {
    return l[static_cast<std::size_t>(sample) * n_classes + cls];
  }
};

struct AggregatedPrediction {
  std::vector<double> probs;  // positive, sums to 1
  int chosen_class = -1;      // argmax, ties to lowest index
  std::string strategy;
};

enum class Strategy { carso, logit_mean, prob_mean };

Strategy strategy_from_name(const std::string& name);
std::string strategy_name(Strategy s);

// P = softmax over classes of s_i = sum_alpha exp(clamp(l_i^alpha, +-30)),
// the log-domain form of the double-exponential product aggregation
AggregatedPrediction aggregate_carso(const LogitMatrix& L);

// P = softmax of the per-class mean logit
AggregatedPrediction aggregate_logit_mean(const LogitMatrix& L);

// P = mean over samples of per-sample softmax
AggregatedPrediction aggregate_prob_mean(const LogitMatrix& L);

AggregatedPrediction aggregate(const LogitMatrix& L, Strategy s);

// Direct f64 evaluation of the product form (1/Z) prod_alpha e^{e^{l}};
// overflows beyond small logits, usable as an oracle for |l| <= ~6 only.
AggregatedPrediction aggregate_carso_product_form(const LogitMatrix& L);

enum class ProbeMode { deflate, inflate };

struct ProbePoint {
  double logit_value;
  std::vector<double> probs;
  int chosen_class;
};

struct ProbeReport {
  Strategy strategy;
  ProbeMode mode;
  std::vector<ProbePoint> sweep;
  // first swept logit value at which the argmax left its original class,
  // or NaN if it never flipped
  double flip_threshold;
};

// Sweeps L[target_sample, target_class] over a grid down to -40 (deflate) or
// up to +40 (inflate), recording each strategy's aggregation along the way.
std::vector<ProbeReport> takeover_probe(const LogitMatrix& L, int target_sample,
                                        int target_class, ProbeMode mode,
                                        const std::vector<Strategy>& strategies);

}  // namespace carso::agg
