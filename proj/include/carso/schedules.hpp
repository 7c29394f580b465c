#pragma once

#include <algorithm>
#include <stdexcept>

namespace carso {

// KL weight warm-up: 0 until epoch b0, then linear to 1 at epoch b1, then 1
inline double beta_schedule(int epoch, int b0, int b1) {
  if (b0 < 0 || b1 < b0) throw std::invalid_argument("beta_schedule: need 0 <= b0 <= b1");
  if (epoch >= b1) return 1.0;
  if (epoch <= b0) return 0.0;
  return static_cast<double>(epoch - b0) / static_cast<double>(b1 - b0);
}

struct LrSchedule {
  int warmup = 25;
  int plateau = 25;
  int anneal = 150;
  double lr_start = 5e-9;
  double lr_peak = 0.064;
  double lr_end = 4.346e-4;

  void validate(int epochs) const {
    if (warmup < 0 || plateau < 0 || anneal < 0)
      throw std::invalid_argument("lr schedule: negative phase length");
    if (warmup + plateau + anneal != epochs)
      throw std::invalid_argument("lr schedule: warmup+plateau+anneal != epochs");
    if (lr_start < 0 || lr_peak <= 0 || lr_end < 0)
      throw std::invalid_argument("lr schedule: nonpositive rate");
  }

  // piecewise linear: lr(0)=lr_start, lr(warmup)=lr_peak (held through the
  // plateau), lr(warmup+plateau+anneal)=lr_end
  double at(int epoch) const {
    const int e = std::max(epoch, 0);
    if (e >= warmup + plateau + anneal) return lr_end;  // breakpoints exact, no rounding
    if (e >= warmup && e <= warmup + plateau) return lr_peak;
    if (e < warmup)
      return lr_start + (lr_peak - lr_start) * e / static_cast<double>(warmup);
    const int a = e - warmup - plateau;
    return lr_peak + (lr_end - lr_peak) * a / static_cast<double>(anneal);
  }
};

}  // namespace carso
