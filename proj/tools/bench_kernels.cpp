// Times the serial reference kernels against the OpenMP ones and checks that
// both produce bitwise-identical outputs while they're at it.

#include <chrono>
#include <cstdio>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "carso/kernels.hpp"
#include "carso/rng.hpp"
#include "carso/tensor.hpp"

using namespace carso;
using kernels::Mode;

namespace {

double now() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

template <typename F>
double time_best_of(int reps, F&& f) {
  double best = 1e30;
  for (int r = 0; r < reps; ++r) {
    const double t0 = now();
    f();
    best = std::min(best, now() - t0);
  }
  return best;
}

std::vector<float> rand_vec(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

void report(const char* name, double ts, double tp, bool identical) {
  std::printf("%-24s serial %8.3f ms   parallel %8.3f ms   speedup %5.2fx   %s\n",
              name, ts * 1e3, tp * 1e3, ts / tp,
              identical ? "bitwise-identical" : "MISMATCH");
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
  std::printf("built without OpenMP; parallel mode degrades to serial\n");
#endif
  Rng rng(1234);
  const int reps = 5;

  {
    const int M = 256, K = 1024, N = 512;
    auto x = rand_vec(static_cast<std::size_t>(M) * K, rng);
    auto w = rand_vec(static_cast<std::size_t>(N) * K, rng);
    auto b = rand_vec(N, rng);
    std::vector<float> ys(static_cast<std::size_t>(M) * N), yp(ys);
    double ts = time_best_of(reps, [&] {
      kernels::linear_forward(x.data(), w.data(), b.data(), ys.data(), M, K, N, Mode::serial);
    });
    double tp = time_best_of(reps, [&] {
      kernels::linear_forward(x.data(), w.data(), b.data(), yp.data(), M, K, N, Mode::parallel);
    });
    report("linear_forward", ts, tp, ys == yp);
  }

  {
    const int n = 16, cin = 16, h = 32, wd = 32, cout = 32, ks = 3, s = 1, p = 1;
    const int ho = conv_out_extent(h, ks, s, p), wo = conv_out_extent(wd, ks, s, p);
    auto x = rand_vec(static_cast<std::size_t>(n) * cin * h * wd, rng);
    auto w = rand_vec(static_cast<std::size_t>(cout) * cin * ks * ks, rng);
    std::vector<float> ys(static_cast<std::size_t>(n) * cout * ho * wo), yp(ys);
    double ts = time_best_of(reps, [&] {
      kernels::conv2d_forward<float>(x.data(), w.data(), nullptr, ys.data(), n, cin, h,
                                     wd, cout, ks, s, p, Mode::serial);
    });
    double tp = time_best_of(reps, [&] {
      kernels::conv2d_forward<float>(x.data(), w.data(), nullptr, yp.data(), n, cin, h,
                                     wd, cout, ks, s, p, Mode::parallel);
    });
    report("conv2d_forward", ts, tp, ys == yp);

    auto dy = rand_vec(yp.size(), rng);
    std::vector<float> dxs(x.size(), 0), dxp(x.size(), 0);
    ts = time_best_of(reps, [&] {
      std::fill(dxs.begin(), dxs.end(), 0.0f);
      kernels::conv2d_backward_x(dy.data(), w.data(), dxs.data(), n, cin, h, wd, cout,
                                 ks, s, p, Mode::serial);
    });
    tp = time_best_of(reps, [&] {
      std::fill(dxp.begin(), dxp.end(), 0.0f);
      kernels::conv2d_backward_x(dy.data(), w.data(), dxp.data(), n, cin, h, wd, cout,
                                 ks, s, p, Mode::parallel);
    });
    report("conv2d_backward_x", ts, tp, dxs == dxp);

    std::vector<float> dws(w.size(), 0), dwp(w.size(), 0);
    ts = time_best_of(reps, [&] {
      std::fill(dws.begin(), dws.end(), 0.0f);
      kernels::conv2d_backward_w(dy.data(), x.data(), dws.data(), n, cin, h, wd, cout,
                                 ks, s, p, Mode::serial);
    });
    tp = time_best_of(reps, [&] {
      std::fill(dwp.begin(), dwp.end(), 0.0f);
      kernels::conv2d_backward_w(dy.data(), x.data(), dwp.data(), n, cin, h, wd, cout,
                                 ks, s, p, Mode::parallel);
    });
    report("conv2d_backward_w", ts, tp, dws == dwp);
  }

  {
    const int n = 16, cin = 32, h = 16, wd = 16, cout = 16, ks = 3, s = 2, p = 1, op = 1;
    const int ho = conv_transpose_out_extent(h, ks, s, p, op);
    const int wo = conv_transpose_out_extent(wd, ks, s, p, op);
    auto x = rand_vec(static_cast<std::size_t>(n) * cin * h * wd, rng);
    auto w = rand_vec(static_cast<std::size_t>(cin) * cout * ks * ks, rng);
    std::vector<float> ys(static_cast<std::size_t>(n) * cout * ho * wo), yp(ys);
    double ts = time_best_of(reps, [&] {
      kernels::convt2d_forward<float>(x.data(), w.data(), nullptr, ys.data(), n, cin, h,
                                      wd, cout, ks, s, p, op, Mode::serial);
    });
    double tp = time_best_of(reps, [&] {
      kernels::convt2d_forward<float>(x.data(), w.data(), nullptr, yp.data(), n, cin, h,
                                      wd, cout, ks, s, p, op, Mode::parallel);
    });
    report("convt2d_forward", ts, tp, ys == yp);
  }

  return 0;
}
