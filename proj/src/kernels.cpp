#include "carso/kernels.hpp"

#include "carso/tensor.hpp"

namespace carso::kernels {

namespace {
Mode g_default_mode = Mode::parallel;
}

Mode default_mode() { return g_default_mode; }
void set_default_mode(Mode m) { g_default_mode = m; }

template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, int M, int K,
                    int N, Mode mode) {
  const bool par = mode == Mode::parallel;
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int m = 0; m < M; ++m)
    for (int n = 0; n < N; ++n) {
      T acc = b ? b[n] : T(0);
      const T* xr = x + static_cast<std::size_t>(m) * K;
      const T* wr = w + static_cast<std::size_t>(n) * K;
      for (int k = 0; k < K; ++k) acc += xr[k] * wr[k];
      y[static_cast<std::size_t>(m) * N + n] = acc;
    }
}

template <typename T>
void linear_backward_x(const T* dy, const T* w, T* dx, int M, int K, int N,
                       Mode mode) {
  const bool par = mode == Mode::parallel;
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int m = 0; m < M; ++m)
    for (int k = 0; k < K; ++k) {
      T acc = T(0);
      const T* dyr = dy + static_cast<std::size_t>(m) * N;
      for (int n = 0; n < N; ++n)
        acc += dyr[n] * w[static_cast<std::size_t>(n) * K + k];
      dx[static_cast<std::size_t>(m) * K + k] += acc;
    }
}

template <typename T>
void linear_backward_w(const T* dy, const T* x, T* dw, int M, int K, int N,
                       Mode mode) {
  const bool par = mode == Mode::parallel;
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) {
      T acc = T(0);
      for (int m = 0; m < M; ++m)
        acc += dy[static_cast<std::size_t>(m) * N + n] *
               x[static_cast<std::size_t>(m) * K + k];
      dw[static_cast<std::size_t>(n) * K + k] += acc;
    }
}

template <typename T>
void linear_backward_b(const T* dy, T* db, int M, int N, Mode mode) {
  const bool par = mode == Mode::parallel;
#pragma omp parallel for schedule(static) if (par)
  for (int n = 0; n < N; ++n) {
    T acc = T(0);
    for (int m = 0; m < M; ++m) acc += dy[static_cast<std::size_t>(m) * N + n];
    db[n] += acc;
  }
}

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* b, T* y, int n, int cin,
                    int h, int wd, int cout, int ks, int s, int p, Mode mode) {
  const int ho = conv_out_extent(h, ks, s, p);
  const int wo = conv_out_extent(wd, ks, s, p);
  const bool par = mode == Mode::parallel;
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int in = 0; in < n; ++in)
    for (int co = 0; co < cout; ++co)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          T acc = b ? b[co] : T(0);
          for (int ci = 0; ci < cin; ++ci)
            for (int kh = 0; kh < ks; ++kh) {
              const int ih = oh * s - p + kh;
              if (ih < 0 || ih >= h) continue;
              for (int kw = 0; kw < ks; ++kw) {
                const int iw = ow * s - p + kw;
                if (iw < 0 || iw >= wd) continue;
                acc += x[((static_cast<std::size_t>(in) * cin + ci) * h + ih) * wd + iw] *
                       w[((static_cast<std::size_t>(co) * cin + ci) * ks + kh) * ks + kw];
              }
            }
          y[((static_cast<std::size_t>(in) * cout + co) * ho + oh) * wo + ow] = acc;
        }
}

template <typename T>
void conv2d_backward_x(const T* dy, const T* w, T* dx, int n, int cin, int h,
                       int wd, int cout, int ks, int s, int p, Mode mode) {
  const int ho = conv_out_extent(h, ks, s, p);
  const int wo = conv_out_extent(wd, ks, s, p);
  const bool par = mode == Mode::parallel;
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int in = 0; in < n; ++in)
    for (int ci = 0; ci < cin; ++ci)
      for (int ih = 0; ih < h; ++ih)
        for (int iw = 0; iw < wd; ++iw) {
          T acc = T(0);
          for (int co = 0; co < cout; ++co)
            for (int kh = 0; kh < ks; ++kh) {
              const int num_h = ih + p - kh;
              if (num_h < 0 || num_h % s != 0) continue;
              const int oh = num_h / s;
              if (oh >= ho) continue;
              for (int kw = 0; kw < ks; ++kw) {
                const int num_w = iw + p - kw;
                if (num_w < 0 || num_w % s != 0) continue;
                const int ow = num_w / s;
                if (ow >= wo) continue;
                acc += dy[((static_cast<std::size_t>(in) * cout + co) * ho + oh) * wo + ow] *
                       w[((static_cast<std::size_t>(co) * cin + ci) * ks + kh) * ks + kw];
              }
            }
          dx[((static_cast<std::size_t>(in) * cin + ci) * h + ih) * wd + iw] += acc;
        }
}

template <typename T>
void conv2d_backward_w(const T* dy, const T* x, T* dw, int n, int cin, int h,
                       int wd, int cout, int ks, int s, int p, Mode mode) {
  const int ho = conv_out_extent(h, ks, s, p);
  const int wo = conv_out_extent(wd, ks, s, p);
  const bool par = mode == Mode::parallel;
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int co = 0; co < cout; ++co)
    for (int ci = 0; ci < cin; ++ci)
      for (int kh = 0; kh < ks; ++kh)
        for (int kw = 0; kw < ks; ++kw) {
          T acc = T(0);
          for (int in = 0; in < n; ++in)
            for (int oh = 0; oh < ho; ++oh) {
              const int ih = oh * s - p + kh;
              if (ih < 0 || ih >= h) continue;
              for (int ow = 0; ow < wo; ++ow) {
                const int iw = ow * s - p + kw;
                if (iw < 0 || iw >= wd) continue;
                acc += dy[((static_cast<std::size_t>(in) * cout + co) * ho + oh) * wo + ow] *
                       x[((static_cast<std::size_t>(in) * cin + ci) * h + ih) * wd + iw];
              }
            }
          dw[((static_cast<std::size_t>(co) * cin + ci) * ks + kh) * ks + kw] += acc;
        }
}

template <typename T>
void conv2d_backward_b(const T* dy, T* db, int n, int cout, int ho, int wo,
                       Mode mode) {
  const bool par = mode == Mode::parallel;
#pragma omp parallel for schedule(static) if (par)
  for (int co = 0; co < cout; ++co) {
    T acc = T(0);
    for (int in = 0; in < n; ++in)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow)
          acc += dy[((static_cast<std::size_t>(in) * cout + co) * ho + oh) * wo + ow];
    db[co] += acc;
  }
}

template <typename T>
void convt2d_forward(const T* x, const T* w, const T* b, T* y, int n, int cin,
                     int h, int wd, int cout, int ks, int s, int p, int op,
                     Mode mode) {
  const int ho = conv_transpose_out_extent(h, ks, s, p, op);
  const int wo = conv_transpose_out_extent(wd, ks, s, p, op);
  const bool par = mode == Mode::parallel;
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int in = 0; in < n; ++in)
    for (int co = 0; co < cout; ++co)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          T acc = b ? b[co] : T(0);
          for (int ci = 0; ci < cin; ++ci)
            for (int kh = 0; kh < ks; ++kh) {
              const int num_h = oh + p - kh;
              if (num_h < 0 || num_h % s != 0) continue;
              const int ih = num_h / s;
              if (ih >= h) continue;
              for (int kw = 0; kw < ks; ++kw) {
                const int num_w = ow + p - kw;
                if (num_w < 0 || num_w % s != 0) continue;
                const int iw = num_w / s;
                if (iw >= wd) continue;
                acc += x[((static_cast<std::size_t>(in) * cin + ci) * h + ih) * wd + iw] *
                       w[((static_cast<std::size_t>(ci) * cout + co) * ks + kh) * ks + kw];
              }
            }
          y[((static_cast<std::size_t>(in) * cout + co) * ho + oh) * wo + ow] = acc;
        }
}

template <typename T>
void convt2d_backward_x(const T* dy, const T* w, T* dx, int n, int cin, int h,
                        int wd, int cout, int ks, int s, int p, int op,
                        Mode mode) {
  const int ho = conv_transpose_out_extent(h, ks, s, p, op);
  const int wo = conv_transpose_out_extent(wd, ks, s, p, op);
  const bool par = mode == Mode::parallel;
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int in = 0; in < n; ++in)
    for (int ci = 0; ci < cin; ++ci)
      for (int ih = 0; ih < h; ++ih)
        for (int iw = 0; iw < wd; ++iw) {
          T acc = T(0);
          for (int co = 0; co < cout; ++co)
            for (int kh = 0; kh < ks; ++kh) {
              const int oh = ih * s - p + kh;
              if (oh < 0 || oh >= ho) continue;
              for (int kw = 0; kw < ks; ++kw) {
                const int ow = iw * s - p + kw;
                if (ow < 0 || ow >= wo) continue;
                acc += dy[((static_cast<std::size_t>(in) * cout + co) * ho + oh) * wo + ow] *
                       w[((static_cast<std::size_t>(ci) * cout + co) * ks + kh) * ks + kw];
              }
            }
          dx[((static_cast<std::size_t>(in) * cin + ci) * h + ih) * wd + iw] += acc;
        }
}

template <typename T>
void convt2d_backward_w(const T* dy, const T* x, T* dw, int n, int cin, int h,
                        int wd, int cout, int ks, int s, int p, int op,
                        Mode mode) {
  const int ho = conv_transpose_out_extent(h, ks, s, p, op);
  const int wo = conv_transpose_out_extent(wd, ks, s, p, op);
  const bool par = mode == Mode::parallel;
#pragma omp parallel for collapse(2) schedule(static) if (par)
  for (int ci = 0; ci < cin; ++ci)
    for (int co = 0; co < cout; ++co)
      for (int kh = 0; kh < ks; ++kh)
        for (int kw = 0; kw < ks; ++kw) {
          T acc = T(0);
          for (int in = 0; in < n; ++in)
            for (int ih = 0; ih < h; ++ih) {
              const int oh = ih * s - p + kh;
              if (oh < 0 || oh >= ho) continue;
              for (int iw = 0; iw < wd; ++iw) {
                const int ow = iw * s - p + kw;
                if (ow < 0 || ow >= wo) continue;
                acc += x[((static_cast<std::size_t>(in) * cin + ci) * h + ih) * wd + iw] *
                       dy[((static_cast<std::size_t>(in) * cout + co) * ho + oh) * wo + ow];
              }
            }
          dw[((static_cast<std::size_t>(ci) * cout + co) * ks + kh) * ks + kw] += acc;
        }
}

#define CARSO_INSTANTIATE_KERNELS(T)                                           \
  template void linear_forward<T>(const T*, const T*, const T*, T*, int, int,  \
                                  int, Mode);                                  \
  template void linear_backward_x<T>(const T*, const T*, T*, int, int, int,    \
                                     Mode);                                    \
  template void linear_backward_w<T>(const T*, const T*, T*, int, int, int,    \
                                     Mode);                                    \
  template void linear_backward_b<T>(const T*, T*, int, int, Mode);            \
  template void conv2d_forward<T>(const T*, const T*, const T*, T*, int, int,  \
                                  int, int, int, int, int, int, Mode);         \
  template void conv2d_backward_x<T>(const T*, const T*, T*, int, int, int,    \
                                     int, int, int, int, int, Mode);           \
  template void conv2d_backward_w<T>(const T*, const T*, T*, int, int, int,    \
                                     int, int, int, int, int, Mode);           \
  template void conv2d_backward_b<T>(const T*, T*, int, int, int, int, Mode);  \
  template void convt2d_forward<T>(const T*, const T*, const T*, T*, int, int, \
                                   int, int, int, int, int, int, int, Mode);   \
  template void convt2d_backward_x<T>(const T*, const T*, T*, int, int, int,   \
                                      int, int, int, int, int, int, Mode);     \
  template void convt2d_backward_w<T>(const T*, const T*, T*, int, int, int,   \
                                      int, int, int, int, int, int, Mode);

CARSO_INSTANTIATE_KERNELS(float)
CARSO_INSTANTIATE_KERNELS(double)

#undef CARSO_INSTANTIATE_KERNELS

}  // namespace carso::kernels
