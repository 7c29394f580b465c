#pragma once

#include <cstddef>

// Dense compute kernels behind the autodiff ops. Each kernel assigns every
// output element to exactly one iteration with a fixed inner accumulation
// order, so serial and OpenMP execution are bitwise identical and results do
// not depend on the thread count.

namespace carso::kernels {

enum class Mode { serial, parallel };

// Process-wide default used by the autodiff ops.
Mode default_mode();
void set_default_mode(Mode m);

// y[m,n] = sum_k x[m,k] * w[n,k] (+ b[n]); w stored (N,K)
template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, int M, int K,
                    int N, Mode mode);

template <typename T>
void linear_backward_x(const T* dy, const T* w, T* dx, int M, int K, int N,
                       Mode mode);

template <typename T>
void linear_backward_w(const T* dy, const T* x, T* dw, int M, int K, int N,
                       Mode mode);

template <typename T>
void linear_backward_b(const T* dy, T* db, int M, int N, Mode mode);

// x: (N,Cin,H,W), w: (Cout,Cin,ks,ks), y: (N,Cout,Ho,Wo); square kernel
template <typename T>
void conv2d_forward(const T* x, const T* w, const T* b, T* y, int n, int cin,
                    int h, int wd, int cout, int ks, int s, int p, Mode mode);

template <typename T>
void conv2d_backward_x(const T* dy, const T* w, T* dx, int n, int cin, int h,
                       int wd, int cout, int ks, int s, int p, Mode mode);

template <typename T>
void conv2d_backward_w(const T* dy, const T* x, T* dw, int n, int cin, int h,
                       int wd, int cout, int ks, int s, int p, Mode mode);

template <typename T>
void conv2d_backward_b(const T* dy, T* db, int n, int cout, int ho, int wo,
                       Mode mode);

// x: (N,Cin,H,W), w: (Cin,Cout,ks,ks), y: (N,Cout,Ho,Wo)
template <typename T>
void convt2d_forward(const T* x, const T* w, const T* b, T* y, int n, int cin,
                     int h, int wd, int cout, int ks, int s, int p, int op,
                     Mode mode);

template <typename T>
void convt2d_backward_x(const T* dy, const T* w, T* dx, int n, int cin, int h,
                        int wd, int cout, int ks, int s, int p, int op,
                        Mode mode);

template <typename T>
void convt2d_backward_w(const T* dy, const T* x, T* dw, int n, int cin, int h,
                        int wd, int cout, int ks, int s, int p, int op,
                        Mode mode);

}  // namespace carso::kernels
