#pragma once

#include <cstddef>

// Low-level dense kernels. Each kernel has a serial reference and an
// OpenMP variant; the dispatcher picks one at runtime. Parallel variants
// assign each output element to exactly one thread with a fixed inner
// accumulation order, so results are bitwise identical to the serial path.

namespace pyramid::kernels {

bool parallel_enabled();
void set_parallel(bool on);

// c[M x N] = a[M x K] * b[K x N]; accumulate adds into c instead of overwriting
void matmul_serial(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate = false);
void matmul_omp(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate = false);
void matmul(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate = false);

// c[M x N] = a[M x K] * b[N x K]^T
void matmul_nt_serial(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate = false);
void matmul_nt_omp(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate = false);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate = false);

// c[M x N] = a[K x M]^T * b[K x N]
void matmul_tn_serial(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate = false);
void matmul_tn_omp(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate = false);
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate = false);

// Dilated 1-D convolution, "same" zero padding, odd kernel size.
// x[T x Cin], w[K x Cin x Cout], out[ceil(T/stride) x Cout].
// out[t][co] = sum_{n,ci} x[t*stride + (n-r)*dil][ci] * w[n][ci][co], r = (K-1)/2
void conv1d_serial(const double* x, const double* w, double* out,
                   int t_in, int c_in, int c_out, int ksize, int dilation, int stride,
                   bool accumulate = false);
void conv1d_omp(const double* x, const double* w, double* out,
                int t_in, int c_in, int c_out, int ksize, int dilation, int stride,
                bool accumulate = false);
void conv1d(const double* x, const double* w, double* out,
            int t_in, int c_in, int c_out, int ksize, int dilation, int stride,
            bool accumulate = false);

}  // namespace pyramid::kernels
