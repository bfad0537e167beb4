#include "pyramid/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pyramid::kernels {

namespace {
bool g_parallel =
#ifdef _OPENMP
    true;
#else
    false;
#endif
}  // namespace

bool parallel_enabled() { return g_parallel; }
void set_parallel(bool on) { g_parallel = on; }

void matmul_serial(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            if (accumulate) c[i * n + j] += acc; else c[i * n + j] = acc;
        }
    }
}

void matmul_omp(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            if (accumulate) c[i * n + j] += acc; else c[i * n + j] = acc;
        }
    }
}

void matmul(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    if (g_parallel) matmul_omp(a, b, c, m, k, n, accumulate);
    else matmul_serial(a, b, c, m, k, n, accumulate);
}

void matmul_nt_serial(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
            if (accumulate) c[i * n + j] += acc; else c[i * n + j] = acc;
        }
    }
}

void matmul_nt_omp(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
            if (accumulate) c[i * n + j] += acc; else c[i * n + j] = acc;
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    if (g_parallel) matmul_nt_omp(a, b, c, m, k, n, accumulate);
    else matmul_nt_serial(a, b, c, m, k, n, accumulate);
}

void matmul_tn_serial(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
            if (accumulate) c[i * n + j] += acc; else c[i * n + j] = acc;
        }
    }
}

void matmul_tn_omp(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
            if (accumulate) c[i * n + j] += acc; else c[i * n + j] = acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    if (g_parallel) matmul_tn_omp(a, b, c, m, k, n, accumulate);
    else matmul_tn_serial(a, b, c, m, k, n, accumulate);
}

namespace {
inline double conv1d_cell(const double* x, const double* w, int t_out, int co,
                          int t_in, int c_in, int c_out, int ksize, int dilation, int stride) {
    const int r = (ksize - 1) / 2;
    double acc = 0.0;
    for (int n = 0; n < ksize; ++n) {
        const int ti = t_out * stride + (n - r) * dilation;
        if (ti < 0 || ti >= t_in) continue;
        const double* xr = x + static_cast<std::size_t>(ti) * c_in;
        const double* wr = w + (static_cast<std::size_t>(n) * c_in) * c_out;
        for (int ci = 0; ci < c_in; ++ci) acc += xr[ci] * wr[ci * c_out + co];
    }
    return acc;
}
}  // namespace

void conv1d_serial(const double* x, const double* w, double* out,
                   int t_in, int c_in, int c_out, int ksize, int dilation, int stride,
                   bool accumulate) {
    const int t_out = (t_in + stride - 1) / stride;
    for (int t = 0; t < t_out; ++t) {
        for (int co = 0; co < c_out; ++co) {
            const double acc = conv1d_cell(x, w, t, co, t_in, c_in, c_out, ksize, dilation, stride);
            if (accumulate) out[t * c_out + co] += acc; else out[t * c_out + co] = acc;
        }
    }
}

void conv1d_omp(const double* x, const double* w, double* out,
                int t_in, int c_in, int c_out, int ksize, int dilation, int stride,
                bool accumulate) {
    const int t_out = (t_in + stride - 1) / stride;
#pragma omp parallel for schedule(static)
    for (int t = 0; t < t_out; ++t) {
        for (int co = 0; co < c_out; ++co) {
            const double acc = conv1d_cell(x, w, t, co, t_in, c_in, c_out, ksize, dilation, stride);
            if (accumulate) out[t * c_out + co] += acc; else out[t * c_out + co] = acc;
        }
    }
}

void conv1d(const double* x, const double* w, double* out,
            int t_in, int c_in, int c_out, int ksize, int dilation, int stride,
            bool accumulate) {
    if (g_parallel) conv1d_omp(x, w, out, t_in, c_in, c_out, ksize, dilation, stride, accumulate);
    else conv1d_serial(x, w, out, t_in, c_in, c_out, ksize, dilation, stride, accumulate);
}

}  // namespace pyramid::kernels
