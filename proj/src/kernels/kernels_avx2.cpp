// AVX2 + FMA variants of the numeric kernels. Built with -mavx2 -mfma for this
// translation unit only; kernels.cpp gates selection on cpu support at runtime.

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include "jpu/kernels.hpp"

namespace jpu::kern {

namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

void axpy_wf_avx2(double a, const float* w, double* y, size_t n) {
    const __m256d va = _mm256_set1_pd(a);
    size_t j = 0;
    for (; j + 4 <= n; j += 4) {
        __m256d wd = _mm256_cvtps_pd(_mm_loadu_ps(w + j));
        __m256d yv = _mm256_loadu_pd(y + j);
        _mm256_storeu_pd(y + j, _mm256_fmadd_pd(va, wd, yv));
    }
    for (; j < n; ++j) y[j] += a * double(w[j]);
}

void axpy_dd_avx2(double a, const double* x, double* y, size_t n) {
    const __m256d va = _mm256_set1_pd(a);
    size_t j = 0;
    for (; j + 4 <= n; j += 4) {
        __m256d xv = _mm256_loadu_pd(x + j);
        __m256d yv = _mm256_loadu_pd(y + j);
        _mm256_storeu_pd(y + j, _mm256_fmadd_pd(va, xv, yv));
    }
    for (; j < n; ++j) y[j] += a * x[j];
}

double dot_wf_avx2(const float* w, const double* x, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t j = 0;
    for (; j + 4 <= n; j += 4) {
        __m256d wd = _mm256_cvtps_pd(_mm_loadu_ps(w + j));
        __m256d xv = _mm256_loadu_pd(x + j);
        acc = _mm256_fmadd_pd(wd, xv, acc);
    }
    double tail = 0.0;
    for (; j < n; ++j) tail += double(w[j]) * x[j];
    return hsum(acc) + tail;
}

double dot_dd_avx2(const double* a, const double* b, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t j = 0;
    for (; j + 4 <= n; j += 4) {
        __m256d av = _mm256_loadu_pd(a + j);
        __m256d bv = _mm256_loadu_pd(b + j);
        acc = _mm256_fmadd_pd(av, bv, acc);
    }
    double tail = 0.0;
    for (; j < n; ++j) tail += a[j] * b[j];
    return hsum(acc) + tail;
}

void matvec_acc_avx2(const float* W, const double* x, double* y, size_t in_dim, size_t out_dim) {
    for (size_t i = 0; i < in_dim; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        axpy_wf_avx2(xi, W + i * out_dim, y, out_dim);
    }
}

void matvec_t_acc_avx2(const float* W, const double* g, double* dx, size_t in_dim, size_t out_dim) {
    for (size_t i = 0; i < in_dim; ++i) dx[i] += dot_wf_avx2(W + i * out_dim, g, out_dim);
}

void outer_acc_avx2(const double* x, const double* g, double* gw, size_t in_dim, size_t out_dim) {
    for (size_t i = 0; i < in_dim; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        axpy_dd_avx2(xi, g, gw + i * out_dim, out_dim);
    }
}

} // namespace

extern const Kernels kAvx2;
const Kernels kAvx2 = {
    "avx2",        axpy_wf_avx2,    axpy_dd_avx2,      dot_wf_avx2,
    dot_dd_avx2,   matvec_acc_avx2, matvec_t_acc_avx2, outer_acc_avx2,
};

} // namespace jpu::kern

#endif // x86_64
