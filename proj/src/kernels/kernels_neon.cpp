// NEON variants (aarch64 only): float64x2 lanes, f32 pairs widened on load.

#if defined(__aarch64__)

#include <arm_neon.h>

#include "jpu/kernels.hpp"

namespace jpu::kern {

namespace {

void axpy_wf_neon(double a, const float* w, double* y, size_t n) {
    const float64x2_t va = vdupq_n_f64(a);
    size_t j = 0;
    for (; j + 2 <= n; j += 2) {
        float64x2_t wd = vcvt_f64_f32(vld1_f32(w + j));
        float64x2_t yv = vld1q_f64(y + j);
        vst1q_f64(y + j, vfmaq_f64(yv, va, wd));
    }
    for (; j < n; ++j) y[j] += a * double(w[j]);
}

void axpy_dd_neon(double a, const double* x, double* y, size_t n) {
    const float64x2_t va = vdupq_n_f64(a);
    size_t j = 0;
    for (; j + 2 <= n; j += 2) {
        float64x2_t xv = vld1q_f64(x + j);
        float64x2_t yv = vld1q_f64(y + j);
        vst1q_f64(y + j, vfmaq_f64(yv, va, xv));
    }
    for (; j < n; ++j) y[j] += a * x[j];
}

double dot_wf_neon(const float* w, const double* x, size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    size_t j = 0;
    for (; j + 2 <= n; j += 2) {
        float64x2_t wd = vcvt_f64_f32(vld1_f32(w + j));
        float64x2_t xv = vld1q_f64(x + j);
        acc = vfmaq_f64(acc, wd, xv);
    }
    double tail = 0.0;
    for (; j < n; ++j) tail += double(w[j]) * x[j];
    return vaddvq_f64(acc) + tail;
}

double dot_dd_neon(const double* a, const double* b, size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    size_t j = 0;
    for (; j + 2 <= n; j += 2) {
        float64x2_t av = vld1q_f64(a + j);
        float64x2_t bv = vld1q_f64(b + j);
        acc = vfmaq_f64(acc, av, bv);
    }
    double tail = 0.0;
    for (; j < n; ++j) tail += a[j] * b[j];
    return vaddvq_f64(acc) + tail;
}

void matvec_acc_neon(const float* W, const double* x, double* y, size_t in_dim, size_t out_dim) {
    for (size_t i = 0; i < in_dim; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        axpy_wf_neon(xi, W + i * out_dim, y, out_dim);
    }
}

void matvec_t_acc_neon(const float* W, const double* g, double* dx, size_t in_dim, size_t out_dim) {
    for (size_t i = 0; i < in_dim; ++i) dx[i] += dot_wf_neon(W + i * out_dim, g, out_dim);
}

void outer_acc_neon(const double* x, const double* g, double* gw, size_t in_dim, size_t out_dim) {
    for (size_t i = 0; i < in_dim; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        axpy_dd_neon(xi, g, gw + i * out_dim, out_dim);
    }
}

} // namespace

extern const Kernels kNeon;
const Kernels kNeon = {
    "neon",        axpy_wf_neon,    axpy_dd_neon,      dot_wf_neon,
    dot_dd_neon,   matvec_acc_neon, matvec_t_acc_neon, outer_acc_neon,
};

} // namespace jpu::kern

#endif // aarch64
