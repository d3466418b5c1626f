#pragma once

#include <cstddef>

namespace jpu::kern {

// Low-level numeric kernels behind the model's forward/backward passes.
// Parameters live in f32 and are promoted to f64 on load; every accumulation
// runs in f64. Each entry has a scalar reference implementation and, where the
// hardware supports it, a vectorized variant selected once per process.
//
// The *_acc kernels accumulate into their destination; callers zero first.
struct Kernels {
    const char* name;
    // y[j] += a * w[j]
    void (*axpy_wf)(double a, const float* w, double* y, size_t n);
    // y[j] += a * x[j]
    void (*axpy_dd)(double a, const double* x, double* y, size_t n);
    // sum_j w[j] * x[j]
    double (*dot_wf)(const float* w, const double* x, size_t n);
    // sum_j a[j] * b[j]
    double (*dot_dd)(const double* a, const double* b, size_t n);
    // y[j] += sum_i x[i] * W[i*out+j]      (W row-major [in][out])
    void (*matvec_acc)(const float* W, const double* x, double* y, size_t in_dim, size_t out_dim);
    // dx[i] += sum_j W[i*out+j] * g[j]
    void (*matvec_t_acc)(const float* W, const double* g, double* dx, size_t in_dim, size_t out_dim);
    // gw[i*out+j] += x[i] * g[j]
    void (*outer_acc)(const double* x, const double* g, double* gw, size_t in_dim, size_t out_dim);
};

enum class Backend { scalar, avx2, neon };

const char* backend_name(Backend b);
bool available(Backend b);

// Active table. First call resolves the backend: JPU_KERNELS=scalar|avx2|neon
// overrides, otherwise the best available one wins. The choice is stable for
// the rest of the process unless set_backend() is called.
const Kernels& active();
Backend backend();

// Force a backend (tests, benchmarking). Throws ConfigError if unsupported here.
void set_backend(Backend b);

// Reference table, always present, used as ground truth in equivalence tests.
const Kernels& scalar_table();

} // namespace jpu::kern
