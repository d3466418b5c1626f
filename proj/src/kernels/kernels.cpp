#include "jpu/kernels.hpp"

#include <cstdlib>
#include <cstring>
#include <string>

#include "jpu/errors.hpp"

namespace jpu::kern {

namespace {

void axpy_wf_scalar(double a, const float* w, double* y, size_t n) {
    for (size_t j = 0; j < n; ++j) y[j] += a * double(w[j]);
}

void axpy_dd_scalar(double a, const double* x, double* y, size_t n) {
    for (size_t j = 0; j < n; ++j) y[j] += a * x[j];
}

double dot_wf_scalar(const float* w, const double* x, size_t n) {
    double acc = 0.0;
    for (size_t j = 0; j < n; ++j) acc += double(w[j]) * x[j];
    return acc;
}

double dot_dd_scalar(const double* a, const double* b, size_t n) {
    double acc = 0.0;
    for (size_t j = 0; j < n; ++j) acc += a[j] * b[j];
    return acc;
}

void matvec_acc_scalar(const float* W, const double* x, double* y, size_t in_dim, size_t out_dim) {
    for (size_t i = 0; i < in_dim; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const float* row = W + i * out_dim;
        for (size_t j = 0; j < out_dim; ++j) y[j] += xi * double(row[j]);
    }
}

void matvec_t_acc_scalar(const float* W, const double* g, double* dx, size_t in_dim, size_t out_dim) {
    for (size_t i = 0; i < in_dim; ++i) {
        const float* row = W + i * out_dim;
        double acc = 0.0;
        for (size_t j = 0; j < out_dim; ++j) acc += double(row[j]) * g[j];
        dx[i] += acc;
    }
}

void outer_acc_scalar(const double* x, const double* g, double* gw, size_t in_dim, size_t out_dim) {
    for (size_t i = 0; i < in_dim; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        double* row = gw + i * out_dim;
        for (size_t j = 0; j < out_dim; ++j) row[j] += xi * g[j];
    }
}

constexpr Kernels kScalar = {
    "scalar",        axpy_wf_scalar,     axpy_dd_scalar,   dot_wf_scalar,
    dot_dd_scalar,   matvec_acc_scalar,  matvec_t_acc_scalar, outer_acc_scalar,
};

} // namespace

#if defined(__x86_64__) || defined(_M_X64)
extern const Kernels kAvx2; // kernels_avx2.cpp
static bool avx2_available() {
#if defined(_MSC_VER)
    return true;
#else
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#endif
}
#endif
#if defined(__aarch64__)
extern const Kernels kNeon; // kernels_neon.cpp
#endif

namespace {

struct Dispatch {
    Backend backend;
    const Kernels* table;
};

Backend pick_default() {
    const char* env = std::getenv("JPU_KERNELS");
    if (env && *env && std::strcmp(env, "auto") != 0) {
        std::string s(env);
        if (s == "scalar") return Backend::scalar;
        if (s == "avx2") {
            if (!available(Backend::avx2)) throw ConfigError("JPU_KERNELS=avx2 unsupported on this host");
            return Backend::avx2;
        }
        if (s == "neon") {
            if (!available(Backend::neon)) throw ConfigError("JPU_KERNELS=neon unsupported on this host");
            return Backend::neon;
        }
        throw ConfigError("JPU_KERNELS=" + s + " not one of scalar|avx2|neon|auto");
    }
    if (available(Backend::avx2)) return Backend::avx2;
    if (available(Backend::neon)) return Backend::neon;
    return Backend::scalar;
}

const Kernels* table_for(Backend b) {
    switch (b) {
        case Backend::scalar: return &kScalar;
#if defined(__x86_64__) || defined(_M_X64)
        case Backend::avx2: return &kAvx2;
#endif
#if defined(__aarch64__)
        case Backend::neon: return &kNeon;
#endif
        default: return nullptr;
    }
}

Dispatch& dispatch() {
    static Dispatch d = [] {
        Backend b = pick_default();
        return Dispatch{b, table_for(b)};
    }();
    return d;
}

} // namespace

const char* backend_name(Backend b) {
    switch (b) {
        case Backend::scalar: return "scalar";
        case Backend::avx2: return "avx2";
        case Backend::neon: return "neon";
    }
    return "?";
}

bool available(Backend b) {
    switch (b) {
        case Backend::scalar: return true;
#if defined(__x86_64__) || defined(_M_X64)
        case Backend::avx2: return avx2_available();
#else
        case Backend::avx2: return false;
#endif
#if defined(__aarch64__)
        case Backend::neon: return true;
#else
        case Backend::neon: return false;
#endif
    }
    return false;
}

const Kernels& active() { return *dispatch().table; }

Backend backend() { return dispatch().backend; }

void set_backend(Backend b) {
    if (!available(b)) throw ConfigError(std::string("backend ") + backend_name(b) + " unsupported on this host");
    dispatch() = Dispatch{b, table_for(b)};
}

const Kernels& scalar_table() { return kScalar; }

} // namespace jpu::kern
