#include "mavos/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <cstring>
#include <limits>

#if defined(__x86_64__) || defined(__i386__)
#include <immintrin.h>
#define MAVOS_X86 1
#endif

#if defined(__aarch64__)
#include <arm_neon.h>
#define MAVOS_NEON 1
#endif

namespace mavos::kern {

namespace {

bool env_wants_scalar() {
    const char* e = std::getenv("MAVOS_SIMD");
    return e != nullptr && std::strcmp(e, "scalar") == 0;
}

std::atomic<bool> g_force_scalar{env_wants_scalar()};

bool cpu_has_avx2() {
#if defined(MAVOS_X86)
    static const bool ok = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return ok;
#else
    return false;
#endif
}

bool use_simd() {
#if defined(MAVOS_X86)
    return cpu_has_avx2() && !g_force_scalar.load(std::memory_order_relaxed);
#elif defined(MAVOS_NEON)
    return !g_force_scalar.load(std::memory_order_relaxed);
#else
    return false;
#endif
}

// ---------------------------------------------------------------------------
// Scalar reference kernels
// ---------------------------------------------------------------------------

template <typename T>
T dot_scalar(const T* a, const T* b, size_t n) {
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
void axpy_scalar(T* y, T alpha, const T* x, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void vmadd_scalar(T* y, const T* a, const T* b, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += a[i] * b[i];
}

template <typename T>
void add_scalar(T* out, const T* a, const T* b, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void mul_scalar(T* out, const T* a, const T* b, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void scal_scalar(T* y, T alpha, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] *= alpha;
}

template <typename T>
T sum_scalar(const T* x, size_t n) {
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

template <typename T>
T max_scalar(const T* x, size_t n) {
    // Seeded below any value and compared with x[i] on the left so NaN
    // entries never win: the documented contract ignores them.
    T best = -std::numeric_limits<T>::infinity();
    for (size_t i = 0; i < n; ++i) {
        if (x[i] > best) best = x[i];
    }
    return best;
}

#if defined(MAVOS_X86)

// ---------------------------------------------------------------------------
// AVX2 kernels. Compiled with per-function target attributes so the rest of
// the binary stays baseline; only reached after __builtin_cpu_supports says
// the instructions exist.
// ---------------------------------------------------------------------------

__attribute__((target("avx2,fma"))) float hsum(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_add_ss(lo, _mm_movehdup_ps(lo));
    return _mm_cvtss_f32(lo);
}

__attribute__((target("avx2,fma"))) double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

__attribute__((target("avx2,fma"))) float dot_avx2(const float* a, const float* b, size_t n) {
    __m256 acc = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
    }
    float r = hsum(acc);
    for (; i < n; ++i) r += a[i] * b[i];
    return r;
}

__attribute__((target("avx2,fma"))) double dot_avx2(const double* a, const double* b, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
    }
    double r = hsum(acc);
    for (; i < n; ++i) r += a[i] * b[i];
    return r;
}

__attribute__((target("avx2,fma"))) void axpy_avx2(float* y, float alpha, const float* x,
                                                   size_t n) {
    __m256 va = _mm256_set1_ps(alpha);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 vy = _mm256_loadu_ps(y + i);
        vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vy);
        _mm256_storeu_ps(y + i, vy);
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

__attribute__((target("avx2,fma"))) void axpy_avx2(double* y, double alpha, const double* x,
                                                   size_t n) {
    __m256d va = _mm256_set1_pd(alpha);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_loadu_pd(y + i);
        vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
        _mm256_storeu_pd(y + i, vy);
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

__attribute__((target("avx2,fma"))) void vmadd_avx2(float* y, const float* a, const float* b,
                                                    size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 vy = _mm256_loadu_ps(y + i);
        vy = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), vy);
        _mm256_storeu_ps(y + i, vy);
    }
    for (; i < n; ++i) y[i] += a[i] * b[i];
}

__attribute__((target("avx2,fma"))) void vmadd_avx2(double* y, const double* a, const double* b,
                                                    size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_loadu_pd(y + i);
        vy = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), vy);
        _mm256_storeu_pd(y + i, vy);
    }
    for (; i < n; ++i) y[i] += a[i] * b[i];
}

__attribute__((target("avx2,fma"))) void add_avx2(float* out, const float* a, const float* b,
                                                  size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

__attribute__((target("avx2,fma"))) void add_avx2(double* out, const double* a, const double* b,
                                                  size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

__attribute__((target("avx2,fma"))) void mul_avx2(float* out, const float* a, const float* b,
                                                  size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

__attribute__((target("avx2,fma"))) void mul_avx2(double* out, const double* a, const double* b,
                                                  size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

__attribute__((target("avx2,fma"))) void scal_avx2(float* y, float alpha, size_t n) {
    __m256 va = _mm256_set1_ps(alpha);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(y + i), va));
    }
    for (; i < n; ++i) y[i] *= alpha;
}

__attribute__((target("avx2,fma"))) void scal_avx2(double* y, double alpha, size_t n) {
    __m256d va = _mm256_set1_pd(alpha);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_mul_pd(_mm256_loadu_pd(y + i), va));
    }
    for (; i < n; ++i) y[i] *= alpha;
}

__attribute__((target("avx2,fma"))) float sum_avx2(const float* x, size_t n) {
    __m256 acc = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
    float r = hsum(acc);
    for (; i < n; ++i) r += x[i];
    return r;
}

__attribute__((target("avx2,fma"))) double sum_avx2(const double* x, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
    double r = hsum(acc);
    for (; i < n; ++i) r += x[i];
    return r;
}

// maxps/maxpd return the second operand whenever either lane is NaN, so the
// data rides in the first slot and the (always finite) accumulator in the
// second: NaN lanes leave the accumulator untouched.
__attribute__((target("avx2,fma"))) float max_avx2(const float* x, size_t n) {
    if (n < 8) return max_scalar(x, n);
    __m256 acc = _mm256_set1_ps(-std::numeric_limits<float>::infinity());
    size_t i = 0;
    for (; i + 8 <= n; i += 8) acc = _mm256_max_ps(_mm256_loadu_ps(x + i), acc);
    __m128 lo = _mm_max_ps(_mm256_castps256_ps128(acc), _mm256_extractf128_ps(acc, 1));
    lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_max_ss(lo, _mm_movehdup_ps(lo));
    float r = _mm_cvtss_f32(lo);
    for (; i < n; ++i) {
        if (x[i] > r) r = x[i];
    }
    return r;
}

__attribute__((target("avx2,fma"))) double max_avx2(const double* x, size_t n) {
    if (n < 4) return max_scalar(x, n);
    __m256d acc = _mm256_set1_pd(-std::numeric_limits<double>::infinity());
    size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = _mm256_max_pd(_mm256_loadu_pd(x + i), acc);
    __m128d lo = _mm_max_pd(_mm256_castpd256_pd128(acc), _mm256_extractf128_pd(acc, 1));
    double r = _mm_cvtsd_f64(_mm_max_sd(lo, _mm_unpackhi_pd(lo, lo)));
    for (; i < n; ++i) {
        if (x[i] > r) r = x[i];
    }
    return r;
}

#endif  // MAVOS_X86

#if defined(MAVOS_NEON)

// ---------------------------------------------------------------------------
// NEON kernels (aarch64). Baseline on that architecture, so no function
// attributes or cpuid checks are needed.
// ---------------------------------------------------------------------------

float dot_neon(const float* a, const float* b, size_t n) {
    float32x4_t acc = vdupq_n_f32(0.0f);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = vfmaq_f32(acc, vld1q_f32(a + i), vld1q_f32(b + i));
    float r = vaddvq_f32(acc);
    for (; i < n; ++i) r += a[i] * b[i];
    return r;
}

double dot_neon(const double* a, const double* b, size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    size_t i = 0;
    for (; i + 2 <= n; i += 2) acc = vfmaq_f64(acc, vld1q_f64(a + i), vld1q_f64(b + i));
    double r = vaddvq_f64(acc);
    for (; i < n; ++i) r += a[i] * b[i];
    return r;
}

void axpy_neon(float* y, float alpha, const float* x, size_t n) {
    float32x4_t va = vdupq_n_f32(alpha);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        vst1q_f32(y + i, vfmaq_f32(vld1q_f32(y + i), va, vld1q_f32(x + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void axpy_neon(double* y, double alpha, const double* x, size_t n) {
    float64x2_t va = vdupq_n_f64(alpha);
    size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void vmadd_neon(float* y, const float* a, const float* b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        vst1q_f32(y + i, vfmaq_f32(vld1q_f32(y + i), vld1q_f32(a + i), vld1q_f32(b + i)));
    }
    for (; i < n; ++i) y[i] += a[i] * b[i];
}

void vmadd_neon(double* y, const double* a, const double* b, size_t n) {
    size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), vld1q_f64(a + i), vld1q_f64(b + i)));
    }
    for (; i < n; ++i) y[i] += a[i] * b[i];
}

void add_neon(float* out, const float* a, const float* b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vaddq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void add_neon(double* out, const double* a, const double* b, size_t n) {
    size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_neon(float* out, const float* a, const float* b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vmulq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void mul_neon(double* out, const double* a, const double* b, size_t n) {
    size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scal_neon(float* y, float alpha, size_t n) {
    float32x4_t va = vdupq_n_f32(alpha);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(y + i, vmulq_f32(vld1q_f32(y + i), va));
    for (; i < n; ++i) y[i] *= alpha;
}

void scal_neon(double* y, double alpha, size_t n) {
    float64x2_t va = vdupq_n_f64(alpha);
    size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vmulq_f64(vld1q_f64(y + i), va));
    for (; i < n; ++i) y[i] *= alpha;
}

float sum_neon(const float* x, size_t n) {
    float32x4_t acc = vdupq_n_f32(0.0f);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = vaddq_f32(acc, vld1q_f32(x + i));
    float r = vaddvq_f32(acc);
    for (; i < n; ++i) r += x[i];
    return r;
}

double sum_neon(const double* x, size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    size_t i = 0;
    for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(x + i));
    double r = vaddvq_f64(acc);
    for (; i < n; ++i) r += x[i];
    return r;
}

// The maxnm forms implement IEEE maxNum, which returns the number when one
// operand is NaN; plain fmax would propagate NaN and break the contract.
float max_neon(const float* x, size_t n) {
    if (n < 4) return max_scalar(x, n);
    float32x4_t acc = vdupq_n_f32(-std::numeric_limits<float>::infinity());
    size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = vmaxnmq_f32(acc, vld1q_f32(x + i));
    float r = vmaxnmvq_f32(acc);
    for (; i < n; ++i) {
        if (x[i] > r) r = x[i];
    }
    return r;
}

double max_neon(const double* x, size_t n) {
    if (n < 2) return max_scalar(x, n);
    float64x2_t acc = vdupq_n_f64(-std::numeric_limits<double>::infinity());
    size_t i = 0;
    for (; i + 2 <= n; i += 2) acc = vmaxnmq_f64(acc, vld1q_f64(x + i));
    double r = vmaxnmvq_f64(acc);
    for (; i < n; ++i) {
        if (x[i] > r) r = x[i];
    }
    return r;
}

#endif  // MAVOS_NEON

// C = A * B via rank-1 row updates: each output row accumulates axpy calls,
// which keeps the inner loop contiguous in both B and C.
template <typename T>
void matmul_nn_impl(T* c, const T* a, const T* b, size_t m, size_t k, size_t n) {
    std::fill(c, c + m * n, T(0));
    for (size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (size_t p = 0; p < k; ++p) axpy(crow, arow[p], b + p * n, n);
    }
}

// C = A * B^T: both operand rows are contiguous, so each entry is one dot.
template <typename T>
void matmul_nt_impl(T* c, const T* a, const T* b, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) crow[j] = dot(arow, b + j * k, k);
    }
}

// C = A^T * B, again as contiguous rank-1 updates.
template <typename T>
void matmul_tn_impl(T* c, const T* a, const T* b, size_t m, size_t k, size_t n) {
    std::fill(c, c + k * n, T(0));
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (size_t p = 0; p < k; ++p) axpy(c + p * n, arow[p], brow, n);
    }
}

}  // namespace

Isa active_isa() {
#if defined(MAVOS_X86)
    if (cpu_has_avx2() && !g_force_scalar.load(std::memory_order_relaxed)) return Isa::avx2;
#elif defined(MAVOS_NEON)
    if (!g_force_scalar.load(std::memory_order_relaxed)) return Isa::neon;
#endif
    return Isa::scalar;
}

const char* isa_name(Isa isa) {
    switch (isa) {
        case Isa::avx2: return "avx2";
        case Isa::neon: return "neon";
        default: return "scalar";
    }
}

void set_force_scalar(bool force) { g_force_scalar.store(force, std::memory_order_relaxed); }
bool force_scalar() { return g_force_scalar.load(std::memory_order_relaxed); }

#if defined(MAVOS_X86)
#define MAVOS_DISPATCH(fn, ...) \
    if (use_simd()) return fn##_avx2(__VA_ARGS__); \
    return fn##_scalar(__VA_ARGS__)
#elif defined(MAVOS_NEON)
#define MAVOS_DISPATCH(fn, ...) \
    if (use_simd()) return fn##_neon(__VA_ARGS__); \
    return fn##_scalar(__VA_ARGS__)
#else
#define MAVOS_DISPATCH(fn, ...) return fn##_scalar(__VA_ARGS__)
#endif

float dot(const float* a, const float* b, size_t n) { MAVOS_DISPATCH(dot, a, b, n); }
double dot(const double* a, const double* b, size_t n) { MAVOS_DISPATCH(dot, a, b, n); }

void axpy(float* y, float alpha, const float* x, size_t n) { MAVOS_DISPATCH(axpy, y, alpha, x, n); }
void axpy(double* y, double alpha, const double* x, size_t n) {
    MAVOS_DISPATCH(axpy, y, alpha, x, n);
}

void vmadd(float* y, const float* a, const float* b, size_t n) { MAVOS_DISPATCH(vmadd, y, a, b, n); }
void vmadd(double* y, const double* a, const double* b, size_t n) {
    MAVOS_DISPATCH(vmadd, y, a, b, n);
}

void add(float* out, const float* a, const float* b, size_t n) { MAVOS_DISPATCH(add, out, a, b, n); }
void add(double* out, const double* a, const double* b, size_t n) {
    MAVOS_DISPATCH(add, out, a, b, n);
}

void mul(float* out, const float* a, const float* b, size_t n) { MAVOS_DISPATCH(mul, out, a, b, n); }
void mul(double* out, const double* a, const double* b, size_t n) {
    MAVOS_DISPATCH(mul, out, a, b, n);
}

void scal(float* y, float alpha, size_t n) { MAVOS_DISPATCH(scal, y, alpha, n); }
void scal(double* y, double alpha, size_t n) { MAVOS_DISPATCH(scal, y, alpha, n); }

float sum(const float* x, size_t n) { MAVOS_DISPATCH(sum, x, n); }
double sum(const double* x, size_t n) { MAVOS_DISPATCH(sum, x, n); }

float max(const float* x, size_t n) { MAVOS_DISPATCH(max, x, n); }
double max(const double* x, size_t n) { MAVOS_DISPATCH(max, x, n); }

#undef MAVOS_DISPATCH

void matmul_nn(float* c, const float* a, const float* b, size_t m, size_t k, size_t n) {
    matmul_nn_impl(c, a, b, m, k, n);
}
void matmul_nn(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
    matmul_nn_impl(c, a, b, m, k, n);
}

void matmul_nt(float* c, const float* a, const float* b, size_t m, size_t k, size_t n) {
    matmul_nt_impl(c, a, b, m, k, n);
}
void matmul_nt(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
    matmul_nt_impl(c, a, b, m, k, n);
}

void matmul_tn(float* c, const float* a, const float* b, size_t m, size_t k, size_t n) {
    matmul_tn_impl(c, a, b, m, k, n);
}
void matmul_tn(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
    matmul_tn_impl(c, a, b, m, k, n);
}

}  // namespace mavos::kern
