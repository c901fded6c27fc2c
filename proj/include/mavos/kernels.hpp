#pragma once

#include <cstddef>

// Data-parallel primitives behind all tensor arithmetic. Each operation has a
// scalar reference implementation plus vectorized variants (AVX2 on x86-64,
// NEON on aarch64) selected at runtime. The scalar path is the definition of
// correct behavior; the vectorized paths must agree with it up to summation
// order and are equivalence-tested against it.
namespace mavos::kern {

enum class Isa { scalar, avx2, neon };

// Instruction set the dispatchers will pick right now.
Isa active_isa();
const char* isa_name(Isa isa);

// Pin every kernel to the scalar reference path. Also honored at startup via
// the environment variable MAVOS_SIMD=scalar.
void set_force_scalar(bool force);
bool force_scalar();

float dot(const float* a, const float* b, size_t n);
double dot(const double* a, const double* b, size_t n);

// y += alpha * x
void axpy(float* y, float alpha, const float* x, size_t n);
void axpy(double* y, double alpha, const double* x, size_t n);

// y += a * b, elementwise
void vmadd(float* y, const float* a, const float* b, size_t n);
void vmadd(double* y, const double* a, const double* b, size_t n);

// out = a + b
void add(float* out, const float* a, const float* b, size_t n);
void add(double* out, const double* a, const double* b, size_t n);

// out = a * b
void mul(float* out, const float* a, const float* b, size_t n);
void mul(double* out, const double* a, const double* b, size_t n);

// y *= alpha
void scal(float* y, float alpha, size_t n);
void scal(double* y, double alpha, size_t n);

float sum(const float* x, size_t n);
double sum(const double* x, size_t n);

// Maximum element, n >= 1. NaN entries are ignored (callers that care about
// NaN must scan for it explicitly; comparison-based max never reports it).
float max(const float* x, size_t n);
double max(const double* x, size_t n);

// C[M x N] = A[M x K] * B[K x N]
void matmul_nn(float* c, const float* a, const float* b, size_t m, size_t k, size_t n);
void matmul_nn(double* c, const double* a, const double* b, size_t m, size_t k, size_t n);

// C[M x N] = A[M x K] * B[N x K]^T
void matmul_nt(float* c, const float* a, const float* b, size_t m, size_t k, size_t n);
void matmul_nt(double* c, const double* a, const double* b, size_t m, size_t k, size_t n);

// C[K x N] = A[M x K]^T * B[M x N]
void matmul_tn(float* c, const float* a, const float* b, size_t m, size_t k, size_t n);
void matmul_tn(double* c, const double* a, const double* b, size_t m, size_t k, size_t n);

}  // namespace mavos::kern
