#pragma once
#include <cstddef>

// CPU kernels behind the tensor engine. Every operation has a scalar
// reference implementation and (for the f32 hot paths plus f64 gemm) an AVX2
// variant selected at runtime. The two variants are written to produce
// bit-identical results: each gemm output element is a sequential FMA chain
// over k, transcendentals share one fixed polynomial, and reductions use the
// same 8-lane accumulator layout and combine tree in both paths. Tests assert
// exact equality.
namespace dmf::kern {

enum class Isa { Scalar, Avx2 };
const char* isa_name(Isa isa);
Isa active_isa();          // probed once; DIMA_FORGE_SIMD={scalar,avx2} overrides
void force_isa(Isa isa);   // test hook; throws if the host cannot run the ISA

// C[m,n] (+)= A[m,k] * B[k,n], all row-major dense.
void gemm(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);
void gemm(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);

// y[i] = exp(x[i]) with a fixed-polynomial f32 form that returns exactly 0
// below the cutoff (so -1e9 attention masks contribute nothing). The f64
// overload uses std::exp and has no AVX2 variant.
void vexp(const float* x, float* y, std::size_t n);
void vexp(const double* x, double* y, std::size_t n);

// tanh-form gelu: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
void gelu(const float* x, float* y, std::size_t n);
void gelu(const double* x, double* y, std::size_t n);
// gx[i] += gy[i] * gelu'(x[i])
void gelu_grad(const float* x, const float* gy, float* gx, std::size_t n);
void gelu_grad(const double* x, const double* gy, double* gx, std::size_t n);

// in-place softmax over each row (max-subtracted)
void softmax_rows(float* x, int rows, int cols);
void softmax_rows(double* x, int rows, int cols);

// y = (x - mean) / sqrt(var + eps) * gamma + beta per row, population variance;
// per-row mean and reciprocal std are written out for the backward pass.
void layernorm_rows(const float* x, float* y, float* mean, float* rstd,
                    const float* gamma, const float* beta, int rows, int cols, float eps);
void layernorm_rows(const double* x, double* y, double* mean, double* rstd,
                    const double* gamma, const double* beta, int rows, int cols, double eps);

float  reduce_sum(const float* x, std::size_t n);
double reduce_sum(const double* x, std::size_t n);
float  reduce_sumsq(const float* x, std::size_t n);
double reduce_sumsq(const double* x, std::size_t n);

// Reference implementations (always available; the dispatch target on hosts
// without AVX2). Exposed so equivalence tests can call both paths directly.
namespace scalar {
void gemm(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);
void gemm(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);
void vexp(const float* x, float* y, std::size_t n);
void vexp(const double* x, double* y, std::size_t n);
void gelu(const float* x, float* y, std::size_t n);
void gelu(const double* x, double* y, std::size_t n);
void gelu_grad(const float* x, const float* gy, float* gx, std::size_t n);
void gelu_grad(const double* x, const double* gy, double* gx, std::size_t n);
void softmax_rows(float* x, int rows, int cols);
void softmax_rows(double* x, int rows, int cols);
void layernorm_rows(const float* x, float* y, float* mean, float* rstd,
                    const float* gamma, const float* beta, int rows, int cols, float eps);
void layernorm_rows(const double* x, double* y, double* mean, double* rstd,
                    const double* gamma, const double* beta, int rows, int cols, double eps);
float  reduce_sum(const float* x, std::size_t n);
double reduce_sum(const double* x, std::size_t n);
float  reduce_sumsq(const float* x, std::size_t n);
double reduce_sumsq(const double* x, std::size_t n);
} // namespace scalar

namespace avx2 {
bool available();   // compiled in and supported by this CPU
void gemm(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);
void gemm(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);
void vexp(const float* x, float* y, std::size_t n);
void gelu(const float* x, float* y, std::size_t n);
void gelu_grad(const float* x, const float* gy, float* gx, std::size_t n);
void softmax_rows(float* x, int rows, int cols);
void layernorm_rows(const float* x, float* y, float* mean, float* rstd,
                    const float* gamma, const float* beta, int rows, int cols, float eps);
float reduce_sum(const float* x, std::size_t n);
float reduce_sumsq(const float* x, std::size_t n);
} // namespace avx2

} // namespace dmf::kern
