#include "dmf/kernels/kernels.hpp"

#include <cstdlib>
#include <cstring>
#include <stdexcept>

namespace dmf::kern {

namespace {

Isa g_isa = []() {
  Isa isa = avx2::available() ? Isa::Avx2 : Isa::Scalar;
  if (const char* env = std::getenv("DIMA_FORGE_SIMD")) {
    if (std::strcmp(env, "scalar") == 0) isa = Isa::Scalar;
    else if (std::strcmp(env, "avx2") == 0 && avx2::available()) isa = Isa::Avx2;
  }
  return isa;
}();

} // namespace

const char* isa_name(Isa isa) { return isa == Isa::Avx2 ? "avx2" : "scalar"; }

Isa active_isa() { return g_isa; }

void force_isa(Isa isa) {
  if (isa == Isa::Avx2 && !avx2::available())
    throw std::runtime_error("avx2 kernels not available on this host");
  g_isa = isa;
}

void gemm(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  if (g_isa == Isa::Avx2) avx2::gemm(a, b, c, m, k, n, accumulate);
  else scalar::gemm(a, b, c, m, k, n, accumulate);
}

void gemm(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  if (g_isa == Isa::Avx2) avx2::gemm(a, b, c, m, k, n, accumulate);
  else scalar::gemm(a, b, c, m, k, n, accumulate);
}

void vexp(const float* x, float* y, std::size_t n) {
  if (g_isa == Isa::Avx2) avx2::vexp(x, y, n);
  else scalar::vexp(x, y, n);
}

void vexp(const double* x, double* y, std::size_t n) { scalar::vexp(x, y, n); }

void gelu(const float* x, float* y, std::size_t n) {
  if (g_isa == Isa::Avx2) avx2::gelu(x, y, n);
  else scalar::gelu(x, y, n);
}

void gelu(const double* x, double* y, std::size_t n) { scalar::gelu(x, y, n); }

void gelu_grad(const float* x, const float* gy, float* gx, std::size_t n) {
  if (g_isa == Isa::Avx2) avx2::gelu_grad(x, gy, gx, n);
  else scalar::gelu_grad(x, gy, gx, n);
}

void gelu_grad(const double* x, const double* gy, double* gx, std::size_t n) {
  scalar::gelu_grad(x, gy, gx, n);
}

void softmax_rows(float* x, int rows, int cols) {
  if (g_isa == Isa::Avx2) avx2::softmax_rows(x, rows, cols);
  else scalar::softmax_rows(x, rows, cols);
}

void softmax_rows(double* x, int rows, int cols) { scalar::softmax_rows(x, rows, cols); }

void layernorm_rows(const float* x, float* y, float* mean, float* rstd,
                    const float* gamma, const float* beta, int rows, int cols, float eps) {
  if (g_isa == Isa::Avx2) avx2::layernorm_rows(x, y, mean, rstd, gamma, beta, rows, cols, eps);
  else scalar::layernorm_rows(x, y, mean, rstd, gamma, beta, rows, cols, eps);
}

void layernorm_rows(const double* x, double* y, double* mean, double* rstd,
                    const double* gamma, const double* beta, int rows, int cols, double eps) {
  scalar::layernorm_rows(x, y, mean, rstd, gamma, beta, rows, cols, eps);
}

float reduce_sum(const float* x, std::size_t n) {
  return g_isa == Isa::Avx2 ? avx2::reduce_sum(x, n) : scalar::reduce_sum(x, n);
}

double reduce_sum(const double* x, std::size_t n) { return scalar::reduce_sum(x, n); }

float reduce_sumsq(const float* x, std::size_t n) {
  return g_isa == Isa::Avx2 ? avx2::reduce_sumsq(x, n) : scalar::reduce_sumsq(x, n);
}

double reduce_sumsq(const double* x, std::size_t n) { return scalar::reduce_sumsq(x, n); }

} // namespace dmf::kern
