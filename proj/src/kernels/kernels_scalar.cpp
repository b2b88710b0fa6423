#include "dmf/kernels/kernels.hpp"
#include "dmf/kernels/math_detail.hpp"

#include <cmath>
#include <limits>

namespace dmf::kern::scalar {

namespace {

// 8-lane accumulator with the same combine tree the AVX2 path uses
// (extract-high fold, then movehl/shuffle folds).
template <typename Acc, typename Step>
float lanes8(const float* x, std::size_t n, Acc init, Step step) {
  float acc[8] = {init, init, init, init, init, init, init, init};
  std::size_t i = 0;
  const std::size_t nb = n & ~std::size_t(7);
  for (; i < nb; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] = step(acc[l], x[i + l]);
  for (; i < n; ++i) acc[i & 7] = step(acc[i & 7], x[i]);
  const float c0 = acc[0] + acc[4], c1 = acc[1] + acc[5];
  const float c2 = acc[2] + acc[6], c3 = acc[3] + acc[7];
  return (c0 + c2) + (c1 + c3);
}

float lanes8_max(const float* x, std::size_t n) {
  const float ninf = -std::numeric_limits<float>::infinity();
  float acc[8] = {ninf, ninf, ninf, ninf, ninf, ninf, ninf, ninf};
  std::size_t i = 0;
  const std::size_t nb = n & ~std::size_t(7);
  for (; i < nb; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] = std::max(acc[l], x[i + l]);
  for (; i < n; ++i) acc[i & 7] = std::max(acc[i & 7], x[i]);
  const float c0 = std::max(acc[0], acc[4]), c1 = std::max(acc[1], acc[5]);
  const float c2 = std::max(acc[2], acc[6]), c3 = std::max(acc[3], acc[7]);
  return std::max(std::max(c0, c2), std::max(c1, c3));
}

} // namespace

void gemm(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const float* ai = a + std::size_t(i) * k;
    float* ci = c + std::size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      float acc = accumulate ? ci[j] : 0.0f;
      for (int kk = 0; kk < k; ++kk) acc = std::fma(ai[kk], b[std::size_t(kk) * n + j], acc);
      ci[j] = acc;
    }
  }
}

void gemm(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + std::size_t(i) * k;
    double* ci = c + std::size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      double acc = accumulate ? ci[j] : 0.0;
      for (int kk = 0; kk < k; ++kk) acc = std::fma(ai[kk], b[std::size_t(kk) * n + j], acc);
      ci[j] = acc;
    }
  }
}

void vexp(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = detail::exp_f32(x[i]);
}

void vexp(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = detail::exp_f64(x[i]);
}

void gelu(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = detail::gelu_f32(x[i]);
}

void gelu(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = detail::gelu_f64(x[i]);
}

void gelu_grad(const float* x, const float* gy, float* gx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) gx[i] = std::fma(gy[i], detail::dgelu_f32(x[i]), gx[i]);
}

void gelu_grad(const double* x, const double* gy, double* gx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) gx[i] = std::fma(gy[i], detail::dgelu_f64(x[i]), gx[i]);
}

void softmax_rows(float* x, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    float* row = x + std::size_t(r) * cols;
    const float mx = lanes8_max(row, std::size_t(cols));
    for (int j = 0; j < cols; ++j) row[j] = detail::exp_f32(row[j] - mx);
    const float s = lanes8(row, std::size_t(cols), 0.0f, [](float a, float v) { return a + v; });
    const float inv = 1.0f / s;
    for (int j = 0; j < cols; ++j) row[j] *= inv;
  }
}

void softmax_rows(double* x, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    double* row = x + std::size_t(r) * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < cols; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < cols; ++j) {
      row[j] = detail::exp_f64(row[j] - mx);
      s += row[j];
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < cols; ++j) row[j] *= inv;
  }
}

void layernorm_rows(const float* x, float* y, float* mean, float* rstd,
                    const float* gamma, const float* beta, int rows, int cols, float eps) {
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + std::size_t(r) * cols;
    float* yr = y + std::size_t(r) * cols;
    const float mu = lanes8(xr, std::size_t(cols), 0.0f, [](float a, float v) { return a + v; }) /
                     float(cols);
    const float ssq = lanes8(xr, std::size_t(cols), 0.0f, [mu](float a, float v) {
      const float d = v - mu;
      return std::fma(d, d, a);
    });
    const float var = ssq / float(cols);
    const float rs = 1.0f / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (int j = 0; j < cols; ++j) {
      const float t = (xr[j] - mu) * rs;
      yr[j] = std::fma(t, gamma[j], beta[j]);
    }
  }
}

void layernorm_rows(const double* x, double* y, double* mean, double* rstd,
                    const double* gamma, const double* beta, int rows, int cols, double eps) {
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + std::size_t(r) * cols;
    double* yr = y + std::size_t(r) * cols;
    double mu = 0.0;
    for (int j = 0; j < cols; ++j) mu += xr[j];
    mu /= cols;
    double ssq = 0.0;
    for (int j = 0; j < cols; ++j) ssq += (xr[j] - mu) * (xr[j] - mu);
    const double rs = 1.0 / std::sqrt(ssq / cols + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (int j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
  }
}

float reduce_sum(const float* x, std::size_t n) {
  return lanes8(x, n, 0.0f, [](float a, float v) { return a + v; });
}

double reduce_sum(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

float reduce_sumsq(const float* x, std::size_t n) {
  return lanes8(x, n, 0.0f, [](float a, float v) { return std::fma(v, v, a); });
}

double reduce_sumsq(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * x[i];
  return s;
}

} // namespace dmf::kern::scalar
