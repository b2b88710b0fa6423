#pragma once
#include <bit>
#include <cmath>
#include <cstdint>

// Canonical element-level math shared by the scalar and AVX2 kernel variants.
// Both paths must perform the same sequence of IEEE operations (one rounding
// per fma/add/mul) so their outputs match bit for bit.
namespace dmf::kern::detail {

inline constexpr float kExpLoF32 = -87.0f;   // exp(x) == 0 below this
inline constexpr float kExpHiF32 = 88.0f;    // clamp; exp(88) ~ 1.65e38 < FLT_MAX
inline constexpr float kLog2eF32 = 1.44269504088896341f;
inline constexpr float kLn2HiF32 = 0.693359375f;
inline constexpr float kLn2LoF32 = -2.12194440e-4f;
inline constexpr float kExpPoly[6] = {
    1.9875691500e-4f, 1.3981999507e-3f, 8.3334519073e-3f,
    4.1665795894e-2f, 1.6666665459e-1f, 5.0000001201e-1f};

inline constexpr float kGeluSqrt2OverPi = 0.7978845608028654f;
inline constexpr float kGeluCubic = 0.044715f;
inline constexpr float kTanhClamp = 9.0f;   // tanh saturates to +-1 in f32 here

inline float exp_f32(float x) {
  if (x < kExpLoF32) return 0.0f;
  if (x > kExpHiF32) x = kExpHiF32;
  const float fx = std::floor(std::fma(x, kLog2eF32, 0.5f));
  float r = std::fma(fx, -kLn2HiF32, x);
  r = std::fma(fx, -kLn2LoF32, r);
  float y = kExpPoly[0];
  y = std::fma(y, r, kExpPoly[1]);
  y = std::fma(y, r, kExpPoly[2]);
  y = std::fma(y, r, kExpPoly[3]);
  y = std::fma(y, r, kExpPoly[4]);
  y = std::fma(y, r, kExpPoly[5]);
  y = std::fma(y, r * r, r + 1.0f);
  const int n = static_cast<int>(fx);
  const float p2n = std::bit_cast<float>(static_cast<std::uint32_t>(n + 127) << 23);
  return y * p2n;
}

inline float tanh_f32(float x) {
  if (x > kTanhClamp) x = kTanhClamp;
  if (x < -kTanhClamp) x = -kTanhClamp;
  const float e = exp_f32(x + x);
  return (e - 1.0f) / (e + 1.0f);
}

inline float gelu_f32(float x) {
  const float x2 = x * x;
  const float u = kGeluSqrt2OverPi * std::fma(kGeluCubic * x2, x, x);
  const float t = tanh_f32(u);
  return (0.5f * x) * (1.0f + t);
}

inline float dgelu_f32(float x) {
  const float x2 = x * x;
  const float u = kGeluSqrt2OverPi * std::fma(kGeluCubic * x2, x, x);
  const float t = tanh_f32(u);
  const float du = kGeluSqrt2OverPi * std::fma(3.0f * kGeluCubic, x2, 1.0f);
  const float sech2 = std::fma(-t, t, 1.0f);
  const float a = 0.5f * (1.0f + t);
  const float b = ((0.5f * x) * sech2) * du;
  return a + b;
}

// f64 equivalents used by the double-precision engine (scalar path only, so
// plain libm calls are fine; they just have to be deterministic on one host).
inline double exp_f64(double x) {
  if (x < -745.0) return 0.0;
  return std::exp(x);
}

inline double gelu_f64(double x) {
  const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * x * (1.0 + t);
}

inline double dgelu_f64(double x) {
  const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = 0.7978845608028654 * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

} // namespace dmf::kern::detail
