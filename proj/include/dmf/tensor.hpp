#pragma once
#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmf {

// Dense row-major tensor. Element type is a build-time choice of the engine
// (float for training speed, double for gradient checking); the same template
// code runs in both precisions.
template <typename T>
struct Tensor {
  std::vector<std::int64_t> shape;
  std::shared_ptr<std::vector<T>> data;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s)
      : shape(std::move(s)), data(std::make_shared<std::vector<T>>(count(shape))) {}
  Tensor(std::vector<std::int64_t> s, std::vector<T> values)
      : shape(std::move(s)), data(std::make_shared<std::vector<T>>(std::move(values))) {
    if (std::int64_t(data->size()) != count(shape))
      throw std::invalid_argument("tensor: value count does not match shape");
  }

  static std::int64_t count(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative extent");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<std::int64_t> s) { return Tensor(std::move(s)); }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  std::int64_t numel() const { return data ? std::int64_t(data->size()) : 0; }
  int rank() const { return int(shape.size()); }
  std::int64_t dim(int i) const { return shape[std::size_t(i)]; }
  std::int64_t last_dim() const { return shape.empty() ? 1 : shape.back(); }
  std::int64_t rows() const { return last_dim() ? numel() / last_dim() : 0; }

  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }
  T& at(std::int64_t i) { return (*data)[std::size_t(i)]; }
  T at(std::int64_t i) const { return (*data)[std::size_t(i)]; }

  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = data ? std::make_shared<std::vector<T>>(*data) : nullptr;
    t.requires_grad = requires_grad;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

// Integer id tensor (token ids, class labels); never differentiated.
struct IntTensor {
  std::vector<std::int64_t> shape;
  std::vector<std::int32_t> values;

  IntTensor() = default;
  IntTensor(std::vector<std::int64_t> s, std::vector<std::int32_t> v)
      : shape(std::move(s)), values(std::move(v)) {}
  std::int64_t numel() const { return std::int64_t(values.size()); }
};

inline std::string shape_str(const std::vector<std::int64_t>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

} // namespace dmf
