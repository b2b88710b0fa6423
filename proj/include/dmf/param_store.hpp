#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dmf/rng.hpp"
#include "dmf/tensor.hpp"

namespace dmf {

// Named, ordered collection of trainable tensors plus their optimizer state.
// Iteration order is creation order everywhere (updates, norms, serialization),
// which keeps training byte-reproducible.
class ParamStore {
 public:
  struct Entry {
    std::string path;
    Tensor<float> value;        // requires_grad = true
    Tensor<float> ema;          // exponential moving average shadow
    std::vector<float> m, v;    // Adam moments
  };

  Tensor<float>& create(const std::string& path, std::vector<std::int64_t> shape);
  bool has(const std::string& path) const { return index_.count(path) != 0; }
  std::size_t index(const std::string& path) const;
  Entry& entry(const std::string& path);
  const Entry& entry(const std::string& path) const;
  Tensor<float>& value(const std::string& path) { return entry(path).value; }

  std::size_t size() const { return entries_.size(); }
  Entry& at(std::size_t i) { return entries_[i]; }
  const Entry& at(std::size_t i) const { return entries_[i]; }
  std::int64_t total_elements() const;

  // Reset every EMA shadow to the current value (used right after init).
  void sync_ema();

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// In-place initializers.
void init_normal(Tensor<float>& t, Rng& rng, float stddev);
void init_xavier_uniform(Tensor<float>& t, Rng& rng);  // 2-d: U(+-sqrt(6/(fan_in+fan_out)))
void init_zeros(Tensor<float>& t);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 2.0;     // global L2 clip; <=0 disables
  std::int64_t warmup_steps = 0;
  double ema_decay = 0.9999;
};

struct StepStats {
  double grad_norm = 0;   // pre-clip global norm
  double lr_used = 0;     // lr after warmup scaling
  bool applied = false;   // false when a non-finite gradient rejected the step
};

// Adam with warmup, global-norm clipping, EMA shadows and non-finite rejection.
class Optimizer {
 public:
  Optimizer(ParamStore& store, AdamConfig cfg) : store_(store), cfg_(cfg) {}

  // grads[i] aligns with store.at(i); each must have the parameter's element count.
  StepStats step(const std::vector<const std::vector<float>*>& grads);

  std::int64_t steps_applied() const { return steps_applied_; }
  std::int64_t steps_rejected() const { return steps_rejected_; }

  // for externally scheduled learning rates (decay policies live with the caller)
  void set_lr(double lr) { cfg_.lr = lr; }
  const AdamConfig& config() const { return cfg_; }

 private:
  ParamStore& store_;
  AdamConfig cfg_;
  std::int64_t steps_applied_ = 0;
  std::int64_t steps_rejected_ = 0;
};

} // namespace dmf
