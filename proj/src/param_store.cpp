#include "dmf/param_store.hpp"

#include <cmath>
#include <stdexcept>

namespace dmf {

Tensor<float>& ParamStore::create(const std::string& path, std::vector<std::int64_t> shape) {
  if (index_.count(path)) throw std::invalid_argument("param already exists: " + path);
  Entry e;
  e.path = path;
  e.value = Tensor<float>(shape);
  e.value.requires_grad = true;
  e.ema = Tensor<float>(shape);
  e.m.assign(std::size_t(e.value.numel()), 0.0f);
  e.v.assign(std::size_t(e.value.numel()), 0.0f);
  index_[path] = entries_.size();
  entries_.push_back(std::move(e));
  return entries_.back().value;
}

std::size_t ParamStore::index(const std::string& path) const {
  auto it = index_.find(path);
  if (it == index_.end()) throw std::out_of_range("no such param: " + path);
  return it->second;
}

ParamStore::Entry& ParamStore::entry(const std::string& path) {
  auto it = index_.find(path);
  if (it == index_.end()) throw std::out_of_range("no such param: " + path);
  return entries_[it->second];
}

const ParamStore::Entry& ParamStore::entry(const std::string& path) const {
  auto it = index_.find(path);
  if (it == index_.end()) throw std::out_of_range("no such param: " + path);
  return entries_[it->second];
}

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const Entry& e : entries_) n += e.value.numel();
  return n;
}

void ParamStore::sync_ema() {
  for (Entry& e : entries_)
    std::copy(e.value.ptr(), e.value.ptr() + e.value.numel(), e.ema.ptr());
}

void init_normal(Tensor<float>& t, Rng& rng, float stddev) {
  for (std::int64_t i = 0; i < t.numel(); ++i) t.at(i) = stddev * float(rng.normal());
}

void init_xavier_uniform(Tensor<float>& t, Rng& rng) {
  if (t.rank() != 2) throw std::invalid_argument("xavier init expects a 2-d tensor");
  const double fan_in = double(t.shape[0]), fan_out = double(t.shape[1]);
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.at(i) = float(bound * (2.0 * rng.uniform() - 1.0));
}

void init_zeros(Tensor<float>& t) {
  std::fill(t.ptr(), t.ptr() + t.numel(), 0.0f);
}

StepStats Optimizer::step(const std::vector<const std::vector<float>*>& grads) {
  if (grads.size() != store_.size())
    throw std::invalid_argument("optimizer: gradient list does not match parameter count");
  StepStats st;

  // Global norm in double, parameters in creation order.
  double sumsq = 0;
  bool finite = true;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const std::vector<float>& g = *grads[i];
    if (std::int64_t(g.size()) != store_.at(i).value.numel())
      throw std::invalid_argument("optimizer: gradient size mismatch for " + store_.at(i).path);
    for (float gv : g) {
      if (!std::isfinite(gv)) finite = false;
      sumsq += double(gv) * double(gv);
    }
  }
  st.grad_norm = std::sqrt(sumsq);
  if (!finite || !std::isfinite(st.grad_norm)) {
    ++steps_rejected_;   // leave every piece of state untouched
    return st;
  }

  double gscale = 1.0;
  if (cfg_.clip_norm > 0 && st.grad_norm > cfg_.clip_norm) gscale = cfg_.clip_norm / st.grad_norm;

  const std::int64_t t = steps_applied_ + 1;
  double warm = 1.0;
  if (cfg_.warmup_steps > 0) warm = std::min(1.0, double(t) / double(cfg_.warmup_steps));
  const double lr_t = cfg_.lr * warm;
  st.lr_used = lr_t;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t));

  for (std::size_t i = 0; i < grads.size(); ++i) {
    ParamStore::Entry& e = store_.at(i);
    const std::vector<float>& g = *grads[i];
    float* p = e.value.ptr();
    float* ema = e.ema.ptr();
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double gj = double(g[j]) * gscale;
      const double m = cfg_.beta1 * double(e.m[j]) + (1.0 - cfg_.beta1) * gj;
      const double v = cfg_.beta2 * double(e.v[j]) + (1.0 - cfg_.beta2) * gj * gj;
      e.m[j] = float(m);
      e.v[j] = float(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      p[j] = float(double(p[j]) - lr_t * mhat / (std::sqrt(vhat) + cfg_.eps));
      ema[j] = float(cfg_.ema_decay * double(ema[j]) + (1.0 - cfg_.ema_decay) * double(p[j]));
    }
  }
  ++steps_applied_;
  st.applied = true;
  return st;
}

} // namespace dmf
