#pragma once

#include <cmath>
#include <string>
#include <unordered_map>

#include "vangogh/nn.hpp"

namespace vangogh {

struct AdamWConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// Global L2 norm over the gradients of trainable parameters; rescales them in
// place when the norm exceeds max_norm. Returns the pre-clip norm.
template <class T>
double clip_grad_norm(ParameterStore<T>& store, double max_norm) {
  double sq = 0.0;
  for (auto& e : store.entries()) {
    if (!e.var.requires_grad() || !e.var.grad().allocated()) continue;
    for (T g : e.var.grad().span()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& e : store.entries()) {
      if (!e.var.requires_grad() || !e.var.grad().allocated()) continue;
      for (T& g : e.var.mutable_grad().span()) g *= scale;
    }
  }
  return norm;
}

// Adam with decoupled weight decay. Only parameters that currently require
// grad are touched; frozen parameters keep their exact bit pattern.
template <class T>
class AdamW {
 public:
  struct Slot {
    Tensor<T> m, v;
  };

  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParameterStore<T>& store) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& e : store.entries()) {
      if (!e.var.requires_grad() || !e.var.grad().allocated()) continue;
      auto& slot = slots_[e.name];
      if (!slot.m.allocated()) {
        slot.m = Tensor<T>(e.var.shape());
        slot.v = Tensor<T>(e.var.shape());
      }
      auto& p = e.var.mutable_value();
      const auto& g = e.var.grad();
      for (int64_t i = 0; i < p.numel(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double m = cfg_.beta1 * static_cast<double>(slot.m[i]) + (1.0 - cfg_.beta1) * gi;
        const double v = cfg_.beta2 * static_cast<double>(slot.v[i]) + (1.0 - cfg_.beta2) * gi * gi;
        slot.m[i] = static_cast<T>(m);
        slot.v[i] = static_cast<T>(v);
        const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        double pi = static_cast<double>(p[i]);
        pi -= cfg_.lr * (update + cfg_.weight_decay * pi);
        p[i] = static_cast<T>(pi);
      }
    }
  }

  AdamWConfig& config() noexcept { return cfg_; }
  int64_t steps() const noexcept { return t_; }
  void set_steps(int64_t t) noexcept { t_ = t; }
  std::unordered_map<std::string, Slot>& slots() noexcept { return slots_; }
  const std::unordered_map<std::string, Slot>& slots() const noexcept { return slots_; }

 private:
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::unordered_map<std::string, Slot> slots_;
};

}  // namespace vangogh
