#pragma once
// Adam with bias correction.  Moment slots are allocated for every parameter
// in registry order (frozen ones included, held at zero) so the optimizer
// state has a stable checkpoint layout regardless of which branches are
// trainable in a given run.

#include <cstdint>
#include <vector>

#include "refseg/core/autograd.hpp"

namespace refseg::core {

template <typename T>
struct AdamConfig {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(0);
};

template <typename T>
class Adam {
 public:
  Adam(const ParameterSet<T>& params, AdamConfig<T> cfg);

  // One update over all trainable parameters using their accumulated grads.
  // lr_now overrides cfg.lr (warmup/cosine schedule); moments of frozen
  // parameters are left untouched.
  void step(ParameterSet<T>& params, T lr_now);

  const AdamConfig<T>& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_count_; }
  void set_step_count(std::uint64_t t) { step_count_ = t; }

  std::size_t slot_count() const { return m_.size(); }
  std::vector<T>& moment1(std::size_t i) { return m_[i]; }
  std::vector<T>& moment2(std::size_t i) { return v_[i]; }

 private:
  AdamConfig<T> cfg_;
  std::uint64_t step_count_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace refseg::core
