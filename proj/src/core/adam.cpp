#include "refseg/core/adam.hpp"

#include <cmath>

#include "refseg/kernels/kernels.hpp"

namespace refseg::core {

template <typename T>
Adam<T>::Adam(const ParameterSet<T>& params, AdamConfig<T> cfg) : cfg_(cfg) {
  m_.resize(params.count());
  v_.resize(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) {
    m_[i].assign(params.at(i).size(), T(0));
    v_[i].assign(params.at(i).size(), T(0));
  }
}

template <typename T>
void Adam<T>::step(ParameterSet<T>& params, T lr_now) {
  ++step_count_;
  const T bc1 = T(1) / (T(1) - std::pow(cfg_.beta1, T(step_count_)));
  const T bc2 = T(1) / (T(1) - std::pow(cfg_.beta2, T(step_count_)));
  const auto& K = kern::active<T>();
  for (std::size_t i = 0; i < params.count(); ++i) {
    Parameter<T>& p = params.at(i);
    if (!p.trainable) continue;
    K.adam_step(p.value.data(), p.grad.data(), m_[i].data(), v_[i].data(),
                p.size(), lr_now, cfg_.beta1, cfg_.beta2, cfg_.eps, bc1, bc2,
                cfg_.weight_decay);
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace refseg::core
