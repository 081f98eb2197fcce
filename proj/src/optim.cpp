#include "mrfn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mrfn {

double cosine_lr(std::int64_t step, std::int64_t total, double lr_init, double lr_final) {
  if (total <= 0) return lr_final;
  const double t = static_cast<double>(std::clamp<std::int64_t>(step, 0, total)) / total;
  return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + std::cos(std::numbers::pi * t));
}

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, AdamOptions options)
    : params_(std::move(params)), opt_(options) {
  for (const auto& [name, p] : params_) {
    m_.push_back(Tensor::zeros(p.shape(), p.dtype()));
    v_.push_back(Tensor::zeros(p.shape(), p.dtype()));
  }
}

void Adam::step(double lr) {
  ++steps_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    if (!p.has_grad()) continue;
    const Tensor g = p.grad();
    dispatch(p.dtype(), [&]<typename T>() {
      auto w = p.data<T>();
      auto m = m_[i].data<T>();
      auto v = v_[i].data<T>();
      const auto gd = g.data<T>();
      const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
      const T step_size = static_cast<T>(lr / c1);
      const T inv_c2 = static_cast<T>(1.0 / c2);
      const T eps = static_cast<T>(opt_.eps);
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = b1 * m[k] + (T(1) - b1) * gd[k];
        v[k] = b2 * v[k] + (T(1) - b2) * gd[k] * gd[k];
        w[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
      }
    });
  }
}

void Adam::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void Adam::export_state(TensorTable& table) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    table.put("optim/m/" + params_[i].first, m_[i]);
    table.put("optim/v/" + params_[i].first, v_[i]);
  }
  table.put("optim/step", Tensor::from_vector({1}, {static_cast<double>(steps_)}));
}

void Adam::import_state(const TensorTable& table) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].copy_from(table.get("optim/m/" + params_[i].first));
    v_[i].copy_from(table.get("optim/v/" + params_[i].first));
  }
  steps_ = static_cast<std::int64_t>(std::llround(table.get("optim/step").item()));
}

}  // namespace mrfn
