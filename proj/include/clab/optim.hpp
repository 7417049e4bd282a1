// Adam with constant learning rate and zero weight decay.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "clab/core.hpp"

namespace clab::optim {

struct AdamConfig {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moment buffers are kept in double so f32 and f64 parameter sets share the
// same optimizer arithmetic.
class AdamState {
 public:
  explicit AdamState(std::size_t total_params) : m_(total_params, 0.0), v_(total_params, 0.0) {}

  void begin_step() { ++t_; }

  std::int64_t steps() const { return t_; }

  template <typename Real>
  void update(std::size_t offset, std::span<Real> params, std::span<const Real> grads,
              const AdamConfig& cfg) {
    require(params.size() == grads.size(), "AdamState::update: size mismatch");
    require(offset + params.size() <= m_.size(), "AdamState::update: state overflow");
    require(t_ >= 1, "AdamState::update: begin_step not called");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grads[i]);
      double& m = m_[offset + i];
      double& v = v_[offset + i];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      const double step = cfg.learning_rate * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      params[i] = static_cast<Real>(static_cast<double>(params[i]) - step);
    }
  }

 private:
  std::vector<double> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace clab::optim
