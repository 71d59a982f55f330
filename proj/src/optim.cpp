#include "msamseg/optim.hpp"

#include <algorithm>
#include <cmath>

namespace msamseg {

void adabelief_step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads,
                    OptimState& state) {
  if (params.size() != grads.size()) throw ShapeError("parameter and gradient lists differ in length");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.s.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size() || state.m[i].size() != params[i].size()) {
      throw ShapeError("parameter " + std::to_string(i) + " does not match its gradient or state");
    }
    if (state.guarded) {
      for (float g : grads[i]) {
        if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter " + std::to_string(i));
      }
    }
  }

  ++state.step;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& s = state.s[i];
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double g = grads[i][j];
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      const double dev = state.belief ? g - m[j] : g;
      s[j] = b2 * s[j] + (1.0 - b2) * dev * dev;
      const double m_hat = m[j] / c1;
      const double s_hat = s[j] / c2;
      params[i][j] = static_cast<float>(params[i][j] - state.lr * m_hat / (std::sqrt(s_hat) + state.eps));
    }
  }
}

AdaBelief::AdaBelief(ParameterList<float> params, OptimState state)
    : params_(std::move(params)), state_(std::move(state)) {}

void AdaBelief::step() {
  std::vector<std::span<float>> p;
  std::vector<std::span<const float>> g;
  std::vector<std::vector<float>> zero;  // parameters that saw no gradient
  zero.reserve(params_.size());
  for (auto& np : params_) {
    p.push_back(np.tensor.mutable_data());
    if (np.tensor.has_grad()) {
      g.push_back(np.tensor.grad());
    } else {
      zero.emplace_back(np.tensor.numel(), 0.0f);
      g.push_back(zero.back());
    }
  }
  adabelief_step(p, g, state_);
}

double scheduler_step(double metric, double lr, SchedulerState& state) {
  if (!std::isfinite(metric)) throw NumericalError("scheduler received a non-finite metric");
  if (!state.has_best || metric < state.best) {
    state.best = metric;
    state.has_best = true;
    state.stale = 0;
    return lr;
  }
  ++state.stale;
  if (state.stale >= state.patience) {
    state.stale = 0;
    return std::min(lr, std::max(lr * state.factor, state.min_lr));
  }
  return lr;
}

}  // namespace msamseg
