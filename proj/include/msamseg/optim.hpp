#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "msamseg/layers.hpp"

namespace msamseg {

struct OptimState {
  double lr = 7e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  /// false replaces (g - m)^2 with g^2, which is Adam.
  bool belief = true;
  /// Reject non-finite gradients with NumericalError.
  bool guarded = true;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, s;  // one entry per parameter tensor
};

/// One AdaBelief update for every (param, grad) pair. State buffers are
/// created on the first call and must keep matching shapes afterwards.
void adabelief_step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads,
                    OptimState& state);

/// Convenience wrapper over a model's parameter list.
class AdaBelief {
 public:
  AdaBelief(ParameterList<float> params, OptimState state);

  void step();
  double lr() const { return state_.lr; }
  void set_lr(double lr) { state_.lr = lr; }
  const OptimState& state() const { return state_; }

 private:
  ParameterList<float> params_;
  OptimState state_;
};

/// Reduce-on-plateau over a metric where lower is better.
struct SchedulerState {
  double factor = 0.91;
  double min_lr = 5e-7;
  std::size_t patience = 10;
  double best = 0.0;
  bool has_best = false;
  std::size_t stale = 0;
};

/// Returns the learning rate to use next.
double scheduler_step(double metric, double lr, SchedulerState& state);

}  // namespace msamseg
