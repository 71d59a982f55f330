#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "msamseg/tensor.hpp"

namespace msamseg {

struct GradCheckOptions {
  double step = 1e-5;      // central-difference half width
  double rel_tol = 1e-4;
  double abs_floor = 1e-7;  // |a - n| <= max(rel_tol * max(|a|, |n|), abs_floor)
  std::size_t instances = 20;
  std::size_t max_coords = 0;  // per instance; 0 checks every coordinate
  /// A mismatch is retried at step/4 and step/16 (counted as refined when
  /// one matches). Otherwise it is skipped as a kink inside the step when
  /// the one-sided differences disagree by at least the mismatch; the check
  /// fails if more than this share is skipped.
  double max_skipped_share = 0.05;
  std::uint64_t seed = 2024;
};

struct GradCheckResult {
  std::string name;
  std::size_t instances = 0;
  std::size_t coordinates = 0;
  std::size_t skipped = 0;
  std::size_t refined = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  std::string worst;  // description of the worst coordinate
  bool passed = false;
};

/// `f` must be a deterministic scalar function of the data held by `inputs`
/// (shared handles). Gradients of every input are compared against central
/// differences computed by perturbing each coordinate in place.
GradCheckResult check_gradients(const std::string& name, const std::function<Tensor<double>()>& f,
                                const std::vector<Tensor<double>>& inputs, const GradCheckOptions& options,
                                std::uint64_t coord_seed = 0);

/// Merges per-instance results into one line.
void merge_result(GradCheckResult& into, const GradCheckResult& part);

enum class GradScope { all_ops, msam, unet };

GradScope parse_grad_scope(std::string_view name);

struct GradCase {
  std::string name;
  /// Builds inputs for one random instance and returns the scalar function.
  std::function<std::pair<std::function<Tensor<double>()>, std::vector<Tensor<double>>>(std::uint64_t seed)> make;
  std::size_t max_coords = 0;
};

std::vector<GradCase> gradcheck_cases(GradScope scope);

/// Runs every case of `scope` over `options.instances` seeded instances.
std::vector<GradCheckResult> run_gradcheck(GradScope scope, const GradCheckOptions& options);

}  // namespace msamseg
