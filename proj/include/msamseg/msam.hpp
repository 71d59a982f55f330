#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "msamseg/layers.hpp"

namespace msamseg {

/// Spectral kernel sizes of one attention module, written "(i0;i1;i2)".
/// Single-kernel ablation configs keep one active branch and are written
/// "(i)".
struct MsamConfig {
  std::array<int, 3> kernels{1, 1, 1};
  int active_branches = 3;

  static MsamConfig triple(int k0, int k1, int k2);
  static MsamConfig single(int k);
  /// Accepts "(1;5;9)", "(5)" and the bracketed "[1;5;9]" spelling.
  static MsamConfig parse(std::string_view text);

  std::vector<int> active_kernels() const;
  std::string notation() const;
  bool is_multi_scale() const;

  bool operator==(const MsamConfig&) const = default;
};

/// The 32 ablation combinations: 20 strictly increasing triples from
/// {1,3,5,7,9,11}, then the 6 repeated triples, then the 6 single kernels.
std::vector<MsamConfig> enumerate_kernel_combos();

/// The eight combinations carried into the depth comparison.
std::vector<MsamConfig> followup_kernel_combos();

/// sum over branches of (i+1) + (3+1).
std::size_t msam_parameter_count(const MsamConfig& config);

template <typename T>
class MsamModule {
 public:
  struct Branch {
    Conv1dLayer<T> primary;    // kernel i, dilation max(1, ceil(i/2))
    Conv1dLayer<T> secondary;  // kernel 3, dilation 1
  };

  MsamModule() = default;
  MsamModule(const MsamConfig& config, std::size_t channels, double eps = 1e-5);

  /// Y = X * (1 + fuse(branches(X reshaped to spectra))). x is (N,C,H,W) or (C,H,W).
  Tensor<T> forward(const Tensor<T>& x) const;

  /// Per spectrum (last axis): conv -> LeakyReLU -> conv3 -> LeakyReLU.
  Tensor<T> spectral_branch(const Tensor<T>& spectra, std::size_t branch) const;

  /// Sums the branch outputs (each (H*W, C) or (N, H*W, C)), lays the result
  /// out as `image_shape`, instance-normalizes each channel map, applies SiLU.
  Tensor<T> fuse(const std::vector<Tensor<T>>& features, const Shape& image_shape) const;

  void collect(ParameterList<T>& params, const std::string& prefix) const;
  std::size_t parameter_count() const;
  void zero_parameters();

  MsamConfig config;
  std::size_t channels = 0;
  double eps = 1e-5;
  std::vector<Branch> branches;
};

}  // namespace msamseg
