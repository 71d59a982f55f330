#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "msamseg/tensor.hpp"

namespace msamseg {

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct LossConfig {
  double ce_weight = 1.0;
  double dice_weight = 1.0;
  std::vector<double> class_weights;  // empty means all ones
  std::uint8_t ignore_label = kIgnoreLabel;
  double dice_epsilon = 1e-6;

  /// Throws ConfigError unless the weights suit `num_classes`.
  void validate(std::size_t num_classes) const;
  double weight_for(std::size_t cls) const;
  bool operator==(const LossConfig&) const = default;
};

/// Class-weighted cross-entropy plus soft dice, per image, averaged over the
/// images of the batch that hold at least one labeled pixel.
///
/// Per image: CE is the weighted mean of -log p(true class) over labeled
/// pixels (weight of the true class per pixel); dice is
/// 1 - mean over classes present in the labels of (2I + eps) / (P + G + eps)
/// computed on softmax probabilities of labeled pixels.
///
/// logits: (N, K, H, W) or (K, H, W); labels: N*H*W values.
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels, const LossConfig& config);

}  // namespace msamseg
