#pragma once

#include <string>

#include "msamseg/hsi_data.hpp"
#include "msamseg/train.hpp"
#include "msamseg/unet.hpp"

namespace msamseg {

/// Plain-text experiment description:
///
///   [data]    dataset (directory; empty = synthetic), scenes, split_seed and
///             the synthetic scene keys (classes, channels, height, width,
///             metameric_pairs "1-2,3-4", metameric_floor, jitter,
///             noise_sigma, min_radius, max_radius, border, class_shares,
///             signature_seed, scene_seed)
///   [model]   in_channels, num_classes, base_depth, placement, msam_kernels,
///             dropout
///   [loss]    ce_weight, dice_weight, class_weights ("auto" or a list),
///             dice_epsilon, ignore_label
///   [train]   epochs, batch_size, accum_steps, seed, lr, patience,
///             eval_batch, frozen_norm
///   [output]  out_dir
///
/// '#' starts a comment. Unknown sections or keys are errors.
struct ExperimentConfig {
  std::string dataset;
  SceneSpec scene = metameric_benchmark_spec();
  std::size_t scene_count = 200;
  std::uint64_t split_seed = 1;
  UNetConfig model;
  LossConfig loss;
  bool auto_class_weights = true;
  TrainConfig train;
  std::string out_dir = "out";

  ExperimentConfig();

  std::string serialize() const;
  /// ConfigError messages carry the offending line number.
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  void validate() const;

  bool operator==(const ExperimentConfig&) const = default;
};

}  // namespace msamseg
