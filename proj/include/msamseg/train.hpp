#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msamseg/checkpoint.hpp"
#include "msamseg/hsi_data.hpp"
#include "msamseg/metrics.hpp"
#include "msamseg/optim.hpp"

namespace msamseg {

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  std::size_t accum_steps = 1;
  std::uint64_t seed = 1;
  double lr = 7e-4;
  std::size_t patience = 10;
  std::size_t eval_batch = 8;
  /// Train with evaluation-mode norms and no dropout.
  bool frozen_norm = false;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct Batch {
  Tensor<float> images;  // (N, C, H, W), each cube min-max normalized
  std::vector<std::uint8_t> labels;
};

Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices);

/// Loss and metrics over `indices`, evaluated `batch_size` scenes at a time.
MetricsReport evaluate(UNetModel<float>& model, const Dataset& dataset, const std::vector<std::size_t>& indices,
                       const LossConfig& loss, std::size_t batch_size);

/// Adds d(mean loss over `indices`)/d(params) into the parameter gradients,
/// running micro-batches of `micro_batch` scenes. Returns the mean loss.
double accumulate_gradients(UNetModel<float>& model, const Dataset& dataset, std::span<const std::size_t> indices,
                            std::size_t micro_batch, const LossConfig& loss, Mode mode);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  MetricsReport val;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::optional<std::size_t> best_epoch;
  double best_miou = 0.0;
  Checkpoint best;  // meaningful when best_epoch is set
};

/// Trains in place. NumericalError on a non-finite loss.
TrainResult train(UNetModel<float>& model, const Dataset& dataset, const TrainConfig& config, const LossConfig& loss,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// epoch,train_loss,val_loss,val_mIoU,val_mF1,lr
std::string history_csv(const std::vector<EpochRecord>& history);

}  // namespace msamseg
