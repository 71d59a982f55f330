#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "msamseg/loss.hpp"

namespace msamseg {

/// K x K pixel counts, rows = truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes = 0);

  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
  void set(std::size_t truth, std::size_t pred, std::uint64_t count) { counts_[truth * k_ + pred] = count; }
  std::uint64_t total() const;

  /// Adds every pixel whose truth is not `ignore`; throws ShapeError on
  /// out-of-range labels or length mismatch.
  void accumulate(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth,
                  std::uint8_t ignore = kIgnoreLabel);
  void merge(const ConfusionMatrix& other);

  std::uint64_t true_positives(std::size_t c) const;
  std::uint64_t false_positives(std::size_t c) const;
  std::uint64_t false_negatives(std::size_t c) const;
  /// A class counts toward the means when TP + FP + FN > 0.
  bool class_present(std::size_t c) const;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

/// Mean over present classes; throw ShapeError on an empty matrix.
double miou(const ConfusionMatrix& cm);
double mf1(const ConfusionMatrix& cm);
/// IoU per class, NaN for classes that are not present.
std::vector<double> per_class_iou(const ConfusionMatrix& cm);

/// Argmax over the channel axis of (N, K, H, W) or (K, H, W) logits.
std::vector<std::uint8_t> predict_labels(std::span<const float> logits, std::size_t batch, std::size_t num_classes,
                                         std::size_t plane);

struct MetricsReport {
  double loss = 0.0;
  double miou = 0.0;
  double mf1 = 0.0;
  std::vector<double> class_iou;
  ConfusionMatrix confusion;
};

MetricsReport make_report(const ConfusionMatrix& cm, double loss);

}  // namespace msamseg
