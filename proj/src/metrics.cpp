#include "msamseg/metrics.hpp"

#include <cmath>
#include <limits>

namespace msamseg {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

void ConfusionMatrix::accumulate(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth,
                                 std::uint8_t ignore) {
  if (predicted.size() != truth.size()) {
    throw ShapeError("prediction holds " + std::to_string(predicted.size()) + " labels, truth " +
                     std::to_string(truth.size()));
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == ignore) continue;
    if (truth[i] >= k_ || predicted[i] >= k_) {
      throw ShapeError("label outside 0.." + std::to_string(k_ - 1) + " at pixel " + std::to_string(i));
    }
    ++counts_[truth[i] * k_ + predicted[i]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw ShapeError("cannot merge confusion matrices of different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::true_positives(std::size_t c) const { return at(c, c); }

std::uint64_t ConfusionMatrix::false_positives(std::size_t c) const {
  std::uint64_t s = 0;
  for (std::size_t t = 0; t < k_; ++t) {
    if (t != c) s += at(t, c);
  }
  return s;
}

std::uint64_t ConfusionMatrix::false_negatives(std::size_t c) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < k_; ++p) {
    if (p != c) s += at(c, p);
  }
  return s;
}

bool ConfusionMatrix::class_present(std::size_t c) const {
  return true_positives(c) + false_positives(c) + false_negatives(c) > 0;
}

namespace {

template <typename F>
double mean_over_present(const ConfusionMatrix& cm, F score) {
  if (cm.num_classes() == 0 || cm.total() == 0) throw ShapeError("confusion matrix is empty");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    if (!cm.class_present(c)) continue;
    sum += score(static_cast<double>(cm.true_positives(c)), static_cast<double>(cm.false_positives(c)),
                 static_cast<double>(cm.false_negatives(c)));
    ++n;
  }
  return sum / static_cast<double>(n);
}

}  // namespace

double miou(const ConfusionMatrix& cm) {
  return mean_over_present(cm, [](double tp, double fp, double fn) { return tp / (tp + fp + fn); });
}

double mf1(const ConfusionMatrix& cm) {
  return mean_over_present(cm, [](double tp, double fp, double fn) { return 2.0 * tp / (2.0 * tp + fp + fn); });
}

std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
  std::vector<double> out(cm.num_classes(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    if (!cm.class_present(c)) continue;
    const double tp = static_cast<double>(cm.true_positives(c));
    out[c] = tp / (tp + static_cast<double>(cm.false_positives(c) + cm.false_negatives(c)));
  }
  return out;
}

std::vector<std::uint8_t> predict_labels(std::span<const float> logits, std::size_t batch, std::size_t num_classes,
                                         std::size_t plane) {
  if (logits.size() != batch * num_classes * plane) throw ShapeError("logit count does not match extents");
  if (num_classes == 0 || num_classes > 255) throw ShapeError("class count must lie in 1..255");
  std::vector<std::uint8_t> out(batch * plane);
  for (std::size_t b = 0; b < batch; ++b) {
    const float* z = logits.data() + b * num_classes * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < num_classes; ++c) {
        if (z[c * plane + p] > z[best * plane + p]) best = c;
      }
      out[b * plane + p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

MetricsReport make_report(const ConfusionMatrix& cm, double loss) {
  MetricsReport r;
  r.loss = loss;
  r.miou = miou(cm);
  r.mf1 = mf1(cm);
  r.class_iou = per_class_iou(cm);
  r.confusion = cm;
  return r;
}

}  // namespace msamseg
