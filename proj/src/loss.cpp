#include "msamseg/loss.hpp"

#include <algorithm>
#include <cmath>

namespace msamseg {

void LossConfig::validate(std::size_t num_classes) const {
  if (!class_weights.empty() && class_weights.size() != num_classes) {
    throw ConfigError("class_weights holds " + std::to_string(class_weights.size()) + " values for " +
                      std::to_string(num_classes) + " classes");
  }
  for (double w : class_weights) {
    if (!std::isfinite(w) || w <= 0.0) throw ConfigError("class weights must be finite and positive");
  }
  if (!(ce_weight >= 0.0) || !(dice_weight >= 0.0)) throw ConfigError("loss term weights must be non-negative");
  if (!(dice_epsilon > 0.0)) throw ConfigError("dice epsilon must be positive");
}

double LossConfig::weight_for(std::size_t cls) const {
  return class_weights.empty() ? 1.0 : class_weights[cls];
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels, const LossConfig& config) {
  if (logits.rank() != 3 && logits.rank() != 4) {
    throw ShapeError("loss expects (N,K,H,W) or (K,H,W) logits, got " + shape_to_string(logits.shape()));
  }
  const bool batched = logits.rank() == 4;
  const std::size_t n = batched ? logits.dim(0) : 1;
  const std::size_t k = logits.dim(batched ? 1 : 0);
  const std::size_t hw = logits.dim(batched ? 2 : 1) * logits.dim(batched ? 3 : 2);
  if (labels.size() != n * hw) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match logits " +
                     shape_to_string(logits.shape()));
  }
  config.validate(k);
  for (auto l : labels) {
    if (l != config.ignore_label && l >= k) {
      throw ShapeError("label " + std::to_string(l) + " outside 0.." + std::to_string(k - 1));
    }
  }

  const auto z = logits.data();
  auto grad = std::make_shared<std::vector<T>>(z.size(), T(0));
  std::vector<double> prob(k * hw);
  double total = 0.0;
  std::size_t valid_images = 0;

  // First pass: count images with labeled pixels for the batch mean.
  for (std::size_t b = 0; b < n; ++b) {
    const auto* lab = labels.data() + b * hw;
    if (std::any_of(lab, lab + hw, [&](std::uint8_t l) { return l != config.ignore_label; })) ++valid_images;
  }
  if (valid_images == 0) throw ShapeError("every pixel is unlabeled; the loss is undefined");
  const double image_scale = 1.0 / static_cast<double>(valid_images);

  for (std::size_t b = 0; b < n; ++b) {
    const T* zb = z.data() + b * k * hw;
    const auto* lab = labels.data() + b * hw;
    T* gb = grad->data() + b * k * hw;

    double weight_sum = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
      if (lab[p] != config.ignore_label) weight_sum += config.weight_for(lab[p]);
    }
    if (weight_sum == 0.0) continue;

    // softmax and weighted CE
    double ce = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = zb[p];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, static_cast<double>(zb[c * hw + p]));
      double denom = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double e = std::exp(static_cast<double>(zb[c * hw + p]) - mx);
        prob[c * hw + p] = e;
        denom += e;
      }
      for (std::size_t c = 0; c < k; ++c) prob[c * hw + p] /= denom;
      if (lab[p] == config.ignore_label) continue;
      const double w = config.weight_for(lab[p]);
      const double log_p = static_cast<double>(zb[lab[p] * hw + p]) - mx - std::log(denom);
      ce -= w * log_p;
    }
    ce /= weight_sum;

    // dice over classes present in this image's labels
    std::vector<double> inter(k, 0.0), psum(k, 0.0), gsum(k, 0.0);
    for (std::size_t p = 0; p < hw; ++p) {
      if (lab[p] == config.ignore_label) continue;
      for (std::size_t c = 0; c < k; ++c) psum[c] += prob[c * hw + p];
      inter[lab[p]] += prob[lab[p] * hw + p];
      gsum[lab[p]] += 1.0;
    }
    std::size_t present = 0;
    for (std::size_t c = 0; c < k; ++c) present += gsum[c] > 0.0 ? 1 : 0;
    const double eps = config.dice_epsilon;
    double dice_mean = 0.0;
    std::vector<double> dice_den(k, 0.0), dice_num(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
      if (gsum[c] == 0.0) continue;
      dice_num[c] = 2.0 * inter[c] + eps;
      dice_den[c] = psum[c] + gsum[c] + eps;
      dice_mean += dice_num[c] / dice_den[c];
    }
    dice_mean /= static_cast<double>(present);
    total += image_scale * (config.ce_weight * ce + config.dice_weight * (1.0 - dice_mean));

    // d loss / d logits
    std::vector<double> dprob(k);
    for (std::size_t p = 0; p < hw; ++p) {
      if (lab[p] == config.ignore_label) continue;
      const std::size_t y = lab[p];
      for (std::size_t c = 0; c < k; ++c) {
        if (gsum[c] == 0.0) {
          dprob[c] = 0.0;
          continue;
        }
        const double g = c == y ? 1.0 : 0.0;
        const double d_dice = (2.0 * g * dice_den[c] - dice_num[c]) / (dice_den[c] * dice_den[c]);
        dprob[c] = -config.dice_weight * d_dice / static_cast<double>(present);
      }
      double dot = 0.0;
      for (std::size_t c = 0; c < k; ++c) dot += prob[c * hw + p] * dprob[c];
      const double ce_scale = config.ce_weight * config.weight_for(y) / weight_sum;
      for (std::size_t c = 0; c < k; ++c) {
        const double pc = prob[c * hw + p];
        const double d_ce = ce_scale * (pc - (c == y ? 1.0 : 0.0));
        const double d_dice = pc * (dprob[c] - dot);
        gb[c * hw + p] = static_cast<T>(image_scale * (d_ce + d_dice));
      }
    }
  }

  return make_result<T>(Shape{1}, std::vector<T>{static_cast<T>(total)}, "combined_loss", {logits},
                        [grad](GradNode<T>& node, std::span<const T> g) {
    auto gl = node.input_grad(0);
    for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g[0] * (*grad)[i];
  });
}

template Tensor<float> combined_loss<float>(const Tensor<float>&, std::span<const std::uint8_t>, const LossConfig&);
template Tensor<double> combined_loss<double>(const Tensor<double>&, std::span<const std::uint8_t>, const LossConfig&);

}  // namespace msamseg
