#include "msamseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

namespace msamseg {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (accum_steps == 0) throw ConfigError("accum_steps must be positive");
  if (eval_batch == 0) throw ConfigError("eval_batch must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (patience == 0) throw ConfigError("patience must be positive");
}

Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("a batch needs at least one scene");
  const auto& first = dataset.scenes.at(indices[0]).cube;
  const std::size_t c = first.channels, h = first.height, w = first.width;
  std::vector<float> values(indices.size() * c * h * w);
  Batch batch;
  batch.labels.reserve(indices.size() * h * w);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& scene = dataset.scenes.at(indices[b]);
    if (scene.cube.channels != c || scene.cube.height != h || scene.cube.width != w) {
      throw ShapeError("scenes in one batch must share extents");
    }
    const auto norm = minmax_normalize(scene.cube);
    std::memcpy(values.data() + b * c * h * w, norm.values.data(), c * h * w * sizeof(float));
    batch.labels.insert(batch.labels.end(), scene.mask.labels.begin(), scene.mask.labels.end());
  }
  batch.images = Tensor<float>({indices.size(), c, h, w}, std::move(values));
  return batch;
}

MetricsReport evaluate(UNetModel<float>& model, const Dataset& dataset, const std::vector<std::size_t>& indices,
                       const LossConfig& loss, std::size_t batch_size) {
  if (indices.empty()) throw ShapeError("nothing to evaluate");
  NoGradGuard no_grad;
  const std::size_t k = model.config().num_classes;
  ConfusionMatrix cm(k);
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, indices.size() - start);
    const auto batch = make_batch(dataset, std::span(indices).subspan(start, n));
    const auto logits = model.forward(batch.images, Mode::eval);
    const std::size_t plane = logits.dim(2) * logits.dim(3);
    const auto pred = predict_labels(logits.data(), n, k, plane);
    cm.accumulate(pred, batch.labels, loss.ignore_label);
    // Per-scene losses so the mean does not depend on batch_size.
    for (std::size_t b = 0; b < n; ++b) {
      std::span<const std::uint8_t> lab(batch.labels.data() + b * plane, plane);
      if (std::all_of(lab.begin(), lab.end(), [&](auto l) { return l == loss.ignore_label; })) continue;
      std::vector<float> one(logits.data().begin() + static_cast<std::ptrdiff_t>(b * k * plane),
                             logits.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * k * plane));
      Tensor<float> slice({k, logits.dim(2), logits.dim(3)}, std::move(one));
      loss_sum += combined_loss(slice, lab, loss).item();
      ++loss_count;
    }
  }
  return make_report(cm, loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0);
}

double accumulate_gradients(UNetModel<float>& model, const Dataset& dataset, std::span<const std::size_t> indices,
                            std::size_t micro_batch, const LossConfig& loss, Mode mode) {
  double total = 0.0;
  for (std::size_t start = 0; start < indices.size(); start += micro_batch) {
    const std::size_t n = std::min(micro_batch, indices.size() - start);
    const auto batch = make_batch(dataset, indices.subspan(start, n));
    const auto logits = model.forward(batch.images, mode);
    const auto l = combined_loss(logits, batch.labels, loss);
    const double value = l.item();
    if (!std::isfinite(value)) throw NumericalError("non-finite loss " + std::to_string(value));
    const double share = static_cast<double>(n) / static_cast<double>(indices.size());
    total += share * value;
    scale(l, share).backward();
  }
  return total;
}

TrainResult train(UNetModel<float>& model, const Dataset& dataset, const TrainConfig& config, const LossConfig& loss,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  loss.validate(model.config().num_classes);
  TrainResult result;
  if (config.epochs == 0) return result;
  if (dataset.train.empty()) throw ConfigError("dataset has no training scenes");
  if (dataset.val.empty()) throw ConfigError("dataset has no validation scenes");
  if (dataset.num_classes != model.config().num_classes) {
    throw ConfigError("dataset has " + std::to_string(dataset.num_classes) + " classes, model " +
                      std::to_string(model.config().num_classes));
  }

  OptimState state;
  state.lr = config.lr;
  AdaBelief optimizer(model.parameters(), state);
  SchedulerState sched;
  sched.patience = config.patience;
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order = dataset.train;
  const std::size_t step_size = config.batch_size * config.accum_steps;
  const Mode mode = config.frozen_norm ? Mode::eval : Mode::train;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += step_size, ++step) {
      const std::size_t n = std::min(step_size, order.size() - start);
      model.zero_grad();
      double step_loss = 0.0;
      try {
        step_loss = accumulate_gradients(model, dataset, std::span(order).subspan(start, n), config.batch_size, loss, mode);
        optimizer.step();
      } catch (const NumericalError& e) {
        throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + ": " + e.what());
      }
      loss_sum += step_loss * static_cast<double>(n);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.lr = optimizer.lr();
    rec.val = evaluate(model, dataset, dataset.val, loss, config.eval_batch);
    if (!std::isfinite(rec.val.loss)) {
      throw NumericalError("validation loss is not finite after epoch " + std::to_string(epoch));
    }
    optimizer.set_lr(scheduler_step(rec.val.loss, optimizer.lr(), sched));

    if (!result.best_epoch || rec.val.miou > result.best_miou) {
      result.best_epoch = epoch;
      result.best_miou = rec.val.miou;
      std::ostringstream miou;
      miou.precision(17);
      miou << rec.val.miou;
      result.best = capture_checkpoint(model, {{"best_epoch", std::to_string(epoch)},
                                               {"best_val_miou", miou.str()},
                                               {"seed", std::to_string(config.seed)}});
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out.precision(10);
  out << "epoch,train_loss,val_loss,val_mIoU,val_mF1,lr\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val.loss << ',' << r.val.miou << ',' << r.val.mf1 << ','
        << r.lr << '\n';
  }
  return out.str();
}

}  // namespace msamseg
