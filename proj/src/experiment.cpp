#include "msamseg/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

namespace msamseg {

namespace fs = std::filesystem;

namespace {

std::string fmt17(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace

Dataset prepare_dataset(const ExperimentConfig& config) {
  config.validate();
  if (!config.dataset.empty()) return load_dataset(config.dataset);
  return generate_dataset(config.scene, config.scene_count, config.split_seed);
}

LossConfig resolve_loss(const ExperimentConfig& config, const Dataset& dataset) {
  LossConfig loss = config.loss;
  if (config.auto_class_weights && !dataset.train.empty()) {
    std::vector<const LabelMask*> masks;
    for (auto i : dataset.train) masks.push_back(&dataset.scenes[i].mask);
    loss.class_weights = class_statistics(masks, dataset.num_classes).weights;
  }
  return loss;
}

void cmd_gen_data(const SceneSpec& spec, std::size_t count, std::uint64_t split_seed, const std::string& out_dir) {
  write_dataset(out_dir, generate_dataset(spec, count, split_seed));
}

TrainResult train_experiment(const ExperimentConfig& config, const Dataset& dataset, std::ostream* log) {
  config.validate();
  if (dataset.num_classes != config.model.num_classes) {
    throw ConfigError("dataset has " + std::to_string(dataset.num_classes) + " classes, [model] num_classes is " +
                      std::to_string(config.model.num_classes));
  }
  if (!dataset.scenes.empty() && dataset.scenes.front().cube.channels != config.model.in_channels) {
    throw ConfigError("dataset has " + std::to_string(dataset.scenes.front().cube.channels) +
                      " channels, [model] in_channels is " + std::to_string(config.model.in_channels));
  }
  const auto loss = resolve_loss(config, dataset);
  auto model = UNetModel<float>::build(config.model, config.train.seed);
  auto on_epoch = [&](const EpochRecord& r) {
    if (!log) return;
    *log << config.model.label() << " epoch " << r.epoch << " train_loss " << std::setprecision(5) << r.train_loss
         << " val_loss " << r.val.loss << " val_mIoU " << r.val.miou << " lr " << r.lr << '\n';
  };
  auto result = train(model, dataset, config.train, loss, on_epoch);
  if (result.best_epoch) {
    std::string weights;
    for (std::size_t i = 0; i < loss.class_weights.size(); ++i) weights += (i ? "," : "") + fmt17(loss.class_weights[i]);
    result.best.metadata["class_weights"] = weights;
    result.best.metadata["ce_weight"] = fmt17(loss.ce_weight);
    result.best.metadata["dice_weight"] = fmt17(loss.dice_weight);
  }
  return result;
}

TrainOutcome cmd_train(const ExperimentConfig& config, std::ostream* log) {
  const auto dataset = prepare_dataset(config);
  TrainOutcome out;
  out.result = train_experiment(config, dataset, log);
  fs::create_directories(config.out_dir);
  write_text(fs::path(config.out_dir) / "config.ini", config.serialize());
  out.metrics_path = (fs::path(config.out_dir) / "metrics.csv").string();
  write_text(out.metrics_path, history_csv(out.result.history));
  if (out.result.best_epoch) {
    out.checkpoint_path = (fs::path(config.out_dir) / "best.ckpt").string();
    write_checkpoint(out.checkpoint_path, out.result.best);
  }
  return out;
}

namespace {

LossConfig loss_from_metadata(const Checkpoint& ckpt) {
  LossConfig loss;
  auto get = [&](const char* key) -> std::optional<std::string> {
    auto it = ckpt.metadata.find(key);
    if (it == ckpt.metadata.end() || it->second.empty()) return std::nullopt;
    return it->second;
  };
  if (auto w = get("class_weights")) {
    std::stringstream ss(*w);
    std::string item;
    while (std::getline(ss, item, ',')) loss.class_weights.push_back(std::stod(item));
  }
  if (auto w = get("ce_weight")) loss.ce_weight = std::stod(*w);
  if (auto w = get("dice_weight")) loss.dice_weight = std::stod(*w);
  return loss;
}

}  // namespace

EvalOutcome cmd_eval(const Checkpoint& checkpoint, const Dataset& dataset, const std::string& split,
                     const std::string& render_dir, std::size_t batch_size) {
  if (dataset.num_classes != checkpoint.config.num_classes) {
    throw ConfigError("checkpoint predicts " + std::to_string(checkpoint.config.num_classes) +
                      " classes but the dataset has " + std::to_string(dataset.num_classes));
  }
  const auto& indices = dataset.split(split);
  if (indices.empty()) throw ConfigError("split '" + split + "' is empty");
  if (dataset.scenes[indices.front()].cube.channels != checkpoint.config.in_channels) {
    throw ConfigError("checkpoint expects " + std::to_string(checkpoint.config.in_channels) +
                      " channels but the dataset has " + std::to_string(dataset.scenes[indices.front()].cube.channels));
  }
  auto model = model_from_checkpoint(checkpoint);
  const auto loss = loss_from_metadata(checkpoint);
  EvalOutcome out;
  out.report = evaluate(model, dataset, indices, loss, batch_size);
  if (render_dir.empty()) return out;

  fs::create_directories(render_dir);
  NoGradGuard no_grad;
  for (auto i : indices) {
    const std::size_t one[] = {i};
    const auto batch = make_batch(dataset, one);
    const auto logits = model.forward(batch.images, Mode::eval);
    const auto& mask = dataset.scenes[i].mask;
    const auto pred = predict_labels(logits.data(), 1, checkpoint.config.num_classes, mask.height * mask.width);
    const auto pred_path = fs::path(render_dir) / (dataset.ids[i] + "_pred.ppm");
    const auto truth_path = fs::path(render_dir) / (dataset.ids[i] + "_truth.ppm");
    write_text(pred_path, render_ppm(pred, mask.height, mask.width));
    write_text(truth_path, render_ppm(mask.labels, mask.height, mask.width));
    out.rendered.push_back(pred_path.string());
    out.rendered.push_back(truth_path.string());
  }
  return out;
}

std::string render_ppm(std::span<const std::uint8_t> labels, std::size_t height, std::size_t width) {
  if (labels.size() != height * width) throw ShapeError("label count does not match the image extents");
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (auto l : labels) {
    if (l == kIgnoreLabel) {
      out.append(3, '\0');
    } else if (l < 7) {
      out.append(reinterpret_cast<const char*>(kPalette[l]), 3);
    } else {
      out.append(3, static_cast<char>(96));
    }
  }
  return out;
}

std::vector<GridEntry> ablation_grid(std::string_view name) {
  std::vector<GridEntry> grid;
  if (name == "full") {
    grid.push_back({Placement::none, std::nullopt});
    for (auto p : placements()) {
      if (p == Placement::none) continue;
      for (const auto& k : enumerate_kernel_combos()) grid.push_back({p, k});
    }
  } else if (name == "followup") {
    for (const auto& k : followup_kernel_combos()) grid.push_back({Placement::skip_connection, k});
  } else if (name == "placements") {
    for (auto p : placements()) {
      grid.push_back({p, p == Placement::none ? std::nullopt : std::optional(MsamConfig::triple(1, 5, 9))});
    }
  } else {
    throw ConfigError("unknown grid '" + std::string(name) + "' (expected full, followup or placements)");
  }
  return grid;
}

std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MSAMSEG_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v < 1) throw ConfigError("");
      n = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError(std::string("MSAMSEG_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return n;
}

namespace {

std::string row_csv(const AblationRow& r) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed << placement_name(r.entry.placement) << ','
      << (r.entry.kernels ? r.entry.kernels->notation() : std::string("none")) << ',' << r.miou << ',' << r.mf1 << ','
      << r.params << ',' << r.epochs << ',' << r.status;
  return out.str();
}

}  // namespace

std::vector<AblationRow> cmd_ablate(const ExperimentConfig& base, const std::vector<GridEntry>& grid,
                                    std::size_t threads, const std::string& out_dir, std::ostream* log) {
  if (grid.empty()) throw ConfigError("ablation grid is empty");
  base.validate();
  const auto dataset = prepare_dataset(base);
  std::vector<AblationRow> rows(grid.size());
  if (!out_dir.empty()) fs::create_directories(fs::path(out_dir) / "rows");
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;

  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      AblationRow& row = rows[i];
      row.index = i;
      row.entry = grid[i];
      try {
        ExperimentConfig cfg = base;
        cfg.model.placement = grid[i].placement;
        cfg.model.msam_kernels = grid[i].kernels;
        cfg.train.seed = base.train.seed + i;
        row.params = analytic_parameter_count(cfg.model);
        const auto result = train_experiment(cfg, dataset, nullptr);
        row.epochs = result.history.size();
        if (result.best_epoch) {
          row.miou = result.best_miou;
          row.mf1 = result.history[*result.best_epoch - 1].val.mf1;
        }
      } catch (const std::exception& e) {
        row.status = std::string("failed: ") + e.what();
        std::replace(row.status.begin(), row.status.end(), ',', ';');
        std::replace(row.status.begin(), row.status.end(), '\n', ' ');
      }
      if (!out_dir.empty()) {
        std::ostringstream name;
        name << "row_" << std::setw(4) << std::setfill('0') << i << ".csv";
        write_text(fs::path(out_dir) / "rows" / name.str(), row_csv(row) + "\n");
      }
      if (log) {
        std::lock_guard lock(log_mutex);
        *log << "[" << i + 1 << "/" << grid.size() << "] " << row_csv(row) << '\n';
      }
    }
  };

  const std::size_t n = std::max<std::size_t>(1, std::min(threads, grid.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  if (!out_dir.empty()) write_text(fs::path(out_dir) / "leaderboard.csv", leaderboard_csv(rows));
  return rows;
}

std::string leaderboard_csv(std::vector<AblationRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const AblationRow& a, const AblationRow& b) {
    const bool ok_a = a.status == "ok", ok_b = b.status == "ok";
    if (ok_a != ok_b) return ok_a;
    if (a.miou != b.miou) return a.miou > b.miou;
    return a.index < b.index;
  });
  std::string out = "placement,kernels,mIoU,mF1,params,epochs,status\n";
  for (const auto& r : rows) out += row_csv(r) + "\n";
  return out;
}

}  // namespace msamseg
