#pragma once

#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "msamseg/config.hpp"
#include "msamseg/profiler.hpp"

namespace msamseg {

/// Loads `config.dataset`, or generates the synthetic scenes in memory.
Dataset prepare_dataset(const ExperimentConfig& config);

/// Loss settings for training: class weights from the training split when
/// `config.auto_class_weights` is set.
LossConfig resolve_loss(const ExperimentConfig& config, const Dataset& dataset);

/// Writes `count` scenes plus manifest (and statistics when count > 0).
void cmd_gen_data(const SceneSpec& spec, std::size_t count, std::uint64_t split_seed, const std::string& out_dir);

/// Builds the model from config (seeded by train.seed) and trains it.
TrainResult train_experiment(const ExperimentConfig& config, const Dataset& dataset, std::ostream* log = nullptr);

struct TrainOutcome {
  TrainResult result;
  std::string checkpoint_path;  // empty when no epoch ran
  std::string metrics_path;
};

/// Trains and writes best.ckpt, metrics.csv and config.ini under out_dir.
TrainOutcome cmd_train(const ExperimentConfig& config, std::ostream* log = nullptr);

struct EvalOutcome {
  MetricsReport report;
  std::vector<std::string> rendered;  // written image paths
};

/// Evaluates a checkpoint on one split. Predicted (and true) masks are
/// rendered as PPM files when `render_dir` is non-empty.
EvalOutcome cmd_eval(const Checkpoint& checkpoint, const Dataset& dataset, const std::string& split,
                     const std::string& render_dir, std::size_t batch_size = 8);

/// Fixed palette for class ids 0..6; unlabeled pixels are black.
inline constexpr unsigned char kPalette[7][3] = {{128, 64, 128}, {107, 142, 35}, {70, 130, 180}, {220, 20, 60},
                                                 {190, 153, 153}, {255, 215, 0},  {255, 255, 255}};

/// Binary PPM (P6) of a label map.
std::string render_ppm(std::span<const std::uint8_t> labels, std::size_t height, std::size_t width);

struct GridEntry {
  Placement placement = Placement::none;
  std::optional<MsamConfig> kernels;
};

/// "full": the baseline plus every placement x every kernel combination
/// (161 rows); "followup": skip placement x the eight follow-up kernels;
/// "placements": the baseline plus each placement with (1;5;9).
std::vector<GridEntry> ablation_grid(std::string_view name);

struct AblationRow {
  std::size_t index = 0;
  GridEntry entry;
  double miou = 0.0;
  double mf1 = 0.0;
  std::size_t params = 0;
  std::size_t epochs = 0;
  std::string status = "ok";
};

/// Worker count from MSAMSEG_THREADS (default: hardware concurrency).
std::size_t worker_threads();

/// Trains every grid entry with seed = base seed + row index. Failures are
/// recorded in the row status. When `out_dir` is set each row is written
/// to out_dir/rows/row_NNNN.csv and the merged leaderboard.csv follows.
std::vector<AblationRow> cmd_ablate(const ExperimentConfig& base, const std::vector<GridEntry>& grid,
                                    std::size_t threads, const std::string& out_dir, std::ostream* log = nullptr);

/// Sorted by mIoU (descending), failed rows last.
std::string leaderboard_csv(std::vector<AblationRow> rows);

}  // namespace msamseg
