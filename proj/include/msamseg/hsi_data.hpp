#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msamseg/loss.hpp"

namespace msamseg {

/// Reflectance cube, channel-major then row-major: index (c * H + y) * W + x.
struct HsiCube {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;
  std::vector<double> wavelengths_nm;  // empty or one per channel

  float at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
  std::size_t plane() const { return height * width; }
  /// Throws DataError on inconsistent extents or non-finite values.
  void validate() const;
  bool operator==(const HsiCube&) const = default;
};

struct LabelMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  void validate(std::size_t num_classes) const;
  bool operator==(const LabelMask&) const = default;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// (x - min) / (max - min) over the whole cube; DataError on a constant cube.
HsiCube minmax_normalize(const HsiCube& cube);

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SceneSpec {
  std::size_t num_classes = 5;
  std::size_t channels = 15;
  std::size_t height = 64;
  std::size_t width = 64;
  /// Explicit signatures (num_classes x channels); generated from
  /// signature_seed when empty.
  std::vector<std::vector<double>> signatures;
  std::vector<double> class_shares;  // empty = uniform
  std::vector<std::pair<std::size_t, std::size_t>> metameric_pairs;
  double metameric_floor = 0.25;  // minimum L2 distance between pair signatures
  double jitter = 0.1;            // per-pixel amplitude factor drawn from [1 - j, 1 + j]
  double noise_sigma = 0.01;
  std::size_t min_radius = 4;
  std::size_t max_radius = 14;
  std::size_t border = 0;  // unlabeled frame width; 0 picks the smallest >= 5 %
  std::uint64_t signature_seed = 7;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const SceneSpec&) const = default;
};

/// The default benchmark setting: K = 5, C = 15, 64 x 64, pairs (1,2), (3,4).
SceneSpec metameric_benchmark_spec();

/// Mean of each of three contiguous, near-equal band groups.
std::vector<double> three_band_projection(const std::vector<double>& spectrum);

/// Class signatures, either spec.signatures or generated so that every
/// metameric pair shares its 3-band projection. DataError if infeasible.
std::vector<std::vector<double>> scene_signatures(const SceneSpec& spec);

struct Scene {
  HsiCube cube;
  LabelMask mask;
};

Scene generate_scene(const SceneSpec& spec);

// ---------------------------------------------------------------------------
// File formats

class CubeFormatError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, malformed_header, unsupported_dtype, extent_overflow, truncated, trailing_bytes };
  CubeFormatError(Kind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

void write_cube(const std::string& path, const HsiCube& cube);
HsiCube read_cube(const std::string& path);
void write_mask(const std::string& path, const LabelMask& mask);
LabelMask read_mask(const std::string& path);

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  std::size_t num_classes = 0;
  std::vector<std::string> ids;
  std::vector<Scene> scenes;
  std::vector<std::size_t> train, val, test;  // indices into scenes

  const std::vector<std::size_t>& split(const std::string& name) const;
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

/// Seeded shuffle, then 70 / 15 / 15 (rounded, test takes the rest).
SplitIndices make_splits(std::size_t count, std::uint64_t seed);

struct ClassStatistics {
  std::vector<std::uint64_t> counts;
  std::uint64_t unlabeled = 0;
  std::vector<double> frequencies;
  std::vector<double> weights;

  std::string to_csv() const;
};

/// Median-frequency weights median(freq) / freq_c clipped to [0.1, 10]; the
/// median runs over classes that occur, absent classes get weight 1.
ClassStatistics class_statistics(const std::vector<const LabelMask*>& masks, std::size_t num_classes);

/// Writes scene_NNNN.hsicube / .hsimask, manifest.txt and class_statistics.csv.
void write_dataset(const std::string& dir, const Dataset& dataset);
Dataset load_dataset(const std::string& dir);

/// Generates `count` scenes with seeds spec.seed + i and splits them.
Dataset generate_dataset(const SceneSpec& spec, std::size_t count, std::uint64_t split_seed);

// ---------------------------------------------------------------------------
// Relabeling

/// Source label id -> common class id; anything unmapped becomes 255.
struct ClassMap {
  std::string name;
  std::vector<std::string> class_names;  // target classes in id order
  std::map<std::uint8_t, std::uint8_t> mapping;

  LabelMask apply(const LabelMask& mask) const;
  std::uint8_t map(std::uint8_t source) const;

  /// Both map onto Road, Vegetation, Sky, Metal, Infrastructure, Pedestrians,
  /// Road Marking. Source ids follow each dataset's native class order.
  static ClassMap hsi_drive();
  static ClassMap hyko_vis();
  /// Lines "source=target" with integer ids; '#' comments allowed.
  static ClassMap parse(const std::string& text);
};

/// Loads every <id>.hsicube with a matching <id>.hsimask from `source_dir`,
/// remaps labels and splits by `seed`. Pass the result to write_dataset.
Dataset import_dataset(const std::string& source_dir, std::size_t num_classes,
                       const std::optional<ClassMap>& class_map, std::uint64_t seed);

}  // namespace msamseg
