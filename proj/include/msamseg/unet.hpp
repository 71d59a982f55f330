#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "msamseg/msam.hpp"

namespace msamseg {

/// Where attention modules are inserted. `none` is the plain skip-connection
/// baseline (UNet-SC).
enum class Placement {
  none,
  between_cbas,
  after_cbas,
  skip_connection,
  between_and_after,
  between_and_skip,
};

/// Baseline first, then the five integrations, in a fixed order.
std::vector<Placement> placements();
std::string placement_name(Placement placement);
Placement parse_placement(std::string_view name);
bool places_between(Placement placement);
bool places_after(Placement placement);
bool places_skip(Placement placement);

inline constexpr std::size_t kEncoderLevels = 4;
inline constexpr std::size_t kSpatialDivisor = 16;

struct UNetConfig {
  std::size_t in_channels = 15;
  std::size_t num_classes = 7;
  std::size_t base_depth = 16;  // 16, 32 or 64
  Placement placement = Placement::none;
  std::optional<MsamConfig> msam_kernels;
  double dropout_rate = 0.1;

  std::array<std::size_t, kEncoderLevels> depths() const;
  /// "UNet16-SC" or "UNet16-MSAM(1;5;9)" (placement suffixed unless skip).
  std::string label() const;
  void validate() const;

  /// key=value lines; inverse of from_text.
  std::string to_text() const;
  static UNetConfig from_text(const std::string& text);

  bool operator==(const UNetConfig&) const = default;
};

/// Closed-form parameter count for a configuration.
std::size_t analytic_parameter_count(const UNetConfig& config);

template <typename T>
struct CbaBlock {
  Conv2dLayer<T> conv;  // 3x3, no bias (batch norm follows)
  NormLayer<T> norm;

  CbaBlock() = default;
  CbaBlock(std::size_t in, std::size_t out);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  void collect(ParameterList<T>& params, const std::string& prefix) const;
  void collect_buffers(BufferList<T>& buffers, const std::string& prefix) const;
};

template <typename T>
struct EncoderBlock {
  CbaBlock<T> first;
  std::optional<MsamModule<T>> between;
  CbaBlock<T> second;
  std::optional<MsamModule<T>> after;
};

template <typename T>
struct DecoderBlock {
  Conv2dLayer<T> up;  // 2x2 after nearest upsampling, halves the channels
  CbaBlock<T> first;
  std::optional<MsamModule<T>> between;
  CbaBlock<T> second;
  std::optional<MsamModule<T>> after;
};

template <typename T>
class UNetModel {
 public:
  static UNetModel build(const UNetConfig& config, std::uint64_t seed);

  /// x is (N, in_channels, H, W) or unbatched; H and W must be multiples of 16.
  Tensor<T> forward(const Tensor<T>& x, Mode mode);

  ParameterList<T> parameters() const;
  BufferList<T> buffers() const;
  std::size_t parameter_count() const;
  std::vector<MsamModule<T>*> msam_modules();
  void zero_msam_parameters();
  void zero_grad();

  const UNetConfig& config() const { return config_; }

  std::array<EncoderBlock<T>, kEncoderLevels> encoders;
  CbaBlock<T> bottleneck_first;
  CbaBlock<T> bottleneck_second;
  std::array<DecoderBlock<T>, kEncoderLevels> decoders;  // indexed by level
  std::array<std::optional<MsamModule<T>>, kEncoderLevels> skips;
  Conv2dLayer<T> head;

 private:
  UNetConfig config_;
  std::mt19937_64 dropout_rng_;
};

}  // namespace msamseg
