#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "msamseg/unet.hpp"

namespace msamseg {

/// Multiply-accumulates count 2 FLOPs, bias adds 1, batch norm 2 per element,
/// instance norm 5 per element, residual add / attention product 1 each.
/// Activations, pooling, upsampling, concatenation and dropout are free.
inline constexpr const char* kFlopConvention =
    "MAC=2 FLOPs; bias add=1; batchnorm=2/elem; instancenorm=5/elem; attention add+mul=2/elem; "
    "activations/pooling/upsampling excluded; floor pooling";

struct FlopCount {
  std::uint64_t flops = 0;
  std::uint64_t macs = 0;

  FlopCount& operator+=(const FlopCount& o) {
    flops += o.flops;
    macs += o.macs;
    return *this;
  }
};

FlopCount conv2d_flops(std::size_t in, std::size_t out, std::size_t kernel, std::size_t height, std::size_t width,
                       bool bias);
/// One attention module on a (channels, height, width) map.
FlopCount msam_flops(const MsamConfig& config, std::size_t channels, std::size_t height, std::size_t width);

/// Whole-network estimate for a single (in_channels, height, width) input.
/// Ragged extents pool with floor and decoders run at the skip extents.
FlopCount estimate_flops(const UNetConfig& config, std::size_t height, std::size_t width);

std::size_t count_params(const UNetModel<float>& model);

struct LatencyStats {
  std::size_t height = 0;
  std::size_t width = 0;
  double median_ms = 0.0;
  double iqr_ms = 0.0;
  std::size_t runs = 0;
  std::size_t warmup = 0;
  std::vector<double> samples_ms;
};

/// Quantile with linear interpolation between order statistics.
double quantile(std::vector<double> values, double q);

/// Times single-item eval-mode forwards; runs >= 30 and warmup >= 5.
LatencyStats measure_latency(UNetModel<float>& model, std::size_t height, std::size_t width, std::size_t runs = 30,
                             std::size_t warmup = 5, std::uint64_t seed = 0);

struct ProfileReport {
  std::string dataset;
  UNetConfig config;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t parameter_count = 0;
  FlopCount flops;
  std::uint64_t model_size_bytes = 0;
  std::optional<LatencyStats> latency;
};

/// Latency runs at the extents rounded up to multiples of 16.
ProfileReport profile_model(UNetModel<float>& model, const std::string& dataset, std::size_t height, std::size_t width,
                            std::size_t runs, std::size_t warmup);

/// Report columns followed by exact counts and the convention.
std::string profile_csv(const std::vector<ProfileReport>& reports);

}  // namespace msamseg
