#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "msamseg/tensor.hpp"

namespace msamseg {

enum class Mode { train, eval };

/// How a parameter is filled when a model is initialized.
enum class InitKind { fan_in_normal, zeros, ones };

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
  InitKind init = InitKind::zeros;
  std::size_t fan_in = 1;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

template <typename T>
using BufferList = std::vector<NamedBuffer<T>>;

/// Deterministic generator for one named parameter: the same (seed, name)
/// always yields the same stream, independent of what else the model holds.
std::mt19937_64 parameter_rng(std::uint64_t seed, const std::string& name);

template <typename T>
void initialize_parameter(NamedParameter<T>& param, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Functional ops. Image tensors are (N, C, H, W); rank-3 (C, H, W) inputs are
// accepted wherever a batch axis is optional and keep their rank.

/// Stride-1 convolution with "same" padding: (k-1)/2 before, the rest after.
/// `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Dilated single-channel convolution along the last axis with symmetric zero
/// padding dilation*(k-1)/2; every leading index is an independent sequence.
template <typename T>
Tensor<T> conv1d_dilated(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t dilation);

/// max(1, ceil(i/2)) for the supported odd sizes 1..11.
int dilation_for_kernel(int kernel);

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, double eps);

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                     double momentum, double eps);

/// Non-overlapping max pooling. Ragged borders are padded by replication,
/// so the output extent is ceil(extent / window).
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t window = 2);

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor = 2);

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, std::mt19937_64& rng);

/// Softmax over the channel axis (axis 1 when batched, axis 0 otherwise).
template <typename T>
Tensor<T> channel_softmax(const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// ---------------------------------------------------------------------------
// Layers

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, bool with_bias);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParameterList<T>& params, const std::string& prefix) const;
  std::size_t parameter_count() const;

  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  Tensor<T> weight;  // (out, in, k, k)
  Tensor<T> bias;    // (out) or undefined
};

template <typename T>
class Conv1dLayer {
 public:
  Conv1dLayer() = default;
  /// Throws ConfigError for even kernel sizes.
  Conv1dLayer(std::size_t kernel, std::size_t dilation);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParameterList<T>& params, const std::string& prefix) const;
  std::size_t padding() const { return dilation * (kernel - 1) / 2; }

  std::size_t kernel = 1;
  std::size_t dilation = 1;
  Tensor<T> weight;  // (k)
  Tensor<T> bias;    // (1)
};

enum class NormKind { batch, instance };

template <typename T>
class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(NormKind kind, std::size_t channels, double eps = 1e-5, double momentum = 0.1);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  void collect(ParameterList<T>& params, const std::string& prefix) const;
  void collect_buffers(BufferList<T>& buffers, const std::string& prefix) const;

  NormKind kind = NormKind::instance;
  std::size_t channels = 0;
  double eps = 1e-5;
  double momentum = 0.1;
  Tensor<T> gamma, beta;                   // batch kind only
  Tensor<T> running_mean, running_var;     // batch kind only
};

}  // namespace msamseg
