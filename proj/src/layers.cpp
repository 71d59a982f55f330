#include "msamseg/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>

namespace msamseg {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ImageDims {
  std::size_t n, c, h, w;
  bool batched;
  std::size_t plane() const { return h * w; }
};

template <typename T>
ImageDims image_dims(const Tensor<T>& x, const char* op) {
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2), false};
  throw ShapeError(std::string(op) + " expects (N,C,H,W) or (C,H,W), got " + shape_to_string(x.shape()));
}

Shape image_shape(const ImageDims& d, std::size_t c, std::size_t h, std::size_t w) {
  if (d.batched) return {d.n, c, h, w};
  return {c, h, w};
}

// Fills col (C*k*k, N*H*W) for a same-padded stride-1 convolution.
template <typename T>
void im2col(const T* x, const ImageDims& d, std::size_t k, T* col) {
  const std::size_t pad = (k - 1) / 2;
  const std::size_t hw = d.plane();
  const std::size_t row_len = d.n * hw;
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * row_len;
        const long di = static_cast<long>(ki) - static_cast<long>(pad);
        const long dj = static_cast<long>(kj) - static_cast<long>(pad);
        for (std::size_t b = 0; b < d.n; ++b) {
          const T* plane = x + (b * d.c + c) * hw;
          T* dst = row + b * hw;
          for (std::size_t i = 0; i < d.h; ++i) {
            const long si = static_cast<long>(i) + di;
            T* out = dst + i * d.w;
            if (si < 0 || si >= static_cast<long>(d.h)) {
              std::fill(out, out + d.w, T(0));
              continue;
            }
            const T* src = plane + si * d.w;
            for (std::size_t j = 0; j < d.w; ++j) {
              const long sj = static_cast<long>(j) + dj;
              out[j] = (sj < 0 || sj >= static_cast<long>(d.w)) ? T(0) : src[sj];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ImageDims& d, std::size_t k, T* gx) {
  const std::size_t pad = (k - 1) / 2;
  const std::size_t hw = d.plane();
  const std::size_t row_len = d.n * hw;
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * row_len;
        const long di = static_cast<long>(ki) - static_cast<long>(pad);
        const long dj = static_cast<long>(kj) - static_cast<long>(pad);
        for (std::size_t b = 0; b < d.n; ++b) {
          T* plane = gx + (b * d.c + c) * hw;
          const T* src = row + b * hw;
          for (std::size_t i = 0; i < d.h; ++i) {
            const long si = static_cast<long>(i) + di;
            if (si < 0 || si >= static_cast<long>(d.h)) continue;
            T* dst = plane + si * d.w;
            const T* in = src + i * d.w;
            for (std::size_t j = 0; j < d.w; ++j) {
              const long sj = static_cast<long>(j) + dj;
              if (sj >= 0 && sj < static_cast<long>(d.w)) dst[sj] += in[j];
            }
          }
        }
      }
    }
  }
}

// Per-thread scratch buffers for conv temporaries; contents are unspecified.
template <typename T>
T* scratch(std::size_t slot, std::size_t n) {
  thread_local std::array<std::vector<T>, 4> buffers;
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

// (N, C, HW) <-> (C, N*HW)
template <typename T>
void batch_to_channel_major(const T* src, std::size_t n, std::size_t c, std::size_t hw, T* dst) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(src + (b * c + ch) * hw, hw, dst + ch * n * hw + b * hw);
}

template <typename T>
void channel_major_to_batch(const T* src, std::size_t n, std::size_t c, std::size_t hw, T* dst) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(src + ch * n * hw + b * hw, hw, dst + (b * c + ch) * hw);
}

}  // namespace

std::mt19937_64 parameter_rng(std::uint64_t seed, const std::string& name) {
  // FNV-1a over the name, mixed with the model seed.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

template <typename T>
void initialize_parameter(NamedParameter<T>& param, std::uint64_t seed) {
  auto values = param.tensor.mutable_data();
  switch (param.init) {
    case InitKind::zeros: std::fill(values.begin(), values.end(), T(0)); break;
    case InitKind::ones: std::fill(values.begin(), values.end(), T(1)); break;
    case InitKind::fan_in_normal: {
      auto rng = parameter_rng(seed, param.name);
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(param.fan_in)));
      for (auto& v : values) v = static_cast<T>(normal(rng));
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const auto d = image_dims(x, "conv2d");
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d weight must be (out,in,k,k), got " + shape_to_string(weight.shape()));
  }
  const std::size_t cout = weight.dim(0), cin = weight.dim(1), k = weight.dim(2);
  if (cin != d.c) {
    throw ShapeError("conv2d: input has " + std::to_string(d.c) + " channels, layer expects " +
                     std::to_string(cin));
  }
  if (bias.defined() && bias.shape() != Shape{cout}) {
    throw ShapeError("conv2d bias must be (" + std::to_string(cout) + "), got " + shape_to_string(bias.shape()));
  }
  const std::size_t hw = d.plane();
  const std::size_t cols = d.n * hw;
  const std::size_t kdim = cin * k * k;

  T* col = scratch<T>(0, kdim * cols);
  if (k == 1) {
    batch_to_channel_major(x.data().data(), d.n, cin, hw, col);
  } else {
    im2col(x.data().data(), d, k, col);
  }
  T* out_cm = scratch<T>(1, cout * cols);
  {
    Eigen::Map<const RowMat<T>> w(weight.data().data(), cout, kdim);
    Eigen::Map<const RowMat<T>> c(col, kdim, cols);
    Eigen::Map<RowMat<T>> o(out_cm, cout, cols);
    o.noalias() = w * c;
    if (bias.defined()) {
      const auto b = bias.data();
      for (std::size_t oc = 0; oc < cout; ++oc) o.row(oc).array() += b[oc];
    }
  }
  std::vector<T> out(cout * cols);
  channel_major_to_batch(out_cm, d.n, cout, hw, out.data());

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result<T>(image_shape(d, cout, d.h, d.w), std::move(out), "conv2d", inputs,
                        [d, cout, k, kdim, cols, hw, has_bias](GradNode<T>& node, std::span<const T> g) {
    T* g_cm = scratch<T>(0, cout * cols);
    batch_to_channel_major(g.data(), d.n, cout, hw, g_cm);
    Eigen::Map<const RowMat<T>> gy(g_cm, cout, cols);
    const auto& xv = node.inputs[0]->data;
    const auto& wv = node.inputs[1]->data;
    auto gw = node.input_grad(1);
    auto gx = node.input_grad(0);

    if (has_bias) {
      auto gb = node.input_grad(2);
      if (!gb.empty()) {
        for (std::size_t oc = 0; oc < cout; ++oc) {
          const T* row = g_cm + oc * cols;
          double acc = 0;
          for (std::size_t i = 0; i < cols; ++i) acc += row[i];
          gb[oc] += static_cast<T>(acc);
        }
      }
    }
    if (!gw.empty()) {
      T* col = scratch<T>(1, kdim * cols);
      if (k == 1) {
        batch_to_channel_major(xv.data(), d.n, d.c, hw, col);
      } else {
        im2col(xv.data(), d, k, col);
      }
      Eigen::Map<const RowMat<T>> c(col, kdim, cols);
      Eigen::Map<RowMat<T>> gwm(gw.data(), cout, kdim);
      gwm.noalias() += gy * c.transpose();
    }
    if (!gx.empty()) {
      T* gcol = scratch<T>(2, kdim * cols);
      Eigen::Map<const RowMat<T>> w(wv.data(), cout, kdim);
      Eigen::Map<RowMat<T>> gc(gcol, kdim, cols);
      gc.noalias() = w.transpose() * gy;
      if (k == 1) {
        T* tmp = scratch<T>(3, d.n * d.c * hw);
        channel_major_to_batch(gcol, d.n, d.c, hw, tmp);
        for (std::size_t i = 0; i < d.n * d.c * hw; ++i) gx[i] += tmp[i];
      } else {
        col2im_add(gcol, d, k, gx.data());
      }
    }
  });
}

// ---------------------------------------------------------------------------
// conv1d along the last axis

template <typename T>
Tensor<T> conv1d_dilated(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t dilation) {
  if (x.rank() < 1) throw ShapeError("conv1d_dilated needs at least one axis");
  if (weight.rank() != 1) throw ShapeError("conv1d weight must be (k), got " + shape_to_string(weight.shape()));
  const std::size_t k = weight.dim(0);
  if (k % 2 == 0) throw ConfigError("conv1d kernel size must be odd, got " + std::to_string(k));
  if (dilation < 1) throw ConfigError("conv1d dilation must be >= 1");
  if (bias.defined() && bias.numel() != 1) throw ShapeError("conv1d bias must hold one value");

  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  const long pad = static_cast<long>(dilation * (k - 1) / 2);
  const auto xv = x.data();
  const auto wv = weight.data();
  const T b = bias.defined() ? bias.data()[0] : T(0);

  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * len;
    T* dst = out.data() + r * len;
    for (std::size_t t = 0; t < len; ++t) {
      T acc = b;
      for (std::size_t j = 0; j < k; ++j) {
        const long s = static_cast<long>(t) + static_cast<long>(j * dilation) - pad;
        if (s >= 0 && s < static_cast<long>(len)) acc += wv[j] * src[s];
      }
      dst[t] = acc;
    }
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result<T>(x.shape(), std::move(out), "conv1d_dilated", inputs,
                        [k, dilation, pad, len, rows, has_bias](GradNode<T>& node, std::span<const T> g) {
    const auto& xv = node.inputs[0]->data;
    const auto& wv = node.inputs[1]->data;
    auto gx = node.input_grad(0);
    auto gw = node.input_grad(1);
    std::span<T> gb;
    if (has_bias) gb = node.input_grad(2);
    double gbias = 0;
    std::vector<double> gwacc(k, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* src = xv.data() + r * len;
      const T* gr = g.data() + r * len;
      T* gxr = gx.empty() ? nullptr : gx.data() + r * len;
      for (std::size_t t = 0; t < len; ++t) {
        const T gt = gr[t];
        gbias += gt;
        for (std::size_t j = 0; j < k; ++j) {
          const long s = static_cast<long>(t) + static_cast<long>(j * dilation) - pad;
          if (s < 0 || s >= static_cast<long>(len)) continue;
          gwacc[j] += static_cast<double>(gt) * src[s];
          if (gxr) gxr[s] += gt * wv[j];
        }
      }
    }
    if (!gw.empty()) {
      for (std::size_t j = 0; j < k; ++j) gw[j] += static_cast<T>(gwacc[j]);
    }
    if (!gb.empty()) gb[0] += static_cast<T>(gbias);
  });
}

int dilation_for_kernel(int kernel) {
  if (kernel < 1 || kernel > 11 || kernel % 2 == 0) {
    throw ConfigError("spectral kernel size must be an odd value in 1..11, got " + std::to_string(kernel));
  }
  return std::max(1, (kernel + 1) / 2);
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, double eps) {
  const auto d = image_dims(x, "instance_norm");
  const std::size_t m = d.plane();
  if (m == 0) throw ShapeError("instance_norm needs a non-empty spatial map");
  const std::size_t groups = d.n * d.c;
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const T* src = xv.data() + gi * m;
    double acc = 0;
    for (std::size_t i = 0; i < m; ++i) acc += src[i];
    const T mu = static_cast<T>(acc / static_cast<double>(m));
    acc = 0;
    for (std::size_t i = 0; i < m; ++i) acc += static_cast<double>(src[i] - mu) * (src[i] - mu);
    const T var = static_cast<T>(acc / static_cast<double>(m));
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[gi] = is;
    for (std::size_t i = 0; i < m; ++i) {
      const T v = (src[i] - mu) * is;
      (*xhat)[gi * m + i] = v;
      out[gi * m + i] = v;
    }
  }
  return make_result<T>(x.shape(), std::move(out), "instance_norm", {x},
                        [xhat, inv_std, m, groups](GradNode<T>& node, std::span<const T> g) {
    auto gx = node.input_grad(0);
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const T* gg = g.data() + gi * m;
      const T* xh = xhat->data() + gi * m;
      double acc_g = 0, acc_gx = 0;
      for (std::size_t i = 0; i < m; ++i) {
        acc_g += gg[i];
        acc_gx += static_cast<double>(gg[i]) * xh[i];
      }
      const T sum_g = static_cast<T>(acc_g), sum_gx = static_cast<T>(acc_gx);
      const T scale = (*inv_std)[gi] / static_cast<T>(m);
      for (std::size_t i = 0; i < m; ++i) {
        gx[gi * m + i] += scale * (static_cast<T>(m) * gg[i] - sum_g - xh[i] * sum_gx);
      }
    }
  });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                     double momentum, double eps) {
  const auto d = image_dims(x, "batch_norm");
  const std::size_t c = d.c, hw = d.plane(), m = d.n * hw;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("batch_norm affine parameters must be (" + std::to_string(c) + ")");
  }
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto rm = running_mean.mutable_data();
  auto rv = running_var.mutable_data();

  std::vector<T> mean(c), inv_std(c);
  if (mode == Mode::train) {
    if (m < 2) throw ShapeError("batch_norm in train mode needs more than one value per channel");
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0;
      for (std::size_t b = 0; b < d.n; ++b) {
        const T* src = xv.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += src[i];
      }
      const T mu = static_cast<T>(acc / static_cast<double>(m));
      acc = 0;
      for (std::size_t b = 0; b < d.n; ++b) {
        const T* src = xv.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += static_cast<double>(src[i] - mu) * (src[i] - mu);
      }
      const T var = static_cast<T>(acc / static_cast<double>(m));
      mean[ch] = mu;
      inv_std[ch] = T(1) / std::sqrt(var + static_cast<T>(eps));
      const T mom = static_cast<T>(momentum);
      rm[ch] = (T(1) - mom) * rm[ch] + mom * mu;
      rv[ch] = (T(1) - mom) * rv[ch] + mom * var * static_cast<T>(m) / static_cast<T>(m - 1);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = rm[ch];
      inv_std[ch] = T(1) / std::sqrt(rv[ch] + static_cast<T>(eps));
    }
  }

  std::vector<T> out(xv.size());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  for (std::size_t b = 0; b < d.n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T v = (xv[base + i] - mean[ch]) * inv_std[ch];
        (*xhat)[base + i] = v;
        out[base + i] = gv[ch] * v + bv[ch];
      }
    }
  }
  const bool batch_stats = mode == Mode::train;
  return make_result<T>(x.shape(), std::move(out), "batch_norm", {x, gamma, beta},
                        [d, c, hw, m, xhat, inv_std, batch_stats](GradNode<T>& node, std::span<const T> g) {
    const auto& gv = node.inputs[1]->data;
    auto gx = node.input_grad(0);
    auto ggamma = node.input_grad(1);
    auto gbeta = node.input_grad(2);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc_g = 0, acc_gx = 0;
      for (std::size_t b = 0; b < d.n; ++b) {
        const std::size_t base = (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          acc_g += g[base + i];
          acc_gx += static_cast<double>(g[base + i]) * (*xhat)[base + i];
        }
      }
      const T sum_g = static_cast<T>(acc_g), sum_gx = static_cast<T>(acc_gx);
      if (!ggamma.empty()) ggamma[ch] += sum_gx;
      if (!gbeta.empty()) gbeta[ch] += sum_g;
      if (gx.empty()) continue;
      if (batch_stats) {
        const T scale = gv[ch] * inv_std[ch] / static_cast<T>(m);
        for (std::size_t b = 0; b < d.n; ++b) {
          const std::size_t base = (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            gx[base + i] += scale * (static_cast<T>(m) * g[base + i] - sum_g - (*xhat)[base + i] * sum_gx);
          }
        }
      } else {
        const T scale = gv[ch] * inv_std[ch];
        for (std::size_t b = 0; b < d.n; ++b) {
          const std::size_t base = (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) gx[base + i] += scale * g[base + i];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Resampling

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t window) {
  if (window < 1) throw ConfigError("maxpool window must be >= 1");
  const auto d = image_dims(x, "maxpool2d");
  const std::size_t oh = (d.h + window - 1) / window, ow = (d.w + window - 1) / window;
  const auto xv = x.data();
  const std::size_t planes = d.n * d.c;
  std::vector<T> out(planes * oh * ow);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * d.h * d.w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (i * window) * d.w + j * window;
        for (std::size_t a = i * window; a < std::min(d.h, (i + 1) * window); ++a) {
          for (std::size_t b = j * window; b < std::min(d.w, (j + 1) * window); ++b) {
            if (src[a * d.w + b] > src[best]) best = a * d.w + b;
          }
        }
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = src[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  const std::size_t in_plane = d.h * d.w, out_plane = oh * ow;
  return make_result<T>(image_shape(d, d.c, oh, ow), std::move(out), "maxpool2d", {x},
                        [argmax, planes, in_plane, out_plane](GradNode<T>& node, std::span<const T> g) {
    auto gx = node.input_grad(0);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t o = 0; o < out_plane; ++o)
        gx[p * in_plane + (*argmax)[p * out_plane + o]] += g[p * out_plane + o];
  });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
  if (factor < 1) throw ConfigError("upsample factor must be >= 1");
  const auto d = image_dims(x, "upsample_nearest");
  const std::size_t oh = d.h * factor, ow = d.w * factor;
  const std::size_t planes = d.n * d.c;
  const auto xv = x.data();
  std::vector<T> out(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * d.h * d.w;
    T* dst = out.data() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) dst[i * ow + j] = src[(i / factor) * d.w + j / factor];
  }
  return make_result<T>(image_shape(d, d.c, oh, ow), std::move(out), "upsample_nearest", {x},
                        [d, planes, oh, ow, factor](GradNode<T>& node, std::span<const T> g) {
    auto gx = node.input_grad(0);
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = g.data() + p * oh * ow;
      T* dst = gx.data() + p * d.h * d.w;
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) dst[(i / factor) * d.w + j / factor] += src[i * ow + j];
    }
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::eval || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = uniform(rng) < rate ? T(0) : keep_scale;
    out[i] = xv[i] * (*mask)[i];
  }
  return make_result<T>(x.shape(), std::move(out), "dropout", {x},
                        [mask](GradNode<T>& node, std::span<const T> g) {
    auto gx = node.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

template <typename T>
Tensor<T> channel_softmax(const Tensor<T>& x) {
  const auto d = image_dims(x, "channel_softmax");
  const std::size_t hw = d.plane(), c = d.c;
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t b = 0; b < d.n; ++b) {
    const T* src = xv.data() + b * c * hw;
    T* dst = out.data() + b * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      T mx = src[p];
      for (std::size_t ch = 1; ch < c; ++ch) mx = std::max(mx, src[ch * hw + p]);
      T total = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T e = std::exp(src[ch * hw + p] - mx);
        dst[ch * hw + p] = e;
        total += e;
      }
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch * hw + p] /= total;
    }
  }
  return make_result<T>(x.shape(), std::move(out), "channel_softmax", {x},
                        [d, hw, c](GradNode<T>& node, std::span<const T> g) {
    const auto& y = node.output.lock()->data;
    auto gx = node.input_grad(0);
    for (std::size_t b = 0; b < d.n; ++b) {
      const std::size_t base = b * c * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        T dot = 0;
        for (std::size_t ch = 0; ch < c; ++ch) dot += y[base + ch * hw + p] * g[base + ch * hw + p];
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t i = base + ch * hw + p;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const auto da = image_dims(a, "concat_channels");
  const auto db = image_dims(b, "concat_channels");
  if (da.batched != db.batched || da.n != db.n || da.h != db.h || da.w != db.w) {
    throw ShapeError("concat_channels: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()));
  }
  const std::size_t hw = da.plane();
  const std::size_t ca = da.c, cb = db.c, ct = ca + cb;
  std::vector<T> out(da.n * ct * hw);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t n = 0; n < da.n; ++n) {
    std::copy_n(av.data() + n * ca * hw, ca * hw, out.data() + n * ct * hw);
    std::copy_n(bv.data() + n * cb * hw, cb * hw, out.data() + n * ct * hw + ca * hw);
  }
  const std::size_t batch = da.n;
  return make_result<T>(image_shape(da, ct, da.h, da.w), std::move(out), "concat_channels", {a, b},
                        [batch, ca, cb, ct, hw](GradNode<T>& node, std::span<const T> g) {
    auto ga = node.input_grad(0);
    auto gb = node.input_grad(1);
    for (std::size_t n = 0; n < batch; ++n) {
      const T* src = g.data() + n * ct * hw;
      if (!ga.empty())
        for (std::size_t i = 0; i < ca * hw; ++i) ga[n * ca * hw + i] += src[i];
      if (!gb.empty())
        for (std::size_t i = 0; i < cb * hw; ++i) gb[n * cb * hw + i] += src[ca * hw + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
Conv2dLayer<T>::Conv2dLayer(std::size_t in, std::size_t out, std::size_t k, bool with_bias)
    : in_channels(in), out_channels(out), kernel(k) {
  if (in == 0 || out == 0 || k == 0) throw ConfigError("conv2d extents must be positive");
  weight = Tensor<T>::zeros({out, in, k, k}, true);
  if (with_bias) bias = Tensor<T>::zeros({out}, true);
}

template <typename T>
Tensor<T> Conv2dLayer<T>::forward(const Tensor<T>& x) const {
  return conv2d(x, weight, bias);
}

template <typename T>
void Conv2dLayer<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  params.push_back({prefix + ".weight", weight, InitKind::fan_in_normal, in_channels * kernel * kernel});
  if (bias.defined()) params.push_back({prefix + ".bias", bias, InitKind::zeros, 1});
}

template <typename T>
std::size_t Conv2dLayer<T>::parameter_count() const {
  return weight.numel() + (bias.defined() ? bias.numel() : 0);
}

template <typename T>
Conv1dLayer<T>::Conv1dLayer(std::size_t k, std::size_t d) : kernel(k), dilation(d) {
  if (k == 0 || k % 2 == 0) throw ConfigError("conv1d kernel size must be odd, got " + std::to_string(k));
  if (d == 0) throw ConfigError("conv1d dilation must be >= 1");
  weight = Tensor<T>::zeros({k}, true);
  bias = Tensor<T>::zeros({1}, true);
}

template <typename T>
Tensor<T> Conv1dLayer<T>::forward(const Tensor<T>& x) const {
  return conv1d_dilated(x, weight, bias, dilation);
}

template <typename T>
void Conv1dLayer<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  params.push_back({prefix + ".weight", weight, InitKind::fan_in_normal, kernel});
  params.push_back({prefix + ".bias", bias, InitKind::zeros, 1});
}

template <typename T>
NormLayer<T>::NormLayer(NormKind k, std::size_t c, double e, double mom)
    : kind(k), channels(c), eps(e), momentum(mom) {
  if (!(eps > 0.0)) throw ConfigError("normalization epsilon must be positive");
  if (kind == NormKind::batch) {
    gamma = Tensor<T>::ones({c}, true);
    beta = Tensor<T>::zeros({c}, true);
    running_mean = Tensor<T>::zeros({c});
    running_var = Tensor<T>::ones({c});
  }
}

template <typename T>
Tensor<T> NormLayer<T>::forward(const Tensor<T>& x, Mode mode) {
  if (kind == NormKind::instance) return instance_norm(x, eps);
  return batch_norm(x, gamma, beta, running_mean, running_var, mode, momentum, eps);
}

template <typename T>
void NormLayer<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  if (kind != NormKind::batch) return;
  params.push_back({prefix + ".gamma", gamma, InitKind::ones, 1});
  params.push_back({prefix + ".beta", beta, InitKind::zeros, 1});
}

template <typename T>
void NormLayer<T>::collect_buffers(BufferList<T>& buffers, const std::string& prefix) const {
  if (kind != NormKind::batch) return;
  buffers.push_back({prefix + ".running_mean", running_mean});
  buffers.push_back({prefix + ".running_var", running_var});
}

#define MSAMSEG_INSTANTIATE(T)                                                                    \
  template void initialize_parameter<T>(NamedParameter<T>&, std::uint64_t);                      \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> conv1d_dilated<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                       std::size_t);                                              \
  template Tensor<T> instance_norm<T>(const Tensor<T>&, double);                                 \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                   Tensor<T>&, Tensor<T>&, Mode, double, double);                 \
  template Tensor<T> maxpool2d<T>(const Tensor<T>&, std::size_t);                                \
  template Tensor<T> upsample_nearest<T>(const Tensor<T>&, std::size_t);                         \
  template Tensor<T> dropout<T>(const Tensor<T>&, double, Mode, std::mt19937_64&);               \
  template Tensor<T> channel_softmax<T>(const Tensor<T>&);                                       \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                     \
  template class Conv2dLayer<T>;                                                                  \
  template class Conv1dLayer<T>;                                                                  \
  template class NormLayer<T>;

MSAMSEG_INSTANTIATE(float)
MSAMSEG_INSTANTIATE(double)

}  // namespace msamseg
