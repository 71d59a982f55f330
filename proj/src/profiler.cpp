#include "msamseg/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

namespace msamseg {

FlopCount conv2d_flops(std::size_t in, std::size_t out, std::size_t kernel, std::size_t height, std::size_t width,
                       bool bias) {
  FlopCount f;
  const std::uint64_t plane = static_cast<std::uint64_t>(height) * width;
  f.macs = static_cast<std::uint64_t>(kernel) * kernel * in * out * plane;
  f.flops = 2 * f.macs + (bias ? out * plane : 0);
  return f;
}

FlopCount msam_flops(const MsamConfig& config, std::size_t channels, std::size_t height, std::size_t width) {
  FlopCount f;
  const std::uint64_t elems = static_cast<std::uint64_t>(channels) * height * width;
  const auto kernels = config.active_kernels();
  for (int k : kernels) {
    const std::uint64_t macs = (static_cast<std::uint64_t>(k) + 3) * elems;
    f.macs += macs;
    f.flops += 2 * macs + 2 * elems;  // two convolutions, one bias each
  }
  f.flops += (kernels.size() - 1) * elems;  // branch sum
  f.flops += 5 * elems;                     // instance norm
  f.flops += 2 * elems;                     // x * (1 + F)
  return f;
}

namespace {

FlopCount cba_flops(std::size_t in, std::size_t out, std::size_t h, std::size_t w) {
  auto f = conv2d_flops(in, out, 3, h, w, false);
  f.flops += 2ULL * out * h * w;
  return f;
}

}  // namespace

FlopCount estimate_flops(const UNetConfig& config, std::size_t height, std::size_t width) {
  config.validate();
  if (height == 0 || width == 0) throw ShapeError("input extents must be positive");
  const auto d = config.depths();
  const auto p = config.placement;
  FlopCount total;
  std::array<std::pair<std::size_t, std::size_t>, kEncoderLevels> extent;
  std::size_t h = height, w = width, in = config.in_channels;
  for (std::size_t l = 0; l < kEncoderLevels; ++l) {
    extent[l] = {h, w};
    total += cba_flops(in, d[l], h, w);
    if (places_between(p)) total += msam_flops(*config.msam_kernels, d[l], h, w);
    total += cba_flops(d[l], d[l], h, w);
    if (places_after(p)) total += msam_flops(*config.msam_kernels, d[l], h, w);
    if (places_skip(p)) total += msam_flops(*config.msam_kernels, d[l], h, w);
    in = d[l];
    h /= 2;
    w /= 2;
    if (h == 0 || w == 0) throw ShapeError("input too small for four pooling stages");
  }
  const std::size_t bottom = 2 * d[3];
  total += cba_flops(d[3], bottom, h, w);
  total += cba_flops(bottom, bottom, h, w);
  for (std::size_t l = kEncoderLevels; l-- > 0;) {
    const auto [sh, sw] = extent[l];
    const std::size_t below = l + 1 < kEncoderLevels ? d[l + 1] : bottom;
    total += conv2d_flops(below, d[l], 2, sh, sw, true);
    total += cba_flops(2 * d[l], d[l], sh, sw);
    if (places_between(p)) total += msam_flops(*config.msam_kernels, d[l], sh, sw);
    total += cba_flops(d[l], d[l], sh, sw);
    if (places_after(p)) total += msam_flops(*config.msam_kernels, d[l], sh, sw);
  }
  total += conv2d_flops(d[0], config.num_classes, 1, height, width, true);
  return total;
}

std::size_t count_params(const UNetModel<float>& model) {
  std::size_t n = 0;
  for (const auto& p : model.parameters()) n += p.tensor.numel();
  return n;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ShapeError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

LatencyStats measure_latency(UNetModel<float>& model, std::size_t height, std::size_t width, std::size_t runs,
                             std::size_t warmup, std::uint64_t seed) {
  if (runs < 30) throw ConfigError("latency needs at least 30 timed runs");
  if (warmup < 5) throw ConfigError("latency needs at least 5 warmup runs");
  NoGradGuard no_grad;
  const std::size_t c = model.config().in_channels;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> values(c * height * width);
  for (auto& v : values) v = u(rng);
  const Tensor<float> x({1, c, height, width}, std::move(values));

  LatencyStats stats;
  stats.height = height;
  stats.width = width;
  stats.runs = runs;
  stats.warmup = warmup;
  for (std::size_t i = 0; i < warmup; ++i) model.forward(x, Mode::eval);
  for (std::size_t i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto y = model.forward(x, Mode::eval);
    const auto t1 = std::chrono::steady_clock::now();
    stats.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  stats.median_ms = quantile(stats.samples_ms, 0.5);
  stats.iqr_ms = quantile(stats.samples_ms, 0.75) - quantile(stats.samples_ms, 0.25);
  return stats;
}

ProfileReport profile_model(UNetModel<float>& model, const std::string& dataset, std::size_t height, std::size_t width,
                            std::size_t runs, std::size_t warmup) {
  ProfileReport r;
  r.dataset = dataset;
  r.config = model.config();
  r.height = height;
  r.width = width;
  r.parameter_count = count_params(model);
  r.flops = estimate_flops(model.config(), height, width);
  r.model_size_bytes = 4ULL * r.parameter_count;
  if (runs > 0) {
    auto round_up = [](std::size_t v) { return (v + kSpatialDivisor - 1) / kSpatialDivisor * kSpatialDivisor; };
    r.latency = measure_latency(model, round_up(height), round_up(width), runs, warmup);
  }
  return r;
}

std::string profile_csv(const std::vector<ProfileReport>& reports) {
  std::ostringstream out;
  out << "dataset,model,parameters_millions,gflops,model_size_mb,inference_cpu_ms,inference_gpu_ms,"
         "parameters,flops,macs,model_size_bytes,input,latency_input,latency_iqr_ms,latency_runs,flop_convention\n";
  for (const auto& r : reports) {
    out.precision(6);
    out << std::fixed;
    out << r.dataset << ',' << r.config.label() << ',' << static_cast<double>(r.parameter_count) / 1e6 << ','
        << static_cast<double>(r.flops.flops) / 1e9 << ','
        << static_cast<double>(r.model_size_bytes) / (1024.0 * 1024.0) << ',';
    if (r.latency) {
      out << r.latency->median_ms;
    } else {
      out << "n/a";
    }
    out << ",n/a," << r.parameter_count << ',' << r.flops.flops << ',' << r.flops.macs << ',' << r.model_size_bytes
        << ',' << r.config.in_channels << 'x' << r.height << 'x' << r.width << ',';
    if (r.latency) {
      out << r.config.in_channels << 'x' << r.latency->height << 'x' << r.latency->width << ',' << r.latency->iqr_ms
          << ',' << r.latency->runs;
    } else {
      out << "n/a,n/a,0";
    }
    out << ",\"" << kFlopConvention << "\"\n";
  }
  return out.str();
}

}  // namespace msamseg
