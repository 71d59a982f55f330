#include "msamseg/unet.hpp"

#include <sstream>

namespace msamseg {

std::vector<Placement> placements() {
  return {Placement::none,          Placement::between_cbas,      Placement::after_cbas,
          Placement::skip_connection, Placement::between_and_after, Placement::between_and_skip};
}

std::string placement_name(Placement placement) {
  switch (placement) {
    case Placement::none: return "none";
    case Placement::between_cbas: return "between_cbas";
    case Placement::after_cbas: return "after_cbas";
    case Placement::skip_connection: return "skip_connection";
    case Placement::between_and_after: return "between_and_after";
    case Placement::between_and_skip: return "between_and_skip";
  }
  throw ConfigError("unknown placement");
}

Placement parse_placement(std::string_view name) {
  for (auto p : placements()) {
    if (placement_name(p) == name) return p;
  }
  throw ConfigError("unknown placement '" + std::string(name) +
                    "' (expected none, between_cbas, after_cbas, skip_connection, between_and_after, "
                    "between_and_skip)");
}

bool places_between(Placement p) {
  return p == Placement::between_cbas || p == Placement::between_and_after || p == Placement::between_and_skip;
}
bool places_after(Placement p) { return p == Placement::after_cbas || p == Placement::between_and_after; }
bool places_skip(Placement p) { return p == Placement::skip_connection || p == Placement::between_and_skip; }

std::array<std::size_t, kEncoderLevels> UNetConfig::depths() const {
  return {base_depth, base_depth * 2, base_depth * 4, base_depth * 8};
}

std::string UNetConfig::label() const {
  std::string out = "UNet" + std::to_string(base_depth);
  if (placement == Placement::none) return out + "-SC";
  out += "-MSAM" + (msam_kernels ? msam_kernels->notation() : std::string("?"));
  if (placement != Placement::skip_connection) out += "@" + placement_name(placement);
  return out;
}

void UNetConfig::validate() const {
  if (in_channels == 0) throw ConfigError("in_channels must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (base_depth != 16 && base_depth != 32 && base_depth != 64) {
    throw ConfigError("base depth must be 16, 32 or 64, got " + std::to_string(base_depth));
  }
  if (placement == Placement::none && msam_kernels) {
    throw ConfigError("placement 'none' takes no MSAM kernels");
  }
  if (placement != Placement::none && !msam_kernels) {
    throw ConfigError("placement '" + placement_name(placement) + "' needs MSAM kernels");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
}

std::string UNetConfig::to_text() const {
  std::ostringstream out;
  out.precision(17);
  out << "in_channels=" << in_channels << '\n'
      << "num_classes=" << num_classes << '\n'
      << "base_depth=" << base_depth << '\n'
      << "placement=" << placement_name(placement) << '\n'
      << "msam_kernels=" << (msam_kernels ? msam_kernels->notation() : std::string("none")) << '\n'
      << "dropout=" << dropout_rate << '\n';
  return out.str();
}

UNetConfig UNetConfig::from_text(const std::string& text) {
  UNetConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed model config line '" + line + "'");
    const auto key = line.substr(0, eq);
    const auto value = line.substr(eq + 1);
    try {
      if (key == "in_channels") c.in_channels = std::stoul(value);
      else if (key == "num_classes") c.num_classes = std::stoul(value);
      else if (key == "base_depth") c.base_depth = std::stoul(value);
      else if (key == "placement") c.placement = parse_placement(value);
      else if (key == "msam_kernels") {
        if (value == "none") c.msam_kernels.reset();
        else c.msam_kernels = MsamConfig::parse(value);
      } else if (key == "dropout") c.dropout_rate = std::stod(value);
      else throw ConfigError("unknown model config key '" + key + "'");
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const ConfigError*>(&e)) throw;
      throw ConfigError("bad value for '" + key + "': " + value);
    }
  }
  c.validate();
  return c;
}

std::size_t analytic_parameter_count(const UNetConfig& config) {
  config.validate();
  const auto d = config.depths();
  auto cba = [](std::size_t in, std::size_t out) { return 9 * in * out + 2 * out; };
  std::size_t n = 0;
  std::size_t in = config.in_channels;
  for (std::size_t l = 0; l < kEncoderLevels; ++l) {
    n += cba(in, d[l]) + cba(d[l], d[l]);
    in = d[l];
  }
  const std::size_t bottom = 2 * d[3];
  n += cba(d[3], bottom) + cba(bottom, bottom);
  for (std::size_t l = 0; l < kEncoderLevels; ++l) {
    const std::size_t below = l + 1 < kEncoderLevels ? d[l + 1] : bottom;
    n += 4 * below * d[l] + d[l];
    n += cba(2 * d[l], d[l]) + cba(d[l], d[l]);
  }
  n += d[0] * config.num_classes + config.num_classes;
  if (config.placement != Placement::none) {
    const std::size_t per = msam_parameter_count(*config.msam_kernels);
    std::size_t instances = 0;
    if (places_between(config.placement)) instances += 2 * kEncoderLevels;
    if (places_after(config.placement)) instances += 2 * kEncoderLevels;
    if (places_skip(config.placement)) instances += kEncoderLevels;
    n += instances * per;
  }
  return n;
}

// ---------------------------------------------------------------------------

template <typename T>
CbaBlock<T>::CbaBlock(std::size_t in, std::size_t out)
    : conv(in, out, 3, false), norm(NormKind::batch, out) {}

template <typename T>
Tensor<T> CbaBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  return leaky_relu(norm.forward(conv.forward(x), mode));
}

template <typename T>
void CbaBlock<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  conv.collect(params, prefix + ".conv");
  norm.collect(params, prefix + ".bn");
}

template <typename T>
void CbaBlock<T>::collect_buffers(BufferList<T>& buffers, const std::string& prefix) const {
  norm.collect_buffers(buffers, prefix + ".bn");
}

template <typename T>
UNetModel<T> UNetModel<T>::build(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  UNetModel model;
  model.config_ = config;
  const auto d = config.depths();
  const auto p = config.placement;
  auto make_msam = [&](std::size_t channels) -> std::optional<MsamModule<T>> {
    return MsamModule<T>(*config.msam_kernels, channels);
  };

  std::size_t in = config.in_channels;
  for (std::size_t l = 0; l < kEncoderLevels; ++l) {
    auto& e = model.encoders[l];
    e.first = CbaBlock<T>(in, d[l]);
    e.second = CbaBlock<T>(d[l], d[l]);
    if (places_between(p)) e.between = make_msam(d[l]);
    if (places_after(p)) e.after = make_msam(d[l]);
    if (places_skip(p)) model.skips[l] = make_msam(d[l]);
    in = d[l];
  }
  const std::size_t bottom = 2 * d[3];
  model.bottleneck_first = CbaBlock<T>(d[3], bottom);
  model.bottleneck_second = CbaBlock<T>(bottom, bottom);
  for (std::size_t l = 0; l < kEncoderLevels; ++l) {
    auto& dec = model.decoders[l];
    const std::size_t below = l + 1 < kEncoderLevels ? d[l + 1] : bottom;
    dec.up = Conv2dLayer<T>(below, d[l], 2, true);
    dec.first = CbaBlock<T>(2 * d[l], d[l]);
    dec.second = CbaBlock<T>(d[l], d[l]);
    if (places_between(p)) dec.between = make_msam(d[l]);
    if (places_after(p)) dec.after = make_msam(d[l]);
  }
  model.head = Conv2dLayer<T>(d[0], config.num_classes, 1, true);

  for (auto& param : model.parameters()) initialize_parameter(param, seed);
  model.dropout_rng_ = parameter_rng(seed, "dropout");
  return model;
}

template <typename T>
Tensor<T> UNetModel<T>::forward(const Tensor<T>& x, Mode mode) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw ShapeError("UNet expects (N,C,H,W) or (C,H,W), got " + shape_to_string(x.shape()));
  }
  const std::size_t axis = x.rank() == 4 ? 1 : 0;
  if (x.dim(axis) != config_.in_channels) {
    throw ShapeError("UNet built for " + std::to_string(config_.in_channels) + " input channels, got " +
                     shape_to_string(x.shape()));
  }
  const std::size_t h = x.dim(axis + 1), w = x.dim(axis + 2);
  if (h % kSpatialDivisor != 0 || w % kSpatialDivisor != 0) {
    throw ShapeError("UNet input extents must be divisible by 16 (four pooling stages), got " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  Tensor<T> cur = x.rank() == 4 ? x : reshape(x, {1, x.dim(0), h, w});

  std::array<Tensor<T>, kEncoderLevels> skip_features;
  for (std::size_t l = 0; l < kEncoderLevels; ++l) {
    auto& e = encoders[l];
    cur = e.first.forward(cur, mode);
    if (e.between) cur = e.between->forward(cur);
    cur = e.second.forward(cur, mode);
    if (e.after) cur = e.after->forward(cur);
    cur = dropout(cur, config_.dropout_rate, mode, dropout_rng_);
    skip_features[l] = skips[l] ? skips[l]->forward(cur) : cur;
    cur = maxpool2d(cur, 2);
  }
  cur = bottleneck_first.forward(cur, mode);
  cur = bottleneck_second.forward(cur, mode);
  for (std::size_t i = kEncoderLevels; i-- > 0;) {
    auto& dec = decoders[i];
    auto up = dec.up.forward(upsample_nearest(cur, 2));
    cur = concat_channels(skip_features[i], up);
    cur = dec.first.forward(cur, mode);
    if (dec.between) cur = dec.between->forward(cur);
    cur = dec.second.forward(cur, mode);
    if (dec.after) cur = dec.after->forward(cur);
  }
  auto logits = head.forward(cur);
  if (x.rank() == 3) logits = reshape(logits, {config_.num_classes, h, w});
  return logits;
}

template <typename T>
ParameterList<T> UNetModel<T>::parameters() const {
  ParameterList<T> params;
  for (std::size_t l = 0; l < kEncoderLevels; ++l) {
    const auto base = "enc" + std::to_string(l + 1);
    const auto& e = encoders[l];
    e.first.collect(params, base + ".cba1");
    if (e.between) e.between->collect(params, base + ".msam_between");
    e.second.collect(params, base + ".cba2");
    if (e.after) e.after->collect(params, base + ".msam_after");
  }
  bottleneck_first.collect(params, "bottleneck.cba1");
  bottleneck_second.collect(params, "bottleneck.cba2");
  for (std::size_t l = 0; l < kEncoderLevels; ++l) {
    const auto base = "dec" + std::to_string(l + 1);
    const auto& dec = decoders[l];
    dec.up.collect(params, base + ".up");
    dec.first.collect(params, base + ".cba1");
    if (dec.between) dec.between->collect(params, base + ".msam_between");
    dec.second.collect(params, base + ".cba2");
    if (dec.after) dec.after->collect(params, base + ".msam_after");
  }
  for (std::size_t l = 0; l < kEncoderLevels; ++l) {
    if (skips[l]) skips[l]->collect(params, "skip" + std::to_string(l + 1) + ".msam");
  }
  head.collect(params, "head");
  return params;
}

template <typename T>
BufferList<T> UNetModel<T>::buffers() const {
  BufferList<T> buffers;
  for (std::size_t l = 0; l < kEncoderLevels; ++l) {
    const auto base = "enc" + std::to_string(l + 1);
    encoders[l].first.collect_buffers(buffers, base + ".cba1");
    encoders[l].second.collect_buffers(buffers, base + ".cba2");
  }
  bottleneck_first.collect_buffers(buffers, "bottleneck.cba1");
  bottleneck_second.collect_buffers(buffers, "bottleneck.cba2");
  for (std::size_t l = 0; l < kEncoderLevels; ++l) {
    const auto base = "dec" + std::to_string(l + 1);
    decoders[l].first.collect_buffers(buffers, base + ".cba1");
    decoders[l].second.collect_buffers(buffers, base + ".cba2");
  }
  return buffers;
}

template <typename T>
std::size_t UNetModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
std::vector<MsamModule<T>*> UNetModel<T>::msam_modules() {
  std::vector<MsamModule<T>*> out;
  auto take = [&](std::optional<MsamModule<T>>& m) {
    if (m) out.push_back(&*m);
  };
  for (auto& e : encoders) {
    take(e.between);
    take(e.after);
  }
  for (auto& dec : decoders) {
    take(dec.between);
    take(dec.after);
  }
  for (auto& s : skips) take(s);
  return out;
}

template <typename T>
void UNetModel<T>::zero_msam_parameters() {
  for (auto* m : msam_modules()) m->zero_parameters();
}

template <typename T>
void UNetModel<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template struct CbaBlock<float>;
template struct CbaBlock<double>;
template class UNetModel<float>;
template class UNetModel<double>;

}  // namespace msamseg
