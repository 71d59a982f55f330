#include "msamseg/msam.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>

namespace msamseg {

MsamConfig MsamConfig::triple(int k0, int k1, int k2) {
  for (int k : {k0, k1, k2}) dilation_for_kernel(k);
  MsamConfig c;
  c.kernels = {k0, k1, k2};
  c.active_branches = 3;
  return c;
}

MsamConfig MsamConfig::single(int k) {
  dilation_for_kernel(k);
  MsamConfig c;
  c.kernels = {k, k, k};
  c.active_branches = 1;
  return c;
}

MsamConfig MsamConfig::parse(std::string_view text) {
  std::string s;
  for (char ch : text) {
    if (!std::isspace(static_cast<unsigned char>(ch))) s.push_back(ch);
  }
  const bool paren = s.size() >= 2 && s.front() == '(' && s.back() == ')';
  const bool bracket = s.size() >= 2 && s.front() == '[' && s.back() == ']';
  if (!paren && !bracket) {
    throw ConfigError("kernel combination must look like (i0;i1;i2) or (i), got '" + std::string(text) + "'");
  }
  std::vector<int> values;
  std::string_view body(s.data() + 1, s.size() - 2);
  while (true) {
    const auto sep = body.find(';');
    const auto token = body.substr(0, sep);
    int v = 0;
    const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
    if (ec != std::errc() || ptr != token.data() + token.size() || token.empty()) {
      throw ConfigError("bad kernel size '" + std::string(token) + "' in '" + std::string(text) + "'");
    }
    values.push_back(v);
    if (sep == std::string_view::npos) break;
    body.remove_prefix(sep + 1);
  }
  if (values.size() == 1) return single(values[0]);
  if (values.size() == 3) return triple(values[0], values[1], values[2]);
  throw ConfigError("kernel combination needs one or three sizes, got '" + std::string(text) + "'");
}

std::vector<int> MsamConfig::active_kernels() const {
  return {kernels.begin(), kernels.begin() + active_branches};
}

std::string MsamConfig::notation() const {
  std::string out = "(";
  const auto ks = active_kernels();
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (i) out += ';';
    out += std::to_string(ks[i]);
  }
  return out + ")";
}

bool MsamConfig::is_multi_scale() const {
  return active_branches == 3 && kernels[0] != kernels[1] && kernels[1] != kernels[2] &&
         kernels[0] != kernels[2];
}

std::vector<MsamConfig> enumerate_kernel_combos() {
  constexpr std::array<int, 6> sizes{1, 3, 5, 7, 9, 11};
  std::vector<MsamConfig> combos;
  for (std::size_t a = 0; a < sizes.size(); ++a)
    for (std::size_t b = a + 1; b < sizes.size(); ++b)
      for (std::size_t c = b + 1; c < sizes.size(); ++c)
        combos.push_back(MsamConfig::triple(sizes[a], sizes[b], sizes[c]));
  for (int k : sizes) combos.push_back(MsamConfig::triple(k, k, k));
  for (int k : sizes) combos.push_back(MsamConfig::single(k));
  return combos;
}

std::vector<MsamConfig> followup_kernel_combos() {
  return {MsamConfig::triple(1, 3, 11), MsamConfig::triple(1, 3, 5), MsamConfig::triple(1, 5, 11),
          MsamConfig::triple(1, 5, 9),  MsamConfig::triple(3, 5, 11), MsamConfig::triple(3, 7, 11),
          MsamConfig::triple(5, 7, 9),  MsamConfig::triple(5, 9, 11)};
}

std::size_t msam_parameter_count(const MsamConfig& config) {
  std::size_t n = 0;
  for (int k : config.active_kernels()) n += static_cast<std::size_t>(k) + 1 + 4;
  return n;
}

template <typename T>
MsamModule<T>::MsamModule(const MsamConfig& cfg, std::size_t c, double e)
    : config(cfg), channels(c), eps(e) {
  if (c == 0) throw ConfigError("MSAM needs at least one spectral channel");
  for (int k : config.active_kernels()) {
    branches.push_back({Conv1dLayer<T>(static_cast<std::size_t>(k),
                                       static_cast<std::size_t>(dilation_for_kernel(k))),
                        Conv1dLayer<T>(3, 1)});
  }
}

template <typename T>
Tensor<T> MsamModule<T>::spectral_branch(const Tensor<T>& spectra, std::size_t branch) const {
  if (spectra.rank() < 1 || spectra.shape().back() == 0) throw ShapeError("spectral branch needs C >= 1");
  if (spectra.shape().back() != channels) {
    throw ShapeError("spectral branch expects spectra of length " + std::to_string(channels) + ", got " +
                     shape_to_string(spectra.shape()));
  }
  const auto& b = branches.at(branch);
  auto h = leaky_relu(b.primary.forward(spectra));
  return leaky_relu(b.secondary.forward(h));
}

template <typename T>
Tensor<T> MsamModule<T>::fuse(const std::vector<Tensor<T>>& features, const Shape& image_shape) const {
  if (features.empty()) throw ShapeError("fuse needs at least one branch output");
  auto total = add_n(features);
  if (total.rank() == 2) total = reshape(total, {1, total.dim(0), total.dim(1)});
  if (total.rank() != 3) throw ShapeError("fuse expects (H*W,C) or (N,H*W,C) features");
  auto channel_major = swap_last_axes(total);  // (N, C, H*W)
  if (channel_major.numel() != shape_numel(image_shape)) {
    throw ShapeError("fuse: features " + shape_to_string(total.shape()) + " do not match image shape " +
                     shape_to_string(image_shape));
  }
  auto image = reshape(channel_major, image_shape);
  return silu(instance_norm(image, eps));
}

template <typename T>
Tensor<T> MsamModule<T>::forward(const Tensor<T>& x) const {
  if (x.rank() != 3 && x.rank() != 4) {
    throw ShapeError("MSAM expects (N,C,H,W) or (C,H,W), got " + shape_to_string(x.shape()));
  }
  const std::size_t axis = x.rank() == 4 ? 1 : 0;
  if (x.dim(axis) != channels) {
    throw ShapeError("MSAM built for " + std::to_string(channels) + " channels, got input " +
                     shape_to_string(x.shape()));
  }
  const std::size_t n = x.rank() == 4 ? x.dim(0) : 1;
  const std::size_t plane = x.dim(axis + 1) * x.dim(axis + 2);
  auto spectra = swap_last_axes(reshape(x, {n, channels, plane}));  // (N, H*W, C)
  std::vector<Tensor<T>> features;
  features.reserve(branches.size());
  for (std::size_t b = 0; b < branches.size(); ++b) features.push_back(spectral_branch(spectra, b));
  auto fusion = fuse(features, x.shape());
  return mul(x, add(fusion, Tensor<T>::scalar(T(1))));
}

template <typename T>
void MsamModule<T>::collect(ParameterList<T>& params, const std::string& prefix) const {
  for (std::size_t b = 0; b < branches.size(); ++b) {
    const auto base = prefix + ".branch" + std::to_string(b);
    branches[b].primary.collect(params, base + ".spectral");
    branches[b].secondary.collect(params, base + ".refine");
  }
}

template <typename T>
std::size_t MsamModule<T>::parameter_count() const {
  ParameterList<T> params;
  collect(params, "msam");
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

template <typename T>
void MsamModule<T>::zero_parameters() {
  ParameterList<T> params;
  collect(params, "msam");
  for (auto& p : params) {
    auto v = p.tensor.mutable_data();
    std::fill(v.begin(), v.end(), T(0));
  }
}

template class MsamModule<float>;
template class MsamModule<double>;

}  // namespace msamseg
