#include "msamseg/hsi_data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace msamseg {

namespace fs = std::filesystem;

void HsiCube::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw DataError("cube extents must be positive");
  if (values.size() != channels * height * width) {
    throw DataError("cube holds " + std::to_string(values.size()) + " values for " + std::to_string(channels) + "x" +
                    std::to_string(height) + "x" + std::to_string(width));
  }
  if (!wavelengths_nm.empty() && wavelengths_nm.size() != channels) {
    throw DataError("wavelength list must have one entry per channel");
  }
  for (float v : values) {
    if (!std::isfinite(v)) throw DataError("cube holds a non-finite value");
  }
}

void LabelMask::validate(std::size_t num_classes) const {
  if (height == 0 || width == 0 || labels.size() != height * width) throw DataError("mask extents are inconsistent");
  for (auto l : labels) {
    if (l != kIgnoreLabel && l >= num_classes) {
      throw DataError("mask label " + std::to_string(l) + " outside 0.." + std::to_string(num_classes - 1));
    }
  }
}

HsiCube minmax_normalize(const HsiCube& cube) {
  cube.validate();
  const auto [lo_it, hi_it] = std::minmax_element(cube.values.begin(), cube.values.end());
  const float lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) throw DataError("cannot normalize a constant cube");
  HsiCube out = cube;
  const float range = hi - lo;
  for (auto& v : out.values) v = (v - lo) / range;
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

void SceneSpec::validate() const {
  if (num_classes < 2) throw ConfigError("a scene needs at least 2 classes");
  if (num_classes > 254) throw ConfigError("at most 254 classes fit a byte mask");
  if (channels < 4) throw ConfigError("a scene needs at least 4 channels");
  if (height < 8 || width < 8) throw ConfigError("scene extents must be at least 8x8");
  if (!class_shares.empty()) {
    if (class_shares.size() != num_classes) throw ConfigError("class_shares needs one value per class");
    double total = 0.0;
    for (double s : class_shares) {
      if (!(s > 0.0)) throw ConfigError("class shares must be positive");
      total += s;
    }
    if (std::abs(total - 1.0) > 1e-6) throw ConfigError("class shares must sum to 1");
  }
  if (!signatures.empty()) {
    if (signatures.size() != num_classes) throw ConfigError("signatures needs one spectrum per class");
    for (const auto& s : signatures) {
      if (s.size() != channels) throw ConfigError("every signature needs one value per channel");
    }
  }
  std::set<std::size_t> used;
  for (auto [a, b] : metameric_pairs) {
    if (a >= num_classes || b >= num_classes || a == b) throw ConfigError("invalid metameric pair");
    if (!used.insert(a).second || !used.insert(b).second) {
      throw ConfigError("a class may belong to at most one metameric pair");
    }
  }
  if (!(jitter >= 0.0 && jitter < 1.0)) throw ConfigError("jitter must lie in [0, 1)");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise sigma must be non-negative");
  if (!(metameric_floor > 0.0)) throw ConfigError("metameric floor must be positive");
  if (min_radius < 1 || max_radius < min_radius) throw ConfigError("blob radii must satisfy 1 <= min <= max");
  if (2 * border >= std::min(height, width)) throw ConfigError("border leaves no labeled interior");
}

SceneSpec metameric_benchmark_spec() {
  SceneSpec spec;
  spec.num_classes = 5;
  spec.channels = 15;
  spec.height = 64;
  spec.width = 64;
  spec.metameric_pairs = {{1, 2}, {3, 4}};
  spec.metameric_floor = 0.2;
  spec.jitter = 0.15;
  spec.noise_sigma = 0.02;
  return spec;
}

namespace {

std::vector<std::pair<std::size_t, std::size_t>> band_groups(std::size_t channels) {
  std::vector<std::pair<std::size_t, std::size_t>> groups;
  std::size_t start = 0;
  for (std::size_t g = 0; g < 3; ++g) {
    const std::size_t len = channels / 3 + (g < channels % 3 ? 1 : 0);
    groups.emplace_back(start, start + len);
    start += len;
  }
  return groups;
}

double l2_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

constexpr double kSignatureLow = 0.05;
constexpr double kSignatureHigh = 0.95;
constexpr double kProjectionTolerance = 1e-6;
constexpr double kDistinctProjection = 0.04;

std::vector<double> smooth_spectrum(std::size_t channels, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double offset = 0.25 + 0.4 * u(rng);
  const double slope = -0.3 + 0.6 * u(rng);
  const double amp1 = -0.25 + 0.5 * u(rng), mu1 = u(rng), w1 = 0.08 + 0.2 * u(rng);
  const double amp2 = -0.25 + 0.5 * u(rng), mu2 = u(rng), w2 = 0.08 + 0.2 * u(rng);
  std::vector<double> s(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    const double t = channels == 1 ? 0.0 : static_cast<double>(c) / static_cast<double>(channels - 1);
    s[c] = offset + slope * (t - 0.5) + amp1 * std::exp(-(t - mu1) * (t - mu1) / (2 * w1 * w1)) +
           amp2 * std::exp(-(t - mu2) * (t - mu2) / (2 * w2 * w2));
    s[c] = std::clamp(s[c], kSignatureLow + 0.1, kSignatureHigh - 0.1);
  }
  return s;
}

// Zero mean within each band group, L2 norm `norm`.
std::vector<double> metameric_offset(std::size_t channels, double norm, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> d(channels);
  for (auto& v : d) v = n01(rng);
  for (auto [lo, hi] : band_groups(channels)) {
    double m = 0.0;
    for (std::size_t c = lo; c < hi; ++c) m += d[c];
    m /= static_cast<double>(hi - lo);
    for (std::size_t c = lo; c < hi; ++c) d[c] -= m;
  }
  double len = 0.0;
  for (double v : d) len += v * v;
  len = std::sqrt(len);
  if (len == 0.0) return {};
  for (auto& v : d) v *= norm / len;
  return d;
}

bool in_bounds(const std::vector<double>& s) {
  return std::all_of(s.begin(), s.end(), [](double v) { return v >= kSignatureLow && v <= kSignatureHigh; });
}

}  // namespace

std::vector<double> three_band_projection(const std::vector<double>& spectrum) {
  if (spectrum.size() < 3) throw DataError("a 3-band projection needs at least 3 channels");
  std::vector<double> out;
  for (auto [lo, hi] : band_groups(spectrum.size())) {
    double s = 0.0;
    for (std::size_t c = lo; c < hi; ++c) s += spectrum[c];
    out.push_back(s / static_cast<double>(hi - lo));
  }
  return out;
}

std::vector<std::vector<double>> scene_signatures(const SceneSpec& spec) {
  spec.validate();
  if (!spec.signatures.empty()) {
    for (auto [a, b] : spec.metameric_pairs) {
      const auto pa = three_band_projection(spec.signatures[a]);
      const auto pb = three_band_projection(spec.signatures[b]);
      for (std::size_t g = 0; g < 3; ++g) {
        if (std::abs(pa[g] - pb[g]) >= kProjectionTolerance) {
          throw DataError("signatures of pair (" + std::to_string(a) + "," + std::to_string(b) +
                          ") differ in their 3-band projection");
        }
      }
      if (l2_distance(spec.signatures[a], spec.signatures[b]) < spec.metameric_floor) {
        throw DataError("signatures of a metameric pair are closer than the floor");
      }
    }
    return spec.signatures;
  }

  const auto groups = band_groups(spec.channels);
  const bool any_wide = std::any_of(groups.begin(), groups.end(), [](auto g) { return g.second - g.first >= 2; });
  if (!spec.metameric_pairs.empty() && !any_wide) {
    throw DataError("no band group has two channels; metameric signatures are infeasible");
  }

  std::map<std::size_t, std::size_t> partner_of;  // second member -> first member
  for (auto [a, b] : spec.metameric_pairs) partner_of[b] = a;

  std::mt19937_64 rng(spec.signature_seed);
  constexpr int kAttempts = 500;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    std::vector<std::vector<double>> sig(spec.num_classes);
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
      if (!partner_of.count(k)) sig[k] = smooth_spectrum(spec.channels, rng);
    }
    bool ok = true;
    for (auto [b, a] : partner_of) {
      // Margin over the floor so the float cube still clears it.
      const auto delta = metameric_offset(spec.channels, spec.metameric_floor * 1.1, rng);
      if (delta.empty()) {
        ok = false;
        break;
      }
      sig[b] = sig[a];
      for (std::size_t c = 0; c < spec.channels; ++c) sig[b][c] += delta[c];
      if (!in_bounds(sig[b])) ok = false;
    }
    if (!ok) continue;
    // Classes outside a shared pair must be told apart by their projections.
    for (std::size_t i = 0; i < spec.num_classes && ok; ++i) {
      for (std::size_t j = i + 1; j < spec.num_classes && ok; ++j) {
        const bool paired = (partner_of.count(j) && partner_of[j] == i) || (partner_of.count(i) && partner_of[i] == j);
        if (paired) continue;
        const auto pi = three_band_projection(sig[i]);
        const auto pj = three_band_projection(sig[j]);
        double d = 0.0;
        for (std::size_t g = 0; g < 3; ++g) d = std::max(d, std::abs(pi[g] - pj[g]));
        if (d < kDistinctProjection) ok = false;
      }
    }
    if (ok) return sig;
  }
  throw DataError("could not place metameric signatures with floor " + std::to_string(spec.metameric_floor) +
                  " inside the reflectance range for " + std::to_string(spec.channels) + " channels");
}

namespace {

std::size_t auto_border(std::size_t h, std::size_t w) {
  for (std::size_t b = 1; 2 * b < std::min(h, w); ++b) {
    const double ring = static_cast<double>(h * w - (h - 2 * b) * (w - 2 * b));
    if (ring >= 0.05 * static_cast<double>(h * w)) return b;
  }
  throw ConfigError("scene too small for a 5% unlabeled border");
}

}  // namespace

Scene generate_scene(const SceneSpec& spec) {
  const auto sig = scene_signatures(spec);
  const std::size_t k = spec.num_classes, h = spec.height, w = spec.width;
  const std::size_t border = spec.border == 0 ? auto_border(h, w) : spec.border;
  std::vector<double> shares = spec.class_shares;
  if (shares.empty()) shares.assign(k, 1.0 / static_cast<double>(k));

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  auto inside = [&](std::size_t y, std::size_t x) {
    return y >= border && x >= border && y < h - border && x < w - border;
  };
  const double interior = static_cast<double>((h - 2 * border) * (w - 2 * border));
  const std::size_t background = static_cast<std::size_t>(std::max_element(shares.begin(), shares.end()) - shares.begin());
  std::vector<std::uint8_t> grid(h * w, static_cast<std::uint8_t>(background));
  std::vector<double> counts(k, 0.0);
  counts[background] = interior;

  constexpr int kMaxBlobs = 4000;
  for (int blob = 0; blob < kMaxBlobs; ++blob) {
    std::size_t cls = k;
    double worst = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (c == background) continue;
      const double target = shares[c] * interior;
      const double deficit = (target - counts[c]) / target;
      if (deficit > worst) {
        worst = deficit;
        cls = c;
      }
    }
    if (cls == k || worst <= 0.01) break;
    const double missing = shares[cls] * interior - counts[cls];
    const double cap = std::clamp(std::ceil(std::sqrt(1.2 * missing / M_PI)), 1.0, static_cast<double>(spec.max_radius));
    const double lo = std::min(static_cast<double>(spec.min_radius), cap);
    const double ry = lo + (cap - lo) * u01(rng);
    const double rx = lo + (cap - lo) * u01(rng);
    const double cy = static_cast<double>(border) + u01(rng) * static_cast<double>(h - 2 * border);
    const double cx = static_cast<double>(border) + u01(rng) * static_cast<double>(w - 2 * border);
    const bool ellipse = u01(rng) < 0.5;
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(cy - ry)));
    const auto y1 = static_cast<std::size_t>(std::min(static_cast<double>(h - 1), std::ceil(cy + ry)));
    const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(cx - rx)));
    const auto x1 = static_cast<std::size_t>(std::min(static_cast<double>(w - 1), std::ceil(cx + rx)));
    for (std::size_t y = y0; y <= y1; ++y) {
      for (std::size_t x = x0; x <= x1; ++x) {
        const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
        const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
        const bool hit = ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (!hit || grid[y * w + x] != background) continue;
        grid[y * w + x] = static_cast<std::uint8_t>(cls);
        if (inside(y, x)) {
          counts[cls] += 1.0;
          counts[background] -= 1.0;
        }
      }
    }
  }

  Scene scene;
  scene.mask.height = h;
  scene.mask.width = w;
  scene.mask.labels.resize(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      scene.mask.labels[y * w + x] = inside(y, x) ? grid[y * w + x] : kIgnoreLabel;
    }
  }

  scene.cube.channels = spec.channels;
  scene.cube.height = h;
  scene.cube.width = w;
  scene.cube.values.resize(spec.channels * h * w);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0.0 ? spec.noise_sigma : 1.0);
  for (std::size_t p = 0; p < h * w; ++p) {
    const auto& s = sig[grid[p]];
    const double amp = spec.jitter > 0.0 ? 1.0 + spec.jitter * (2.0 * u01(rng) - 1.0) : 1.0;
    for (std::size_t c = 0; c < spec.channels; ++c) {
      double v = s[c] * amp;
      if (spec.noise_sigma > 0.0) v += noise(rng);
      scene.cube.values[c * h * w + p] = static_cast<float>(v);
    }
  }
  return scene;
}

// ---------------------------------------------------------------------------
// File formats

namespace {

constexpr std::uint64_t kMaxPayloadBytes = 1ULL << 36;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CubeFormatError(CubeFormatError::Kind::io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CubeFormatError(CubeFormatError::Kind::io, "cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CubeFormatError(CubeFormatError::Kind::io, "failed writing '" + path + "'");
}

struct Header {
  std::map<std::string, std::string> fields;
  std::size_t payload_offset = 0;
};

Header parse_header(const std::string& data, const std::string& magic, const std::string& path) {
  using K = CubeFormatError::Kind;
  const auto first_nl = data.find('\n');
  if (first_nl == std::string::npos || data.compare(0, first_nl, magic) != 0) {
    throw CubeFormatError(K::bad_magic, "'" + path + "' does not start with " + magic);
  }
  Header h;
  std::size_t pos = first_nl + 1;
  while (true) {
    const auto nl = data.find('\n', pos);
    if (nl == std::string::npos) throw CubeFormatError(K::malformed_header, "'" + path + "' header is not terminated");
    const std::string line = data.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) break;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw CubeFormatError(K::malformed_header, "'" + path + "' has malformed header line '" + line + "'");
    }
    if (!h.fields.emplace(line.substr(0, eq), line.substr(eq + 1)).second) {
      throw CubeFormatError(K::malformed_header, "'" + path + "' repeats key '" + line.substr(0, eq) + "'");
    }
  }
  h.payload_offset = pos;
  return h;
}

std::uint64_t extent_field(const Header& h, const std::string& key, const std::string& path) {
  using K = CubeFormatError::Kind;
  auto it = h.fields.find(key);
  if (it == h.fields.end()) throw CubeFormatError(K::malformed_header, "'" + path + "' lacks '" + key + "'");
  const auto& s = it->second;
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec == std::errc::result_out_of_range) {
    throw CubeFormatError(K::extent_overflow, "'" + path + "' " + key + " overflows");
  }
  if (ec != std::errc() || p != s.data() + s.size() || v == 0) {
    throw CubeFormatError(K::malformed_header, "'" + path + "' has invalid " + key + " '" + s + "'");
  }
  return v;
}

std::uint64_t checked_volume(std::initializer_list<std::uint64_t> extents, std::uint64_t elem, const std::string& path) {
  std::uint64_t total = elem;
  for (auto e : extents) {
    if (e > kMaxPayloadBytes / total) {
      throw CubeFormatError(CubeFormatError::Kind::extent_overflow, "'" + path + "' extents exceed the payload limit");
    }
    total *= e;
  }
  return total;
}

void check_known(const Header& h, std::initializer_list<const char*> keys, const std::string& path) {
  for (const auto& [key, value] : h.fields) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
      throw CubeFormatError(CubeFormatError::Kind::malformed_header, "'" + path + "' has unknown key '" + key + "'");
    }
  }
}

void check_payload(std::size_t have, std::uint64_t want, const std::string& path) {
  if (have < want) {
    throw CubeFormatError(CubeFormatError::Kind::truncated, "'" + path + "' payload holds " + std::to_string(have) +
                                                                " of " + std::to_string(want) + " bytes");
  }
  if (have > want) {
    throw CubeFormatError(CubeFormatError::Kind::trailing_bytes, "'" + path + "' has bytes past the payload");
  }
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

}  // namespace

void write_cube(const std::string& path, const HsiCube& cube) {
  cube.validate();
  std::string out = "HSICUBE/1\nchannels=" + std::to_string(cube.channels) + "\nheight=" + std::to_string(cube.height) +
                    "\nwidth=" + std::to_string(cube.width) + "\ndtype=f32le\norder=CHW\n";
  if (!cube.wavelengths_nm.empty()) {
    out += "wavelengths_nm=";
    for (std::size_t i = 0; i < cube.wavelengths_nm.size(); ++i) {
      if (i) out += ',';
      out += format_double(cube.wavelengths_nm[i]);
    }
    out += '\n';
  }
  out += '\n';
  const std::size_t offset = out.size();
  out.resize(offset + cube.values.size() * 4);
  for (std::size_t i = 0; i < cube.values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(cube.values[i]);
    for (int b = 0; b < 4; ++b) out[offset + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  spill(path, out);
}

HsiCube read_cube(const std::string& path) {
  using K = CubeFormatError::Kind;
  const std::string data = slurp(path);
  const auto h = parse_header(data, "HSICUBE/1", path);
  check_known(h, {"channels", "height", "width", "dtype", "order", "wavelengths_nm"}, path);
  const auto dtype = h.fields.count("dtype") ? h.fields.at("dtype") : "";
  if (dtype != "f32le") throw CubeFormatError(K::unsupported_dtype, "'" + path + "' has unsupported dtype '" + dtype + "'");
  if (!h.fields.count("order") || h.fields.at("order") != "CHW") {
    throw CubeFormatError(K::malformed_header, "'" + path + "' must declare order=CHW");
  }
  const auto c = extent_field(h, "channels", path);
  const auto y = extent_field(h, "height", path);
  const auto x = extent_field(h, "width", path);
  const auto bytes = checked_volume({c, y, x}, 4, path);
  check_payload(data.size() - h.payload_offset, bytes, path);

  HsiCube cube;
  cube.channels = c;
  cube.height = y;
  cube.width = x;
  cube.values.resize(c * y * x);
  const auto* p = reinterpret_cast<const unsigned char*>(data.data() + h.payload_offset);
  for (std::size_t i = 0; i < cube.values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
    cube.values[i] = std::bit_cast<float>(bits);
  }
  if (auto it = h.fields.find("wavelengths_nm"); it != h.fields.end()) {
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
      double v = 0.0;
      auto [q, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || q != item.data() + item.size()) {
        throw CubeFormatError(K::malformed_header, "'" + path + "' has an invalid wavelength '" + item + "'");
      }
      cube.wavelengths_nm.push_back(v);
    }
    if (cube.wavelengths_nm.size() != c) {
      throw CubeFormatError(K::malformed_header, "'" + path + "' lists " + std::to_string(cube.wavelengths_nm.size()) +
                                                     " wavelengths for " + std::to_string(c) + " channels");
    }
  }
  return cube;
}

void write_mask(const std::string& path, const LabelMask& mask) {
  if (mask.height == 0 || mask.width == 0 || mask.labels.size() != mask.height * mask.width) {
    throw DataError("mask extents are inconsistent");
  }
  std::string out = "HSIMASK/1\nheight=" + std::to_string(mask.height) + "\nwidth=" + std::to_string(mask.width) +
                    "\ndtype=u8\n\n";
  out.append(reinterpret_cast<const char*>(mask.labels.data()), mask.labels.size());
  spill(path, out);
}

LabelMask read_mask(const std::string& path) {
  using K = CubeFormatError::Kind;
  const std::string data = slurp(path);
  const auto h = parse_header(data, "HSIMASK/1", path);
  check_known(h, {"height", "width", "dtype"}, path);
  const auto dtype = h.fields.count("dtype") ? h.fields.at("dtype") : "";
  if (dtype != "u8") throw CubeFormatError(K::unsupported_dtype, "'" + path + "' has unsupported dtype '" + dtype + "'");
  const auto y = extent_field(h, "height", path);
  const auto x = extent_field(h, "width", path);
  const auto bytes = checked_volume({y, x}, 1, path);
  check_payload(data.size() - h.payload_offset, bytes, path);
  LabelMask mask;
  mask.height = y;
  mask.width = x;
  mask.labels.assign(data.begin() + static_cast<std::ptrdiff_t>(h.payload_offset), data.end());
  return mask;
}

// ---------------------------------------------------------------------------
// Datasets

const std::vector<std::size_t>& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

SplitIndices make_splits(std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(0.70 * static_cast<double>(count)));
  const auto n_val = std::min(count - n_train, static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(count))));
  SplitIndices s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return s;
}

ClassStatistics class_statistics(const std::vector<const LabelMask*>& masks, std::size_t num_classes) {
  if (masks.empty()) throw DataError("class statistics need at least one mask");
  ClassStatistics st;
  st.counts.assign(num_classes, 0);
  for (const auto* m : masks) {
    m->validate(num_classes);
    for (auto l : m->labels) {
      if (l == kIgnoreLabel) {
        ++st.unlabeled;
      } else {
        ++st.counts[l];
      }
    }
  }
  const auto labeled = std::accumulate(st.counts.begin(), st.counts.end(), std::uint64_t{0});
  st.frequencies.assign(num_classes, 0.0);
  st.weights.assign(num_classes, 1.0);
  if (labeled == 0) return st;
  std::vector<double> present;
  for (std::size_t c = 0; c < num_classes; ++c) {
    st.frequencies[c] = static_cast<double>(st.counts[c]) / static_cast<double>(labeled);
    if (st.counts[c] > 0) present.push_back(st.frequencies[c]);
  }
  std::sort(present.begin(), present.end());
  const std::size_t n = present.size();
  const double median = n % 2 ? present[n / 2] : 0.5 * (present[n / 2 - 1] + present[n / 2]);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (st.counts[c] > 0) st.weights[c] = std::clamp(median / st.frequencies[c], 0.1, 10.0);
  }
  return st;
}

std::string ClassStatistics::to_csv() const {
  std::ostringstream out;
  out << "class,pixels,frequency,weight\n" << std::setprecision(10);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    out << c << ',' << counts[c] << ',' << frequencies[c] << ',' << weights[c] << '\n';
  }
  out << "unlabeled," << unlabeled << ",,\n";
  return out.str();
}

void write_dataset(const std::string& dir, const Dataset& dataset) {
  fs::create_directories(dir);
  std::vector<std::string> role(dataset.scenes.size(), "");
  for (auto i : dataset.train) role.at(i) = "train";
  for (auto i : dataset.val) role.at(i) = "val";
  for (auto i : dataset.test) role.at(i) = "test";
  std::ostringstream manifest;
  manifest << "# msamseg dataset manifest\nnum_classes=" << dataset.num_classes
           << "\nscenes=" << dataset.scenes.size() << "\n";
  for (std::size_t i = 0; i < dataset.scenes.size(); ++i) {
    if (role[i].empty()) throw DataError("scene '" + dataset.ids[i] + "' belongs to no split");
    const auto base = (fs::path(dir) / dataset.ids[i]).string();
    write_cube(base + ".hsicube", dataset.scenes[i].cube);
    write_mask(base + ".hsimask", dataset.scenes[i].mask);
    manifest << dataset.ids[i] << ' ' << role[i] << '\n';
  }
  std::ofstream(fs::path(dir) / "manifest.txt") << manifest.str();
  if (!dataset.scenes.empty()) {
    std::vector<const LabelMask*> masks;
    for (const auto& s : dataset.scenes) masks.push_back(&s.mask);
    std::ofstream(fs::path(dir) / "class_statistics.csv") << class_statistics(masks, dataset.num_classes).to_csv();
  }
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.txt");
  if (!in) throw DataError("'" + dir + "' has no manifest.txt");
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  std::optional<std::size_t> declared;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("num_classes=", 0) == 0) {
      ds.num_classes = std::stoul(line.substr(12));
      continue;
    }
    if (line.rfind("scenes=", 0) == 0) {
      declared = std::stoul(line.substr(7));
      continue;
    }
    std::istringstream ls(line);
    std::string id, role;
    if (!(ls >> id >> role)) throw DataError("manifest line " + std::to_string(line_no) + " is malformed");
    const auto base = (fs::path(dir) / id).string();
    Scene scene{read_cube(base + ".hsicube"), read_mask(base + ".hsimask")};
    scene.cube.validate();
    if (scene.cube.height != scene.mask.height || scene.cube.width != scene.mask.width) {
      throw DataError("scene '" + id + "' cube and mask extents differ");
    }
    const std::size_t index = ds.scenes.size();
    if (role == "train") {
      ds.train.push_back(index);
    } else if (role == "val") {
      ds.val.push_back(index);
    } else if (role == "test") {
      ds.test.push_back(index);
    } else {
      throw DataError("manifest line " + std::to_string(line_no) + " names unknown split '" + role + "'");
    }
    ds.ids.push_back(id);
    ds.scenes.push_back(std::move(scene));
  }
  if (ds.num_classes == 0) throw DataError("manifest does not declare num_classes");
  if (declared && *declared != ds.scenes.size()) throw DataError("manifest scene count does not match its entries");
  for (const auto& s : ds.scenes) s.mask.validate(ds.num_classes);
  return ds;
}

Dataset generate_dataset(const SceneSpec& spec, std::size_t count, std::uint64_t split_seed) {
  spec.validate();
  Dataset ds;
  ds.num_classes = spec.num_classes;
  SceneSpec s = spec;
  s.signatures = scene_signatures(spec);
  for (std::size_t i = 0; i < count; ++i) {
    s.seed = spec.seed + i;
    std::ostringstream id;
    id << "scene_" << std::setw(4) << std::setfill('0') << i;
    ds.ids.push_back(id.str());
    ds.scenes.push_back(generate_scene(s));
  }
  auto splits = make_splits(count, split_seed);
  ds.train = std::move(splits.train);
  ds.val = std::move(splits.val);
  ds.test = std::move(splits.test);
  return ds;
}

// ---------------------------------------------------------------------------
// Relabeling

std::uint8_t ClassMap::map(std::uint8_t source) const {
  if (source == kIgnoreLabel) return kIgnoreLabel;
  auto it = mapping.find(source);
  return it == mapping.end() ? kIgnoreLabel : it->second;
}

LabelMask ClassMap::apply(const LabelMask& mask) const {
  LabelMask out = mask;
  for (auto& l : out.labels) l = map(l);
  return out;
}

namespace {

const std::vector<std::string> kCommonClasses = {"Road",           "Vegetation",  "Sky",         "Metal",
                                                 "Infrastructure", "Pedestrians", "Road Marking"};

}  // namespace

ClassMap ClassMap::hsi_drive() {
  // Road, Road Marks, Vegetation, Painted Metal, Sky, Concrete, Pedestrian,
  // Water, Unpainted Metal, Glass
  return {"hsi-drive", kCommonClasses, {{0, 0}, {1, 6}, {2, 1}, {3, 3}, {4, 2}, {5, 4}, {6, 5}, {8, 3}}};
}

ClassMap ClassMap::hyko_vis() {
  // Road, Lane Markers, Vegetation, Vehicles, Sky, Building/Walls,
  // Pedestrian, Sidewalk, Signs, Grass
  return {"hyko-vis", kCommonClasses, {{0, 0}, {1, 6}, {2, 1}, {3, 3}, {4, 2}, {5, 4}, {6, 5}, {7, 4}, {8, 3}, {9, 1}}};
}

ClassMap ClassMap::parse(const std::string& text) {
  ClassMap cm;
  cm.name = "custom";
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto parse_id = [&](std::string s) {
    s.erase(0, s.find_first_not_of(" \t"));
    s.erase(s.find_last_not_of(" \t\r") + 1);
    unsigned v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || v > 255) {
      throw ConfigError("class map line " + std::to_string(line_no) + ": invalid id '" + s + "'");
    }
    return static_cast<std::uint8_t>(v);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("class map line " + std::to_string(line_no) + " lacks '='");
    const auto src = parse_id(line.substr(0, eq));
    const auto dst = parse_id(line.substr(eq + 1));
    if (!cm.mapping.emplace(src, dst).second) {
      throw ConfigError("class map line " + std::to_string(line_no) + " maps id " + std::to_string(src) + " twice");
    }
  }
  return cm;
}

Dataset import_dataset(const std::string& source_dir, std::size_t num_classes,
                       const std::optional<ClassMap>& class_map, std::uint64_t seed) {
  if (!fs::is_directory(source_dir)) throw DataError("'" + source_dir + "' is not a directory");
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(source_dir)) {
    if (entry.path().extension() != ".hsicube") continue;
    auto mask_path = entry.path();
    mask_path.replace_extension(".hsimask");
    if (!fs::exists(mask_path)) throw DataError("'" + entry.path().string() + "' has no matching .hsimask");
    ids.push_back(entry.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  Dataset ds;
  ds.num_classes = num_classes;
  for (const auto& id : ids) {
    const auto base = (fs::path(source_dir) / id).string();
    Scene scene{read_cube(base + ".hsicube"), read_mask(base + ".hsimask")};
    scene.cube.validate();
    if (class_map) scene.mask = class_map->apply(scene.mask);
    if (scene.cube.height != scene.mask.height || scene.cube.width != scene.mask.width) {
      throw DataError("scene '" + id + "' cube and mask extents differ");
    }
    scene.mask.validate(num_classes);
    ds.ids.push_back(id);
    ds.scenes.push_back(std::move(scene));
  }
  auto splits = make_splits(ds.scenes.size(), seed);
  ds.train = std::move(splits.train);
  ds.val = std::move(splits.val);
  ds.test = std::move(splits.test);
  return ds;
}

}  // namespace msamseg
