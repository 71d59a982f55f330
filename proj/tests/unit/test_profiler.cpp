#include <doctest.h>

#include <cmath>
#include <sstream>

#include "msamseg/profiler.hpp"
#include "test_util.hpp"

using namespace msamseg;

namespace {

UNetConfig config(std::size_t in, std::size_t depth, Placement p, std::optional<MsamConfig> k = std::nullopt) {
  UNetConfig c;
  c.in_channels = in;
  c.num_classes = 7;
  c.base_depth = depth;
  c.placement = p;
  if (p != Placement::none) c.msam_kernels = k ? k : MsamConfig::triple(3, 7, 11);
  return c;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') quoted = !quoted;
    else if (ch == ',' && !quoted) {
      out.push_back(cell);
      cell.clear();
    } else cell += ch;
  }
  out.push_back(cell);
  return out;
}

}  // namespace

TEST_CASE("flops: single 1x1 convolution") {
  const auto f = conv2d_flops(1, 1, 1, 10, 10, true);
  CHECK(f.macs == 100);
  CHECK(f.flops == 200 + 100);
  CHECK(conv2d_flops(1, 1, 1, 10, 10, false).flops == 200);
  CHECK(conv2d_flops(3, 4, 3, 5, 6, false).macs == 9ULL * 3 * 4 * 30);
}

TEST_CASE("flops: MSAM instance closed form") {
  // per element: branches (i + 3) MACs and two bias adds, sum of branches,
  // instance norm 5, attention 2
  const auto f = msam_flops(MsamConfig::triple(3, 7, 11), 16, 4, 4);
  const std::uint64_t e = 16 * 4 * 4;
  CHECK(f.macs == (6 + 10 + 14) * e);
  CHECK(f.flops == 2 * (6 + 10 + 14) * e + 6 * e + 2 * e + 5 * e + 2 * e);
  const auto single = msam_flops(MsamConfig::single(5), 16, 4, 4);
  CHECK(single.flops == 2 * 8 * e + 2 * e + 5 * e + 2 * e);
}

TEST_CASE("flops: linear in H*W for fixed configurations") {
  for (auto p : placements()) {
    const auto cfg = config(15, 16, p);
    const auto a = estimate_flops(cfg, 64, 64);
    const auto b = estimate_flops(cfg, 128, 128);
    const auto c = estimate_flops(cfg, 64, 128);
    CHECK(b.flops == 4 * a.flops);
    CHECK(c.flops == 2 * a.flops);
    CHECK(b.macs == 4 * a.macs);
  }
  CHECK_THROWS_AS(estimate_flops(config(15, 16, Placement::none), 8, 8), ShapeError);
}

TEST_CASE("flops: pinned UNet16-SC estimate at 209x416") {
  const auto f = estimate_flops(config(25, 16, Placement::none), 209, 416);
  CHECK(f.flops == 9672595296ULL);
  CHECK(f.flops > 2 * f.macs);
}

TEST_CASE("flops: attention never lowers the estimate") {
  for (std::size_t depth : {16, 32, 64}) {
    const auto sc = estimate_flops(config(25, depth, Placement::none), 209, 416).flops;
    for (const auto& k : enumerate_kernel_combos()) {
      CHECK(estimate_flops(config(25, depth, Placement::skip_connection, k), 209, 416).flops > sc);
    }
  }
}

TEST_CASE("profiler: MSAM(3;7;11) FLOP overhead within the 0.5%-2% example band" * doctest::skip()) {
  // Registered as its own ctest entry; the unit run skips it.
  const double sc = static_cast<double>(estimate_flops(config(25, 16, Placement::none), 209, 416).flops);
  const double msam =
      static_cast<double>(estimate_flops(config(25, 16, Placement::skip_connection, MsamConfig::triple(3, 7, 11)), 209, 416).flops);
  const double overhead = (msam - sc) / sc;
  INFO("overhead = ", overhead * 100.0, "%");
  CHECK(overhead >= 0.005);
  CHECK(overhead <= 0.02);
}

TEST_CASE("profiler: report fields") {
  auto model = UNetModel<float>::build(config(15, 16, Placement::skip_connection), 1);
  const auto r = profile_model(model, "synthetic", 64, 64, 0, 0);
  CHECK(r.parameter_count == analytic_parameter_count(model.config()));
  CHECK(r.model_size_bytes == 4 * r.parameter_count);
  CHECK(r.flops.flops == estimate_flops(model.config(), 64, 64).flops);
  CHECK_FALSE(r.latency.has_value());
}

TEST_CASE("profiler: published backbone sizes") {
  auto near = [](std::size_t v, double t) { return std::abs(static_cast<double>(v) - t) <= 0.005 * t; };
  CHECK(near(analytic_parameter_count(config(25, 16, Placement::none)), 1.9459e6));
  CHECK(near(analytic_parameter_count(config(15, 64, Placement::none)), 31.045e6));
  CHECK(near(analytic_parameter_count(config(25, 32, Placement::none)), 7.7696e6));
  CHECK(msam_parameter_count(MsamConfig::triple(3, 7, 11)) == 36);
}

TEST_CASE("quantile: linear interpolation") {
  CHECK(quantile({1, 2, 3, 4}, 0.5) == 2.5);
  CHECK(quantile({5, 1, 3}, 0.5) == 3);
  CHECK(quantile({1, 2, 3, 4, 5}, 0.25) == 2);
  CHECK(quantile({7}, 0.75) == 7);
  CHECK_THROWS_AS(quantile({}, 0.5), ShapeError);
}

TEST_CASE("latency: protocol limits, repeatability and MSAM >= SC") {
  auto sc = UNetModel<float>::build(config(15, 16, Placement::none), 1);
  auto msam = UNetModel<float>::build(config(15, 16, Placement::skip_connection), 1);
  CHECK_THROWS_AS(measure_latency(sc, 64, 64, 29, 5), ConfigError);
  CHECK_THROWS_AS(measure_latency(sc, 64, 64, 30, 4), ConfigError);

  const auto a = measure_latency(sc, 64, 64);
  const auto b = measure_latency(sc, 64, 64);
  CHECK(a.samples_ms.size() == 30);
  CHECK(a.iqr_ms >= 0.0);
  CHECK(std::abs(a.median_ms - b.median_ms) <= 0.25 * std::max(a.median_ms, b.median_ms));

  const auto m = measure_latency(msam, 64, 64);
  const auto s = measure_latency(sc, 64, 64);
  INFO("SC ", s.median_ms, " ms, MSAM ", m.median_ms, " ms");
  CHECK(m.median_ms >= s.median_ms);
}

TEST_CASE("profile_csv: report columns and convention") {
  auto model = UNetModel<float>::build(config(25, 16, Placement::none), 1);
  auto r = profile_model(model, "hsi-drive", 209, 416, 0, 0);
  std::istringstream in(profile_csv({r}));
  std::string header, row, extra;
  std::getline(in, header);
  std::getline(in, row);
  CHECK_FALSE(std::getline(in, extra));
  const auto cols = split_csv(header);
  for (const char* name : {"dataset", "model", "parameters_millions", "gflops", "model_size_mb", "inference_cpu_ms",
                           "inference_gpu_ms", "parameters", "flops", "macs", "flop_convention"}) {
    CHECK(std::find(cols.begin(), cols.end(), name) != cols.end());
  }
  const auto cells = split_csv(row);
  REQUIRE(cells.size() == cols.size());
  CHECK(cells[0] == "hsi-drive");
  CHECK(cells[1] == "UNet16-SC");
  CHECK(cells.back() == kFlopConvention);
  CHECK(cells[7] == std::to_string(r.parameter_count));
}
