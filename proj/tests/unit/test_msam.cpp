#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "msamseg/msam.hpp"
#include "msam_oracle.hpp"
#include "test_util.hpp"

using namespace msamseg;
using testutil::branch_oracle;
using testutil::model_init;
using testutil::msam_oracle;
using testutil::random_tensor;
using testutil::silu_d;

namespace {

template <typename T>
void randomize(MsamModule<T>& m, std::mt19937_64& rng) {
  ParameterList<T> params;
  m.collect(params, "m");
  std::normal_distribution<double> n(0.0, 0.5);
  for (auto& p : params)
    for (auto& v : p.tensor.mutable_data()) v = static_cast<T>(n(rng));
}

}  // namespace

TEST_CASE("kernel combinations") {
  const auto combos = enumerate_kernel_combos();
  REQUIRE(combos.size() == 32);
  std::size_t multi = 0, repeated = 0, single = 0;
  std::set<std::string> names;
  for (const auto& c : combos) {
    names.insert(c.notation());
    if (c.active_branches == 1) {
      ++single;
    } else if (c.kernels[0] == c.kernels[1] && c.kernels[1] == c.kernels[2]) {
      ++repeated;
    } else {
      CHECK(c.is_multi_scale());
      CHECK(c.kernels[0] < c.kernels[1]);
      CHECK(c.kernels[1] < c.kernels[2]);
      ++multi;
    }
  }
  CHECK(multi == 20);
  CHECK(repeated == 6);
  CHECK(single == 6);
  CHECK(names.size() == 32);
  CHECK(names.count("(1;5;9)") == 1);
  CHECK(names.count("(5;9;11)") == 1);

  // brute-force 3-subsets of {1,3,5,7,9,11}
  std::set<std::string> subsets;
  for (int a = 1; a <= 11; a += 2)
    for (int b = a + 2; b <= 11; b += 2)
      for (int c = b + 2; c <= 11; c += 2)
        subsets.insert("(" + std::to_string(a) + ";" + std::to_string(b) + ";" + std::to_string(c) + ")");
  CHECK(subsets.size() == 20);
  for (const auto& s : subsets) CHECK(names.count(s) == 1);

  const auto follow = followup_kernel_combos();
  CHECK(follow.size() == 8);
  for (const auto& f : follow) CHECK(names.count(f.notation()) == 1);
}

TEST_CASE("MsamConfig parse and notation") {
  CHECK(MsamConfig::parse("(1;5;9)") == MsamConfig::triple(1, 5, 9));
  CHECK(MsamConfig::parse("[1;5;9]") == MsamConfig::triple(1, 5, 9));
  CHECK(MsamConfig::parse(" ( 3 ; 7 ; 11 ) ") == MsamConfig::triple(3, 7, 11));
  CHECK(MsamConfig::parse("(5)") == MsamConfig::single(5));
  for (const auto& c : enumerate_kernel_combos()) CHECK(MsamConfig::parse(c.notation()) == c);
  for (const char* bad : {"1;5;9", "(1;5)", "(2;5;9)", "(1;5;13)", "(a;b;c)", "()", "(1;;9)"}) {
    CHECK_THROWS_AS(MsamConfig::parse(bad), ConfigError);
  }
}

TEST_CASE("MSAM parameter count") {
  CHECK(msam_parameter_count(MsamConfig::triple(3, 7, 11)) == 36);
  MsamModule<float> m(MsamConfig::triple(3, 7, 11), 25);
  CHECK(m.parameter_count() == 36);
  for (const auto& c : enumerate_kernel_combos()) {
    MsamModule<float> mod(c, 15);
    CHECK(mod.parameter_count() == msam_parameter_count(c));
    if (c.active_branches == 3) {
      CHECK(mod.parameter_count() ==
            static_cast<std::size_t>(c.kernels[0] + c.kernels[1] + c.kernels[2] + 3) + 12);
    }
    for (std::size_t b = 0; b < mod.branches.size(); ++b) {
      CHECK(mod.branches[b].primary.dilation ==
            static_cast<std::size_t>(dilation_for_kernel(c.active_kernels()[b])));
      CHECK(mod.branches[b].secondary.kernel == 3);
      CHECK(mod.branches[b].secondary.dilation == 1);
    }
  }
}

TEST_CASE("spectral_branch") {
  std::mt19937_64 rng(1);
  MsamModule<double> zero(MsamConfig::triple(1, 5, 9), 8);
  auto spectra = random_tensor<double>({4, 8}, rng);
  const auto zero_out = zero.spectral_branch(spectra, 1);
  for (auto v : zero_out.data()) CHECK(v == 0.0);

  MsamModule<double> id(MsamConfig::triple(1, 5, 9), 8);
  id.branches[0].primary.weight.mutable_data()[0] = 1.0;
  id.branches[0].secondary.weight.mutable_data()[1] = 1.0;
  auto positive = random_tensor<double>({4, 8}, rng, 0.0, 2.0);
  auto out = id.spectral_branch(positive, 0);
  for (std::size_t i = 0; i < positive.numel(); ++i) CHECK(out.data()[i] == positive.data()[i]);

  MsamModule<float> m(MsamConfig::triple(3, 7, 11), 8);
  randomize(m, rng);
  auto s = random_tensor<float>({4, 8}, rng);
  for (std::size_t b = 0; b < 3; ++b) {
    const auto got = m.spectral_branch(s, b);
    for (std::size_t r = 0; r < 4; ++r) {
      std::vector<double> row(8);
      for (std::size_t c = 0; c < 8; ++c) row[c] = s.data()[r * 8 + c];
      const auto want = branch_oracle<float>(row, m.branches[b]);
      for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(got.data()[r * 8 + c] - want[c]) < 1e-5);
    }
  }
  CHECK_THROWS_AS(m.spectral_branch(random_tensor<float>({4, 7}, rng), 0), ShapeError);
}

TEST_CASE("fuse") {
  std::mt19937_64 rng(2);
  MsamModule<double> m(MsamConfig::triple(1, 3, 5), 6);
  const Shape image{6, 2, 3};
  std::vector<Tensor<double>> zeros(3, Tensor<double>::zeros({6, 6}));
  const auto fused_zero = m.fuse(zeros, image);
  for (auto v : fused_zero.data()) CHECK(v == 0.0);

  std::vector<Tensor<double>> f{random_tensor<double>({6, 6}, rng), random_tensor<double>({6, 6}, rng),
                                random_tensor<double>({6, 6}, rng)};
  const auto a = m.fuse(f, image);
  const auto b = m.fuse({f[2], f[0], f[1]}, image);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-6);

  // one pixel differs from the others: direct IN -> SiLU chain
  std::vector<double> vals(36, 0.5);
  vals[2 * 6 + 3] = 2.0;  // pixel 2, channel 3
  Tensor<double> single({6, 6}, vals);
  const auto got = m.fuse({single}, image);
  const double mu = (5 * 0.5 + 2.0) / 6.0;
  const double var = (5 * (0.5 - mu) * (0.5 - mu) + (2.0 - mu) * (2.0 - mu)) / 6.0;
  for (std::size_t p = 0; p < 6; ++p) {
    const double v = p == 2 ? 2.0 : 0.5;
    CHECK(got.data()[3 * 6 + p] == doctest::Approx(silu_d((v - mu) / std::sqrt(var + m.eps))).epsilon(1e-12));
    CHECK(got.data()[0 * 6 + p] == 0.0);
  }
  CHECK_THROWS_AS(m.fuse({Tensor<double>::zeros({6, 6}), Tensor<double>::zeros({5, 6})}, image), ShapeError);
}

TEST_CASE("msam_forward: identity at zero and shapes") {
  std::mt19937_64 rng(3);
  for (const auto& c : enumerate_kernel_combos()) {
    for (std::size_t ch : {4u, 15u, 25u, 128u}) {
      MsamModule<float> m(c, ch);
      auto x = random_tensor<float>({ch, 2, 3}, rng, -4, 4);
      auto y = m.forward(x);
      REQUIRE(y.shape() == x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) REQUIRE(y.data()[i] == x.data()[i]);
    }
  }
  MsamModule<float> m(MsamConfig::triple(1, 5, 9), 15);
  randomize(m, rng);
  CHECK(m.forward(random_tensor<float>({15, 4, 5}, rng)).shape() == Shape{15, 4, 5});
  CHECK(m.forward(random_tensor<float>({2, 15, 4, 5}, rng)).shape() == Shape{2, 15, 4, 5});
  CHECK_THROWS_AS(m.forward(random_tensor<float>({14, 4, 5}, rng)), ShapeError);
  m.zero_parameters();
  auto x = random_tensor<float>({15, 4, 5}, rng);
  auto y = m.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("msam_forward: end-to-end scalar oracle") {
  std::mt19937_64 rng(4);
  const MsamConfig configs[] = {MsamConfig::triple(1, 3, 5), MsamConfig::triple(1, 5, 9),
                                MsamConfig::triple(5, 9, 11), MsamConfig::triple(7, 7, 7), MsamConfig::single(11)};
  for (const auto& cfg : configs) {
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t c = testutil::pick(rng, 1, 16), h = testutil::pick(rng, 1, 6), w = testutil::pick(rng, 1, 6);
      MsamModule<float> m(cfg, c);
      model_init(m, rng());
      auto x = random_tensor<float>({c, h, w}, rng, -2, 2);
      const auto got = m.forward(x);
      const auto want = msam_oracle(x, m);
      for (std::size_t i = 0; i < want.size(); ++i) {
        INFO("c=", c, " h=", h, " w=", w, " i=", i);
        REQUIRE(std::abs(got.data()[i] - want[i]) < 1e-5);
      }
    }
  }
  MsamModule<float> m(MsamConfig::triple(1, 3, 5), 8);
  randomize(m, rng);
  auto x = random_tensor<float>({2, 8, 3, 3}, rng);
  const auto batched = m.forward(x);
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor<float> one({8, 3, 3}, std::vector<float>(x.data().begin() + b * 72, x.data().begin() + (b + 1) * 72));
    const auto want = msam_oracle(one, m);
    for (std::size_t i = 0; i < 72; ++i) CHECK(std::abs(batched.data()[b * 72 + i] - want[i]) < 1e-5);
  }
}

TEST_CASE("msam_forward never flips signs") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    MsamModule<float> m(MsamConfig::triple(1, 5, 9), 12);
    ParameterList<float> params;
    m.collect(params, "m");
    std::normal_distribution<double> n(0.0, 3.0);
    for (auto& p : params)
      for (auto& v : p.tensor.mutable_data()) v = static_cast<float>(n(rng));
    auto x = random_tensor<float>({12, 4, 4}, rng, -5, 5);
    const auto y = m.forward(x);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      if (x.data()[i] == 0.0f) continue;
      CHECK((y.data()[i] > 0) == (x.data()[i] > 0));
      CHECK(y.data()[i] / x.data()[i] > 0.72f);
    }
  }
}
