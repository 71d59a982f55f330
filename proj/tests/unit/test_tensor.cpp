#include <doctest.h>

#include <cmath>
#include <limits>

#include "msamseg/tensor.hpp"
#include "test_util.hpp"

using namespace msamseg;
using testutil::random_tensor;

namespace {

struct NanGuardScope {
  explicit NanGuardScope(bool on) : previous(nan_guard_enabled()) { set_nan_guard(on); }
  ~NanGuardScope() { set_nan_guard(previous); }
  bool previous;
};

}  // namespace

TEST_CASE("tensor: shape and storage invariants") {
  Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.dim(1) == 3);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>({2}, {1, 2}).item(), ShapeError);

  auto x = Tensor<double>::ones({3}, true);
  CHECK(x.has_grad());
  CHECK(x.grad().size() == x.numel());
}

TEST_CASE("elementwise: closed-form values") {
  auto zero = Tensor<double>::zeros({1});
  CHECK(silu(zero).item() == 0.0);
  auto one = Tensor<double>::ones({1});
  CHECK(silu(one).item() == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-15));
  CHECK(silu(one).item() == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(sigmoid(zero).item() == 0.5);

  Tensor<double> neg({2}, {-2.0, 3.0});
  const auto lr_t = leaky_relu(neg);
  const auto lr = lr_t.data();
  CHECK(lr[0] == doctest::Approx(-0.02));
  CHECK(lr[1] == 3.0);
  CHECK(scale(neg, 2.5).data()[0] == -5.0);
}

TEST_CASE("elementwise: multiplying by ones is bit-exact") {
  std::mt19937_64 rng(3);
  auto x = random_tensor<float>({4, 5}, rng, -10, 10);
  auto y = mul(x, Tensor<float>::ones(x.shape()));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("elementwise: scalar broadcast and errors") {
  Tensor<double> a({3}, {1, 2, 3});
  auto b = add(a, Tensor<double>::scalar(10));
  CHECK(b.data()[2] == 13.0);
  auto one = add(Tensor<double>({1, 1, 1}, {2.0}), Tensor<double>::scalar(1));
  CHECK(one.shape() == Shape{1, 1, 1});
  CHECK(one.item() == 3.0);
  try {
    add(a, Tensor<double>::zeros({2, 2}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(3)") != std::string::npos);
    CHECK(msg.find("(2,2)") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_elementwise_kind("tanh"), ConfigError);
  for (auto k : {ElementwiseKind::add, ElementwiseKind::silu, ElementwiseKind::leaky_relu}) {
    CHECK(parse_elementwise_kind(elementwise_kind_name(k)) == k);
  }
}

TEST_CASE("reshape: row-major reinterpretation and round trip") {
  std::vector<double> v(6);
  for (std::size_t i = 0; i < 6; ++i) v[i] = static_cast<double>(i);
  auto r = reshape(Tensor<double>({6}, v), {2, 3});
  CHECK(r.data()[1 * 3 + 2] == 5.0);

  std::mt19937_64 rng(5);
  auto x = random_tensor<float>({3, 2, 2}, rng);
  auto back = reshape(reshape(x, {4, 3}), {3, 2, 2});
  CHECK(back.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);
  CHECK_THROWS_AS(reshape(x, {5, 2}), ShapeError);
}

TEST_CASE("swap_last_axes moves (n, a, b) to (n, b, a)") {
  std::vector<double> v(12);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  auto s = swap_last_axes(Tensor<double>({2, 2, 3}, v));
  CHECK(s.shape() == Shape{2, 3, 2});
  // element (n=1, a=0, b=2) = 1*6 + 0*3 + 2 = 8 lands at (1, 2, 0)
  CHECK(s.data()[1 * 6 + 2 * 2 + 0] == 8.0);
}

TEST_CASE("backward: analytic gradients") {
  SUBCASE("sum(x*x)") {
    Tensor<double> x({3}, {1, 2, 3}, true);
    sum(mul(x, x)).backward();
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
    CHECK(x.grad()[2] == 6.0);
  }
  SUBCASE("sum(silu(x)) at 0") {
    Tensor<double> x({1}, {0.0}, true);
    sum(silu(x)).backward();
    CHECK(x.grad()[0] == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("gradient of sum(reshape(x)) is all ones") {
    std::mt19937_64 rng(1);
    auto x = random_tensor<double>({2, 3, 2}, rng, -1, 1, true);
    sum(reshape(x, {3, 4})).backward();
    for (auto g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("mean divides by the element count") {
    Tensor<double> x({4}, {1, 2, 3, 4}, true);
    auto m = mean(x);
    CHECK(m.item() == 2.5);
    m.backward();
    for (auto g : x.grad()) CHECK(g == 0.25);
  }
  SUBCASE("shared input accumulates through both paths") {
    Tensor<double> x({2}, {1.5, -2.0}, true);
    sum(add(scale(x, 3.0), mul(x, x))).backward();
    CHECK(x.grad()[0] == doctest::Approx(3.0 + 3.0));
    CHECK(x.grad()[1] == doctest::Approx(3.0 - 4.0));
  }
  SUBCASE("scalar broadcast operand receives the summed gradient") {
    Tensor<double> x({3}, {1, 2, 3}, true);
    auto s = Tensor<double>::scalar(2.0, true);
    sum(mul(x, s)).backward();
    CHECK(s.grad()[0] == 6.0);
    CHECK(x.grad()[1] == 2.0);
  }
}

TEST_CASE("backward: unreachable leaves keep zero gradients") {
  Tensor<double> x({3}, {1, 2, 3}, true);
  Tensor<double> y({2}, {4, 5}, true);
  sum(mul(y, y)).backward();
  REQUIRE(x.grad().size() == 3);
  for (auto g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward: error cases") {
  Tensor<double> x({3}, {1, 2, 3}, true);
  CHECK_THROWS_AS(mul(x, x).backward(), ShapeError);

  auto loss = sum(mul(x, x));
  loss.backward();
  CHECK_THROWS_AS(loss.backward(), GraphError);

  Tensor<double> c({2}, {1, 2});
  CHECK_THROWS_AS(sum(c).backward(), GraphError);
}

TEST_CASE("grad graph: topological order and single visit") {
  Tensor<double> x({2}, {0.3, -0.7}, true);
  auto a = silu(x);
  auto b = mul(a, x);
  auto c = add(b, a);
  auto loss = sum(c);
  const auto graph = GradGraph<double>::collect(loss);
  CHECK(graph.size() == 4);
  const auto& nodes = graph.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& in : nodes[i]->inputs) {
      if (!in->producer) continue;
      bool earlier = false;
      for (std::size_t j = 0; j < i; ++j) earlier = earlier || nodes[j] == in->producer;
      CHECK(earlier);
    }
  }
  loss.backward();
  for (const auto& n : nodes) CHECK(n->consumed);
}

TEST_CASE("NoGradGuard records nothing") {
  Tensor<double> x({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.is_leaf());
  }
  CHECK(grad_enabled());
  CHECK(mul(x, x).requires_grad());
}

TEST_CASE("NaN guard rejects non-finite values") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  {
    NanGuardScope on(true);
    Tensor<double> x({2}, {1.0, nan});
    CHECK_THROWS_AS(add(x, x), NumericalError);
    Tensor<double> big({1}, {1e308}, true);
    CHECK_THROWS_AS(mul(big, big), NumericalError);
  }
  {
    NanGuardScope off(false);
    Tensor<double> x({2}, {1.0, nan});
    CHECK(std::isnan(add(x, x).data()[1]));
  }
}

TEST_CASE("deterministic replay gives bit-identical values and gradients") {
  auto run = [] {
    std::mt19937_64 rng(42);
    auto x = random_tensor<float>({4, 6}, rng, -2, 2, true);
    auto w = random_tensor<float>({4, 6}, rng, -2, 2, true);
    auto y = sum(silu(mul(x, w)));
    y.backward();
    std::vector<float> out{y.item()};
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("detach and clone copy data") {
  Tensor<float> x({2}, {1, 2}, true);
  auto d = mul(x, x).detach();
  CHECK(d.is_leaf());
  CHECK_FALSE(d.requires_grad());
  auto c = x.clone();
  c.mutable_data()[0] = 9;
  CHECK(x.data()[0] == 1.0f);
}
