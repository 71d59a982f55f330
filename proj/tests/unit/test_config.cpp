#include <doctest.h>

#include "msamseg/config.hpp"
#include "test_util.hpp"

using namespace msamseg;

namespace {

ExperimentConfig random_config(std::mt19937_64& rng) {
  using testutil::pick;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ExperimentConfig c;
  c.scene.num_classes = pick(rng, 2, 7);
  c.scene.channels = pick(rng, 6, 40);
  c.scene.height = 16 * pick(rng, 2, 6);
  c.scene.width = 16 * pick(rng, 2, 6);
  c.scene.metameric_pairs.clear();
  if (c.scene.num_classes >= 4 && pick(rng, 0, 1)) c.scene.metameric_pairs = {{0, 1}, {2, 3}};
  c.scene.metameric_floor = 0.05 + 0.3 * u(rng);
  c.scene.jitter = 0.3 * u(rng);
  c.scene.noise_sigma = 0.05 * u(rng);
  c.scene.min_radius = pick(rng, 1, 4);
  c.scene.max_radius = c.scene.min_radius + pick(rng, 0, 8);
  c.scene.border = pick(rng, 0, 3);
  if (pick(rng, 0, 1)) {
    std::vector<double> shares(c.scene.num_classes, 1.0 / static_cast<double>(c.scene.num_classes));
    c.scene.class_shares = shares;
  }
  c.scene.signature_seed = rng() >> 1;
  c.scene.seed = rng() >> 1;
  c.scene_count = pick(rng, 0, 500);
  c.split_seed = rng();
  if (pick(rng, 0, 3) == 0) c.dataset = "data/dir_" + std::to_string(pick(rng, 0, 99));

  c.model.in_channels = c.scene.channels;
  c.model.num_classes = c.scene.num_classes;
  c.model.base_depth = std::vector<std::size_t>{16, 32, 64}[pick(rng, 0, 2)];
  const auto all = placements();
  c.model.placement = all[pick(rng, 0, all.size() - 1)];
  if (c.model.placement != Placement::none) {
    const auto combos = enumerate_kernel_combos();
    c.model.msam_kernels = combos[pick(rng, 0, combos.size() - 1)];
  } else {
    c.model.msam_kernels.reset();
  }
  c.model.dropout_rate = 0.5 * u(rng);

  c.loss.ce_weight = u(rng) * 2;
  c.loss.dice_weight = u(rng) * 2;
  switch (pick(rng, 0, 2)) {
    case 0: c.auto_class_weights = true; c.loss.class_weights.clear(); break;
    case 1: c.auto_class_weights = false; c.loss.class_weights.clear(); break;
    default:
      c.auto_class_weights = false;
      c.loss.class_weights.clear();
      for (std::size_t k = 0; k < c.model.num_classes; ++k) c.loss.class_weights.push_back(0.1 + 9.9 * u(rng));
  }
  c.loss.dice_epsilon = 1e-7 + u(rng) * 1e-5;
  c.loss.ignore_label = static_cast<std::uint8_t>(pick(rng, 200, 255));

  c.train.epochs = pick(rng, 0, 100);
  c.train.batch_size = pick(rng, 1, 16);
  c.train.accum_steps = pick(rng, 1, 4);
  c.train.seed = rng();
  c.train.lr = 1e-5 + u(rng) * 1e-2;
  c.train.patience = pick(rng, 1, 20);
  c.train.eval_batch = pick(rng, 1, 16);
  c.train.frozen_norm = pick(rng, 0, 1) == 1;
  c.out_dir = "runs/r" + std::to_string(pick(rng, 0, 999));
  return c;
}

std::string error_of(const std::string& text) {
  try {
    ExperimentConfig::parse(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config: defaults follow the benchmark and training table") {
  const ExperimentConfig c;
  CHECK(c.train.lr == 7e-4);
  CHECK(c.scene == metameric_benchmark_spec());
  CHECK(c.model.in_channels == 15);
  CHECK(c.model.num_classes == 5);
  CHECK_NOTHROW(c.validate());
  CHECK(ExperimentConfig::parse("") == c);
}

TEST_CASE("config: parse(serialize(c)) == c for randomized configs") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = random_config(rng);
    REQUIRE_NOTHROW(c.validate());
    const auto text = c.serialize();
    CAPTURE(text);
    CHECK(ExperimentConfig::parse(text) == c);
  }
}

TEST_CASE("config: kernel notation and comments") {
  const auto c = ExperimentConfig::parse(
      "# experiment\n[model]\nplacement = skip_connection   # in the skip path\nmsam_kernels = (1;5;9)\n");
  CHECK(c.model.placement == Placement::skip_connection);
  CHECK(c.model.msam_kernels == MsamConfig::triple(1, 5, 9));
}

TEST_CASE("config: errors carry line numbers") {
  CHECK(error_of("[train]\nepochs = 3\nepoch = 4\n").find("line 3") != std::string::npos);
  CHECK(error_of("[train]\nepochs = 3\nepoch = 4\n").find("epoch") != std::string::npos);
  CHECK(error_of("[optimizer]\n").find("line 1") != std::string::npos);
  CHECK(error_of("epochs = 3\n").find("line 1") != std::string::npos);
  CHECK(error_of("[train]\n\n\nepochs = many\n").find("line 4") != std::string::npos);
  CHECK(error_of("[train]\nepochs = 1\nepochs = 2\n").find("line 3") != std::string::npos);
  CHECK(error_of("[model\n").find("line 1") != std::string::npos);
  CHECK(error_of("[model]\nplacement\n").find("line 2") != std::string::npos);
  CHECK(error_of("[model]\nmsam_kernels = (1;2;3)\n").find("line 2") != std::string::npos);
  CHECK(error_of("[data]\nmetameric_pairs = 1:2\n").find("line 2") != std::string::npos);
}

TEST_CASE("config: semantic validation across sections") {
  CHECK_FALSE(error_of("[model]\nnum_classes = 7\n").empty());
  CHECK_FALSE(error_of("[model]\nplacement = skip_connection\nmsam_kernels = none\n").empty());
  CHECK_FALSE(error_of("[loss]\nclass_weights = 1,2\n").empty());
  CHECK_FALSE(error_of("[output]\nout_dir =\n").empty());
  CHECK(error_of("[data]\nclasses = 7\nmetameric_pairs = none\n[model]\nnum_classes = 7\n").empty());
}

TEST_CASE("config: load from a file") {
  testutil::TempDir dir("cfg");
  ExperimentConfig c;
  c.train.epochs = 2;
  testutil::write_bytes(dir / "a.ini", c.serialize());
  CHECK(ExperimentConfig::load((dir / "a.ini").string()) == c);
  testutil::write_bytes(dir / "b.ini", "[train]\nbogus = 1\n");
  try {
    ExperimentConfig::load((dir / "b.ini").string());
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("b.ini") != std::string::npos);
    CHECK(msg.find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(ExperimentConfig::load((dir / "none.ini").string()), ConfigError);
}
