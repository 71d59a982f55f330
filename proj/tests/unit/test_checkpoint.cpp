#include <doctest.h>

#include <cstring>

#include "msamseg/checkpoint.hpp"
#include "test_util.hpp"

using namespace msamseg;

namespace {

UNetConfig small_config() {
  UNetConfig c;
  c.in_channels = 6;
  c.num_classes = 4;
  c.placement = Placement::skip_connection;
  c.msam_kernels = MsamConfig::triple(3, 7, 11);
  return c;
}

}  // namespace

TEST_CASE("checkpoint: write/read round trip is bit-exact") {
  testutil::TempDir dir("ckpt");
  auto model = UNetModel<float>::build(small_config(), 3);
  // move the running statistics away from their initial values
  std::mt19937_64 rng(1);
  model.forward(testutil::random_tensor<float>({2, 6, 16, 16}, rng, 0, 1), Mode::train);

  const auto ckpt = capture_checkpoint(model, {{"best_epoch", "4"}, {"val_miou", "0.5"}});
  const auto path = (dir / "m.ckpt").string();
  write_checkpoint(path, ckpt);
  const auto back = read_checkpoint(path);
  CHECK(back.config == ckpt.config);
  CHECK(back.metadata == ckpt.metadata);
  REQUIRE(back.records.size() == ckpt.records.size());
  CHECK(ckpt.records.size() == model.parameters().size() + model.buffers().size());
  for (std::size_t i = 0; i < ckpt.records.size(); ++i) {
    CHECK(back.records[i].name == ckpt.records[i].name);
    CHECK(back.records[i].shape == ckpt.records[i].shape);
    CHECK(std::memcmp(back.records[i].values.data(), ckpt.records[i].values.data(),
                      ckpt.records[i].values.size() * sizeof(float)) == 0);
  }

  // writing the reloaded checkpoint reproduces the same bytes
  write_checkpoint((dir / "again.ckpt").string(), back);
  CHECK(testutil::read_bytes(dir / "m.ckpt") == testutil::read_bytes(dir / "again.ckpt"));

  auto restored = model_from_checkpoint(back);
  auto x = testutil::random_tensor<float>({1, 6, 16, 16}, rng, 0, 1);
  const auto a = model.forward(x, Mode::eval);
  const auto b = restored.forward(x, Mode::eval);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("checkpoint: header layout") {
  testutil::TempDir dir("ckpt");
  auto model = UNetModel<float>::build(small_config(), 3);
  write_checkpoint((dir / "m.ckpt").string(), capture_checkpoint(model));
  const auto bytes = testutil::read_bytes(dir / "m.ckpt");
  REQUIRE(bytes.size() > 12);
  CHECK(bytes.compare(0, 8, "MSAMCKPT") == 0);
  CHECK(static_cast<unsigned char>(bytes[8]) == kCheckpointVersion);
  CHECK(bytes[9] == 0);
}

TEST_CASE("checkpoint: corrupt files are rejected") {
  testutil::TempDir dir("ckpt");
  auto model = UNetModel<float>::build(small_config(), 3);
  const auto good = dir / "m.ckpt";
  write_checkpoint(good.string(), capture_checkpoint(model));
  const auto bytes = testutil::read_bytes(good);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  testutil::write_bytes(dir / "magic.ckpt", bad_magic);
  CHECK_THROWS_AS(read_checkpoint((dir / "magic.ckpt").string()), FormatError);

  auto bad_version = bytes;
  bad_version[8] = 9;
  testutil::write_bytes(dir / "version.ckpt", bad_version);
  CHECK_THROWS_AS(read_checkpoint((dir / "version.ckpt").string()), FormatError);

  for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    testutil::write_bytes(dir / "short.ckpt", bytes.substr(0, cut));
    CAPTURE(cut);
    CHECK_THROWS_AS(read_checkpoint((dir / "short.ckpt").string()), FormatError);
  }
  testutil::write_bytes(dir / "long.ckpt", bytes + "x");
  CHECK_THROWS_AS(read_checkpoint((dir / "long.ckpt").string()), FormatError);
  CHECK_THROWS_AS(read_checkpoint((dir / "missing.ckpt").string()), FormatError);
}

TEST_CASE("checkpoint: apply rejects mismatched models") {
  auto model = UNetModel<float>::build(small_config(), 3);
  const auto ckpt = capture_checkpoint(model);
  auto other_cfg = small_config();
  other_cfg.num_classes = 5;
  auto other = UNetModel<float>::build(other_cfg, 3);
  CHECK_THROWS(apply_checkpoint(ckpt, other));
}
