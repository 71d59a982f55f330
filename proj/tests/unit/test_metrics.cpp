#include <doctest.h>

#include <cmath>

#include "msamseg/metrics.hpp"
#include "test_util.hpp"

using namespace msamseg;

TEST_CASE("metrics: 2-class worked example") {
  ConfusionMatrix cm(2);
  cm.set(0, 0, 3);
  cm.set(0, 1, 1);
  cm.set(1, 0, 2);
  cm.set(1, 1, 4);
  const auto iou = per_class_iou(cm);
  CHECK(iou[0] == doctest::Approx(3.0 / 6.0).epsilon(1e-15));
  CHECK(iou[1] == doctest::Approx(4.0 / 7.0).epsilon(1e-15));
  CHECK(miou(cm) == doctest::Approx(0.5357142857142857).epsilon(1e-14));
  CHECK(mf1(cm) == doctest::Approx(0.6969696969696969).epsilon(1e-14));
  CHECK(cm.total() == 10);
}

TEST_CASE("metrics: perfect prediction") {
  ConfusionMatrix cm(3);
  const std::vector<std::uint8_t> labels{0, 1, 2, 2, 1, 0, 255};
  cm.accumulate(labels, labels);
  CHECK(cm.total() == 6);
  CHECK(miou(cm) == 1.0);
  CHECK(mf1(cm) == 1.0);
}

TEST_CASE("metrics: absent classes do not count") {
  ConfusionMatrix a(2), b(4);
  for (auto* cm : {&a, &b}) {
    cm->set(0, 0, 3);
    cm->set(0, 1, 1);
    cm->set(1, 0, 2);
    cm->set(1, 1, 4);
  }
  CHECK_FALSE(b.class_present(3));
  CHECK(miou(a) == miou(b));
  CHECK(mf1(a) == mf1(b));
  CHECK(std::isnan(per_class_iou(b)[2]));
}

TEST_CASE("metrics: empty matrices are errors") {
  CHECK_THROWS_AS(miou(ConfusionMatrix(3)), ShapeError);
  CHECK_THROWS_AS(mf1(ConfusionMatrix(0)), ShapeError);
}

TEST_CASE("metrics: accumulate validates and skips unlabeled pixels") {
  ConfusionMatrix cm(3);
  CHECK_THROWS_AS(cm.accumulate(std::vector<std::uint8_t>{0, 1}, std::vector<std::uint8_t>{0}), ShapeError);
  CHECK_THROWS_AS(cm.accumulate(std::vector<std::uint8_t>{3}, std::vector<std::uint8_t>{0}), ShapeError);
  CHECK_THROWS_AS(cm.accumulate(std::vector<std::uint8_t>{0}, std::vector<std::uint8_t>{4}), ShapeError);
  cm.accumulate(std::vector<std::uint8_t>{0, 2, 1}, std::vector<std::uint8_t>{255, 2, 0});
  CHECK(cm.total() == 2);
  CHECK(cm.at(2, 2) == 1);
  CHECK(cm.at(0, 1) == 1);
}

TEST_CASE("metrics: random matrices against brute-force counting") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = testutil::pick(rng, 2, 8);
    const std::size_t n = testutil::pick(rng, 1, 400);
    std::vector<std::uint8_t> truth(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = testutil::pick(rng, 0, 9) == 0 ? 255 : static_cast<std::uint8_t>(testutil::pick(rng, 0, k - 1));
      pred[i] = static_cast<std::uint8_t>(testutil::pick(rng, 0, k - 1));
    }
    truth[0] = 0;
    ConfusionMatrix cm(k);
    // split accumulation must conserve totals
    const std::size_t half = n / 2;
    cm.accumulate(std::span(pred).first(half), std::span(truth).first(half));
    ConfusionMatrix rest(k);
    rest.accumulate(std::span(pred).subspan(half), std::span(truth).subspan(half));
    cm.merge(rest);

    std::size_t labeled = 0;
    double iou_sum = 0, f1_sum = 0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < k; ++c) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (truth[i] == 255) continue;
        tp += truth[i] == c && pred[i] == c;
        fp += truth[i] != c && pred[i] == c;
        fn += truth[i] == c && pred[i] != c;
      }
      CHECK(cm.true_positives(c) == tp);
      CHECK(cm.false_positives(c) == fp);
      CHECK(cm.false_negatives(c) == fn);
      if (tp + fp + fn == 0) continue;
      ++present;
      iou_sum += static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      f1_sum += 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    }
    for (auto t : truth) labeled += t != 255;
    CHECK(cm.total() == labeled);
    const double mi = miou(cm), mf = mf1(cm);
    CHECK(std::abs(mi - iou_sum / static_cast<double>(present)) <= 1e-12);
    CHECK(std::abs(mf - f1_sum / static_cast<double>(present)) <= 1e-12);
    CHECK(mf >= mi);
    CHECK(mi >= 0.0);
    CHECK(mf <= 1.0);
  }
}

TEST_CASE("predict_labels: channel argmax with first-max ties") {
  // batch 1, 3 classes, 2 pixels
  const std::vector<float> logits{0.5f, 2.0f, 1.0f, 2.0f, 1.0f, -1.0f};
  const auto pred = predict_labels(logits, 1, 3, 2);
  REQUIRE(pred.size() == 2);
  CHECK(pred[0] == 1);
  CHECK(pred[1] == 0);
  CHECK_THROWS_AS(predict_labels(logits, 2, 3, 2), ShapeError);
}

TEST_CASE("make_report copies the summary values") {
  ConfusionMatrix cm(2);
  cm.set(0, 0, 5);
  cm.set(1, 1, 5);
  const auto r = make_report(cm, 0.25);
  CHECK(r.loss == 0.25);
  CHECK(r.miou == 1.0);
  CHECK(r.class_iou.size() == 2);
}
