// Acceptance checks. Prints one PASS/FAIL line per criterion; exit status is
// non-zero when any selected criterion fails.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msam_oracle.hpp"
#include "msamseg/experiment.hpp"
#include "msamseg/gradcheck.hpp"
#include "test_util.hpp"

using namespace msamseg;

namespace {

struct Outcome {
  bool passed = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

UNetConfig backbone(std::size_t in, std::size_t classes, std::size_t depth, Placement placement = Placement::none,
                    std::optional<MsamConfig> kernels = std::nullopt) {
  UNetConfig c;
  c.in_channels = in;
  c.num_classes = classes;
  c.base_depth = depth;
  c.placement = placement;
  c.msam_kernels = kernels;
  return c;
}

Outcome parameter_counts() {
  Outcome out;
  struct Target {
    std::size_t in, depth;
    double millions;
  };
  const Target targets[] = {{25, 16, 1.9459}, {25, 32, 7.7696}, {25, 64, 31.051},
                            {15, 16, 1.9444}, {15, 32, 7.7667}, {15, 64, 31.045}};
  double worst = 0;
  for (const auto& t : targets) {
    const auto cfg = backbone(t.in, 7, t.depth);
    const auto built = UNetModel<float>::build(cfg, 1).parameter_count();
    const double rel = std::abs(static_cast<double>(built) - t.millions * 1e6) / (t.millions * 1e6);
    worst = std::max(worst, rel);
    out.require(rel <= 0.005, cfg.label() + " in=" + std::to_string(t.in) + " has " + std::to_string(built));
    out.require(built == analytic_parameter_count(cfg), cfg.label() + " analytic count disagrees");
  }
  out.note("worst deviation " + fmt(worst * 100, 3) + "%");
  return out;
}

Outcome msam_parameter_overhead() {
  Outcome out;
  double worst = 0, sum = 0;
  std::size_t n = 0;
  for (std::size_t in : {15, 25}) {
    for (std::size_t depth : {16, 32, 64}) {
      const double sc = static_cast<double>(analytic_parameter_count(backbone(in, 7, depth)));
      for (const auto& k : enumerate_kernel_combos()) {
        const auto cfg = backbone(in, 7, depth, Placement::skip_connection, k);
        const double rel = (static_cast<double>(analytic_parameter_count(cfg)) - sc) / sc;
        out.require(rel > 0 && rel < 0.001, cfg.label() + " overhead " + fmt(rel * 100) + "%");
        worst = std::max(worst, rel);
        sum += rel;
        ++n;
      }
    }
  }
  const auto probe = backbone(25, 7, 16, Placement::skip_connection, MsamConfig::triple(3, 7, 11));
  out.require(UNetModel<float>::build(probe, 1).parameter_count() == analytic_parameter_count(probe),
              "built MSAM model disagrees with the analytic count");
  out.note(std::to_string(n) + " configs, worst " + fmt(worst * 100, 3) + "%, mean " + fmt(sum / n * 100, 3) + "%");
  return out;
}

Outcome flop_overhead() {
  Outcome out;
  const double sc = static_cast<double>(estimate_flops(backbone(25, 7, 16), 209, 416).flops);
  const double msam = static_cast<double>(
      estimate_flops(backbone(25, 7, 16, Placement::skip_connection, MsamConfig::triple(3, 7, 11)), 209, 416).flops);
  const double rel = (msam - sc) / sc;
  out.require(rel >= 0.002 && rel <= 0.025, "relative increase " + fmt(rel * 100, 4) + "% outside [0.2%, 2.5%]");
  const double gflops = sc / 1e9;
  out.require(std::abs(gflops - 6.30) <= 0.63, "UNet16-SC " + fmt(gflops, 5) + " GFLOPs outside 6.30 +/- 10%");
  double lo = 1, hi = 0;
  for (const auto& k : enumerate_kernel_combos()) {
    const double m = static_cast<double>(estimate_flops(backbone(25, 7, 16, Placement::skip_connection, k), 209, 416).flops);
    lo = std::min(lo, (m - sc) / sc);
    hi = std::max(hi, (m - sc) / sc);
  }
  out.note("SC " + fmt(gflops, 5) + " G, MSAM(3;7;11) +" + fmt(rel * 100, 4) + "%, all combos [" + fmt(lo * 100, 3) +
           "%, " + fmt(hi * 100, 3) + "%]");
  return out;
}

Outcome gradient_checks() {
  Outcome out;
  GradCheckOptions options;
  options.instances = 20;
  std::set<std::string> seen;
  std::size_t cases = 0;
  double worst = 0;
  for (auto scope : {GradScope::all_ops, GradScope::msam}) {
    for (const auto& r : run_gradcheck(scope, options)) {
      ++cases;
      seen.insert(r.name);
      worst = std::max(worst, r.max_rel_error);
      out.require(r.passed, r.name + " failed (" + r.worst + ")");
      out.require(r.instances >= 20 && r.coordinates > 0, r.name + " ran too few instances");
    }
  }
  for (const char* name : {"msam(1;1;1)", "msam(1;5;9)", "msam(5;9;11)"}) out.require(seen.count(name) == 1, std::string(name) + " missing");
  out.note(std::to_string(cases) + " cases x 20 instances, worst relative error " + fmt(worst, 3));
  return out;
}

Outcome identity_at_zero() {
  Outcome out;
  std::mt19937_64 rng(5);
  for (std::size_t depth : {16, 32, 64}) {
    auto sc = UNetModel<float>::build(backbone(15, 5, depth), 17);
    auto msam = UNetModel<float>::build(backbone(15, 5, depth, Placement::skip_connection, MsamConfig::triple(1, 5, 9)), 17);
    msam.zero_msam_parameters();
    for (int i = 0; i < 5; ++i) {
      const auto x = testutil::random_tensor<float>({1, 15, 32, 32}, rng, 0, 1);
      const auto a = sc.forward(x, Mode::eval);
      const auto b = msam.forward(x, Mode::eval);
      const auto da = a.data();
      const auto db = b.data();
      out.require(std::equal(da.begin(), da.end(), db.begin(), db.end()),
                  "depth " + std::to_string(depth) + " input " + std::to_string(i) + " differs");
    }
  }
  out.note("3 depths x 5 inputs");
  return out;
}

Outcome oracle_equivalence() {
  Outcome out;
  std::mt19937_64 rng(6);
  const MsamConfig configs[] = {MsamConfig::triple(1, 1, 1), MsamConfig::triple(1, 5, 9), MsamConfig::triple(5, 9, 11),
                                MsamConfig::triple(3, 7, 11), MsamConfig::single(7)};
  double worst = 0;
  std::size_t tensors = 0;
  for (const auto& cfg : configs) {
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t c = testutil::pick(rng, 1, 16), h = testutil::pick(rng, 1, 6), w = testutil::pick(rng, 1, 6);
      MsamModule<float> m(cfg, c);
      testutil::model_init(m, rng());
      const auto x = testutil::random_tensor<float>({c, h, w}, rng, -2, 2);
      const auto got = m.forward(x);
      const auto values = got.data();
      const auto want = testutil::msam_oracle(x, m);
      for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(values[i] - want[i]));
      ++tensors;
    }
  }
  out.require(worst <= 1e-5, "max abs error " + fmt(worst, 3) + " > 1e-5");
  out.note(std::to_string(tensors) + " tensors, max abs error " + fmt(worst, 3));
  return out;
}

Outcome metamerism_benchmark() {
  Outcome out;
  ExperimentConfig base;
  base.scene = metameric_benchmark_spec();
  base.scene_count = 200;
  base.train.epochs = 40;
  base.train.lr = 7e-4;
  base.train.batch_size = 8;
  const auto dataset = prepare_dataset(base);
  std::vector<std::size_t> metameric;
  for (const auto& [a, b] : base.scene.metameric_pairs) {
    metameric.push_back(a);
    metameric.push_back(b);
  }

  std::map<std::string, std::vector<double>> miou, meta;
  for (bool attention : {false, true}) {
    const std::string name = attention ? "MSAM" : "SC";
    for (std::uint64_t seed : {1, 2, 3}) {
      auto cfg = base;
      cfg.train.seed = seed;
      if (attention) {
        cfg.model.placement = Placement::skip_connection;
        cfg.model.msam_kernels = MsamConfig::triple(1, 5, 9);
      }
      const auto t0 = std::chrono::steady_clock::now();
      const auto result = train_experiment(cfg, dataset);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const auto best = std::find_if(result.history.begin(), result.history.end(),
                                     [&](const EpochRecord& r) { return r.epoch == result.best_epoch; });
      double m = 0;
      std::size_t present = 0;
      for (auto c : metameric) {
        if (std::isnan(best->val.class_iou[c])) continue;
        m += best->val.class_iou[c];
        ++present;
      }
      m = present ? m / static_cast<double>(present) : 0.0;
      miou[name].push_back(result.best_miou);
      meta[name].push_back(m);
      std::cerr << "  " << cfg.model.label() << " seed " << seed << ": best val mIoU " << fmt(result.best_miou, 4)
                << " (epoch " << *result.best_epoch << "), metameric IoU " << fmt(m, 4) << ", " << fmt(secs, 4)
                << " s\n";
    }
  }
  const double sc = median(miou["SC"]), ms = median(miou["MSAM"]);
  const double margin = median(meta["MSAM"]) - median(meta["SC"]);
  out.require(ms >= sc, "MSAM median mIoU below SC");
  out.require(ms >= 0.80, "MSAM median mIoU below 0.80");
  out.require(margin >= 0, "metameric margin negative");
  out.note("median mIoU SC " + fmt(sc, 4) + ", MSAM " + fmt(ms, 4) + ", metameric margin " + fmt(margin, 4));
  return out;
}

Outcome grid_bookkeeping() {
  Outcome out;
  out.require(enumerate_kernel_combos().size() == 32, "kernel combos != 32");
  out.require(ablation_grid("full").size() == 161, "full grid != 161");
  const std::map<int, int> want{{1, 1}, {3, 2}, {5, 3}, {7, 4}, {9, 5}, {11, 6}};
  for (const auto& [k, d] : want) {
    out.require(dilation_for_kernel(k) == d, "dilation for kernel " + std::to_string(k));
    out.require(dilation_for_kernel(k) == std::max(1, (k + 1) / 2), "closed form for kernel " + std::to_string(k));
  }
  out.note("32 combos, 161 grid rows, dilation map checked");
  return out;
}

Outcome metric_correctness() {
  Outcome out;
  std::mt19937_64 rng(9);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = testutil::pick(rng, 2, 8), n = testutil::pick(rng, 1, 400);
    std::vector<std::uint8_t> truth(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = static_cast<std::uint8_t>(testutil::pick(rng, 0, k - 1));
      pred[i] = testutil::pick(rng, 0, 2) ? truth[i] : static_cast<std::uint8_t>(testutil::pick(rng, 0, k - 1));
    }
    ConfusionMatrix cm(k);
    cm.accumulate(pred, truth);
    double iou_sum = 0, f1_sum = 0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < k; ++c) {
      double tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        tp += pred[i] == c && truth[i] == c;
        fp += pred[i] == c && truth[i] != c;
        fn += pred[i] != c && truth[i] == c;
      }
      if (tp + fp + fn == 0) continue;
      iou_sum += tp / (tp + fp + fn);
      f1_sum += 2 * tp / (2 * tp + fp + fn);
      ++present;
    }
    const double want_iou = iou_sum / present, want_f1 = f1_sum / present;
    const double got_iou = miou(cm), got_f1 = mf1(cm);
    worst = std::max({worst, std::abs(got_iou - want_iou), std::abs(got_f1 - want_f1)});
    out.require(got_f1 >= got_iou, "mF1 < mIoU in trial " + std::to_string(trial));
  }
  out.require(worst <= 1e-12, "max error " + fmt(worst, 3));
  out.note("100 matrices, max error " + fmt(worst, 3));
  return out;
}

Outcome determinism_and_persistence() {
  Outcome out;
  ExperimentConfig cfg;
  cfg.scene_count = 40;
  cfg.train.epochs = 3;
  cfg.model.placement = Placement::skip_connection;
  cfg.model.msam_kernels = MsamConfig::triple(1, 5, 9);
  const auto dataset = prepare_dataset(cfg);
  const auto a = train_experiment(cfg, dataset);
  const auto b = train_experiment(cfg, dataset);
  bool same = a.history.size() == b.history.size() && a.best_epoch == b.best_epoch && a.best_miou == b.best_miou;
  for (std::size_t e = 0; same && e < a.history.size(); ++e) {
    same = a.history[e].train_loss == b.history[e].train_loss && a.history[e].val.loss == b.history[e].val.loss &&
           a.history[e].val.miou == b.history[e].val.miou && a.history[e].val.mf1 == b.history[e].val.mf1;
  }
  out.require(same, "same-seed runs differ");
  out.require(a.best_epoch.has_value(), "no best epoch");
  if (!a.best_epoch) return out;

  testutil::TempDir dir("accept");
  const auto first = (dir / "a.ckpt").string(), second = (dir / "b.ckpt").string();
  write_checkpoint(first, a.best);
  const auto loaded = read_checkpoint(first);
  write_checkpoint(second, loaded);
  out.require(testutil::read_bytes(first) == testutil::read_bytes(second), "rewritten checkpoint bytes differ");
  bool records = loaded.records.size() == a.best.records.size();
  for (std::size_t i = 0; records && i < loaded.records.size(); ++i) {
    records = loaded.records[i].name == a.best.records[i].name && loaded.records[i].shape == a.best.records[i].shape &&
              loaded.records[i].values == a.best.records[i].values;
  }
  out.require(records && loaded.config == a.best.config && loaded.metadata == a.best.metadata,
              "loaded checkpoint differs");
  const auto eval = cmd_eval(loaded, dataset, "val", "");
  const double diff = std::abs(eval.report.miou - a.best_miou);
  out.require(diff <= 1e-6, "reloaded mIoU off by " + fmt(diff, 3));
  out.note("best mIoU " + fmt(a.best_miou, 6) + ", reloaded off by " + fmt(diff, 3));
  return out;
}

struct Criterion {
  int id;
  std::string title;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"msamseg acceptance checks"};
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criteria (1-10)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "parameter counts of the SC backbones", 5, parameter_counts},
      {2, "MSAM parameter overhead < 0.1%", 5, msam_parameter_overhead},
      {3, "FLOP overhead and absolute UNet16-SC estimate", 10, flop_overhead},
      {4, "gradient checks, 20 instances each", 120, gradient_checks},
      {5, "identity at zero MSAM weights", 60, identity_at_zero},
      {6, "MSAM forward vs scalar oracle", 60, oracle_equivalence},
      {7, "synthetic metamerism benchmark", 45 * 60, metamerism_benchmark},
      {8, "grid bookkeeping", 1, grid_bookkeeping},
      {9, "metric correctness", 5, metric_correctness},
      {10, "determinism and checkpoint persistence", 600, determinism_and_persistence},
  };

  bool all = true;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.passed = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.require(secs < c.budget_s, "runtime over the " + fmt(c.budget_s) + " s budget");
    all = all && o.passed;
    std::printf("%s criterion %d: %s (%.2f s): %s\n", o.passed ? "PASS" : "FAIL", c.id, c.title.c_str(), secs,
                o.detail.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
