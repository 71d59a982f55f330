#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "msamseg/experiment.hpp"
#include "msamseg/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace msamseg;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;

ExperimentConfig load_or_default(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : ExperimentConfig::load(path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Overrides {
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::string> placement;
  std::optional<std::string> kernels;
  std::optional<std::size_t> depth;
  std::optional<double> lr;
  std::optional<std::size_t> batch;
  std::optional<std::size_t> accum;
  std::optional<std::string> data;

  void add_to(CLI::App* app, bool model_flags) {
    app->add_option("--out-dir", out_dir, "Directory for every output file");
    app->add_option("--seed", seed, "Training seed (model initialization, shuffling)");
    app->add_option("--epochs", epochs, "Number of training epochs");
    app->add_option("--lr", lr, "Initial learning rate");
    app->add_option("--batch", batch, "Micro-batch size");
    app->add_option("--accum", accum, "Micro-batches accumulated per optimizer step");
    app->add_option("--data", data, "Dataset directory (overrides [data] dataset)");
    if (model_flags) {
      app->add_option("--placement", placement,
                      "none, between_cbas, after_cbas, skip_connection, between_and_after, between_and_skip");
      app->add_option("--msam-kernels", kernels, "Kernel triple such as \"(1;5;9)\"");
      app->add_option("--depth", depth, "Backbone base depth: 16, 32 or 64");
    }
  }

  void apply(ExperimentConfig& c) const {
    if (!out_dir.empty()) c.out_dir = out_dir;
    if (seed) c.train.seed = *seed;
    if (epochs) c.train.epochs = *epochs;
    if (lr) c.train.lr = *lr;
    if (batch) c.train.batch_size = *batch;
    if (accum) c.train.accum_steps = *accum;
    if (data) c.dataset = *data;
    if (placement) {
      c.model.placement = parse_placement(*placement);
      if (c.model.placement == Placement::none) c.model.msam_kernels.reset();
    }
    if (kernels) c.model.msam_kernels = MsamConfig::parse(*kernels);
    if (depth) c.model.base_depth = *depth;
    c.validate();
  }
};

Dataset dataset_for_eval(const std::string& data_dir, const std::string& config_path) {
  if (!data_dir.empty()) return load_dataset(data_dir);
  if (!config_path.empty()) return prepare_dataset(ExperimentConfig::load(config_path));
  throw ConfigError("eval needs --data or --config");
}

int run(int argc, char** argv) {
  CLI::App app{"Multi-scale spectral attention UNet for hyperspectral segmentation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate synthetic metameric scenes");
  std::string gen_config, gen_out;
  std::optional<std::size_t> gen_count;
  std::optional<std::uint64_t> gen_seed, gen_split_seed;
  gen->add_option("--config", gen_config, "Experiment config; only [data] is used");
  gen->add_option("--out-dir", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of scenes (default: [data] scenes)");
  gen->add_option("--seed", gen_seed, "Seed of the first scene (default: [data] scene_seed)");
  gen->add_option("--split-seed", gen_split_seed, "Seed of the train/val/test shuffle");

  // train
  auto* tr = app.add_subcommand("train", "Train one configuration");
  std::string train_config;
  Overrides train_over;
  tr->add_option("--config", train_config, "Experiment config (defaults apply when omitted)");
  train_over.add_to(tr, true);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and render masks");
  std::string eval_ckpt, eval_data, eval_config, eval_split = "val", eval_out;
  bool eval_no_render = false;
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint written by train")->required();
  ev->add_option("--data", eval_data, "Dataset directory");
  ev->add_option("--config", eval_config, "Config whose [data] section describes the dataset");
  ev->add_option("--split", eval_split, "train, val or test");
  ev->add_option("--out-dir", eval_out, "Directory for rendered masks (PPM)");
  ev->add_flag("--no-render", eval_no_render, "Skip mask rendering");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train a grid of placements x kernel combinations");
  std::string ab_config, ab_grid = "full";
  Overrides ab_over;
  ab->add_option("--config", ab_config, "Base experiment config");
  ab->add_option("--grid", ab_grid, "full (161 rows), followup (8 rows) or placements (6 rows)");
  ab_over.add_to(ab, false);

  // profile
  auto* pr = app.add_subcommand("profile", "Parameters, FLOPs, model size and latency");
  std::size_t pr_depth = 16, pr_in = 25, pr_classes = 7, pr_h = 209, pr_w = 416, pr_runs = 30, pr_warmup = 5;
  std::string pr_placement = "skip_connection", pr_kernels = "(3;7;11)", pr_label = "custom", pr_out;
  pr->add_option("--depth", pr_depth, "Backbone base depth: 16, 32 or 64");
  pr->add_option("--in-channels", pr_in, "Spectral bands");
  pr->add_option("--classes", pr_classes, "Output classes");
  pr->add_option("--placement", pr_placement, "Placement of the attention variant ('none' profiles only the baseline)");
  pr->add_option("--msam-kernels", pr_kernels, "Kernel triple of the attention variant");
  pr->add_option("--height", pr_h, "Input height");
  pr->add_option("--width", pr_w, "Input width");
  pr->add_option("--runs", pr_runs, "Timed runs (>= 30; 0 skips latency)");
  pr->add_option("--warmup", pr_warmup, "Warmup runs (>= 5)");
  pr->add_option("--dataset-label", pr_label, "Dataset column of the CSV");
  pr->add_option("--out-dir", pr_out, "Write profile.csv here as well");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  std::string gc_scope = "all-ops";
  GradCheckOptions gc_opts;
  bool gc_corrupt = false;
  gc->add_option("--scope", gc_scope, "all-ops, msam or unet");
  gc->add_option("--instances", gc_opts.instances, "Random instances per case");
  gc->add_option("--seed", gc_opts.seed, "Seed of the first instance");
  gc->add_option("--rel-tol", gc_opts.rel_tol, "Relative tolerance");
  gc->add_option("--step", gc_opts.step, "Central-difference half width");
  gc->add_flag("--corrupt-backward", gc_corrupt, "Test hook: perturb the SiLU backward rule");

  // import
  auto* im = app.add_subcommand("import", "Import pre-converted HSICUBE/1 + HSIMASK/1 files");
  std::string im_source, im_out, im_map;
  std::size_t im_classes = 7;
  std::uint64_t im_seed = 1;
  im->add_option("--source", im_source, "Directory of <id>.hsicube / <id>.hsimask pairs")->required();
  im->add_option("--out-dir", im_out, "Dataset directory to write")->required();
  im->add_option("--classes", im_classes, "Number of classes after relabeling");
  im->add_option("--class-map", im_map, "hsi-drive, hyko-vis or a file of source=target lines");
  im->add_option("--seed", im_seed, "Split seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  if (*gen) {
    auto cfg = load_or_default(gen_config);
    auto spec = cfg.scene;
    if (gen_seed) spec.seed = *gen_seed;
    const auto count = gen_count.value_or(cfg.scene_count);
    cmd_gen_data(spec, count, gen_split_seed.value_or(cfg.split_seed), gen_out);
    std::cout << "wrote " << count << " scenes to " << gen_out << '\n';
    return 0;
  }
  if (*tr) {
    auto cfg = load_or_default(train_config);
    train_over.apply(cfg);
    const auto out = cmd_train(cfg, &std::cout);
    if (out.result.best_epoch) {
      std::cout << "best epoch " << *out.result.best_epoch << " val mIoU " << out.result.best_miou << "\ncheckpoint "
                << out.checkpoint_path << '\n';
    }
    std::cout << "metrics " << out.metrics_path << '\n';
    return 0;
  }
  if (*ev) {
    const auto ckpt = read_checkpoint(eval_ckpt);
    const auto dataset = dataset_for_eval(eval_data, eval_config);
    const auto render = eval_no_render ? std::string() : (eval_out.empty() ? std::string("renders") : eval_out);
    const auto out = cmd_eval(ckpt, dataset, eval_split, render);
    std::cout << "split " << eval_split << " mIoU " << out.report.miou << " mF1 " << out.report.mf1 << " loss "
              << out.report.loss << '\n';
    if (!render.empty()) std::cout << "rendered " << out.rendered.size() << " images to " << render << '\n';
    return 0;
  }
  if (*ab) {
    auto cfg = load_or_default(ab_config);
    ab_over.apply(cfg);
    const auto grid = ablation_grid(ab_grid);
    const auto rows = cmd_ablate(cfg, grid, worker_threads(), cfg.out_dir, &std::cout);
    std::cout << "leaderboard " << (fs::path(cfg.out_dir) / "leaderboard.csv").string() << " (" << rows.size()
              << " rows)\n";
    return 0;
  }
  if (*pr) {
    UNetConfig base;
    base.in_channels = pr_in;
    base.num_classes = pr_classes;
    base.base_depth = pr_depth;
    std::vector<ProfileReport> reports;
    auto sc = UNetModel<float>::build(base, 0);
    reports.push_back(profile_model(sc, pr_label, pr_h, pr_w, pr_runs, pr_warmup));
    if (parse_placement(pr_placement) != Placement::none) {
      UNetConfig variant = base;
      variant.placement = parse_placement(pr_placement);
      variant.msam_kernels = MsamConfig::parse(pr_kernels);
      auto m = UNetModel<float>::build(variant, 0);
      reports.push_back(profile_model(m, pr_label, pr_h, pr_w, pr_runs, pr_warmup));
    }
    const auto csv = profile_csv(reports);
    std::cout << csv;
    if (!pr_out.empty()) {
      fs::create_directories(pr_out);
      std::ofstream(fs::path(pr_out) / "profile.csv") << csv;
    }
    return 0;
  }
  if (*gc) {
    testing::set_corrupt_backward(gc_corrupt);
    const auto results = run_gradcheck(parse_grad_scope(gc_scope), gc_opts);
    bool ok = true;
    for (const auto& r : results) {
      std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " instances=" << r.instances
                << " coords=" << r.coordinates << " refined=" << r.refined << " skipped=" << r.skipped << " failures=" << r.failures
                << " max_rel_err=" << r.max_rel_error;
      if (!r.passed && !r.worst.empty()) std::cout << " worst: " << r.worst;
      std::cout << '\n';
      ok = ok && r.passed;
    }
    return ok ? 0 : kExitNumerical;
  }
  if (*im) {
    std::optional<ClassMap> map;
    if (im_map == "hsi-drive") {
      map = ClassMap::hsi_drive();
    } else if (im_map == "hyko-vis") {
      map = ClassMap::hyko_vis();
    } else if (!im_map.empty()) {
      map = ClassMap::parse(read_file(im_map));
    }
    const auto ds = import_dataset(im_source, im_classes, map, im_seed);
    write_dataset(im_out, ds);
    std::cout << "imported " << ds.scenes.size() << " scenes to " << im_out << '\n';
    return 0;
  }
  return kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }
}
