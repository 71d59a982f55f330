#include "msamseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <unordered_set>

#include "msamseg/loss.hpp"
#include "msamseg/unet.hpp"

namespace msamseg {

GradCheckResult check_gradients(const std::string& name, const std::function<Tensor<double>()>& f,
                                const std::vector<Tensor<double>>& inputs, const GradCheckOptions& options,
                                std::uint64_t coord_seed) {
  GradCheckResult r;
  r.name = name;
  r.instances = 1;
  for (auto t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const auto out = f();
  if (out.numel() != 1) throw ShapeError("gradient check needs a scalar function, got " + shape_to_string(out.shape()));
  out.backward();
  const double f0 = out.item();

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::size_t total = 0;
  for (const auto& t : inputs) total += t.numel();
  if (options.max_coords == 0 || total <= options.max_coords) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      for (std::size_t j = 0; j < inputs[i].numel(); ++j) coords.emplace_back(i, j);
    }
  } else {
    std::mt19937_64 rng(coord_seed);
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    std::unordered_set<std::size_t> chosen;
    while (chosen.size() < options.max_coords) chosen.insert(pick(rng));
    std::vector<std::size_t> flat(chosen.begin(), chosen.end());
    std::sort(flat.begin(), flat.end());
    std::size_t base = 0, t = 0;
    for (auto g : flat) {
      while (g >= base + inputs[t].numel()) base += inputs[t++].numel();
      coords.emplace_back(t, g - base);
    }
  }

  const double h = options.step;
  NoGradGuard no_grad;
  for (auto [i, j] : coords) {
    auto data = Tensor<double>(inputs[i]).mutable_data();
    const double orig = data[j];
    data[j] = orig + h;
    const double fp = f().item();
    data[j] = orig - h;
    const double fm = f().item();
    data[j] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double analytic = inputs[i].grad()[j];
    const double scale = std::max({std::abs(analytic), std::abs(numeric), options.abs_floor / options.rel_tol});
    const double err = std::abs(analytic - numeric) / scale;
    ++r.coordinates;
    if (err <= options.rel_tol) {
      if (err > r.max_rel_error) r.max_rel_error = err;
      continue;
    }
    bool refined = false;
    for (double hs : {h / 4.0, h / 16.0}) {
      data[j] = orig + hs;
      const double gp = f().item();
      data[j] = orig - hs;
      const double gm = f().item();
      data[j] = orig;
      const double n2 = (gp - gm) / (2.0 * hs);
      if (std::abs(analytic - n2) / std::max({std::abs(analytic), std::abs(n2), options.abs_floor / options.rel_tol}) <=
          options.rel_tol) {
        refined = true;
        break;
      }
    }
    if (refined) {
      ++r.refined;
      continue;
    }
    const double right = (fp - f0) / h, left = (f0 - fm) / h;
    const double spread = std::abs(right - left);
    if (spread >= std::abs(analytic - numeric)) {
      ++r.skipped;
      continue;
    }
    ++r.failures;
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      std::ostringstream w;
      w.precision(10);
      w << "input " << i << " coord " << j << ": analytic " << analytic << " numeric " << numeric;
      r.worst = w.str();
    }
  }
  r.passed = r.failures == 0 &&
             static_cast<double>(r.skipped) <= options.max_skipped_share * static_cast<double>(r.coordinates);
  return r;
}

void merge_result(GradCheckResult& into, const GradCheckResult& part) {
  const bool first = into.instances == 0;
  into.instances += part.instances;
  into.coordinates += part.coordinates;
  into.skipped += part.skipped;
  into.refined += part.refined;
  into.failures += part.failures;
  if (part.max_rel_error >= into.max_rel_error) {
    into.max_rel_error = part.max_rel_error;
    if (!part.worst.empty()) into.worst = part.worst;
  }
  into.passed = (first || into.passed) && part.passed;
}

GradScope parse_grad_scope(std::string_view name) {
  if (name == "all-ops") return GradScope::all_ops;
  if (name == "msam") return GradScope::msam;
  if (name == "unet") return GradScope::unet;
  throw ConfigError("unknown grad-check scope '" + std::string(name) + "' (expected all-ops, msam or unet)");
}

namespace {

using Fn = std::function<Tensor<double>()>;
using Made = std::pair<Fn, std::vector<Tensor<double>>>;

Tensor<double> normal_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Values with |x| >= 0.05, clear of the LeakyReLU kink.
Tensor<double> off_zero_tensor(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.5);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Distinct values spaced at least 0.01 apart, so max pooling has no near ties.
Tensor<double> spaced_tensor(Shape shape, std::mt19937_64& rng) {
  std::vector<double> v(shape_numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i);
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

Tensor<double> weighted_sum(const Tensor<double>& out, const Tensor<double>& weights) {
  return sum(mul(out, weights));
}

// Scalarizes a unary op with fixed random output weights.
Made unary_case(Tensor<double> x, std::function<Tensor<double>(const Tensor<double>&)> op, std::mt19937_64& rng) {
  NoGradGuard probe;
  const auto r = normal_tensor(op(x).shape(), rng);
  return {[x, op, r] { return weighted_sum(op(x), r); }, {x}};
}

Made binary_case(Tensor<double> a, Tensor<double> b,
                 std::function<Tensor<double>(const Tensor<double>&, const Tensor<double>&)> op, std::mt19937_64& rng) {
  NoGradGuard probe;
  const auto r = normal_tensor(op(a, b).shape(), rng);
  return {[a, b, op, r] { return weighted_sum(op(a, b), r); }, {a, b}};
}

GradCase unary(std::string name, std::function<Tensor<double>(std::mt19937_64&)> gen,
               std::function<Tensor<double>(const Tensor<double>&)> op) {
  return {std::move(name), [gen, op](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            return unary_case(gen(rng), op, rng);
          }};
}

std::vector<GradCase> op_cases() {
  std::vector<GradCase> cases;
  auto img = [](Shape s) { return [s](std::mt19937_64& rng) { return normal_tensor(s, rng); }; };

  cases.push_back({"add", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return binary_case(normal_tensor({2, 3, 4}, rng), normal_tensor({2, 3, 4}, rng),
                                        [](auto& a, auto& b) { return add(a, b); }, rng);
                   }});
  cases.push_back({"add_broadcast", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return binary_case(normal_tensor({2, 3, 4}, rng), normal_tensor({1}, rng),
                                        [](auto& a, auto& b) { return add(a, b); }, rng);
                   }});
  cases.push_back({"sub", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return binary_case(normal_tensor({3, 5}, rng), normal_tensor({3, 5}, rng),
                                        [](auto& a, auto& b) { return sub(a, b); }, rng);
                   }});
  cases.push_back({"mul", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return binary_case(normal_tensor({3, 5}, rng), normal_tensor({3, 5}, rng),
                                        [](auto& a, auto& b) { return mul(a, b); }, rng);
                   }});
  cases.push_back({"mul_broadcast", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return binary_case(normal_tensor({3, 5}, rng), normal_tensor({1}, rng),
                                        [](auto& a, auto& b) { return mul(a, b); }, rng);
                   }});
  cases.push_back(unary("scale", img({4, 6}), [](auto& x) { return scale(x, -1.7); }));
  cases.push_back(unary("leaky_relu", [](std::mt19937_64& rng) { return off_zero_tensor({4, 6}, rng); },
                        [](auto& x) { return leaky_relu(x); }));
  cases.push_back(unary("silu", img({4, 6}), [](auto& x) { return silu(x); }));
  cases.push_back(unary("sigmoid", img({4, 6}), [](auto& x) { return sigmoid(x); }));
  cases.push_back(unary("reshape", img({2, 3, 4}), [](auto& x) { return reshape(x, {4, 6}); }));
  cases.push_back(unary("swap_last_axes", img({2, 3, 4}), [](auto& x) { return swap_last_axes(x); }));
  cases.push_back(unary("sum", img({3, 4}), [](auto& x) { return scale(sum(x), 1.0); }));
  cases.push_back(unary("mean", img({3, 4}), [](auto& x) { return scale(mean(x), 1.0); }));
  cases.push_back({"add_n", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto a = normal_tensor({2, 5}, rng), b = normal_tensor({2, 5}, rng), c = normal_tensor({2, 5}, rng);
                     const auto r = normal_tensor({2, 5}, rng);
                     return Made{[a, b, c, r] { return weighted_sum(add_n<double>({a, b, c}), r); }, {a, b, c}};
                   }});

  struct ConvSpec {
    const char* name;
    std::size_t k;
    bool bias;
  };
  for (auto spec : {ConvSpec{"conv2d_k3_bias", 3, true}, ConvSpec{"conv2d_k2_bias", 2, true},
                    ConvSpec{"conv2d_k1", 1, false}}) {
    cases.push_back({spec.name, [spec](std::uint64_t seed) {
                       std::mt19937_64 rng(seed);
                       auto x = normal_tensor({2, 2, 5, 4}, rng);
                       auto w = normal_tensor({3, 2, spec.k, spec.k}, rng, 0.5);
                       Tensor<double> b = spec.bias ? normal_tensor({3}, rng) : Tensor<double>();
                       const auto r = normal_tensor({2, 3, 5, 4}, rng);
                       std::vector<Tensor<double>> in{x, w};
                       if (spec.bias) in.push_back(b);
                       return Made{[x, w, b, r] { return weighted_sum(conv2d(x, w, b), r); }, in};
                     }});
  }
  cases.push_back({"conv2d_unbatched", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = normal_tensor({2, 4, 3}, rng);
                     auto w = normal_tensor({2, 2, 3, 3}, rng, 0.5);
                     auto b = normal_tensor({2}, rng);
                     const auto r = normal_tensor({2, 4, 3}, rng);
                     return Made{[x, w, b, r] { return weighted_sum(conv2d(x, w, b), r); }, {x, w, b}};
                   }});

  struct Conv1dSpec {
    const char* name;
    std::size_t k, d;
  };
  for (auto spec : {Conv1dSpec{"conv1d_k1_d1", 1, 1}, Conv1dSpec{"conv1d_k3_d2", 3, 2},
                    Conv1dSpec{"conv1d_k5_d3", 5, 3}, Conv1dSpec{"conv1d_k11_d6", 11, 6}}) {
    cases.push_back({spec.name, [spec](std::uint64_t seed) {
                       std::mt19937_64 rng(seed);
                       auto x = normal_tensor({2, 3, 9}, rng);
                       auto w = normal_tensor({spec.k}, rng, 0.5);
                       auto b = normal_tensor({1}, rng);
                       const auto r = normal_tensor({2, 3, 9}, rng);
                       return Made{[x, w, b, spec, r] { return weighted_sum(conv1d_dilated(x, w, b, spec.d), r); },
                                   {x, w, b}};
                     }});
  }

  cases.push_back(unary("instance_norm", img({2, 3, 3, 4}), [](auto& x) { return instance_norm(x, 1e-5); }));
  for (auto mode : {Mode::train, Mode::eval}) {
    cases.push_back({mode == Mode::train ? "batch_norm_train" : "batch_norm_eval", [mode](std::uint64_t seed) {
                       std::mt19937_64 rng(seed);
                       auto x = normal_tensor({3, 2, 3, 2}, rng);
                       auto gamma = normal_tensor({2}, rng);
                       auto beta = normal_tensor({2}, rng);
                       auto rm = normal_tensor({2}, rng, 0.3);
                       auto rv = Tensor<double>({2}, {0.7, 1.6});
                       const auto r = normal_tensor({3, 2, 3, 2}, rng);
                       return Made{[=]() mutable {
                                     // Fresh running buffers keep eval outputs independent of call count.
                                     auto m = rm.clone(), v = rv.clone();
                                     return weighted_sum(batch_norm(x, gamma, beta, m, v, mode, 0.1, 1e-5), r);
                                   },
                                   {x, gamma, beta}};
                     }});
  }
  cases.push_back(unary("maxpool2d", [](std::mt19937_64& rng) { return spaced_tensor({2, 2, 4, 6}, rng); },
                        [](auto& x) { return maxpool2d(x, 2); }));
  cases.push_back(unary("maxpool2d_ragged", [](std::mt19937_64& rng) { return spaced_tensor({1, 2, 5, 3}, rng); },
                        [](auto& x) { return maxpool2d(x, 2); }));
  cases.push_back(unary("upsample_nearest", img({2, 2, 3, 2}), [](auto& x) { return upsample_nearest(x, 2); }));
  cases.push_back({"dropout_train", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = normal_tensor({2, 3, 4, 4}, rng);
                     const auto r = normal_tensor({2, 3, 4, 4}, rng);
                     const auto mask_seed = seed ^ 0x9e3779b97f4a7c15ULL;
                     return Made{[x, r, mask_seed] {
                                   std::mt19937_64 mask_rng(mask_seed);
                                   return weighted_sum(dropout(x, 0.3, Mode::train, mask_rng), r);
                                 },
                                 {x}};
                   }});
  cases.push_back(unary("channel_softmax", img({2, 4, 3, 3}), [](auto& x) { return channel_softmax(x); }));
  cases.push_back({"concat_channels", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     return binary_case(normal_tensor({2, 2, 3, 3}, rng), normal_tensor({2, 3, 3, 3}, rng),
                                        [](auto& a, auto& b) { return concat_channels(a, b); }, rng);
                   }});
  cases.push_back({"combined_loss", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto logits = normal_tensor({2, 4, 3, 3}, rng, 2.0);
                     std::uniform_int_distribution<int> lab(0, 3);
                     std::vector<std::uint8_t> labels(2 * 9);
                     for (auto& l : labels) l = static_cast<std::uint8_t>(lab(rng));
                     labels[4] = kIgnoreLabel;
                     LossConfig cfg;
                     cfg.class_weights = {0.5, 1.0, 2.0, 1.5};
                     return Made{[logits, labels, cfg] { return combined_loss(logits, labels, cfg); }, {logits}};
                   }});
  return cases;
}

GradCase msam_case(const MsamConfig& cfg) {
  return {"msam" + cfg.notation(), [cfg](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            std::uniform_int_distribution<std::size_t> ext(2, 4);
            std::uniform_int_distribution<std::size_t> chans(3, 12);
            const std::size_t c = chans(rng), h = ext(rng), w = ext(rng);
            MsamModule<double> module(cfg, c);
            ParameterList<double> params;
            module.collect(params, "msam");
            std::vector<Tensor<double>> inputs;
            auto x = normal_tensor({2, c, h, w}, rng);
            inputs.push_back(x);
            std::normal_distribution<double> n(0.0, 0.6);
            for (auto& p : params) {
              for (auto& v : p.tensor.mutable_data()) v = n(rng);
              inputs.push_back(p.tensor);
            }
            const auto r = normal_tensor({2, c, h, w}, rng);
            return Made{[module, x, r] { return weighted_sum(module.forward(x), r); }, inputs};
          }};
}

GradCase unet_case(Placement placement) {
  return {"unet16-" + placement_name(placement),
          [placement](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            UNetConfig cfg;
            cfg.in_channels = 4;
            cfg.num_classes = 3;
            cfg.placement = placement;
            if (placement != Placement::none) cfg.msam_kernels = MsamConfig::triple(1, 5, 9);
            cfg.dropout_rate = 0.0;
            auto model = std::make_shared<UNetModel<double>>(UNetModel<double>::build(cfg, seed));
            std::normal_distribution<double> n(0.0, 0.3);
            for (auto* m : model->msam_modules()) {
              ParameterList<double> params;
              m->collect(params, "msam");
              for (auto& p : params) {
                for (auto& v : p.tensor.mutable_data()) v = n(rng);
              }
            }
            auto x = normal_tensor({2, 4, 32, 32}, rng);
            std::vector<Tensor<double>> inputs{x};
            for (auto& p : model->parameters()) inputs.push_back(p.tensor);
            std::uniform_int_distribution<int> lab(0, 2);
            std::vector<std::uint8_t> labels(2 * 32 * 32);
            for (auto& l : labels) l = static_cast<std::uint8_t>(lab(rng));
            return Made{[model, x, labels] { return combined_loss(model->forward(x, Mode::train), labels, {}); },
                        inputs};
          },
          48};
}

}  // namespace

std::vector<GradCase> gradcheck_cases(GradScope scope) {
  switch (scope) {
    case GradScope::all_ops:
      return op_cases();
    case GradScope::msam:
      return {msam_case(MsamConfig::triple(1, 1, 1)), msam_case(MsamConfig::triple(1, 5, 9)),
              msam_case(MsamConfig::triple(5, 9, 11)), msam_case(MsamConfig::single(7))};
    case GradScope::unet:
      return {unet_case(Placement::none), unet_case(Placement::skip_connection),
              unet_case(Placement::between_and_after)};
  }
  return {};
}

std::vector<GradCheckResult> run_gradcheck(GradScope scope, const GradCheckOptions& options) {
  std::vector<GradCheckResult> results;
  for (const auto& c : gradcheck_cases(scope)) {
    GradCheckResult total;
    total.name = c.name;
    GradCheckOptions opts = options;
    if (c.max_coords) opts.max_coords = c.max_coords;
    for (std::size_t i = 0; i < options.instances; ++i) {
      const std::uint64_t seed = options.seed + 1000003ULL * i;
      auto [f, inputs] = c.make(seed);
      merge_result(total, check_gradients(c.name, f, inputs, opts, seed));
    }
    results.push_back(total);
  }
  return results;
}

}  // namespace msamseg
