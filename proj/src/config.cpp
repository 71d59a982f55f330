#include "msamseg/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace msamseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_uint(const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("expected a non-negative integer, got '" + s + "'");
  return v;
}

double to_double(const std::string& s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

std::vector<double> to_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(trim(item)));
  if (out.empty()) throw ConfigError("expected a comma-separated list");
  return out;
}

std::string fmt_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

struct Field {
  const char* section;
  const char* key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename M>
Field uint_field(const char* section, const char* key, M member) {
  return {section, key, [member](ExperimentConfig& c, const std::string& v) { member(c) = to_uint(v); },
          [member](const ExperimentConfig& c) { return std::to_string(member(const_cast<ExperimentConfig&>(c))); }};
}

template <typename M>
Field double_field(const char* section, const char* key, M member) {
  return {section, key, [member](ExperimentConfig& c, const std::string& v) { member(c) = to_double(v); },
          [member](const ExperimentConfig& c) { return fmt(member(const_cast<ExperimentConfig&>(c))); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back({"data", "dataset", [](ExperimentConfig& c, const std::string& s) { c.dataset = s; },
                 [](const ExperimentConfig& c) { return c.dataset; }});
    v.push_back(uint_field("data", "scenes", [](ExperimentConfig& c) -> auto& { return c.scene_count; }));
    v.push_back(uint_field("data", "split_seed", [](ExperimentConfig& c) -> auto& { return c.split_seed; }));
    v.push_back(uint_field("data", "classes", [](ExperimentConfig& c) -> auto& { return c.scene.num_classes; }));
    v.push_back(uint_field("data", "channels", [](ExperimentConfig& c) -> auto& { return c.scene.channels; }));
    v.push_back(uint_field("data", "height", [](ExperimentConfig& c) -> auto& { return c.scene.height; }));
    v.push_back(uint_field("data", "width", [](ExperimentConfig& c) -> auto& { return c.scene.width; }));
    v.push_back({"data", "metameric_pairs",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.scene.metameric_pairs.clear();
                   if (s == "none") return;
                   std::stringstream ss(s);
                   std::string item;
                   while (std::getline(ss, item, ',')) {
                     item = trim(item);
                     const auto dash = item.find('-');
                     if (dash == std::string::npos) throw ConfigError("metameric pair '" + item + "' is not a-b");
                     c.scene.metameric_pairs.emplace_back(to_uint(item.substr(0, dash)), to_uint(item.substr(dash + 1)));
                   }
                 },
                 [](const ExperimentConfig& c) {
                   if (c.scene.metameric_pairs.empty()) return std::string("none");
                   std::string out;
                   for (std::size_t i = 0; i < c.scene.metameric_pairs.size(); ++i) {
                     const auto [a, b] = c.scene.metameric_pairs[i];
                     out += (i ? "," : "") + std::to_string(a) + "-" + std::to_string(b);
                   }
                   return out;
                 }});
    v.push_back(double_field("data", "metameric_floor", [](ExperimentConfig& c) -> auto& { return c.scene.metameric_floor; }));
    v.push_back(double_field("data", "jitter", [](ExperimentConfig& c) -> auto& { return c.scene.jitter; }));
    v.push_back(double_field("data", "noise_sigma", [](ExperimentConfig& c) -> auto& { return c.scene.noise_sigma; }));
    v.push_back(uint_field("data", "min_radius", [](ExperimentConfig& c) -> auto& { return c.scene.min_radius; }));
    v.push_back(uint_field("data", "max_radius", [](ExperimentConfig& c) -> auto& { return c.scene.max_radius; }));
    v.push_back(uint_field("data", "border", [](ExperimentConfig& c) -> auto& { return c.scene.border; }));
    v.push_back({"data", "class_shares",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.scene.class_shares = s == "uniform" ? std::vector<double>{} : to_list(s);
                 },
                 [](const ExperimentConfig& c) {
                   return c.scene.class_shares.empty() ? std::string("uniform") : fmt_list(c.scene.class_shares);
                 }});
    v.push_back(uint_field("data", "signature_seed", [](ExperimentConfig& c) -> auto& { return c.scene.signature_seed; }));
    v.push_back(uint_field("data", "scene_seed", [](ExperimentConfig& c) -> auto& { return c.scene.seed; }));

    v.push_back(uint_field("model", "in_channels", [](ExperimentConfig& c) -> auto& { return c.model.in_channels; }));
    v.push_back(uint_field("model", "num_classes", [](ExperimentConfig& c) -> auto& { return c.model.num_classes; }));
    v.push_back(uint_field("model", "base_depth", [](ExperimentConfig& c) -> auto& { return c.model.base_depth; }));
    v.push_back({"model", "placement",
                 [](ExperimentConfig& c, const std::string& s) { c.model.placement = parse_placement(s); },
                 [](const ExperimentConfig& c) { return placement_name(c.model.placement); }});
    v.push_back({"model", "msam_kernels",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.model.msam_kernels = s == "none" ? std::nullopt : std::optional(MsamConfig::parse(s));
                 },
                 [](const ExperimentConfig& c) {
                   return c.model.msam_kernels ? c.model.msam_kernels->notation() : std::string("none");
                 }});
    v.push_back(double_field("model", "dropout", [](ExperimentConfig& c) -> auto& { return c.model.dropout_rate; }));

    v.push_back(double_field("loss", "ce_weight", [](ExperimentConfig& c) -> auto& { return c.loss.ce_weight; }));
    v.push_back(double_field("loss", "dice_weight", [](ExperimentConfig& c) -> auto& { return c.loss.dice_weight; }));
    v.push_back({"loss", "class_weights",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.auto_class_weights = s == "auto";
                   c.loss.class_weights = (s == "auto" || s == "uniform") ? std::vector<double>{} : to_list(s);
                 },
                 [](const ExperimentConfig& c) {
                   if (c.auto_class_weights) return std::string("auto");
                   return c.loss.class_weights.empty() ? std::string("uniform") : fmt_list(c.loss.class_weights);
                 }});
    v.push_back(double_field("loss", "dice_epsilon", [](ExperimentConfig& c) -> auto& { return c.loss.dice_epsilon; }));
    v.push_back({"loss", "ignore_label",
                 [](ExperimentConfig& c, const std::string& s) {
                   const auto l = to_uint(s);
                   if (l > 255) throw ConfigError("ignore_label must fit a byte");
                   c.loss.ignore_label = static_cast<std::uint8_t>(l);
                 },
                 [](const ExperimentConfig& c) { return std::to_string(c.loss.ignore_label); }});

    v.push_back(uint_field("train", "epochs", [](ExperimentConfig& c) -> auto& { return c.train.epochs; }));
    v.push_back(uint_field("train", "batch_size", [](ExperimentConfig& c) -> auto& { return c.train.batch_size; }));
    v.push_back(uint_field("train", "accum_steps", [](ExperimentConfig& c) -> auto& { return c.train.accum_steps; }));
    v.push_back(uint_field("train", "seed", [](ExperimentConfig& c) -> auto& { return c.train.seed; }));
    v.push_back(double_field("train", "lr", [](ExperimentConfig& c) -> auto& { return c.train.lr; }));
    v.push_back(uint_field("train", "patience", [](ExperimentConfig& c) -> auto& { return c.train.patience; }));
    v.push_back(uint_field("train", "eval_batch", [](ExperimentConfig& c) -> auto& { return c.train.eval_batch; }));
    v.push_back({"train", "frozen_norm",
                 [](ExperimentConfig& c, const std::string& s) { c.train.frozen_norm = to_bool(s); },
                 [](const ExperimentConfig& c) { return std::string(c.train.frozen_norm ? "true" : "false"); }});

    v.push_back({"output", "out_dir", [](ExperimentConfig& c, const std::string& s) { c.out_dir = s; },
                 [](const ExperimentConfig& c) { return c.out_dir; }});
    return v;
  }();
  return f;
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  model.in_channels = scene.channels;
  model.num_classes = scene.num_classes;
}

std::string ExperimentConfig::serialize() const {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (section != f.section) {
      section = f.section;
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(*this) + "\n";
  }
  return out;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line, section;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto at = [&](const std::string& msg) { return ConfigError("line " + std::to_string(line_no) + ": " + msg); };
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw at("unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      const bool known = std::any_of(fields().begin(), fields().end(), [&](const Field& f) { return section == f.section; });
      if (!known) throw at("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw at("expected key = value");
    if (section.empty()) throw at("key outside any section");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    auto it = std::find_if(fields().begin(), fields().end(),
                           [&](const Field& f) { return section == f.section && key == f.key; });
    if (it == fields().end()) throw at("unknown key '" + key + "' in [" + section + "]");
    if (!seen.insert(section + "." + key).second) throw at("duplicate key '" + key + "'");
    try {
      it->set(c, value);
    } catch (const ConfigError& e) {
      throw at(std::string(key) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void ExperimentConfig::validate() const {
  model.validate();
  loss.validate(model.num_classes);
  train.validate();
  if (dataset.empty()) {
    scene.validate();
    if (scene.num_classes != model.num_classes) {
      throw ConfigError("[data] classes (" + std::to_string(scene.num_classes) + ") differs from [model] num_classes (" +
                        std::to_string(model.num_classes) + ")");
    }
    if (scene.channels != model.in_channels) {
      throw ConfigError("[data] channels (" + std::to_string(scene.channels) + ") differs from [model] in_channels (" +
                        std::to_string(model.in_channels) + ")");
    }
  }
  if (out_dir.empty()) throw ConfigError("[output] out_dir must not be empty");
}

}  // namespace msamseg
