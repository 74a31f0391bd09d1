#pragma once

// Run configuration as flat `section.key = value` lines. Lines starting with
// '#' and blank lines are ignored; unknown keys are errors.

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cmgr/bnd.hpp"
#include "cmgr/model.hpp"
#include "cmgr/trainer.hpp"

namespace cmgr {

struct DataConfig {
  std::vector<std::string> classes{"sphere", "cube",  "cylinder", "cone",      "torus",    "pyramid",
                                   "helix",  "cross", "ring",     "ellipsoid", "flat_box", "tall_cylinder"};
  std::size_t base_classes = 8;
  std::size_t tasks = 2;
  std::size_t ways = 2;
  std::size_t shots = 5;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 20;
  Index points = 512;
  double jitter = 0.01;
  std::uint64_t seed = 7;

  SyntheticDataSpec synthetic() const {
    return {classes, train_per_class, test_per_class, points, jitter, seed};
  }
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  BndConfig bnd;
  DataConfig data;
  Method method = Method::cmgr;

  void validate() const {
    model.validate();
    train.validate();
    bnd.validate();
    if (data.classes.size() < data.base_classes + data.tasks * data.ways) {
      throw InvalidArgument("data: not enough classes for the schedule");
    }
  }
};

namespace detail {

inline std::string trim_copy(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim_copy(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw InvalidArgument("expected a boolean, got '" + v + "'");
}

template <typename N>
N parse_num(const std::string& v) {
  std::size_t used = 0;
  N out{};
  try {
    if constexpr (std::is_floating_point_v<N>) {
      out = static_cast<N>(std::stod(v, &used));
    } else if constexpr (std::is_signed_v<N>) {
      out = static_cast<N>(std::stoll(v, &used));
    } else {
      if (!v.empty() && v[0] == '-') throw InvalidArgument("expected a non-negative integer, got '" + v + "'");
      out = static_cast<N>(std::stoull(v, &used, 0));
    }
  } catch (const std::logic_error&) {
    throw InvalidArgument("expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw InvalidArgument("trailing characters in '" + v + "'");
  return out;
}

template <typename N>
std::string num_text(N v) {
  std::ostringstream os;
  if constexpr (std::is_floating_point_v<N>) os.precision(17);
  os << v;
  return os.str();
}

inline std::string join_list(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

struct Field {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <typename N>
Field num_field(N& ref) {
  return {[&ref](const std::string& v) { ref = parse_num<N>(v); }, [&ref] { return num_text(ref); }};
}

inline Field bool_field(bool& ref) {
  return {[&ref](const std::string& v) { ref = parse_bool(v); }, [&ref] { return std::string(ref ? "true" : "false"); }};
}

// Ordered key -> accessor table over a config instance.
inline std::vector<std::pair<std::string, Field>> fields(ExperimentConfig& c) {
  std::vector<std::pair<std::string, Field>> f;
  auto& e = c.model.encoder;
  f.emplace_back("encoder.layers", Field{[&c](const std::string& v) {
                                           c.model.encoder.layers = parse_num<Index>(v);
                                           c.model.depth.layers = c.model.encoder.layers;
                                         },
                                         [&e] { return num_text(e.layers); }});
  f.emplace_back("encoder.dim", Field{[&c](const std::string& v) {
                                        const auto d = parse_num<Index>(v);
                                        c.model.encoder.dim = d;
                                        c.model.depth.dim = d;
                                        c.model.vision.dim = d;
                                      },
                                      [&e] { return num_text(e.dim); }});
  f.emplace_back("encoder.heads", num_field(e.heads));
  f.emplace_back("encoder.tokens", num_field(e.tokens));
  f.emplace_back("encoder.ffn_ratio", num_field(e.ffn_ratio));
  f.emplace_back("encoder.tokenizer_hidden", num_field(e.tokenizer_hidden));
  f.emplace_back("encoder.depth_seed", num_field(c.model.depth.seed));
  f.emplace_back("encoder.vision_seed", num_field(c.model.vision.seed));
  f.emplace_back("encoder.text_seed", num_field(c.model.vision.text_seed));

  auto& s = c.model.sagr;
  f.emplace_back("sagr.L_r", Field{[&s](const std::string& v) {
                                     s.layers.clear();
                                     if (v != "none") {
                                       for (const auto& x : split_list(v)) s.layers.push_back(parse_num<Index>(x));
                                     }
                                   },
                                   [&s] {
                                     if (s.layers.empty()) return std::string("none");
                                     std::vector<std::string> parts;
                                     for (Index l : s.layers) parts.push_back(num_text(l));
                                     return join_list(parts);
                                   }});
  f.emplace_back("sagr.M_R", num_field(s.mask_ratio));
  f.emplace_back("sagr.N_sa", num_field(s.sa_layers));
  f.emplace_back("sagr.w", num_field(s.w));
  f.emplace_back("sagr.lambda_init", num_field(s.lambda_init));
  f.emplace_back("sagr.mask_direction", Field{[&s](const std::string& v) { s.direction = parse_mask_direction(v); },
                                              [&s] { return to_string(s.direction); }});
  f.emplace_back("sagr.masked_branch", bool_field(s.masked_branch));

  f.emplace_back("tam.hidden_ratio", num_field(c.model.tam.hidden_ratio));
  f.emplace_back("tam.temperature", num_field(c.model.tam.temperature));

  f.emplace_back("render.image_size", num_field(c.model.render.image_size));
  f.emplace_back("render.views", num_field(c.model.render.views));
  f.emplace_back("render.splat", num_field(c.model.render.splat));

  f.emplace_back("loss.alpha_mc", num_field(c.loss.alpha_mc));
  f.emplace_back("loss.beta_c", num_field(c.loss.beta_c));
  f.emplace_back("loss.lc_incremental", bool_field(c.loss.lc_incremental));

  f.emplace_back("bnd.threshold", num_field(c.bnd.threshold));
  f.emplace_back("bnd.epochs", num_field(c.bnd.epochs));
  f.emplace_back("bnd.lr", num_field(c.bnd.lr));
  f.emplace_back("bnd.batch", num_field(c.bnd.batch));
  f.emplace_back("bnd.weight_decay", num_field(c.bnd.weight_decay));
  f.emplace_back("bnd.replicas", num_field(c.bnd.replicas));
  f.emplace_back("bnd.standardize", bool_field(c.bnd.standardize));

  auto& t = c.train;
  f.emplace_back("train.method", Field{[&c](const std::string& v) { c.method = parse_method(v); },
                                       [&c] { return to_string(c.method); }});
  f.emplace_back("train.base_epochs", num_field(t.base_epochs));
  f.emplace_back("train.inc_epochs", num_field(t.inc_epochs));
  f.emplace_back("train.lr_start", num_field(t.lr_start));
  f.emplace_back("train.lr_end", num_field(t.lr_end));
  f.emplace_back("train.weight_decay", num_field(t.weight_decay));
  f.emplace_back("train.batch", num_field(t.batch));
  f.emplace_back("train.seed", num_field(t.seed));
  f.emplace_back("train.replay", bool_field(t.replay));

  auto& d = c.data;
  f.emplace_back("data.classes", Field{[&d](const std::string& v) { d.classes = split_list(v); },
                                       [&d] { return join_list(d.classes); }});
  f.emplace_back("data.base_classes", num_field(d.base_classes));
  f.emplace_back("data.tasks", num_field(d.tasks));
  f.emplace_back("data.ways", num_field(d.ways));
  f.emplace_back("data.shots", num_field(d.shots));
  f.emplace_back("data.train_per_class", num_field(d.train_per_class));
  f.emplace_back("data.test_per_class", num_field(d.test_per_class));
  f.emplace_back("data.points", num_field(d.points));
  f.emplace_back("data.jitter", num_field(d.jitter));
  f.emplace_back("data.seed", num_field(d.seed));
  return f;
}

}  // namespace detail

inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (auto& [k, f] : detail::fields(cfg)) {
    if (k == key) {
      f.set(value);
      return;
    }
  }
  throw InvalidArgument("unknown config key '" + key + "'");
}

inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    line = detail::trim_copy(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'section.key = value'", no);
    const std::string key = detail::trim_copy(line.substr(0, eq));
    const std::string value = detail::trim_copy(line.substr(eq + 1));
    try {
      set_config_value(base, key, value);
    } catch (const InvalidArgument& e) {
      throw ParseError(e.what(), no);
    }
  }
  return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config", path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Every key with its current value, in table order.
inline std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  std::vector<std::pair<std::string, std::string>> out;
  for (auto& [k, f] : detail::fields(copy)) out.emplace_back(k, f.get());
  return out;
}

inline std::string config_text(const ExperimentConfig& cfg) {
  std::ostringstream os;
  for (const auto& [k, v] : config_entries(cfg)) os << k << " = " << v << '\n';
  return os.str();
}

}  // namespace cmgr
