/**
 * @file config.hpp
 * @brief Experiment configuration in a flat `dotted.key = value` text format.
 *
 * Lines are `key = value`; `#` starts a comment. Unknown keys, duplicate keys
 * and out-of-range values are errors carrying the line number. `emit_config`
 * writes every key in a fixed order, and parsing the emitted text yields the
 * same configuration again.
 */
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fscil/data.hpp"
#include "fscil/ensemble_net.hpp"
#include "fscil/protocol.hpp"

namespace fscil {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SyntheticDataConfig {
  std::size_t classes = 16;
  std::size_t train_per_class = 30;
  std::size_t test_per_class = 15;
  std::size_t side = 16;
  double noise = 0.05;
  std::size_t max_shift = 1;
  bool random_pose = false;
  bool clutter = false;
  std::uint64_t seed = 7;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string out_dir = "runs";

  std::string data_source = "synthetic";  // synthetic | cifar100 | raw
  std::string train_path;
  std::string test_path;
  SyntheticDataConfig synthetic;

  SplitPlan split{6, 2, 5, 4, {}, 11};
  std::string split_file;

  NetConfig net;
  ProtocolConfig protocol;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ConfigError("not a nonnegative integer: '" + s + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "on" || s == "1") return true;
  if (s == "false" || s == "off" || s == "0") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(trim(item));
  return out;
}

template <typename V, typename F>
std::string join(const std::vector<V>& v, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += fmt(v[i]);
  }
  return out;
}

struct ConfigKey {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename F>
ConfigKey uint_key(std::string k, F field) {
  return {std::move(k), [field](const ExperimentConfig& c) { return std::to_string(field(c)); },
          [field](ExperimentConfig& c, const std::string& v) {
            field(c) = static_cast<std::remove_reference_t<decltype(field(c))>>(parse_uint(v));
          }};
}

template <typename F>
ConfigKey double_key(std::string k, F field) {
  return {std::move(k), [field](const ExperimentConfig& c) { return format_double(field(c)); },
          [field](ExperimentConfig& c, const std::string& v) { field(c) = parse_double(v); }};
}

template <typename F>
ConfigKey bool_key(std::string k, F field) {
  return {std::move(k),
          [field](const ExperimentConfig& c) { return std::string(field(c) ? "true" : "false"); },
          [field](ExperimentConfig& c, const std::string& v) { field(c) = parse_bool(v); }};
}

template <typename F>
ConfigKey string_key(std::string k, F field) {
  return {std::move(k), [field](const ExperimentConfig& c) { return field(c); },
          [field](ExperimentConfig& c, const std::string& v) { field(c) = v; }};
}

inline SamplingMode parse_mode(const std::string& s) {
  if (s == "spatial") return SamplingMode::spatial;
  if (s == "uniform") return SamplingMode::uniform;
  if (s == "off") return SamplingMode::off;
  throw ConfigError("sampling mode must be spatial|uniform|off, got '" + s + "'");
}

// clang-format off
inline const std::vector<ConfigKey>& config_keys() {
  using C = ExperimentConfig;
  static const std::vector<ConfigKey> keys = {
      string_key("name", [](auto& c) -> auto& { return c.name; }),
      string_key("out_dir", [](auto& c) -> auto& { return c.out_dir; }),
      uint_key("seed", [](auto& c) -> auto& { return c.protocol.seed; }),

      string_key("data.source", [](auto& c) -> auto& { return c.data_source; }),
      string_key("data.train_path", [](auto& c) -> auto& { return c.train_path; }),
      string_key("data.test_path", [](auto& c) -> auto& { return c.test_path; }),
      uint_key("data.synthetic.classes", [](auto& c) -> auto& { return c.synthetic.classes; }),
      uint_key("data.synthetic.train_per_class", [](auto& c) -> auto& { return c.synthetic.train_per_class; }),
      uint_key("data.synthetic.test_per_class", [](auto& c) -> auto& { return c.synthetic.test_per_class; }),
      uint_key("data.synthetic.side", [](auto& c) -> auto& { return c.synthetic.side; }),
      double_key("data.synthetic.noise", [](auto& c) -> auto& { return c.synthetic.noise; }),
      uint_key("data.synthetic.max_shift", [](auto& c) -> auto& { return c.synthetic.max_shift; }),
      bool_key("data.synthetic.random_pose", [](auto& c) -> auto& { return c.synthetic.random_pose; }),
      bool_key("data.synthetic.clutter", [](auto& c) -> auto& { return c.synthetic.clutter; }),
      uint_key("data.synthetic.seed", [](auto& c) -> auto& { return c.synthetic.seed; }),

      uint_key("split.base_classes", [](auto& c) -> auto& { return c.split.base_classes; }),
      uint_key("split.way", [](auto& c) -> auto& { return c.split.way; }),
      uint_key("split.shot", [](auto& c) -> auto& { return c.split.shot; }),
      uint_key("split.sessions", [](auto& c) -> auto& { return c.split.sessions; }),
      {"split.class_order",
       [](const C& c) { return join(c.split.class_order, [](int v) { return std::to_string(v); }); },
       [](C& c, const std::string& v) {
         c.split.class_order.clear();
         for (const auto& s : split_list(v)) c.split.class_order.push_back(static_cast<int>(parse_uint(s)));
       }},
      uint_key("split.seed", [](auto& c) -> auto& { return c.split.sample_seed; }),
      string_key("split.file", [](auto& c) -> auto& { return c.split_file; }),

      {"model.stage_channels",
       [](const C& c) { return join(c.net.backbone.stage_channels, [](std::size_t v) { return std::to_string(v); }); },
       [](C& c, const std::string& v) {
         c.net.backbone.stage_channels.clear();
         for (const auto& s : split_list(v)) c.net.backbone.stage_channels.push_back(parse_uint(s));
       }},
      uint_key("model.blocks_per_stage", [](auto& c) -> auto& { return c.net.backbone.blocks_per_stage; }),
      {"model.norm", [](const C& c) { return to_string(c.net.backbone.norm); },
       [](C& c, const std::string& v) {
         if (v == "batch") {
           c.net.backbone.norm = NormKind::batch;
         } else if (v == "group") {
           c.net.backbone.norm = NormKind::group;
         } else {
           throw ConfigError("expected batch or group, got '" + v + "'");
         }
       }},
      uint_key("model.group_channels", [](auto& c) -> auto& { return c.net.backbone.group_channels; }),
      bool_key("model.ensemble", [](auto& c) -> auto& { return c.net.ensemble; }),
      double_key("model.cosine_scale", [](auto& c) -> auto& { return c.net.cosine_scale; }),

      double_key("mix.alpha", [](auto& c) -> auto& { return c.protocol.mix.alpha; }),
      double_key("mix.r", [](auto& c) -> auto& { return c.protocol.mix.r; }),
      double_key("mix.repeat_prob", [](auto& c) -> auto& { return c.protocol.base_repeat_prob; }),

      uint_key("optim.batch_size", [](auto& c) -> auto& { return c.protocol.batch_size; }),
      double_key("optim.lr", [](auto& c) -> auto& { return c.protocol.base_lr; }),
      double_key("optim.momentum", [](auto& c) -> auto& { return c.protocol.momentum; }),
      double_key("optim.weight_decay", [](auto& c) -> auto& { return c.protocol.weight_decay; }),
      bool_key("optim.nesterov", [](auto& c) -> auto& { return c.protocol.nesterov; }),
      double_key("optim.warmup_frac", [](auto& c) -> auto& { return c.protocol.warmup_frac; }),
      {"optim.milestones",
       [](const C& c) { return join(c.protocol.milestones, [](double v) { return format_double(v); }); },
       [](C& c, const std::string& v) {
         c.protocol.milestones.clear();
         for (const auto& s : split_list(v)) c.protocol.milestones.push_back(parse_double(s));
       }},
      double_key("optim.decay", [](auto& c) -> auto& { return c.protocol.decay; }),

      uint_key("base.epochs", [](auto& c) -> auto& { return c.protocol.base_epochs; }),
      uint_key("inc.epochs", [](auto& c) -> auto& { return c.protocol.inc_epochs; }),
      double_key("inc.lr", [](auto& c) -> auto& { return c.protocol.inc_lr; }),
      double_key("inc.backbone_lr", [](auto& c) -> auto& { return c.protocol.inc_backbone_lr; }),
      double_key("inc.repeat_prob", [](auto& c) -> auto& { return c.protocol.inc_repeat_prob; }),
      uint_key("inc.support_oversample", [](auto& c) -> auto& { return c.protocol.support_oversample; }),
      uint_key("inc.n_init", [](auto& c) -> auto& { return c.protocol.n_init; }),
      uint_key("replay.m", [](auto& c) -> auto& { return c.protocol.replay_m; }),

      {"patchmix.mode", [](const C& c) { return to_string(c.protocol.patchmix.mode); },
       [](C& c, const std::string& v) { c.protocol.patchmix.mode = parse_mode(v); }},
      uint_key("patchmix.n", [](auto& c) -> auto& { return c.protocol.patchmix.n; }),
      uint_key("patchmix.k_min", [](auto& c) -> auto& { return c.protocol.patchmix.k_min; }),
      uint_key("patchmix.k_max", [](auto& c) -> auto& { return c.protocol.patchmix.k_max; }),
      double_key("patchmix.apply_prob", [](auto& c) -> auto& { return c.protocol.patchmix.apply_prob; }),
      double_key("patchmix.sigma", [](auto& c) -> auto& { return c.protocol.patchmix.sigma; }),
      bool_key("patchmix.base_session", [](auto& c) -> auto& { return c.protocol.patchmix_base; }),

      bool_key("ssl.enabled", [](auto& c) -> auto& { return c.protocol.ssl_enabled; }),
      {"ssl.sessions", [](const C& c) { return std::string(c.protocol.ssl_all_sessions ? "all" : "base"); },
       [](C& c, const std::string& v) {
         if (v != "base" && v != "all") throw ConfigError("ssl.sessions must be base|all, got '" + v + "'");
         c.protocol.ssl_all_sessions = v == "all";
       }},
      bool_key("ssl.per_image_transform", [](auto& c) -> auto& { return c.protocol.ssl_per_image_transform; }),
      double_key("ssl.gamma", [](auto& c) -> auto& { return c.protocol.ssl.gamma; }),
      double_key("ssl.lambda_w", [](auto& c) -> auto& { return c.protocol.ssl.lambda_w; }),
      double_key("ssl.mu_w", [](auto& c) -> auto& { return c.protocol.ssl.mu_w; }),
      double_key("ssl.nu_w", [](auto& c) -> auto& { return c.protocol.ssl.nu_w; }),
      double_key("ssl.eps", [](auto& c) -> auto& { return c.protocol.ssl.eps; }),
  };
  return keys;
}
// clang-format on

inline void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError("key '" + key + "': " + what);
}

}  // namespace detail

/// Range checks across all fields. Messages name the offending key.
inline void validate(const ExperimentConfig& c) {
  using detail::require;
  require(c.data_source == "synthetic" || c.data_source == "cifar100" || c.data_source == "raw", "data.source",
          "must be synthetic|cifar100|raw");
  if (c.data_source != "synthetic") {
    require(!c.train_path.empty(), "data.train_path", "required for non-synthetic data");
    require(!c.test_path.empty(), "data.test_path", "required for non-synthetic data");
  }
  require(c.synthetic.classes >= 2, "data.synthetic.classes", "must be >= 2");
  require(c.synthetic.train_per_class >= 1, "data.synthetic.train_per_class", "must be >= 1");
  require(c.synthetic.test_per_class >= 1, "data.synthetic.test_per_class", "must be >= 1");
  require(c.synthetic.side >= 4, "data.synthetic.side", "must be >= 4");
  require(c.synthetic.noise >= 0.0 && c.synthetic.noise <= 1.0, "data.synthetic.noise", "must lie in [0, 1]");
  require(c.split.way >= 1, "split.way", "must be >= 1");
  require(c.split.shot >= 1, "split.shot", "must be >= 1");
  require(c.split.base_classes >= 1, "split.base_classes", "must be >= 1");
  require(!c.net.backbone.stage_channels.empty(), "model.stage_channels", "needs at least one stage");
  for (auto w : c.net.backbone.stage_channels) {
    require(w > 0, "model.stage_channels", "each width must be positive");
    if (c.net.backbone.norm == NormKind::group) {
      require(c.net.backbone.group_channels > 0 && w % c.net.backbone.group_channels == 0, "model.stage_channels",
              "each width must be a multiple of model.group_channels under group norm");
    }
  }
  require(c.net.cosine_scale > 0.0, "model.cosine_scale", "must be positive");
  require(c.protocol.mix.alpha > 0.0, "mix.alpha", "must be positive");
  require(c.protocol.mix.r > 0.0, "mix.r", "must be positive");
  require(c.protocol.base_repeat_prob >= 0.0 && c.protocol.base_repeat_prob <= 1.0, "mix.repeat_prob",
          "must lie in [0, 1]");
  require(c.protocol.inc_repeat_prob >= 0.0 && c.protocol.inc_repeat_prob <= 1.0, "inc.repeat_prob",
          "must lie in [0, 1]");
  const auto& p = c.protocol;
  require(p.batch_size >= 2, "optim.batch_size", "must be >= 2");
  require(p.base_lr > 0.0, "optim.lr", "must be positive");
  require(p.momentum >= 0.0 && p.momentum < 1.0, "optim.momentum", "must lie in [0, 1)");
  require(p.weight_decay >= 0.0, "optim.weight_decay", "must be >= 0");
  require(p.warmup_frac >= 0.0 && p.warmup_frac < 1.0, "optim.warmup_frac", "must lie in [0, 1)");
  for (double m : p.milestones) require(m > 0.0 && m < 1.0, "optim.milestones", "fractions must lie in (0, 1)");
  require(p.decay > 0.0 && p.decay <= 1.0, "optim.decay", "must lie in (0, 1]");
  require(p.inc_lr >= 0.0, "inc.lr", "must be >= 0");
  require(p.inc_backbone_lr >= 0.0, "inc.backbone_lr", "must be >= 0");
  require(p.support_oversample >= 1, "inc.support_oversample", "must be >= 1");
  require(p.n_init >= 1, "inc.n_init", "must be >= 1");
  require(p.n_init <= c.split.shot, "inc.n_init", "must not exceed split.shot");
  require(p.replay_m >= 1, "replay.m", "must be >= 1");
  const auto& pm = p.patchmix;
  require(pm.n >= 2, "patchmix.n", "must be >= 2");
  require(pm.k_min >= 1 && pm.k_min <= pm.k_max, "patchmix.k_min", "need 1 <= k_min <= k_max");
  require(pm.k_max < pm.n * pm.n, "patchmix.k_max", "must be below n^2 (the centre cell is never drawn)");
  require(pm.apply_prob >= 0.0 && pm.apply_prob <= 1.0, "patchmix.apply_prob", "must lie in [0, 1]");
  require(pm.sigma > 0.0, "patchmix.sigma", "must be positive");
  if (c.data_source == "synthetic") {
    require(pm.n <= c.synthetic.side, "patchmix.n", "grid finer than the image");
  }
  require(p.ssl.gamma >= 0.0, "ssl.gamma", "must be >= 0");
  require(p.ssl.lambda_w >= 0.0, "ssl.lambda_w", "must be >= 0");
  require(p.ssl.mu_w >= 0.0, "ssl.mu_w", "must be >= 0");
  require(p.ssl.nu_w >= 0.0, "ssl.nu_w", "must be >= 0");
  require(p.ssl.eps > 0.0, "ssl.eps", "must be positive");
}

/// Applies one `key = value` assignment; throws ConfigError for unknown keys or bad values.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (k.key != key) continue;
    try {
      k.set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError("key '" + key + "': " + e.what());
    }
    return;
  }
  throw ConfigError("unknown key '" + key + "'");
}

inline std::string get_config_value(const ExperimentConfig& c, const std::string& key) {
  for (const auto& k : detail::config_keys()) {
    if (k.key == key) return k.get(c);
  }
  throw ConfigError("unknown key '" + key + "'");
}

/// Parses over the defaults in `base`. The result is validated.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto where = "line " + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "empty key");
    if (const auto it = seen.find(key); it != seen.end()) {
      throw ConfigError(where + "key '" + key + "' already set on line " + std::to_string(it->second));
    }
    seen[key] = lineno;
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  validate(base);
  return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Every key, one per line, in a fixed order.
inline std::string emit_config(const ExperimentConfig& c) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.key + " = " + k.get(c) + "\n";
  return out;
}

}  // namespace fscil
