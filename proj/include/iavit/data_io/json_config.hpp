// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <set>
#include <string>
#include <type_traits>

#include "iavit/data_io/synthetic.hpp"
#include "iavit/model/config.hpp"
#include "json.hpp"

namespace iavit {

using Json = nlohmann::json;

/// Strict reader over one JSON object. Missing keys take the supplied default,
/// wrong types and unknown keys raise ConfigError naming the full key path.
class ConfigReader {
 public:
  ConfigReader(const Json& object, std::string path) : obj_(object), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected a JSON object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return obj_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end() || it->is_null()) return fallback;
    return convert<T>(*it, field(key));
  }

  template <typename T>
  T require(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end() || it->is_null()) throw ConfigError(field(key), "is required");
    return convert<T>(*it, field(key));
  }

  ConfigReader child(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return ConfigReader(empty_object(), field(key));
    return ConfigReader(*it, field(key));
  }

  /// Rejects keys that were never asked for (typos would otherwise be silently ignored).
  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }
  }

 private:
  template <typename T>
  static T convert(const Json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where, "expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return v.get<T>();
        if (v.get<long long>() < 0) throw ConfigError(where, "must be non-negative");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where, "expected a string");
      return v.get<std::string>();
    } else {
      try {
        return v.get<T>();
      } catch (const nlohmann::json::exception&) {
        throw ConfigError(where, "has the wrong type");
      }
    }
  }

  static const Json& empty_object() {
    static const Json empty = Json::object();
    return empty;
  }

  const Json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

inline Json to_json(const ModelConfig& c) {
  return Json{{"image_size", c.image_size},     {"patch_size", c.patch_size},
              {"channels", c.channels},         {"embed_dim", c.embed_dim},
              {"depth", c.depth},               {"heads", c.heads},
              {"classes", c.classes},           {"interpreter_hidden", c.interpreter_hidden},
              {"mlp_ratio", c.mlp_ratio},       {"init_std", c.init_std}};
}

inline ModelConfig model_config_from_json(ConfigReader r) {
  ModelConfig c;
  c.image_size = r.get("image_size", c.image_size);
  c.patch_size = r.get("patch_size", c.patch_size);
  c.channels = r.get("channels", c.channels);
  c.embed_dim = r.get("embed_dim", c.embed_dim);
  c.depth = r.get("depth", c.depth);
  c.heads = r.get("heads", c.heads);
  c.classes = r.get("classes", c.classes);
  c.interpreter_hidden = r.get("interpreter_hidden", c.interpreter_hidden);
  c.mlp_ratio = r.get("mlp_ratio", c.mlp_ratio);
  c.init_std = r.get("init_std", c.init_std);
  r.finish();
  c.validate();
  return c;
}

inline Json to_json(const SyntheticSpec& s) {
  return Json{{"n_samples", s.n_samples},
              {"image_size", s.image_size},
              {"patch_size", s.patch_size},
              {"channels", s.channels},
              {"classes", s.classes},
              {"pattern_contrast", s.pattern_contrast},
              {"noise_std", s.noise_std},
              {"bias_strength", s.bias_strength},
              {"tint_amount", s.tint_amount},
              {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(ConfigReader r) {
  SyntheticSpec s;
  s.n_samples = r.get("n_samples", s.n_samples);
  s.image_size = r.get("image_size", s.image_size);
  s.patch_size = r.get("patch_size", s.patch_size);
  s.channels = r.get("channels", s.channels);
  s.classes = r.get("classes", s.classes);
  s.pattern_contrast = r.get("pattern_contrast", s.pattern_contrast);
  s.noise_std = r.get("noise_std", s.noise_std);
  s.bias_strength = r.get("bias_strength", s.bias_strength);
  s.tint_amount = r.get("tint_amount", s.tint_amount);
  s.seed = r.get("seed", s.seed);
  r.finish();
  s.validate();
  return s;
}

/// Manifest describing where a dataset came from.
inline Json dataset_manifest(const Dataset& d, const std::vector<std::string>& sources) {
  return Json{{"name", d.name},         {"n", d.size()},          {"classes", d.classes},
              {"channels", d.channels}, {"image_size", d.image_size}, {"source_files", sources},
              {"has_sensitive", d.sensitive.has_value()},         {"has_planted", d.planted.has_value()}};
}

}  // namespace iavit
