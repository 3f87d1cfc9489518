// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "iavit/data_io/cifar10.hpp"
#include "iavit/data_io/json_config.hpp"
#include "iavit/data_io/synthetic.hpp"
#include "iavit/objectives/losses.hpp"
#include "iavit/objectives/train.hpp"

namespace iavit {

inline constexpr int kArtifactFormatVersion = 1;

struct DatasetSource {
  enum class Kind { synthetic, cifar10 };
  Kind kind = Kind::synthetic;
  SyntheticSpec synthetic;          ///< training split; the test split reuses it with test_samples / test_seed
  std::size_t test_samples = 1000;
  std::optional<std::uint64_t> synthetic_seed;  ///< unset: derived from the run seed
  std::vector<std::string> train_files;
  std::vector<std::string> test_files;
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  OptimizerConfig optimizer;
  DatasetSource dataset;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  bool train_reference = true;  ///< also train a CE-only baseline so the summary can report PDR
  std::size_t eval_images = 100;
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Distinct deterministic stream seeds from one run seed (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t { kInitStream = 1, kShuffleStream = 2, kTrainDataStream = 3, kTestDataStream = 4, kExplainStream = 5 };

inline Json to_json(const LossConfig& c) {
  Json j{{"beta", c.beta}, {"tau", c.tau}, {"use_kd", c.use_kd}, {"use_reg", c.use_reg}};
  if (c.sigma.kind == SigmaPolicy::Kind::fixed) {
    j["sigma"] = c.sigma.value;
  } else {
    j["sigma"] = "median";
    j["sigma_floor"] = c.sigma.floor;
  }
  return j;
}

inline Json to_json(const OptimizerConfig& c) {
  return Json{{"lr", c.lr},       {"batch", c.batch}, {"epochs", c.epochs},
              {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

inline Json to_json(const DatasetSource& d) {
  if (d.kind == DatasetSource::Kind::cifar10) {
    return Json{{"source", "cifar10"}, {"train_files", d.train_files}, {"test_files", d.test_files}};
  }
  Json syn = to_json(d.synthetic);
  if (!d.synthetic_seed) syn.erase("seed");
  else syn["seed"] = *d.synthetic_seed;
  return Json{{"source", "synthetic"}, {"synthetic", syn}, {"test_samples", d.test_samples}};
}

/// Fully resolved config, every default spelled out.
inline Json to_json(const RunConfig& c) {
  return Json{{"model", to_json(c.model)},         {"loss", to_json(c.loss)},
              {"optimizer", to_json(c.optimizer)}, {"dataset", to_json(c.dataset)},
              {"seed", c.seed},                    {"output_dir", c.output_dir},
              {"train_reference", c.train_reference}, {"eval_images", c.eval_images}};
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

inline LossConfig loss_config_from_json(ConfigReader r) {
  LossConfig c;
  c.beta = r.get("beta", c.beta);
  c.tau = r.get("tau", c.tau);
  c.use_kd = r.get("use_kd", c.use_kd);
  c.use_reg = r.get("use_reg", c.use_reg);
  const double floor = r.get("sigma_floor", c.sigma.floor);
  if (r.has("sigma")) {
    const std::string where = r.field("sigma");
    // Either the string "median" or a positive number.
    auto value = r.get<Json>("sigma", Json());
    if (value.is_string()) {
      if (value.get<std::string>() != "median") throw ConfigError(where, "expected \"median\" or a positive number");
      c.sigma = SigmaPolicy::median(floor);
    } else if (value.is_number()) {
      c.sigma = SigmaPolicy::fixed(value.get<double>());
    } else {
      throw ConfigError(where, "expected \"median\" or a positive number");
    }
  } else {
    c.sigma = SigmaPolicy::median(floor);
  }
  r.finish();
  c.validate();
  return c;
}

inline OptimizerConfig optimizer_config_from_json(ConfigReader r) {
  OptimizerConfig c;
  c.lr = r.get("lr", c.lr);
  c.batch = r.get("batch", c.batch);
  c.epochs = r.get("epochs", c.epochs);
  c.beta1 = r.get("beta1", c.beta1);
  c.beta2 = r.get("beta2", c.beta2);
  c.eps = r.get("eps", c.eps);
  r.finish();
  c.validate();
  return c;
}

inline DatasetSource dataset_source_from_json(ConfigReader r) {
  DatasetSource d;
  const std::string source = r.get<std::string>("source", "synthetic");
  if (source == "synthetic") {
    d.kind = DatasetSource::Kind::synthetic;
    ConfigReader syn = r.child("synthetic");
    if (syn.has("seed")) d.synthetic_seed = syn.get<std::uint64_t>("seed", 0);
    d.synthetic = synthetic_spec_from_json(std::move(syn));
    d.test_samples = r.get("test_samples", d.test_samples);
    if (d.test_samples == 0) throw ConfigError(r.field("test_samples"), "must be positive");
  } else if (source == "cifar10") {
    d.kind = DatasetSource::Kind::cifar10;
    d.train_files = r.get<std::vector<std::string>>("train_files", {});
    d.test_files = r.get<std::vector<std::string>>("test_files", {});
    if (d.train_files.empty()) throw ConfigError(r.field("train_files"), "cifar10 source needs at least one file");
    if (d.test_files.empty()) throw ConfigError(r.field("test_files"), "cifar10 source needs at least one file");
  } else {
    throw ConfigError(r.field("source"), "unknown dataset source '" + source + "' (synthetic | cifar10)");
  }
  r.finish();
  return d;
}

/// Strict parse of a run config. `seed` is mandatory unless an override is given.
inline RunConfig run_config_from_json(const Json& root, std::optional<std::uint64_t> seed_override = std::nullopt) {
  ConfigReader r(root, "");
  RunConfig c;
  c.model = model_config_from_json(r.child("model"));
  c.loss = loss_config_from_json(r.child("loss"));
  c.optimizer = optimizer_config_from_json(r.child("optimizer"));
  c.dataset = dataset_source_from_json(r.child("dataset"));
  if (seed_override) {
    r.get<std::uint64_t>("seed", 0);
    c.seed = *seed_override;
  } else {
    c.seed = r.require<std::uint64_t>("seed");
  }
  c.output_dir = r.get<std::string>("output_dir", c.output_dir);
  c.train_reference = r.get("train_reference", c.train_reference);
  c.eval_images = r.get("eval_images", c.eval_images);
  if (c.eval_images == 0) throw ConfigError("eval_images", "must be positive");
  r.finish();

  const auto& m = c.model;
  if (c.dataset.kind == DatasetSource::Kind::synthetic) {
    const auto& s = c.dataset.synthetic;
    if (m.image_size != s.image_size) throw ConfigError("model.image_size", "differs from dataset.synthetic.image_size");
    if (m.channels != s.channels) throw ConfigError("model.channels", "differs from dataset.synthetic.channels");
    if (m.classes != s.classes) throw ConfigError("model.classes", "differs from dataset.synthetic.classes");
  } else {
    if (m.image_size != cifar10::kSide || m.channels != cifar10::kChannels || m.classes != cifar10::kClasses) {
      throw ConfigError("model", "cifar10 needs image_size 32, channels 3, classes 10");
    }
  }
  return c;
}

/// Parses config text; JSON syntax errors are reported with line and column.
inline RunConfig parse_run_config(const std::string& text, std::optional<std::uint64_t> seed_override = std::nullopt) {
  Json root;
  try {
    root = Json::parse(text);
  } catch (const Json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("<json>", "syntax error at line " + std::to_string(line) + ", column " + std::to_string(col) +
                                    ": " + e.what());
  }
  return run_config_from_json(root, seed_override);
}

inline RunConfig load_run_config(const std::filesystem::path& path,
                                 std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), seed_override);
}

struct Splits {
  Dataset train;
  Dataset test;
};

inline Splits load_splits(const RunConfig& c) {
  Splits s;
  if (c.dataset.kind == DatasetSource::Kind::cifar10) {
    std::vector<std::filesystem::path> tr(c.dataset.train_files.begin(), c.dataset.train_files.end());
    std::vector<std::filesystem::path> te(c.dataset.test_files.begin(), c.dataset.test_files.end());
    s.train = load_cifar10_binary(tr);
    s.test = load_cifar10_binary(te);
    return s;
  }
  SyntheticSpec spec = c.dataset.synthetic;
  const std::uint64_t base = c.dataset.synthetic_seed.value_or(c.seed);
  spec.seed = derive_seed(base, kTrainDataStream);
  s.train = generate_planted(spec);
  spec.n_samples = c.dataset.test_samples;
  spec.seed = derive_seed(base, kTestDataStream);
  s.test = generate_planted(spec);
  return s;
}

}  // namespace iavit
