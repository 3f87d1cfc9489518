// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace iavit {

/// Invalid configuration value. `field()` names the offending key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 1;
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t classes = 4;
  /// 0 selects a single linear interpreter head; otherwise two layers with this width.
  std::size_t interpreter_hidden = 0;
  std::size_t mlp_ratio = 4;
  double init_std = 0.02;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return embed_dim / heads; }

  void validate() const {
    if (image_size == 0) throw ConfigError("model.image_size", "must be positive");
    if (patch_size == 0) throw ConfigError("model.patch_size", "must be positive");
    if (image_size % patch_size != 0) {
      throw ConfigError("model.image_size", "image_size " + std::to_string(image_size) +
                                                " is not divisible by patch_size " + std::to_string(patch_size));
    }
    if (channels == 0) throw ConfigError("model.channels", "must be positive");
    if (embed_dim == 0) throw ConfigError("model.embed_dim", "must be positive");
    if (heads == 0) throw ConfigError("model.heads", "must be positive");
    if (embed_dim % heads != 0) {
      throw ConfigError("model.embed_dim", "embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                                               std::to_string(heads));
    }
    if (classes < 2) throw ConfigError("model.classes", "need at least 2 classes");
    if (mlp_ratio == 0) throw ConfigError("model.mlp_ratio", "must be positive");
    if (!(init_std > 0.0)) throw ConfigError("model.init_std", "must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace iavit
