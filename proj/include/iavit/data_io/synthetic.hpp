// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>

#include "iavit/data_io/dataset.hpp"
#include "iavit/model/config.hpp"

namespace iavit {

/// Planted-patch task: noise background, one patch carries a class-specific
/// stripe pattern at a uniformly random grid position.
///
/// With bias_strength b > 0 every sample also gets a binary sensitive bit s
/// that copies the label parity with probability b (otherwise a fair coin),
/// and a corner tint that copies s with probability b (otherwise a coin). The
/// tint is therefore a spurious cue that tracks both s and the label.
struct SyntheticSpec {
  std::size_t n_samples = 1000;
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 1;
  std::size_t classes = 4;
  double pattern_contrast = 0.8;
  double noise_std = 0.1;
  double bias_strength = 0.0;
  double tint_amount = 0.3;
  std::uint64_t seed = 0;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }

  void validate() const {
    if (n_samples == 0) throw ConfigError("dataset.synthetic.n_samples", "must be positive");
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("dataset.synthetic.image_size", "must be a positive multiple of patch_size");
    }
    if (channels == 0) throw ConfigError("dataset.synthetic.channels", "must be positive");
    if (classes < 2) throw ConfigError("dataset.synthetic.classes", "need at least 2 classes");
    if (!(pattern_contrast > 0.0 && pattern_contrast <= 1.0)) {
      throw ConfigError("dataset.synthetic.pattern_contrast", "must lie in (0, 1]");
    }
    if (!(noise_std >= 0.0)) throw ConfigError("dataset.synthetic.noise_std", "must be non-negative");
    if (!(pattern_contrast > 3.0 * noise_std)) {
      throw ConfigError("dataset.synthetic.pattern_contrast", "must exceed 3 * noise_std for a learnable task");
    }
    if (!(bias_strength >= 0.0 && bias_strength <= 1.0)) {
      throw ConfigError("dataset.synthetic.bias_strength", "must lie in [0, 1]");
    }
    if (!(tint_amount >= 0.0 && tint_amount <= 1.0)) throw ConfigError("dataset.synthetic.tint_amount", "must lie in [0, 1]");
  }
};

/// Noise-free pattern for class k: a square-wave grating whose orientation is
/// k * pi / classes, centred on 0.5 with peak-to-peak amplitude `contrast`.
inline Tensor planted_template(std::size_t k, std::size_t patch_size, std::size_t classes, double contrast) {
  const double theta = std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
  const double period = std::max(2.0, static_cast<double>(patch_size) / 2.0);
  const double c = std::cos(theta), s = std::sin(theta);
  Tensor out(Shape{patch_size, patch_size});
  for (std::size_t y = 0; y < patch_size; ++y)
    for (std::size_t x = 0; x < patch_size; ++x) {
      const double u = (static_cast<double>(x) + 0.5) * c + (static_cast<double>(y) + 0.5) * s;
      const double wave = std::cos(2.0 * std::numbers::pi * u / period);
      out.at(y, x) = static_cast<float>(0.5 + 0.5 * contrast * (wave >= 0.0 ? 1.0 : -1.0));
    }
  return out;
}

inline Dataset generate_planted(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_class(0, spec.classes - 1);
  std::uniform_int_distribution<std::size_t> pick_patch(0, spec.num_patches() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);

  std::vector<Tensor> templates;
  for (std::size_t k = 0; k < spec.classes; ++k)
    templates.push_back(planted_template(k, spec.patch_size, spec.classes, spec.pattern_contrast));

  const bool biased = spec.bias_strength > 0.0;
  Dataset data;
  data.name = "synthetic-planted";
  data.classes = spec.classes;
  data.channels = spec.channels;
  data.image_size = spec.image_size;
  data.planted.emplace();
  if (biased) data.sensitive.emplace();

  const std::size_t s = spec.image_size, p = spec.patch_size, g = spec.grid();
  const std::size_t tint_size = std::max<std::size_t>(1, p / 2);
  for (std::size_t n = 0; n < spec.n_samples; ++n) {
    const std::size_t label = pick_class(rng);
    const std::size_t where = pick_patch(rng);
    Tensor img(Shape{spec.channels, s, s});
    for (auto& v : img.data) v = static_cast<float>(0.5 + spec.noise_std * noise(rng));
    const std::size_t py = (where / g) * p, px = (where % g) * p;
    for (std::size_t c = 0; c < spec.channels; ++c)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          img.data[(c * s + py + y) * s + px + x] =
              static_cast<float>(templates[label].at(y, x) + spec.noise_std * noise(rng));
    if (biased) {
      const int parity = static_cast<int>(label % 2);
      const int sens = unit(rng) < spec.bias_strength ? parity : static_cast<int>(coin(rng));
      const int tint = unit(rng) < spec.bias_strength ? sens : static_cast<int>(coin(rng));
      if (tint) {
        for (std::size_t c = 0; c < spec.channels; ++c)
          for (std::size_t y = 0; y < tint_size; ++y)
            for (std::size_t x = 0; x < tint_size; ++x) img.data[(c * s + y) * s + x] += static_cast<float>(spec.tint_amount);
      }
      data.sensitive->push_back(sens);
    }
    for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
    data.images.push_back(std::move(img));
    data.labels.push_back(static_cast<int>(label));
    data.planted->push_back(static_cast<int>(where));
  }
  return data;
}

/// Whether the corner tint is present, read back from the pixels (used to
/// measure how strongly the tint tracks the sensitive bit).
inline bool has_tint(const Tensor& image, const SyntheticSpec& spec) {
  const std::size_t s = spec.image_size, tint_size = std::max<std::size_t>(1, spec.patch_size / 2);
  double total = 0.0;
  for (std::size_t y = 0; y < tint_size; ++y)
    for (std::size_t x = 0; x < tint_size; ++x) total += image.data[y * s + x];
  return total / static_cast<double>(tint_size * tint_size) > 0.5 + spec.tint_amount / 2.0;
}

}  // namespace iavit
