// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iavit/model/config.hpp"
#include "iavit/numerics/tensor.hpp"

namespace iavit {

/// Per-patch importance, non-negative and summing to one.
struct SaliencyMap {
  Tensor scores;           ///< [N]
  std::string method;
  bool fallback = false;   ///< raw scores were degenerate and the uniform map was substituted

  std::size_t size() const { return scores.size(); }

  /// Nearest-neighbour expansion to an H x W map, one constant block per patch.
  Tensor upsample(const ModelConfig& cfg) const {
    if (scores.size() != cfg.num_patches()) {
      throw DimensionError("upsample: " + std::to_string(scores.size()) + " scores for " +
                           std::to_string(cfg.num_patches()) + " patches");
    }
    const std::size_t g = cfg.grid(), p = cfg.patch_size, s = cfg.image_size;
    Tensor out(Shape{s, s});
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) out.at(y, x) = scores.data[(y / p) * g + x / p];
    return out;
  }
};

/// Normalizes raw non-negative scores to sum one. All-zero, negative-sum or
/// non-finite input yields the uniform map with `fallback` set.
inline SaliencyMap make_saliency(std::span<const double> raw, std::string method) {
  if (raw.empty()) throw DimensionError("saliency: no patches");
  SaliencyMap m;
  m.method = std::move(method);
  m.scores = Tensor(Shape{raw.size()});
  double total = 0.0;
  bool finite = true;
  for (double v : raw) {
    if (!std::isfinite(v) || v < 0.0) finite = false;
    total += v;
  }
  if (!finite || !(total > 0.0)) {
    m.fallback = true;
    std::fill(m.scores.data.begin(), m.scores.data.end(), static_cast<float>(1.0 / static_cast<double>(raw.size())));
    return m;
  }
  for (std::size_t i = 0; i < raw.size(); ++i) m.scores.data[i] = static_cast<float>(raw[i] / total);
  return m;
}

inline void validate_saliency(const SaliencyMap& m, std::size_t n_patches) {
  if (m.scores.size() != n_patches) {
    throw DimensionError("saliency '" + m.method + "' has " + std::to_string(m.scores.size()) + " scores, expected " +
                         std::to_string(n_patches));
  }
  double total = 0.0;
  for (float v : m.scores.data) {
    if (!(v >= 0.0f) || !std::isfinite(v)) throw std::invalid_argument("saliency '" + m.method + "' has a negative or non-finite score");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-5) {
    throw std::invalid_argument("saliency '" + m.method + "' sums to " + std::to_string(total));
  }
}

/// Binary 8-bit PGM of the upsampled map, scaled so the largest score is 255.
inline std::string saliency_pgm(const SaliencyMap& m, const ModelConfig& cfg) {
  const Tensor up = m.upsample(cfg);
  const float peak = *std::max_element(up.data.begin(), up.data.end());
  const std::size_t s = cfg.image_size;
  std::string out = "P5\n" + std::to_string(s) + " " + std::to_string(s) + "\n255\n";
  for (float v : up.data) {
    const double level = peak > 0.0f ? std::round(255.0 * static_cast<double>(v) / static_cast<double>(peak)) : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(level, 0.0, 255.0))));
  }
  return out;
}

inline void write_pgm(const SaliencyMap& m, const ModelConfig& cfg, const std::filesystem::path& path) {
  const std::string bytes = saliency_pgm(m, cfg);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace iavit
