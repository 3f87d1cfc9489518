// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iavit/numerics/tensor.hpp"

namespace iavit {

/// Images (channels x H x W, values in [0, 1]) with parallel label arrays.
struct Dataset {
  std::string name;
  std::size_t classes = 0;
  std::size_t channels = 0;
  std::size_t image_size = 0;
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::optional<std::vector<int>> sensitive;  ///< binary attribute, when available
  std::optional<std::vector<int>> planted;    ///< patch index carrying the class pattern

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }

  void validate() const {
    if (labels.size() != images.size()) throw std::invalid_argument("dataset: labels/images length mismatch");
    if (sensitive && sensitive->size() != images.size()) {
      throw std::invalid_argument("dataset: sensitive/images length mismatch");
    }
    if (planted && planted->size() != images.size()) throw std::invalid_argument("dataset: planted/images length mismatch");
    const Shape expected{channels, image_size, image_size};
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (images[i].shape != expected) {
        throw DimensionError("dataset: image " + std::to_string(i) + " has shape " + to_string(images[i].shape) +
                             ", expected " + to_string(expected));
      }
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
        throw std::invalid_argument("dataset: label " + std::to_string(labels[i]) + " out of range");
      }
      for (float v : images[i].data) {
        if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("dataset: pixel outside [0, 1]");
      }
    }
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.name = name;
    out.classes = classes;
    out.channels = channels;
    out.image_size = image_size;
    if (sensitive) out.sensitive.emplace();
    if (planted) out.planted.emplace();
    for (std::size_t i : indices) {
      out.images.push_back(images.at(i));
      out.labels.push_back(labels.at(i));
      if (sensitive) out.sensitive->push_back((*sensitive)[i]);
      if (planted) out.planted->push_back((*planted)[i]);
    }
    return out;
  }
};

}  // namespace iavit
