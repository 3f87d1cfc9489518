// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iavit/data_io/dataset.hpp"

namespace iavit {

/// Malformed input file (truncated record, bad label byte, bad header ...).
class DataFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cifar10 {
inline constexpr std::size_t kSide = 32;
inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kPixels = kSide * kSide * kChannels;
inline constexpr std::size_t kRecord = 1 + kPixels;
inline constexpr std::size_t kClasses = 10;
}  // namespace cifar10

/// Decodes CIFAR-10 binary records (label byte, then R, G, B planes of 32x32).
inline void append_cifar10_records(std::span<const std::uint8_t> bytes, Dataset& out, const std::string& source) {
  if (bytes.size() % cifar10::kRecord != 0) {
    throw DataFormatError(source + ": length " + std::to_string(bytes.size()) + " is not a multiple of " +
                          std::to_string(cifar10::kRecord) + " (truncated record)");
  }
  const std::size_t records = bytes.size() / cifar10::kRecord;
  out.images.reserve(out.images.size() + records);
  for (std::size_t r = 0; r < records; ++r) {
    const std::uint8_t* rec = bytes.data() + r * cifar10::kRecord;
    if (rec[0] >= cifar10::kClasses) {
      throw DataFormatError(source + ": record " + std::to_string(r) + " has label byte " + std::to_string(rec[0]));
    }
    Tensor img(Shape{cifar10::kChannels, cifar10::kSide, cifar10::kSide});
    for (std::size_t i = 0; i < cifar10::kPixels; ++i) img.data[i] = static_cast<float>(rec[1 + i]) / 255.0f;
    out.images.push_back(std::move(img));
    out.labels.push_back(rec[0]);
  }
}

inline Dataset empty_cifar10() {
  Dataset d;
  d.name = "cifar10";
  d.classes = cifar10::kClasses;
  d.channels = cifar10::kChannels;
  d.image_size = cifar10::kSide;
  return d;
}

inline Dataset load_cifar10_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Dataset d = empty_cifar10();
  append_cifar10_records(bytes, d, path.string());
  return d;
}

/// Concatenates several batch files in the given order.
inline Dataset load_cifar10_binary(std::span<const std::filesystem::path> paths) {
  Dataset d = empty_cifar10();
  for (const auto& p : paths) {
    Dataset part = load_cifar10_binary(p);
    for (std::size_t i = 0; i < part.size(); ++i) {
      d.images.push_back(std::move(part.images[i]));
      d.labels.push_back(part.labels[i]);
    }
  }
  return d;
}

}  // namespace iavit
