// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iavit/explainers/saliency.hpp"
#include "iavit/model/iavit.hpp"

namespace iavit {

enum class FillMode { black, blur };
enum class CurveMode { deletion, insertion };

inline std::string to_string(FillMode f) { return f == FillMode::black ? "black" : "blur"; }
inline std::string to_string(CurveMode m) { return m == CurveMode::deletion ? "deletion" : "insertion"; }

struct EvalCurve {
  std::vector<double> fractions;
  std::vector<double> scores;
  double auc = 0.0;
  FillMode fill = FillMode::black;
  CurveMode mode = CurveMode::deletion;
};

inline constexpr std::size_t kDefaultSteps = 11;

/// Evenly spaced fractions 0, 1/(steps-1), ..., 1.
inline std::vector<double> fraction_grid(std::size_t steps = kDefaultSteps) {
  if (steps < 2) throw std::invalid_argument("fraction grid needs at least 2 steps");
  std::vector<double> f(steps);
  for (std::size_t i = 0; i < steps; ++i) f[i] = static_cast<double>(i) / static_cast<double>(steps - 1);
  return f;
}

inline double trapezoid(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("trapezoid: length mismatch");
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) area += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  return area;
}

/// Separable Gaussian blur, sigma = patch_size / 2, radius ceil(2 sigma),
/// reflect padding (mirror about the edge pixel, edge not repeated).
inline Tensor gaussian_blur(const Tensor& image, std::size_t patch_size) {
  if (image.rank() != 3) throw DimensionError("gaussian_blur: expected C x H x W, got " + to_string(image.shape));
  const double sigma = static_cast<double>(patch_size) / 2.0;
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(2.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    norm += kernel[i + radius];
  }
  for (auto& k : kernel) k /= norm;

  const auto reflect = [](std::ptrdiff_t i, std::ptrdiff_t n) {
    if (n == 1) return std::ptrdiff_t{0};
    const std::ptrdiff_t period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
  };

  const std::size_t c = image.shape[0], h = image.shape[1], w = image.shape[2];
  std::vector<double> tmp(image.size());
  Tensor out(image.shape);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float* src = image.data.data() + ch * h * w;
    double* mid = tmp.data() + ch * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t k = -radius; k <= radius; ++k)
          acc += kernel[k + radius] * src[y * w + reflect(static_cast<std::ptrdiff_t>(x) + k, static_cast<std::ptrdiff_t>(w))];
        mid[y * w + x] = acc;
      }
    float* dst = out.data.data() + ch * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t k = -radius; k <= radius; ++k)
          acc += kernel[k + radius] * mid[reflect(static_cast<std::ptrdiff_t>(y) + k, static_cast<std::ptrdiff_t>(h)) * w + x];
        dst[y * w + x] = static_cast<float>(acc);
      }
  }
  return out;
}

inline Tensor fill_image(const Tensor& image, FillMode fill, std::size_t patch_size) {
  if (fill == FillMode::black) return Tensor(image.shape, 0.0f);
  return gaussian_blur(image, patch_size);
}

/// Patch indices by decreasing saliency; equal scores keep the lower index first.
inline std::vector<std::size_t> perturbation_order(const SaliencyMap& saliency) {
  std::vector<std::size_t> order(saliency.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return saliency.scores.data[a] > saliency.scores.data[b]; });
  return order;
}

/// Copies patch `p` of `src` into `dst` (both C x H x W).
inline void copy_patch(const Tensor& src, Tensor& dst, std::size_t p, const ModelConfig& cfg) {
  const std::size_t g = cfg.grid(), ps = cfg.patch_size, s = cfg.image_size;
  const std::size_t py = (p / g) * ps, px = (p % g) * ps;
  for (std::size_t c = 0; c < cfg.channels; ++c)
    for (std::size_t y = 0; y < ps; ++y)
      for (std::size_t x = 0; x < ps; ++x) {
        const std::size_t i = (c * s + py + y) * s + px + x;
        dst.data[i] = src.data[i];
      }
}

/// Inputs for one curve: entry i has the top round(f_i * N) patches deleted
/// (replaced by the fill) or inserted (restored into the fully filled image).
inline std::vector<Tensor> perturbation_inputs(const Tensor& image, const SaliencyMap& saliency, CurveMode mode,
                                               const Tensor& filled, const ModelConfig& cfg,
                                               std::span<const double> fractions) {
  const std::size_t n = cfg.num_patches();
  validate_saliency(saliency, n);
  const auto order = perturbation_order(saliency);
  const Tensor& base = mode == CurveMode::deletion ? image : filled;
  const Tensor& donor = mode == CurveMode::deletion ? filled : image;
  std::vector<Tensor> out;
  out.reserve(fractions.size());
  for (double f : fractions) {
    const auto k = static_cast<std::size_t>(std::llround(f * static_cast<double>(n)));
    Tensor x = base;
    for (std::size_t i = 0; i < std::min(k, n); ++i) copy_patch(donor, x, order[i], cfg);
    out.push_back(std::move(x));
  }
  return out;
}

/// Predictor softmax probabilities for a list of images, batched. Results do
/// not depend on how images are grouped into batches.
inline std::vector<std::vector<double>> predictor_probabilities(const IAViT& model, std::span<const Tensor> images,
                                                                std::size_t batch = 128) {
  std::vector<std::vector<double>> out;
  out.reserve(images.size());
  const std::size_t c = model.config().classes;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t n = std::min(batch, images.size() - start);
    Tape tape(false);
    auto chunk = images.subspan(start, n);
    auto fwd = forward_full(tape, model, constant(make_batch<float>(chunk, model.config())));
    auto probs = softmax(tape, fwd.pred_logits);
    for (std::size_t b = 0; b < n; ++b)
      out.emplace_back(probs->data.begin() + static_cast<std::ptrdiff_t>(b * c),
                       probs->data.begin() + static_cast<std::ptrdiff_t>((b + 1) * c));
  }
  return out;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Deletion or insertion curve for one image. The score at each fraction is
/// the predictor probability of the class predicted on the clean image.
inline EvalCurve perturbation_curve(const IAViT& model, const Tensor& image, const SaliencyMap& saliency,
                                    CurveMode mode, FillMode fill, std::size_t steps = kDefaultSteps) {
  const auto& cfg = model.config();
  EvalCurve curve;
  curve.fractions = fraction_grid(steps);
  curve.fill = fill;
  curve.mode = mode;
  const Tensor filled = fill_image(image, fill, cfg.patch_size);
  auto inputs = perturbation_inputs(image, saliency, mode, filled, cfg, curve.fractions);
  inputs.push_back(image);
  const auto probs = predictor_probabilities(model, inputs);
  const std::size_t cls = argmax(probs.back());
  for (std::size_t i = 0; i < curve.fractions.size(); ++i) curve.scores.push_back(probs[i][cls]);
  curve.auc = trapezoid(curve.fractions, curve.scores);
  return curve;
}

/// All four curves (deletion/insertion x black/blur) for a set of images in
/// one batched sweep. Result index: [image][fill * 2 + mode].
inline std::vector<std::array<EvalCurve, 4>> perturbation_curves(const IAViT& model, std::span<const Tensor> images,
                                                                 std::span<const SaliencyMap> saliency,
                                                                 std::size_t steps = kDefaultSteps) {
  if (images.size() != saliency.size()) throw DimensionError("perturbation_curves: images/saliency length mismatch");
  const auto& cfg = model.config();
  const auto grid = fraction_grid(steps);
  std::vector<Tensor> inputs;
  inputs.reserve(images.size() * (4 * steps + 1));
  for (std::size_t i = 0; i < images.size(); ++i) {
    inputs.push_back(images[i]);
    for (FillMode fill : {FillMode::black, FillMode::blur}) {
      const Tensor filled = fill_image(images[i], fill, cfg.patch_size);
      for (CurveMode mode : {CurveMode::deletion, CurveMode::insertion}) {
        auto part = perturbation_inputs(images[i], saliency[i], mode, filled, cfg, grid);
        for (auto& x : part) inputs.push_back(std::move(x));
      }
    }
  }
  const auto probs = predictor_probabilities(model, inputs);
  std::vector<std::array<EvalCurve, 4>> out(images.size());
  std::size_t r = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t cls = argmax(probs[r++]);
    std::size_t slot = 0;
    for (FillMode fill : {FillMode::black, FillMode::blur})
      for (CurveMode mode : {CurveMode::deletion, CurveMode::insertion}) {
        EvalCurve& c = out[i][slot++];
        c.fractions = grid;
        c.fill = fill;
        c.mode = mode;
        for (std::size_t k = 0; k < steps; ++k) c.scores.push_back(probs[r++][cls]);
        c.auc = trapezoid(c.fractions, c.scores);
      }
  }
  return out;
}

inline constexpr std::size_t curve_slot(FillMode fill, CurveMode mode) {
  return (fill == FillMode::black ? 0 : 2) + (mode == CurveMode::deletion ? 0 : 1);
}

/// Mean deletion AUC (D) and insertion AUC (I), averaged over both fills.
struct DeletionInsertion {
  double deletion = 0.0;
  double insertion = 0.0;
  double difference() const { return insertion - deletion; }
};

inline DeletionInsertion averaged_scores(const std::vector<std::array<EvalCurve, 4>>& curves) {
  if (curves.empty()) throw std::invalid_argument("averaged_scores: empty dataset");
  DeletionInsertion out;
  for (const auto& c : curves) {
    out.deletion += 0.5 * (c[curve_slot(FillMode::black, CurveMode::deletion)].auc +
                           c[curve_slot(FillMode::blur, CurveMode::deletion)].auc);
    out.insertion += 0.5 * (c[curve_slot(FillMode::black, CurveMode::insertion)].auc +
                            c[curve_slot(FillMode::blur, CurveMode::insertion)].auc);
  }
  out.deletion /= static_cast<double>(curves.size());
  out.insertion /= static_cast<double>(curves.size());
  return out;
}

inline DeletionInsertion averaged_scores(const IAViT& model, std::span<const Tensor> images,
                                         std::span<const SaliencyMap> saliency) {
  if (images.empty()) throw std::invalid_argument("averaged_scores: empty dataset");
  return averaged_scores(perturbation_curves(model, images, saliency));
}

struct DifferenceCurve {
  std::vector<double> fractions;
  std::vector<double> values;
  double auc = 0.0;
};

/// Pointwise I(f) - D(f) with its trapezoidal area.
inline DifferenceCurve insertion_minus_deletion(const EvalCurve& insertion, const EvalCurve& deletion) {
  if (insertion.fractions != deletion.fractions) throw DimensionError("insertion_minus_deletion: grids differ");
  DifferenceCurve out;
  out.fractions = insertion.fractions;
  for (std::size_t i = 0; i < out.fractions.size(); ++i) out.values.push_back(insertion.scores[i] - deletion.scores[i]);
  out.auc = trapezoid(out.fractions, out.values);
  return out;
}

}  // namespace iavit
