// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iavit/explainers/saliency.hpp"
#include "iavit/model/iavit.hpp"
#include "iavit/objectives/losses.hpp"

namespace iavit {

enum class Method { rawatt, rollout, attgrads, atts, random };

class UnknownMethodError : public std::invalid_argument {
 public:
  explicit UnknownMethodError(const std::string& name)
      : std::invalid_argument("unknown explanation method '" + name + "' (known: rawatt, rollout, attgrads, atts, random)"),
        name_(name) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

inline std::string to_string(Method m) {
  switch (m) {
    case Method::rawatt: return "rawatt";
    case Method::rollout: return "rollout";
    case Method::attgrads: return "attgrads";
    case Method::atts: return "atts";
    case Method::random: return "random";
  }
  return "?";
}

inline Method parse_method(const std::string& name) {
  for (Method m : {Method::rawatt, Method::rollout, Method::attgrads, Method::atts, Method::random}) {
    if (to_string(m) == name) return m;
  }
  throw UnknownMethodError(name);
}

/// Splits "a,b,c" and parses each entry; the first unknown name is reported verbatim.
inline std::vector<Method> parse_methods(const std::string& csv) {
  std::vector<Method> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const Method m = parse_method(item);
    if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
  }
  if (out.empty()) throw UnknownMethodError(csv);
  return out;
}

namespace detail {

// Head mean of one H x T x T block, in double.
inline std::vector<double> head_mean(const Tensor& a) {
  if (a.rank() != 3 || a.shape[1] != a.shape[2]) throw DimensionError("attention block must be H x T x T, got " + to_string(a.shape));
  const std::size_t h = a.shape[0], tt = a.shape[1] * a.shape[2];
  std::vector<double> out(tt, 0.0);
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t i = 0; i < tt; ++i) out[i] += a.data[k * tt + i];
  for (auto& v : out) v /= static_cast<double>(h);
  return out;
}

inline std::vector<double> cls_patch_row(const std::vector<double>& m, std::size_t t) {
  return std::vector<double>(m.begin() + 1, m.begin() + static_cast<std::ptrdiff_t>(t));
}

}  // namespace detail

/// First-block CLS attention over patches, head mean.
inline SaliencyMap raw_attention(const AttentionTrace& trace) {
  if (trace.msa.empty()) throw std::invalid_argument("raw_attention: trace has no MSA blocks");
  const std::size_t t = trace.msa.front().shape[1];
  return make_saliency(detail::cls_patch_row(detail::head_mean(trace.msa.front()), t), "rawatt");
}

/// Product of the residual-aware block maps normalize_rows((A + I) / 2),
/// last block leftmost; CLS row restricted to patch columns.
inline SaliencyMap rollout(const AttentionTrace& trace) {
  if (trace.msa.empty()) throw std::invalid_argument("rollout: trace has no MSA blocks");
  const std::size_t t = trace.msa.front().shape[1];
  std::vector<double> r;
  for (const auto& block : trace.msa) {
    if (block.shape[1] != t) throw DimensionError("rollout: blocks disagree on token count");
    auto a = detail::head_mean(block);
    for (std::size_t i = 0; i < t; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        a[i * t + j] = 0.5 * (a[i * t + j] + (i == j ? 1.0 : 0.0));
        row += a[i * t + j];
      }
      for (std::size_t j = 0; j < t; ++j) a[i * t + j] /= row;
    }
    if (r.empty()) {
      r = std::move(a);
      continue;
    }
    std::vector<double> next(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t k = 0; k < t; ++k)
        for (std::size_t j = 0; j < t; ++j) next[i * t + j] += a[i * t + k] * r[k * t + j];
    r = std::move(next);
  }
  return make_saliency(detail::cls_patch_row(r, t), "rollout");
}

/// Last block: positive part of head-mean(attention * d logit / d attention), CLS row.
inline SaliencyMap att_grads(const AttentionTrace& trace) {
  if (trace.msa.empty() || trace.msa_grad.size() != trace.msa.size()) {
    throw std::invalid_argument("att_grads: trace carries no attention gradients");
  }
  const Tensor& a = trace.msa.back();
  const Tensor& g = trace.msa_grad.back();
  const std::size_t h = a.shape[0], t = a.shape[1];
  std::vector<double> raw(t - 1, 0.0);
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t j = 1; j < t; ++j) {
      const std::size_t idx = (k * t + 0) * t + j;
      raw[j - 1] += static_cast<double>(a.data[idx]) * static_cast<double>(g.data[idx]);
    }
  for (auto& v : raw) v = std::max(0.0, v / static_cast<double>(h));
  return make_saliency(raw, "attgrads");
}

/// Column mean of the interpreter's attention: the same statistic the
/// regularizer aligns, taken from the same code path.
inline SaliencyMap interpreter_atts(const AttentionTrace& trace) {
  if (trace.ssa.data.empty()) throw std::invalid_argument("interpreter_atts: trace has no SSA matrix");
  const auto alpha = summarize_attention(trace).alpha_i;
  SaliencyMap m;
  m.method = "atts";
  m.scores = alpha;
  double total = 0.0;
  for (float v : alpha.data) total += v;
  if (!(total > 0.0)) {
    std::vector<double> zeros(alpha.size(), 0.0);
    return make_saliency(zeros, "atts");
  }
  return m;
}

/// Baseline: i.i.d. uniform scores, renormalized.
inline SaliencyMap random_saliency(std::size_t n_patches, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> raw(n_patches);
  for (auto& v : raw) v = u(rng);
  return make_saliency(raw, "random");
}

/// Forward pass collecting per-image traces. With `with_gradients`, also
/// backpropagates each image's predicted-class predictor logit (or the class
/// in `targets` when given) into every MSA attention tensor. The model itself
/// is never written to; gradients go through a frozen copy.
inline std::vector<AttentionTrace> capture_traces(const IAViT& model, std::span<const Tensor> images,
                                                  bool with_gradients,
                                                  std::optional<std::span<const int>> targets = std::nullopt,
                                                  std::size_t batch = 32) {
  std::vector<AttentionTrace> out;
  out.reserve(images.size());
  std::optional<IAViT> frozen;
  if (with_gradients) {
    frozen.emplace(model);
    frozen->set_trainable(false);
  }
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t n = std::min(batch, images.size() - start);
    auto chunk = images.subspan(start, n);
    if (!with_gradients) {
      Tape tape(false);
      auto fwd = forward_images(tape, model, chunk);
      for (std::size_t b = 0; b < n; ++b) out.push_back(sample_trace(fwd.trace, b));
      continue;
    }
    Tape tape;
    auto input = parameter(make_batch<float>(chunk, model.config()));
    auto fwd = forward_full(tape, *frozen, input);
    std::vector<int> cls(n);
    const std::size_t c = model.config().classes;
    for (std::size_t b = 0; b < n; ++b) {
      if (targets) {
        const int k = (*targets)[start + b];
        if (k < 0 || static_cast<std::size_t>(k) >= c) {
          throw std::out_of_range("att_grads: target class " + std::to_string(k) + " outside [0, " +
                                  std::to_string(c) + ")");
        }
        cls[b] = k;
      } else {
        const float* row = fwd.pred_logits->data.data() + b * c;
        cls[b] = static_cast<int>(std::max_element(row, row + c) - row);
      }
    }
    // Images are independent, so the gradient of the summed logits is the
    // per-image gradient in each slice.
    tape.backward(sum(tape, gather_last(tape, fwd.pred_logits, cls)));
    for (std::size_t b = 0; b < n; ++b) out.push_back(sample_trace(fwd.trace, b));
  }
  return out;
}

/// Gradient-weighted attention for one image and target class.
inline SaliencyMap att_grads(const IAViT& model, const Tensor& image, int target_class) {
  const int targets[1] = {target_class};
  auto traces = capture_traces(model, std::span<const Tensor>(&image, 1), true, std::span<const int>(targets));
  return att_grads(traces.front());
}

/// Saliency maps for a batch of images. The random explainer draws from a
/// generator seeded with `seed`, one map per image in order.
inline std::vector<SaliencyMap> explain(const IAViT& model, std::span<const Tensor> images, Method method,
                                        std::uint64_t seed = 0) {
  std::vector<SaliencyMap> out;
  out.reserve(images.size());
  if (method == Method::random) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < images.size(); ++i) out.push_back(random_saliency(model.config().num_patches(), rng));
    return out;
  }
  const auto traces = capture_traces(model, images, method == Method::attgrads);
  for (const auto& t : traces) {
    switch (method) {
      case Method::rawatt: out.push_back(raw_attention(t)); break;
      case Method::rollout: out.push_back(rollout(t)); break;
      case Method::attgrads: out.push_back(att_grads(t)); break;
      case Method::atts: out.push_back(interpreter_atts(t)); break;
      case Method::random: break;
    }
  }
  return out;
}

}  // namespace iavit
