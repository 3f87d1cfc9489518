// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iavit/model/config.hpp"
#include "iavit/numerics/ops.hpp"

namespace iavit {

/// Pre-norm transformer block: LN -> MSA -> residual -> LN -> MLP -> residual.
/// Head h uses columns [h*dh, (h+1)*dh) of wq/wk/wv.
template <typename Real>
struct MsaBlock {
  using VarT = BasicVar<Real>;
  VarT norm1_g, norm1_b;
  VarT wq, bq, wk, bk, wv, bv;
  VarT wo, bo;
  VarT norm2_g, norm2_b;
  VarT fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Parameters of the three-part network: feature extractor (patch embedding
/// and MSA blocks), predictor (linear head on the CLS row) and interpreter
/// (single-head self-attention plus a per-patch head).
///
/// Copies are deep; two models never share parameter storage.
template <typename Real>
class BasicIAViT {
 public:
  using VarT = BasicVar<Real>;

  BasicIAViT(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    allocate();
    initialize(seed);
  }

  BasicIAViT(const BasicIAViT& other) : config_(other.config_) {
    allocate();
    copy_from(other);
  }

  BasicIAViT& operator=(const BasicIAViT& other) {
    if (this != &other) {
      config_ = other.config_;
      allocate();
      copy_from(other);
    }
    return *this;
  }

  BasicIAViT(BasicIAViT&&) noexcept = default;
  BasicIAViT& operator=(BasicIAViT&&) noexcept = default;

  const ModelConfig& config() const { return config_; }

  /// Visits every parameter as (name, Var) in a fixed order.
  template <typename Fn>
  void for_each_parameter(Fn&& fn) const {
    fn("patch_embed.weight", patch_w);
    fn("patch_embed.bias", patch_b);
    fn("cls_token", cls);
    fn("pos_embed", pos);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      fn(p + "norm1.weight", b.norm1_g);
      fn(p + "norm1.bias", b.norm1_b);
      fn(p + "attn.wq", b.wq);
      fn(p + "attn.bq", b.bq);
      fn(p + "attn.wk", b.wk);
      fn(p + "attn.bk", b.bk);
      fn(p + "attn.wv", b.wv);
      fn(p + "attn.bv", b.bv);
      fn(p + "attn.proj.weight", b.wo);
      fn(p + "attn.proj.bias", b.bo);
      fn(p + "norm2.weight", b.norm2_g);
      fn(p + "norm2.bias", b.norm2_b);
      fn(p + "mlp.fc1.weight", b.fc1_w);
      fn(p + "mlp.fc1.bias", b.fc1_b);
      fn(p + "mlp.fc2.weight", b.fc2_w);
      fn(p + "mlp.fc2.bias", b.fc2_b);
    }
    fn("predictor.weight", pred_w);
    fn("predictor.bias", pred_b);
    fn("interpreter.ssa.wq", ssa_wq);
    fn("interpreter.ssa.wk", ssa_wk);
    fn("interpreter.ssa.wv", ssa_wv);
    fn("interpreter.head.fc1.weight", int_w1);
    fn("interpreter.head.fc1.bias", int_b1);
    if (int_w2) {
      fn("interpreter.head.fc2.weight", int_w2);
      fn("interpreter.head.fc2.bias", int_b2);
    }
  }

  std::vector<std::pair<std::string, VarT>> named_parameters() const {
    std::vector<std::pair<std::string, VarT>> out;
    for_each_parameter([&](const std::string& name, const VarT& v) { out.emplace_back(name, v); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_parameter([&](const std::string&, const VarT& v) { n += v->size(); });
    return n;
  }

  void zero_grad() const {
    for_each_parameter([](const std::string&, const VarT& v) { v->zero_grad(); });
  }

  /// Marks every parameter differentiable or frozen.
  void set_trainable(bool trainable) const {
    for_each_parameter([&](const std::string&, const VarT& v) {
      v->requires_grad = trainable;
      v->grad.clear();
    });
  }

  /// Same architecture and values in another element type.
  template <typename Other>
  BasicIAViT<Other> cast() const {
    BasicIAViT<Other> out(config_, 0);
    auto dst = out.named_parameters();
    std::size_t i = 0;
    for_each_parameter([&](const std::string&, const VarT& v) {
      dst[i++].second->data.assign(v->data.begin(), v->data.end());
    });
    return out;
  }

  VarT patch_w, patch_b, cls, pos;
  std::vector<MsaBlock<Real>> blocks;
  VarT pred_w, pred_b;
  VarT ssa_wq, ssa_wk, ssa_wv;
  VarT int_w1, int_b1, int_w2, int_b2;

 private:
  void allocate() {
    const auto& c = config_;
    const std::size_t d = c.embed_dim, hidden = c.embed_dim * c.mlp_ratio;
    auto p = [](Shape s, Real fill = Real(0)) { return parameter(BasicTensor<Real>(std::move(s), fill)); };
    patch_w = p({c.patch_dim(), d});
    patch_b = p({d});
    cls = p({1, d});
    pos = p({c.tokens(), d});
    blocks.clear();
    for (std::size_t i = 0; i < c.depth; ++i) {
      MsaBlock<Real> b;
      b.norm1_g = p({d}, Real(1));
      b.norm1_b = p({d});
      b.wq = p({d, d});
      b.bq = p({d});
      b.wk = p({d, d});
      b.bk = p({d});
      b.wv = p({d, d});
      b.bv = p({d});
      b.wo = p({d, d});
      b.bo = p({d});
      b.norm2_g = p({d}, Real(1));
      b.norm2_b = p({d});
      b.fc1_w = p({d, hidden});
      b.fc1_b = p({hidden});
      b.fc2_w = p({hidden, d});
      b.fc2_b = p({d});
      blocks.push_back(std::move(b));
    }
    pred_w = p({d, c.classes});
    pred_b = p({c.classes});
    ssa_wq = p({d, d});
    ssa_wk = p({d, d});
    ssa_wv = p({d, d});
    if (c.interpreter_hidden == 0) {
      int_w1 = p({d, c.classes});
      int_b1 = p({c.classes});
      int_w2.reset();
      int_b2.reset();
    } else {
      int_w1 = p({d, c.interpreter_hidden});
      int_b1 = p({c.interpreter_hidden});
      int_w2 = p({c.interpreter_hidden, c.classes});
      int_b2 = p({c.classes});
    }
  }

  // Truncated normal (cut at two standard deviations) for weight matrices and
  // positional embeddings; zeros for biases and the CLS token; ones for norm gains.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto fill = [&](const VarT& v) {
      for (auto& x : v->data) {
        double z;
        do z = normal(rng);
        while (std::abs(z) > 2.0);
        x = static_cast<Real>(z * config_.init_std);
      }
    };
    fill(patch_w);
    fill(pos);
    for (auto& b : blocks) {
      for (const auto& w : {b.wq, b.wk, b.wv, b.wo, b.fc1_w, b.fc2_w}) fill(w);
    }
    fill(pred_w);
    fill(ssa_wq);
    fill(ssa_wk);
    fill(ssa_wv);
    fill(int_w1);
    if (int_w2) fill(int_w2);
  }

  void copy_from(const BasicIAViT& other) {
    auto dst = named_parameters();
    std::size_t i = 0;
    other.for_each_parameter([&](const std::string&, const VarT& v) {
      auto& target = *dst[i++].second;
      target.data = v->data;
      target.requires_grad = v->requires_grad;
    });
  }

  ModelConfig config_;
};

using IAViT = BasicIAViT<float>;

/// Per-block MSA maps ([B, H, T, T]) and the interpreter's SSA matrix ([B, N, N])
/// as live graph nodes.
template <typename Real>
struct BatchTrace {
  std::vector<BasicVar<Real>> msa;
  BasicVar<Real> ssa;
};

/// Attention captured for a single image, detached from any graph.
struct AttentionTrace {
  std::vector<Tensor> msa;       ///< per block, H x (N+1) x (N+1)
  Tensor ssa;                    ///< N x N
  std::vector<Tensor> msa_grad;  ///< optional, same shapes as msa
};

/// Pulls sample `b` out of a batched trace (gradients included when present).
template <typename Real>
AttentionTrace sample_trace(const BatchTrace<Real>& trace, std::size_t b) {
  auto take = [b](const BasicTensor<Real>& t, bool grad) {
    Shape shape(t.shape.begin() + 1, t.shape.end());
    const std::size_t n = numel(shape);
    const auto& src = grad ? t.grad : t.data;
    Tensor out(shape);
    for (std::size_t i = 0; i < n; ++i) out.data[i] = static_cast<float>(src[b * n + i]);
    return out;
  };
  AttentionTrace out;
  for (const auto& a : trace.msa) {
    out.msa.push_back(take(*a, false));
    if (a->has_grad()) out.msa_grad.push_back(take(*a, true));
  }
  if (!out.msa_grad.empty() && out.msa_grad.size() != out.msa.size()) out.msa_grad.clear();
  if (trace.ssa) out.ssa = take(*trace.ssa, false);
  return out;
}

/// Splits a C x H x W image into N row-major patches, each flattened as
/// (channel, row, column).
template <typename Real>
BasicTensor<Real> patchify(const BasicTensor<Real>& image, const ModelConfig& cfg) {
  if (image.shape != Shape{cfg.channels, cfg.image_size, cfg.image_size}) {
    throw DimensionError("patchify: image " + to_string(image.shape) + " does not match config " +
                         to_string(Shape{cfg.channels, cfg.image_size, cfg.image_size}));
  }
  const std::size_t g = cfg.grid(), p = cfg.patch_size, s = cfg.image_size;
  BasicTensor<Real> out(Shape{cfg.num_patches(), cfg.patch_dim()});
  std::size_t w = 0;
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            out.data[w++] = image.data[(c * s + gy * p + y) * s + gx * p + x];
  return out;
}

/// Inverse of patchify.
template <typename Real>
BasicTensor<Real> unpatchify(const BasicTensor<Real>& patches, const ModelConfig& cfg) {
  if (patches.shape != Shape{cfg.num_patches(), cfg.patch_dim()}) {
    throw DimensionError("unpatchify: patches " + to_string(patches.shape) + " do not match config");
  }
  const std::size_t g = cfg.grid(), p = cfg.patch_size, s = cfg.image_size;
  BasicTensor<Real> out(Shape{cfg.channels, s, s});
  std::size_t r = 0;
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            out.data[(c * s + gy * p + y) * s + gx * p + x] = patches.data[r++];
  return out;
}

/// Patchifies and stacks images into a [B, N, patch_dim] batch.
template <typename Real, typename Image>
BasicTensor<Real> make_batch(std::span<const Image> images, const ModelConfig& cfg) {
  if (images.empty()) throw DimensionError("make_batch: empty batch");
  BasicTensor<Real> out(Shape{images.size(), cfg.num_patches(), cfg.patch_dim()});
  const std::size_t stride = cfg.num_patches() * cfg.patch_dim();
  for (std::size_t b = 0; b < images.size(); ++b) {
    BasicTensor<Real> img;
    img.shape = images[b].shape;
    img.data.assign(images[b].data.begin(), images[b].data.end());
    auto patches = patchify(img, cfg);
    std::copy(patches.data.begin(), patches.data.end(), out.data.begin() + b * stride);
  }
  return out;
}

template <typename Real>
BasicVar<Real> linear(BasicTape<Real>& tape, const BasicVar<Real>& x, const BasicVar<Real>& w,
                      const BasicVar<Real>& b) {
  return add_broadcast(tape, matmul(tape, x, w), b);
}

template <typename Real>
struct Features {
  BasicVar<Real> z;  ///< [B, N+1, d]; row 0 is the CLS embedding
  BatchTrace<Real> trace;
};

namespace detail {

// [B, T, H*dh] -> [B*H, T, dh]
template <typename Real>
BasicVar<Real> split_heads(BasicTape<Real>& tape, const BasicVar<Real>& x, std::size_t heads) {
  const std::size_t b = x->shape[0], t = x->shape[1], dh = x->shape[2] / heads;
  auto y = swap_axes(tape, reshape(tape, x, Shape{b, t, heads, dh}), 1, 2);
  return reshape(tape, y, Shape{b * heads, t, dh});
}

// [B*H, T, dh] -> [B, T, H*dh]
template <typename Real>
BasicVar<Real> merge_heads(BasicTape<Real>& tape, const BasicVar<Real>& x, std::size_t batch, std::size_t heads) {
  const std::size_t t = x->shape[1], dh = x->shape[2];
  auto y = swap_axes(tape, reshape(tape, x, Shape{batch, heads, t, dh}), 1, 2);
  return reshape(tape, y, Shape{batch, t, heads * dh});
}

template <typename Real>
BasicVar<Real> msa_block(BasicTape<Real>& tape, const MsaBlock<Real>& blk, const BasicVar<Real>& x,
                         std::size_t heads, BasicVar<Real>& attention_out) {
  const std::size_t batch = x->shape[0], t = x->shape[1], d = x->shape[2], dh = d / heads;
  auto h = layer_norm(tape, x, blk.norm1_g, blk.norm1_b);
  auto q = split_heads(tape, linear(tape, h, blk.wq, blk.bq), heads);
  auto k = split_heads(tape, linear(tape, h, blk.wk, blk.bk), heads);
  auto v = split_heads(tape, linear(tape, h, blk.wv, blk.bv), heads);
  auto scores = scale(tape, bmm(tape, q, k, true), Real(1) / std::sqrt(Real(dh)));
  attention_out = reshape(tape, softmax(tape, scores), Shape{batch, heads, t, t});
  auto ctx = bmm(tape, reshape(tape, attention_out, Shape{batch * heads, t, t}), v);
  auto attn = linear(tape, merge_heads(tape, ctx, batch, heads), blk.wo, blk.bo);
  auto x1 = add(tape, x, attn);
  auto h2 = layer_norm(tape, x1, blk.norm2_g, blk.norm2_b);
  auto mlp = linear(tape, gelu(tape, linear(tape, h2, blk.fc1_w, blk.fc1_b)), blk.fc2_w, blk.fc2_b);
  return add(tape, x1, mlp);
}

}  // namespace detail

/// Feature extractor h: patch projection, CLS prepend, positional embedding,
/// then the MSA stack. `patches` is [B, N, patch_dim].
template <typename Real>
Features<Real> extract_features(BasicTape<Real>& tape, const BasicIAViT<Real>& model,
                                const BasicVar<Real>& patches) {
  const auto& cfg = model.config();
  if (patches->rank() != 3 || patches->shape[1] != cfg.num_patches() || patches->shape[2] != cfg.patch_dim()) {
    throw DimensionError("extract_features: patch batch " + to_string(patches->shape) + " does not match config");
  }
  const std::size_t batch = patches->shape[0];
  auto emb = linear(tape, patches, model.patch_w, model.patch_b);
  auto cls = repeat_leading(tape, model.cls, batch);
  auto x = add_broadcast(tape, concat(tape, cls, emb, 1), model.pos);
  Features<Real> out;
  out.trace.msa.resize(cfg.depth);
  for (std::size_t i = 0; i < cfg.depth; ++i) x = detail::msa_block(tape, model.blocks[i], x, cfg.heads, out.trace.msa[i]);
  out.z = x;
  return out;
}

/// Predictor f: raw logits from the CLS embedding ([B, d] or [d]).
template <typename Real>
BasicVar<Real> predict(BasicTape<Real>& tape, const BasicIAViT<Real>& model, const BasicVar<Real>& z0) {
  return linear(tape, z0, model.pred_w, model.pred_b);
}

template <typename Real>
struct Interpretation {
  BasicVar<Real> logits;        ///< [B, C], mean of the per-patch logits
  BasicVar<Real> patch_logits;  ///< [B, N, C]
  BasicVar<Real> attention;     ///< A, [B, N, N]
  BasicVar<Real> values;        ///< V, [B, N, d]
  BasicVar<Real> features;      ///< S = A V, [B, N, d]
};

/// Interpreter g on the patch rows (CLS excluded): single-head attention with
/// scaling 1/sqrt(d), then the head applied to every row of S and averaged.
template <typename Real>
Interpretation<Real> interpret(BasicTape<Real>& tape, const BasicIAViT<Real>& model,
                               const BasicVar<Real>& z_patches) {
  const auto& cfg = model.config();
  if (z_patches->rank() != 3 || z_patches->shape[2] != cfg.embed_dim) {
    throw DimensionError("interpret: patch embeddings " + to_string(z_patches->shape) + " must be [B, N, d]");
  }
  Interpretation<Real> out;
  auto q = matmul(tape, z_patches, model.ssa_wq);
  auto k = matmul(tape, z_patches, model.ssa_wk);
  out.values = matmul(tape, z_patches, model.ssa_wv);
  auto scores = scale(tape, bmm(tape, q, k, true), Real(1) / std::sqrt(Real(cfg.embed_dim)));
  out.attention = softmax(tape, scores);
  out.features = bmm(tape, out.attention, out.values);
  if (model.int_w2) {
    auto hidden = gelu(tape, linear(tape, out.features, model.int_w1, model.int_b1));
    out.patch_logits = linear(tape, hidden, model.int_w2, model.int_b2);
  } else {
    out.patch_logits = linear(tape, out.features, model.int_w1, model.int_b1);
  }
  out.logits = mean_axis(tape, out.patch_logits, 1);
  return out;
}

template <typename Real>
struct ForwardResult {
  BasicVar<Real> pred_logits;  ///< q-hat, [B, C]
  BasicVar<Real> int_logits;   ///< p-hat, [B, C]
  BasicVar<Real> z;
  BatchTrace<Real> trace;
};

/// One shared extractor pass feeding both heads.
template <typename Real>
ForwardResult<Real> forward_full(BasicTape<Real>& tape, const BasicIAViT<Real>& model,
                                 const BasicVar<Real>& patches) {
  const auto& cfg = model.config();
  auto feats = extract_features(tape, model, patches);
  const std::size_t batch = patches->shape[0], t = cfg.tokens();
  auto z0 = reshape(tape, slice(tape, feats.z, 1, 0, 1), Shape{batch, cfg.embed_dim});
  ForwardResult<Real> out;
  out.pred_logits = predict(tape, model, z0);
  auto interp = interpret(tape, model, slice(tape, feats.z, 1, 1, t));
  out.int_logits = interp.logits;
  out.z = feats.z;
  out.trace = std::move(feats.trace);
  out.trace.ssa = interp.attention;
  return out;
}

/// Convenience overload on raw images.
template <typename Real, typename Image>
ForwardResult<Real> forward_images(BasicTape<Real>& tape, const BasicIAViT<Real>& model,
                                   std::span<const Image> images) {
  return forward_full(tape, model, constant(make_batch<Real>(images, model.config())));
}

}  // namespace iavit
