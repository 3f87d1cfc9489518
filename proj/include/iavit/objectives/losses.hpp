// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iavit/model/config.hpp"
#include "iavit/model/iavit.hpp"
#include "iavit/numerics/ops.hpp"

namespace iavit {

/// Kernel bandwidth: a fixed value, or the median pairwise squared distance of
/// the pooled minibatch summaries (computed outside the graph), never below
/// `floor`. Without the floor, near-uniform attention early in training gives
/// a vanishing bandwidth and a regularizer gradient that swamps the other terms.
struct SigmaPolicy {
  enum class Kind { fixed, median };
  Kind kind = Kind::median;
  double value = 1.0;
  double floor = 0.05;

  static SigmaPolicy fixed(double v) { return {Kind::fixed, v, 0.0}; }
  static SigmaPolicy median(double floor = 0.05) { return {Kind::median, 1.0, floor}; }
  bool operator==(const SigmaPolicy&) const = default;
};

struct LossConfig {
  double beta = 0.5;
  double tau = 2.0;
  SigmaPolicy sigma;
  bool use_kd = true;
  bool use_reg = true;

  void validate() const {
    if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("loss.beta", "must lie in (0, 1), got " + std::to_string(beta));
    if (!(tau > 0.0)) throw ConfigError("loss.tau", "must be positive, got " + std::to_string(tau));
    if (sigma.kind == SigmaPolicy::Kind::fixed && !(sigma.value > 0.0)) {
      throw ConfigError("loss.sigma", "fixed bandwidth must be positive, got " + std::to_string(sigma.value));
    }
    if (sigma.kind == SigmaPolicy::Kind::median && !(sigma.floor >= 0.0)) {
      throw ConfigError("loss.sigma_floor", "must be non-negative, got " + std::to_string(sigma.floor));
    }
  }
  bool operator==(const LossConfig&) const = default;
};

/// Probabilities are clamped into [kProbFloor, 1] before any logarithm.
inline constexpr double kProbFloor = 1e-12;

/// Mean negative log-likelihood of softmax(logits) at the given labels.
template <typename Real>
BasicVar<Real> cross_entropy(BasicTape<Real>& tape, const BasicVar<Real>& logits, std::span<const int> labels) {
  if (logits->rank() != 2 || logits->shape[0] != labels.size() || labels.empty()) {
    throw DimensionError("cross_entropy: logits " + to_string(logits->shape) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const int classes = static_cast<int>(logits->shape[1]);
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
  }
  auto log_p = log_clamped(tape, softmax(tape, logits), Real(kProbFloor));
  return scale(tape, mean(tape, gather_last(tape, log_p, labels)), Real(-1));
}

/// Temperature-softened distillation: tau^2 * mean_b H(q_tau, p_tau), where
/// q comes from the predictor and is held constant.
template <typename Real>
BasicVar<Real> kd_loss(BasicTape<Real>& tape, const BasicVar<Real>& pred_logits, const BasicVar<Real>& int_logits,
                       double tau) {
  if (pred_logits->shape != int_logits->shape || pred_logits->rank() != 2) {
    throw DimensionError("kd_loss: logits shapes " + to_string(pred_logits->shape) + " and " +
                         to_string(int_logits->shape) + " must match and be [B, C]");
  }
  if (!(tau > 0.0)) throw std::invalid_argument("kd_loss: tau must be positive");
  const Real inv_tau = Real(1.0 / tau);
  auto target = stop_gradient(tape, softmax(tape, scale(tape, pred_logits, inv_tau)));
  auto log_p = log_clamped(tape, softmax(tape, scale(tape, int_logits, inv_tau)), Real(kProbFloor));
  const Real factor = Real(-tau * tau / static_cast<double>(pred_logits->shape[0]));
  return scale(tape, sum(tape, mul(tape, target, log_p)), factor);
}

template <typename Real>
struct AttentionSummary {
  BasicVar<Real> alpha_e;  ///< [B, N], extractor: last-block CLS row, head mean
  BasicVar<Real> alpha_i;  ///< [B, N], interpreter: column mean of A
};

/// Reduces a batch trace to per-sample attention distributions over patches.
template <typename Real>
AttentionSummary<Real> summarize_attention(BasicTape<Real>& tape, const BatchTrace<Real>& trace) {
  if (trace.msa.empty() || !trace.ssa) throw std::invalid_argument("summarize_attention: incomplete trace");
  const auto& last = trace.msa.back();  // [B, H, T, T]
  const std::size_t batch = last->shape[0], tokens = last->shape[2];
  auto cls_row = slice(tape, slice(tape, last, 2, 0, 1), 3, 1, tokens);  // [B, H, 1, N]
  auto head_mean = reshape(tape, mean_axis(tape, cls_row, 1), Shape{batch, tokens - 1});
  AttentionSummary<Real> out;
  out.alpha_e = normalize_last(tape, head_mean);
  out.alpha_i = normalize_last(tape, mean_axis(tape, trace.ssa, 1));
  return out;
}

/// Detached per-image summaries.
struct AttentionSummaryValues {
  Tensor alpha_e;
  Tensor alpha_i;
};

inline AttentionSummaryValues summarize_attention(const AttentionTrace& trace) {
  if (trace.msa.empty()) throw std::invalid_argument("summarize_attention: trace has no MSA blocks");
  auto lift = [](const Tensor& t) {
    Tensor batched = t;
    batched.shape.insert(batched.shape.begin(), 1);
    return constant(std::move(batched));
  };
  BatchTrace<float> batch;
  batch.msa.push_back(lift(trace.msa.back()));
  batch.ssa = lift(trace.ssa);
  Tape tape(false);
  auto s = summarize_attention(tape, batch);
  const Shape n{s.alpha_i->shape[1]};
  return {Tensor(n, s.alpha_e->data), Tensor(n, s.alpha_i->data)};
}

/// exp(-||x - y||^2 / sigma)
template <typename Real>
double gaussian_kernel(std::span<const Real> x, std::span<const Real> y, double sigma) {
  if (x.size() != y.size()) throw DimensionError("gaussian_kernel: length mismatch");
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    d2 += diff * diff;
  }
  return std::exp(-d2 / sigma);
}

/// Median of pairwise squared distances among the rows of x and y pooled
/// together; falls back to 1 when every point coincides.
template <typename Real>
double median_bandwidth(const BasicTensor<Real>& x, const BasicTensor<Real>& y) {
  const std::size_t dim = x.shape.back();
  std::vector<const Real*> rows;
  for (std::size_t i = 0; i < x.size() / dim; ++i) rows.push_back(x.data.data() + i * dim);
  for (std::size_t i = 0; i < y.size() / dim; ++i) rows.push_back(y.data.data() + i * dim);
  std::vector<double> d2;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double diff = static_cast<double>(rows[i][k]) - static_cast<double>(rows[j][k]);
        acc += diff * diff;
      }
      d2.push_back(acc);
    }
  if (d2.empty()) return 1.0;
  const std::size_t mid = d2.size() / 2;
  std::nth_element(d2.begin(), d2.begin() + mid, d2.end());
  double median = d2[mid];
  if (d2.size() % 2 == 0) median = 0.5 * (median + *std::max_element(d2.begin(), d2.begin() + mid));
  return median > 0.0 ? median : 1.0;
}

/// Biased (V-statistic) MMD between two equally sized samples, rows of
/// x and y. The radicand is clamped at zero. The cross term averages both
/// orientations so swapping the arguments gives a bit-identical result.
template <typename Real>
BasicVar<Real> mmd(BasicTape<Real>& tape, const BasicVar<Real>& x, const BasicVar<Real>& y, double sigma) {
  if (x->rank() != 2 || x->shape != y->shape) {
    throw DimensionError("mmd: samples must be equally sized [n, N] tensors, got " + to_string(x->shape) + " and " +
                         to_string(y->shape));
  }
  if (!(sigma > 0.0)) throw std::invalid_argument("mmd: sigma must be positive");
  const Real neg_inv_sigma = Real(-1.0 / sigma);
  auto kernel_mean = [&](const BasicVar<Real>& a, const BasicVar<Real>& b) {
    return mean(tape, exp(tape, scale(tape, pairwise_sqdist(tape, a, b), neg_inv_sigma)));
  };
  auto self_terms = add(tape, kernel_mean(x, x), kernel_mean(y, y));
  auto cross = add(tape, kernel_mean(x, y), kernel_mean(y, x));  // 2 * mean K(x, y)
  return sqrt_clamped(tape, sub(tape, self_terms, cross));
}

/// Convenience overload on lists of vectors.
inline double mmd(std::span<const Tensor> samples_i, std::span<const Tensor> samples_e, double sigma) {
  if (samples_i.empty() || samples_e.empty()) throw std::invalid_argument("mmd: empty sample");
  if (samples_i.size() != samples_e.size()) throw DimensionError("mmd: sample sizes differ");
  auto stack = [](std::span<const Tensor> s) {
    const std::size_t dim = s.front().size();
    Tensor out(Shape{s.size(), dim});
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i].size() != dim) throw DimensionError("mmd: ragged sample vectors");
      std::copy(s[i].data.begin(), s[i].data.end(), out.data.begin() + i * dim);
    }
    return constant(std::move(out));
  };
  Tape tape(false);
  return mmd(tape, stack(samples_i), stack(samples_e), sigma)->data[0];
}

template <typename Real>
double resolve_sigma(const SigmaPolicy& policy, const AttentionSummary<Real>& s) {
  if (policy.kind == SigmaPolicy::Kind::fixed) return policy.value;
  return std::max(policy.floor, median_bandwidth(*s.alpha_i, *s.alpha_e));
}

/// MMD between the interpreter and extractor summaries of one minibatch.
template <typename Real>
BasicVar<Real> attention_regularizer(BasicTape<Real>& tape, const BatchTrace<Real>& trace, const SigmaPolicy& policy) {
  auto s = summarize_attention(tape, trace);
  return mmd(tape, s.alpha_i, s.alpha_e, resolve_sigma(policy, s));
}

/// beta * ce + (1 - beta) * (kd + reg), for plain numbers.
template <typename T>
T combine_loss_terms(T ce, T kd, T reg, double beta) {
  return T(beta) * ce + T(1.0 - beta) * (kd + reg);
}

template <typename Real>
struct LossTerms {
  BasicVar<Real> total;
  BasicVar<Real> ce;
  BasicVar<Real> kd;   ///< null when disabled
  BasicVar<Real> reg;  ///< null when disabled

  double value(const BasicVar<Real>& v) const { return v ? static_cast<double>(v->data[0]) : 0.0; }
};

/// Composite objective. Disabled terms are not evaluated and contribute nothing.
template <typename Real>
LossTerms<Real> total_loss(BasicTape<Real>& tape, const BasicVar<Real>& pred_logits, const BasicVar<Real>& int_logits,
                           const BatchTrace<Real>& trace, std::span<const int> labels, const LossConfig& cfg) {
  cfg.validate();
  LossTerms<Real> out;
  out.ce = cross_entropy(tape, pred_logits, labels);
  out.total = scale(tape, out.ce, Real(cfg.beta));
  BasicVar<Real> aux;
  if (cfg.use_kd) {
    out.kd = kd_loss(tape, pred_logits, int_logits, cfg.tau);
    aux = out.kd;
  }
  if (cfg.use_reg) {
    out.reg = attention_regularizer(tape, trace, cfg.sigma);
    aux = aux ? add(tape, aux, out.reg) : out.reg;
  }
  if (aux) out.total = add(tape, out.total, scale(tape, aux, Real(1.0 - cfg.beta)));
  return out;
}

template <typename Real>
LossTerms<Real> total_loss(BasicTape<Real>& tape, const ForwardResult<Real>& fwd, std::span<const int> labels,
                           const LossConfig& cfg) {
  return total_loss(tape, fwd.pred_logits, fwd.int_logits, fwd.trace, labels, cfg);
}

}  // namespace iavit
