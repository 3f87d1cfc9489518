// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iavit/data_io/dataset.hpp"
#include "iavit/model/iavit.hpp"
#include "iavit/objectives/losses.hpp"

namespace iavit {

/// Training aborted because a non-finite value appeared.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimizerConfig {
  double lr = 3e-4;
  std::size_t batch = 32;
  std::size_t epochs = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr >= 0.0 && std::isfinite(lr))) throw ConfigError("optimizer.lr", "must be finite and non-negative");
    if (batch == 0) throw ConfigError("optimizer.batch", "must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optimizer.beta1", "must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer.beta2", "must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("optimizer.eps", "must be positive");
  }
};

/// Adam with bias correction. State is keyed by parameter order.
class Adam {
 public:
  Adam(const IAViT& model, const OptimizerConfig& cfg) : cfg_(cfg) {
    model.for_each_parameter([&](const std::string&, const Var& v) {
      m_.emplace_back(v->size(), 0.0f);
      v_.emplace_back(v->size(), 0.0f);
    });
  }

  std::size_t steps() const { return t_; }

  void step(const IAViT& model) {
    ++t_;
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const float step_size = static_cast<float>(cfg_.lr / c1);
    const float inv_c2 = static_cast<float>(1.0 / c2);
    const float eps = static_cast<float>(cfg_.eps);
    std::size_t k = 0;
    model.for_each_parameter([&](const std::string&, const Var& p) {
      auto& m = m_[k];
      auto& v = v_[k];
      ++k;
      if (!p->requires_grad || !p->has_grad()) return;
      for (std::size_t i = 0; i < p->size(); ++i) {
        const float g = p->grad[i];
        m[i] = b1 * m[i] + (1.0f - b1) * g;
        v[i] = b2 * v[i] + (1.0f - b2) * g * g;
        p->data[i] -= step_size * (m[i] / (std::sqrt(v[i] * inv_c2) + eps));
      }
    });
  }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  std::size_t t_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double l_ce = 0, l_kd = 0, l_reg = 0, l_total = 0;
  double acc_pred = 0, acc_int = 0;  ///< on the training minibatches as they were seen
};

inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t c = logits.shape[1];
  const float* p = logits.data.data() + row * c;
  return static_cast<std::size_t>(std::max_element(p, p + c) - p);
}

/// Class decisions of both heads for a whole dataset (inference only).
struct Predictions {
  std::vector<int> pred;
  std::vector<int> interp;
};

inline Predictions predict_dataset(const IAViT& model, const Dataset& data, std::size_t batch = 128) {
  Predictions out;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t n = std::min(batch, data.size() - start);
    Tape tape(false);
    auto fwd = forward_images(tape, model, std::span<const Tensor>(data.images.data() + start, n));
    for (std::size_t i = 0; i < n; ++i) {
      out.pred.push_back(static_cast<int>(argmax_row(*fwd.pred_logits, i)));
      out.interp.push_back(static_cast<int>(argmax_row(*fwd.int_logits, i)));
    }
  }
  return out;
}

struct Accuracy {
  double pred = 0;
  double interp = 0;
};

inline Accuracy evaluate_accuracy(const IAViT& model, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("evaluate_accuracy: empty dataset");
  const auto p = predict_dataset(model, data);
  std::size_t hp = 0, hi = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    hp += p.pred[i] == data.labels[i];
    hi += p.interp[i] == data.labels[i];
  }
  const double n = static_cast<double>(data.size());
  return {hp / n, hi / n};
}

inline void check_finite_grad(const Tensor& t, const std::string& name) {
  bool bad = false;
  for (float g : t.grad) bad |= !(g - g == 0.0f);
  if (bad) throw NumericError("gradient of " + name + " is not finite");
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Minibatch Adam on the composite objective. Minibatch order comes from a
/// generator seeded with `seed`; with the model's own init seed this makes a
/// run fully deterministic. The trailing partial batch is kept.
inline std::vector<EpochLog> train(IAViT& model, const Dataset& data, const OptimizerConfig& opt,
                                   const LossConfig& loss, std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  opt.validate();
  loss.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (data.classes != model.config().classes) {
    throw ConfigError("model.classes", "model has " + std::to_string(model.config().classes) +
                                           " classes, dataset has " + std::to_string(data.classes));
  }
  model.set_trainable(true);
  Adam adam(model, opt);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochLog> logs;
  std::vector<Tensor> batch_images;
  std::vector<int> batch_labels;

  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    std::size_t batches = 0, hits_pred = 0, hits_int = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch) {
      const std::size_t n = std::min(opt.batch, order.size() - start);
      batch_images.clear();
      batch_labels.clear();
      for (std::size_t i = 0; i < n; ++i) {
        batch_images.push_back(data.images[order[start + i]]);
        batch_labels.push_back(data.labels[order[start + i]]);
      }
      try {
        Tape tape;
        auto fwd = forward_images(tape, model, std::span<const Tensor>(batch_images));
        auto terms = total_loss(tape, fwd, batch_labels, loss);
        model.zero_grad();
        tape.backward(terms.total);
        model.for_each_parameter([&](const std::string& name, const Var& v) { check_finite_grad(*v, name); });
        adam.step(model);
        log.l_ce += terms.value(terms.ce);
        log.l_kd += terms.value(terms.kd);
        log.l_reg += terms.value(terms.reg);
        log.l_total += terms.value(terms.total);
        for (std::size_t i = 0; i < n; ++i) {
          hits_pred += static_cast<int>(argmax_row(*fwd.pred_logits, i)) == batch_labels[i];
          hits_int += static_cast<int>(argmax_row(*fwd.int_logits, i)) == batch_labels[i];
        }
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batches) + " (lr " + std::to_string(opt.lr) + "): " + e.what());
      }
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    log.l_ce /= nb;
    log.l_kd /= nb;
    log.l_reg /= nb;
    log.l_total /= nb;
    log.acc_pred = static_cast<double>(hits_pred) / static_cast<double>(data.size());
    log.acc_int = static_cast<double>(hits_int) / static_cast<double>(data.size());
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  model.zero_grad();
  return logs;
}

}  // namespace iavit
