// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "iavit/numerics/tensor.hpp"

namespace iavit {

/// Ordered record of differentiable operations.
///
/// Operations append themselves as they execute, so inputs always precede the
/// operations that consume them. `backward` walks the record in exact reverse
/// order. A tape can be consumed once; call `reset` before reusing it.
///
/// A tape constructed with `recording = false` evaluates operations without
/// keeping anything, which is what inference paths use.
template <typename Real>
class BasicTape {
 public:
  using VarT = BasicVar<Real>;

  explicit BasicTape(bool recording = true) : recording_(recording) {}

  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool consumed() const { return consumed_; }

  void record(std::vector<VarT> inputs, VarT output, std::function<void()> rule) {
    if (!recording_) return;
    if (consumed_) throw std::logic_error("tape: cannot record onto a tape that has already run backward");
    entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(rule)});
  }

  /// Propagates d(loss)/d(x) into the grad slot of every differentiable Var on
  /// the tape. Leaf gradients accumulate; intermediate gradients start at zero.
  void backward(const VarT& loss) {
    if (!loss || loss->size() != 1) {
      throw DimensionError("backward: loss must be a scalar, got " + (loss ? to_string(loss->shape) : "null"));
    }
    if (consumed_) throw std::logic_error("backward: tape already consumed; call reset() before a second backward");
    if (entries_.empty()) throw std::logic_error("backward: tape is empty");
    if (!loss->requires_grad) throw std::logic_error("backward: loss does not depend on any differentiable input");

    for (auto& e : entries_) {
      e.output->grad.assign(e.output->size(), Real(0));
      for (auto& in : e.inputs) {
        if (in->requires_grad) in->ensure_grad();
      }
    }
    loss->ensure_grad();
    loss->grad[0] = Real(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->rule();
    consumed_ = true;
  }

  void reset() {
    entries_.clear();
    consumed_ = false;
  }

 private:
  struct Entry {
    std::vector<VarT> inputs;
    VarT output;
    std::function<void()> rule;
  };

  std::vector<Entry> entries_;
  bool recording_;
  bool consumed_ = false;
};

using Tape = BasicTape<float>;

}  // namespace iavit
