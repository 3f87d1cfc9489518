// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iavit/evaluation/perturbation.hpp"
#include "iavit/explainers/saliency.hpp"
#include "json.hpp"

namespace iavit {

/// Performance drop rate in percent: 100 * (1 - acc_model / acc_reference).
inline double pdr(double acc_reference, double acc_model) {
  if (!(acc_reference > 0.0)) throw std::invalid_argument("pdr: reference accuracy must be positive");
  return 100.0 * (1.0 - acc_model / acc_reference);
}

/// A fairness group (sensitive value, optionally restricted to a label) has no members.
class UndefinedGroupError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct FairnessReport {
  double dp = 0.0;  ///< |P(yhat=1 | s=0) - P(yhat=1 | s=1)|
  double eo = 0.0;  ///< mean over y in {0,1} of |P(yhat=1 | s=0, y) - P(yhat=1 | s=1, y)|
  double accuracy = 0.0;
};

inline FairnessReport fairness(std::span<const int> predictions, std::span<const int> labels,
                               std::span<const int> sensitive) {
  if (predictions.size() != labels.size() || labels.size() != sensitive.size()) {
    throw DimensionError("fairness: predictions, labels and sensitive differ in length");
  }
  auto binary = [](std::span<const int> v, const char* what) {
    for (int x : v)
      if (x != 0 && x != 1) throw std::invalid_argument(std::string("fairness: ") + what + " must be binary");
  };
  binary(predictions, "predictions");
  binary(labels, "labels");
  binary(sensitive, "sensitive attribute");

  // counts[s][y] = {members, positive predictions}
  std::array<std::array<std::array<std::size_t, 2>, 2>, 2> counts{};
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& cell = counts[sensitive[i]][labels[i]];
    ++cell[0];
    cell[1] += predictions[i] == 1;
    correct += predictions[i] == labels[i];
  }
  auto rate = [&](int s, int y) {  // y = -1 pools both labels
    std::size_t n = 0, pos = 0;
    for (int yy = 0; yy < 2; ++yy) {
      if (y >= 0 && yy != y) continue;
      n += counts[s][yy][0];
      pos += counts[s][yy][1];
    }
    if (n == 0) {
      throw UndefinedGroupError("fairness: group s=" + std::to_string(s) +
                                (y >= 0 ? ", y=" + std::to_string(y) : std::string()) + " has no members");
    }
    return static_cast<double>(pos) / static_cast<double>(n);
  };
  FairnessReport r;
  r.dp = std::abs(rate(0, -1) - rate(1, -1));
  r.eo = 0.5 * (std::abs(rate(0, 0) - rate(1, 0)) + std::abs(rate(0, 1) - rate(1, 1)));
  r.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  return r;
}

/// Saliency mass on the planted patch.
inline double localization_score(const SaliencyMap& saliency, std::size_t planted_patch) {
  if (planted_patch >= saliency.size()) {
    throw std::out_of_range("localization_score: patch " + std::to_string(planted_patch) + " outside [0, " +
                            std::to_string(saliency.size()) + ")");
  }
  return saliency.scores.data[planted_patch];
}

/// CSV rows method,fill,mode,fraction,score for one method's curves.
inline void append_curves_csv(std::ostream& out, const std::string& method,
                              const std::vector<std::array<EvalCurve, 4>>& curves) {
  for (const auto& per_image : curves)
    for (const auto& c : per_image)
      for (std::size_t i = 0; i < c.fractions.size(); ++i) {
        out << method << ',' << to_string(c.fill) << ',' << to_string(c.mode) << ',' << c.fractions[i] << ','
            << c.scores[i] << '\n';
      }
}

inline constexpr const char* kCurvesCsvHeader = "method,fill,mode,fraction,score\n";

/// Mean curve over images for one (fill, mode) slot.
inline EvalCurve mean_curve(const std::vector<std::array<EvalCurve, 4>>& curves, FillMode fill, CurveMode mode) {
  if (curves.empty()) throw std::invalid_argument("mean_curve: no curves");
  const std::size_t slot = curve_slot(fill, mode);
  EvalCurve out = curves.front()[slot];
  std::fill(out.scores.begin(), out.scores.end(), 0.0);
  for (const auto& c : curves)
    for (std::size_t i = 0; i < out.scores.size(); ++i) out.scores[i] += c[slot].scores[i];
  for (auto& s : out.scores) s /= static_cast<double>(curves.size());
  out.auc = trapezoid(out.fractions, out.scores);
  return out;
}

/// Aggregate scores of one method: D, I, and the area of the mean I - D curve
/// (averaged over both fills).
struct MethodScores {
  double deletion = 0.0;
  double insertion = 0.0;
  double difference_auc = 0.0;
};

inline MethodScores method_scores(const std::vector<std::array<EvalCurve, 4>>& curves) {
  const auto di = averaged_scores(curves);
  MethodScores m{di.deletion, di.insertion, 0.0};
  for (FillMode fill : {FillMode::black, FillMode::blur}) {
    const auto diff = insertion_minus_deletion(mean_curve(curves, fill, CurveMode::insertion),
                                               mean_curve(curves, fill, CurveMode::deletion));
    m.difference_auc += 0.5 * diff.auc;
  }
  return m;
}

inline nlohmann::json to_json(const MethodScores& m) {
  return nlohmann::json{{"D", m.deletion}, {"I", m.insertion}, {"I_minus_D_auc", m.difference_auc}};
}

inline nlohmann::json to_json(const FairnessReport& f) {
  return nlohmann::json{{"dp", f.dp}, {"eo", f.eo}, {"accuracy", f.accuracy}};
}

}  // namespace iavit
