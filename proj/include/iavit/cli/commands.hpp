// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "iavit/cli/run_config.hpp"
#include "iavit/data_io/checkpoint.hpp"
#include "iavit/evaluation/metrics.hpp"
#include "iavit/explainers/explainers.hpp"

namespace iavit {

namespace fs = std::filesystem;

inline Json provenance(const RunConfig& c) {
  return Json{{"config_hash", config_hash(c)}, {"seed", c.seed}, {"format_version", kArtifactFormatVersion}};
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
}

inline Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Json::parse(in);
}

inline Json to_json(const EpochLog& l) {
  return Json{{"epoch", l.epoch}, {"l_ce", l.l_ce},           {"l_kd", l.l_kd},       {"l_reg", l.l_reg},
              {"l_total", l.l_total}, {"acc_pred", l.acc_pred}, {"acc_int", l.acc_int}};
}

struct TrainedModel {
  IAViT model;
  std::vector<EpochLog> log;
  Accuracy test;
};

/// Initializes from the run seed and trains with `loss` (the config's own loss
/// unless overridden, e.g. for ablations and the CE-only reference).
inline TrainedModel train_model(const RunConfig& c, const Splits& data, const LossConfig& loss,
                                const EpochCallback& on_epoch = {}) {
  TrainedModel t{IAViT(c.model, derive_seed(c.seed, kInitStream)), {}, {}};
  t.log = train(t.model, data.train, c.optimizer, loss, derive_seed(c.seed, kShuffleStream), on_epoch);
  t.test = evaluate_accuracy(t.model, data.test);
  return t;
}

/// The baseline the accuracy drop is measured against: same architecture,
/// seed and schedule, trained on cross-entropy alone.
inline LossConfig reference_loss(LossConfig loss) {
  loss.use_kd = false;
  loss.use_reg = false;
  return loss;
}

/// train: checkpoint, newline-delimited epoch log, summary.
inline Json cmd_train(const RunConfig& c, const fs::path& out, std::ostream* progress = nullptr) {
  fs::create_directories(out);
  const Splits data = load_splits(c);
  write_text(out / "config.json", to_json(c).dump(2) + "\n");
  std::ofstream log(out / "metrics.jsonl", std::ios::trunc);
  auto trained = train_model(c, data, c.loss, [&](const EpochLog& l) {
    log << to_json(l).dump() << '\n';
    log.flush();
    if (progress) *progress << "epoch " << l.epoch << ' ' << to_json(l).dump() << '\n';
  });
  save_checkpoint(trained.model, out / "model.ckpt", provenance(c));

  Json summary{{"acc_pred", trained.test.pred}, {"acc_int", trained.test.interp}, {"pdr", nullptr},
               {"reference_acc", nullptr},      {"provenance", provenance(c)},    {"config", to_json(c)}};
  if (c.train_reference) {
    auto ref = train_model(c, data, reference_loss(c.loss));
    summary["reference_acc"] = ref.test.pred;
    if (ref.test.pred > 0.0) summary["pdr"] = pdr(ref.test.pred, trained.test.pred);
  }
  write_text(out / "summary.json", summary.dump(2) + "\n");
  return summary;
}

inline std::vector<SaliencyMap> explain_methods(const IAViT& model, std::span<const Tensor> images, Method m,
                                                const RunConfig& c) {
  return explain(model, images, m, derive_seed(c.seed, kExplainStream));
}

inline void check_model_matches(const IAViT& model, const Dataset& data) {
  const auto& mc = model.config();
  if (mc.image_size != data.image_size || mc.channels != data.channels || mc.classes != data.classes) {
    throw ConfigError("--checkpoint", "model does not match the dataset (image size, channels or classes)");
  }
}

/// explain: one JSON and one PGM per (image, method) for the first `count` test images.
inline std::size_t cmd_explain(const RunConfig& c, const fs::path& checkpoint, const std::vector<Method>& methods,
                               const fs::path& out, std::size_t count) {
  const IAViT model = load_checkpoint(checkpoint);
  const Splits data = load_splits(c);
  check_model_matches(model, data.test);
  count = std::min(count, data.test.size());
  fs::create_directories(out);
  std::span<const Tensor> images(data.test.images.data(), count);
  std::size_t written = 0;
  for (Method m : methods) {
    const auto maps = explain_methods(model, images, m, c);
    for (std::size_t i = 0; i < count; ++i) {
      std::ostringstream stem;
      stem << "img" << std::setw(5) << std::setfill('0') << i << '_' << to_string(m);
      Json j{{"method", to_string(m)},   {"n_patches", maps[i].size()}, {"scores", maps[i].scores.data},
             {"image_id", i},            {"fallback", maps[i].fallback}, {"provenance", provenance(c)}};
      write_text(out / (stem.str() + ".json"), j.dump() + "\n");
      write_pgm(maps[i], model.config(), out / (stem.str() + ".pgm"));
      ++written;
    }
  }
  return written;
}

struct MethodEvaluation {
  MethodScores scores;
  std::optional<double> localization;
  std::vector<std::array<EvalCurve, 4>> curves;
};

inline MethodEvaluation evaluate_method(const IAViT& model, const Dataset& data, std::size_t count, Method m,
                                        const RunConfig& c) {
  count = std::min(count, data.size());
  std::span<const Tensor> images(data.images.data(), count);
  const auto maps = explain_methods(model, images, m, c);
  MethodEvaluation ev;
  ev.curves = perturbation_curves(model, images, maps);
  ev.scores = method_scores(ev.curves);
  if (data.planted) {
    double total = 0.0;
    for (std::size_t i = 0; i < count; ++i) total += localization_score(maps[i], static_cast<std::size_t>((*data.planted)[i]));
    ev.localization = total / static_cast<double>(count);
  }
  return ev;
}

/// evaluate: curves CSV, aggregate JSON, fairness block when the data carries a sensitive attribute.
inline Json cmd_evaluate(const RunConfig& c, const fs::path& checkpoint, const std::vector<Method>& methods,
                         const fs::path& out) {
  const IAViT model = load_checkpoint(checkpoint);
  const Splits data = load_splits(c);
  check_model_matches(model, data.test);
  fs::create_directories(out);
  std::ostringstream csv;
  csv << kCurvesCsvHeader;
  Json agg = Json::object(), loc = Json::object();
  for (Method m : methods) {
    const auto ev = evaluate_method(model, data.test, c.eval_images, m, c);
    append_curves_csv(csv, to_string(m), ev.curves);
    agg[to_string(m)] = to_json(ev.scores);
    if (ev.localization) loc[to_string(m)] = *ev.localization;
  }
  write_text(out / "curves.csv", csv.str());
  const auto acc = evaluate_accuracy(model, data.test);
  Json report{{"methods", agg},
              {"accuracy", {{"predictor", acc.pred}, {"interpreter", acc.interp}}},
              {"images", std::min(c.eval_images, data.test.size())},
              {"provenance", provenance(c)}};
  if (!loc.empty()) report["localization"] = loc;
  if (data.test.sensitive) {
    if (data.test.classes == 2) {
      const auto preds = predict_dataset(model, data.test);
      report["fairness"] = to_json(fairness(preds.pred, data.test.labels, *data.test.sensitive));
    } else {
      report["fairness"] = Json{{"skipped", "fairness metrics need a binary task"}};
    }
  }
  write_text(out / "report.json", report.dump(2) + "\n");
  return report;
}

inline LossConfig ablated_loss(LossConfig loss, const std::string& drop) {
  if (drop == "kd") loss.use_kd = false;
  else if (drop == "reg") loss.use_reg = false;
  else throw ConfigError("--drop", "unknown loss term '" + drop + "' (kd | reg)");
  return loss;
}

/// ablate: full objective vs. the objective without one term, same seed.
inline Json cmd_ablate(const RunConfig& c, const std::string& drop, const fs::path& out) {
  const LossConfig reduced = ablated_loss(c.loss, drop);
  fs::create_directories(out);
  const Splits data = load_splits(c);
  auto describe = [&](const LossConfig& loss) {
    RunConfig rc = c;
    rc.loss = loss;
    auto t = train_model(rc, data, loss);
    const auto ev = evaluate_method(t.model, data.test, c.eval_images, Method::atts, rc);
    Json j{{"seed", rc.seed},         {"config", to_json(rc)},       {"config_hash", config_hash(rc)},
           {"acc_pred", t.test.pred}, {"acc_int", t.test.interp},    {"atts", to_json(ev.scores)}};
    if (ev.localization) j["atts"]["localization"] = *ev.localization;
    return j;
  };
  Json result{{"drop", drop},
              {"full", describe(c.loss)},
              {"ablated", describe(reduced)},
              {"format_version", kArtifactFormatVersion}};
  write_text(out / ("ablation_" + drop + ".json"), result.dump(2) + "\n");
  return result;
}

/// report: plain-text digest of whatever artifacts exist in a run directory.
inline std::string cmd_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("--out", dir.string() + " is not a directory");
  std::ostringstream o;
  o << std::fixed << std::setprecision(4);
  bool any = false;
  if (fs::exists(dir / "summary.json")) {
    any = true;
    const Json s = read_json(dir / "summary.json");
    o << "training summary\n  predictor accuracy   " << s.value("acc_pred", 0.0) << "\n  interpreter accuracy "
      << s.value("acc_int", 0.0) << '\n';
    if (s.contains("pdr") && s["pdr"].is_number()) o << "  PDR (%)              " << s["pdr"].get<double>() << '\n';
  }
  if (fs::exists(dir / "report.json")) {
    any = true;
    const Json r = read_json(dir / "report.json");
    o << "explanation scores (" << r.value("images", 0) << " images)\n";
    o << "  method        D        I        I-D AUC\n";
    for (auto it = r["methods"].begin(); it != r["methods"].end(); ++it) {
      o << "  " << std::left << std::setw(10) << it.key() << std::right << ' ' << std::setw(8)
        << it.value()["D"].get<double>() << ' ' << std::setw(8) << it.value()["I"].get<double>() << ' '
        << std::setw(8) << it.value()["I_minus_D_auc"].get<double>() << '\n';
    }
    if (r.contains("fairness") && r["fairness"].contains("dp")) {
      o << "fairness\n  DP " << r["fairness"]["dp"].get<double>() << "  EO " << r["fairness"]["eo"].get<double>()
        << '\n';
    }
  }
  for (const char* term : {"kd", "reg"}) {
    const fs::path p = dir / (std::string("ablation_") + term + ".json");
    if (!fs::exists(p)) continue;
    any = true;
    const Json a = read_json(p);
    o << "ablation without " << term << "\n";
    for (const char* side : {"full", "ablated"}) {
      o << "  " << std::left << std::setw(8) << side << std::right << " pred " << a[side]["acc_pred"].get<double>()
        << "  int " << a[side]["acc_int"].get<double>() << "  atts I-D "
        << a[side]["atts"]["I_minus_D_auc"].get<double>() << '\n';
    }
  }
  if (!any) o << "no artifacts found in " << dir.string() << '\n';
  write_text(dir / "report.txt", o.str());
  return o.str();
}

}  // namespace iavit
