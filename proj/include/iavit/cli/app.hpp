// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iavit/cli/commands.hpp"

namespace iavit {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitDivergence = 3 };

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Interpretability-aware vision transformer: train, explain, evaluate, ablate, report"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, methods_csv = "rawatt,rollout,attgrads,atts,random", out_dir, drop;
  std::optional<std::uint64_t> seed;
  std::size_t images = 10;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration (JSON)")->required();
    sub->add_option("--seed", seed, "overrides the configured seed");
    sub->add_option("--out", out_dir, "output directory (default: output_dir from the config)");
  };
  auto* train_cmd = app.add_subcommand("train", "train predictor and interpreter jointly");
  add_config(train_cmd);
  auto* explain_cmd = app.add_subcommand("explain", "write saliency JSON and PGM heatmaps");
  add_config(explain_cmd);
  explain_cmd->add_option("--checkpoint", checkpoint)->required();
  explain_cmd->add_option("--methods", methods_csv, "comma-separated: rawatt,rollout,attgrads,atts,random");
  explain_cmd->add_option("--images", images, "number of test images")->check(CLI::PositiveNumber);
  auto* eval_cmd = app.add_subcommand("evaluate", "deletion/insertion curves, aggregates and fairness");
  add_config(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--methods", methods_csv, "comma-separated: rawatt,rollout,attgrads,atts,random");
  auto* ablate_cmd = app.add_subcommand("ablate", "train with one loss term removed and compare");
  add_config(ablate_cmd);
  ablate_cmd->add_option("--drop", drop, "kd | reg")->required();
  auto* report_cmd = app.add_subcommand("report", "summarize the artifacts of a run directory");
  report_cmd->add_option("--out", out_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (report_cmd->parsed()) {
      out << cmd_report(out_dir);
      return kExitOk;
    }
    const RunConfig cfg = load_run_config(config_path, seed);
    const fs::path dir = out_dir.empty() ? fs::path(cfg.output_dir) : fs::path(out_dir);
    if (train_cmd->parsed()) {
      out << cmd_train(cfg, dir, &err).dump(2) << '\n';
    } else if (explain_cmd->parsed()) {
      const auto n = cmd_explain(cfg, checkpoint, parse_methods(methods_csv), dir, images);
      out << "wrote " << n << " saliency maps to " << dir.string() << '\n';
    } else if (eval_cmd->parsed()) {
      out << cmd_evaluate(cfg, checkpoint, parse_methods(methods_csv), dir).dump(2) << '\n';
    } else if (ablate_cmd->parsed()) {
      out << cmd_ablate(cfg, drop, dir).dump(2) << '\n';
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const UnknownMethodError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace iavit
