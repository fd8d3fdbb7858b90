// eees command-line front end.
//
// Any config key can be overridden after the subcommand as `--key value`,
// e.g. `eees train --data d --loss.lambda4 0.05 --train.epochs 10`.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "eees/commands.hpp"

namespace {

using eees::Invocation;
using eees::Json;

struct Common {
  std::string config;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

// Parses leftover `--key value` / `--key=value` pairs into config overrides.
Json parse_overrides(const std::vector<std::string>& extra) {
  Json out = Json::object();
  for (std::size_t i = 0; i < extra.size(); ++i) {
    const auto& tok = extra[i];
    if (tok.rfind("--", 0) != 0)
      throw eees::ConfigError(tok, "unexpected argument '" + tok + "'");
    std::string key = tok.substr(2), value;
    if (auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extra.size()) throw eees::ConfigError(key, "missing value");
      value = extra[++i];
    }
    if (!eees::is_config_key(key)) throw eees::ConfigError(key, "unknown config key");
    out[key] = value;
  }
  return out;
}

Invocation build(const std::string& command, const Common& c, const std::vector<std::string>& extra) {
  Invocation inv;
  inv.command = command;
  if (!c.config.empty()) {
    inv.config_file = eees::cmd_detail::absolute_or_empty(c.config);
    eees::apply_config_file(inv.config, c.config);
  }
  inv.overrides = parse_overrides(extra);
  for (auto& [k, v] : inv.overrides.items()) eees::set_config_value(inv.config, k, v);
  if (c.seed_set) inv.config.seed = c.seed;
  inv.config.resolve();
  inv.data = eees::cmd_detail::absolute_or_empty(c.data);
  inv.checkpoint = eees::cmd_detail::absolute_or_empty(c.checkpoint);
  inv.out = eees::cmd_detail::absolute_or_empty(
      c.out.empty() ? eees::default_out_dir(command).string() : c.out);
  return inv;
}

void add_common(CLI::App* sub, Common& c, bool with_data) {
  sub->add_option("--config", c.config, "config file (JSON, flat dotted keys)");
  sub->add_option_function<std::uint64_t>(
      "--seed", [&c](const std::uint64_t& s) { c.seed = s, c.seed_set = true; }, "base seed");
  sub->add_option("--out", c.out, "output directory (default $EEES_OUT_ROOT/<command>)");
  if (with_data) sub->add_option("--data", c.data, "dataset directory written by gen");
  sub->allow_extras();
}

int run(int argc, char** argv) {
  CLI::App app{"eees: cross-modality metric learning on synthetic bimodal data"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen, common, false);

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, common, true);
  bool paper_schedule = false;
  train->add_flag("--paper-schedule", paper_schedule, "120 epochs, decays at 40 and 70");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, common, true);
  eval->add_option("--checkpoint", common.checkpoint, "checkpoint file")->required();
  std::string shots;
  eval->add_option("--shots", shots, "single, multi or both");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(gradcheck, common, false);
  int batches = 50;
  std::vector<int> sizes_n{2, 4, 8}, sizes_d{4, 8};
  double h = 1e-5, tol = 1e-4;
  bool h_sweep = false;
  std::string corrupt;
  gradcheck->add_option("--batches", batches, "random batches per loss");
  gradcheck->add_option("--n", sizes_n, "batch sizes")->delimiter(',');
  gradcheck->add_option("--d", sizes_d, "embedding dimensions")->delimiter(',');
  gradcheck->add_option("--step", h, "central-difference step h");
  gradcheck->add_option("--tol", tol, "relative error tolerance");
  gradcheck->add_flag("--h-sweep", h_sweep, "check at h = 1e-4, 1e-5 and 1e-6");
  gradcheck->add_option("--corrupt", corrupt, "test hook: perturb this loss's gradient");

  auto* ablate = app.add_subcommand("ablate", "train the ablation lattice");
  add_common(ablate, common, true);

  auto* sweep = app.add_subcommand("sweep", "sweep one loss hyperparameter");
  add_common(sweep, common, true);
  std::string param;
  std::vector<std::string> values;
  sweep->add_option("--param", param, "lambda1, lambda2, lambda3, lambda4 or M")->required();
  sweep->add_option("--values", values, "values to sweep")->delimiter(',')->required();

  auto* rerun = app.add_subcommand("rerun", "replay a run from its manifest");
  std::string manifest, rerun_out;
  rerun->add_option("--manifest", manifest, "manifest.json of the run")->required();
  rerun->add_option("--out", rerun_out, "output directory (default: the recorded one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return eees::kExitValidation;
  }

  Invocation inv;
  if (rerun->parsed()) {
    inv = eees::invocation_from_manifest(manifest, rerun_out);
  } else {
    CLI::App* sub = app.get_subcommands().front();
    inv = build(sub->get_name(), common, sub->remaining());
    if (train->parsed() && paper_schedule) {
      inv.config.train.use_paper_schedule();
      inv.config.auto_decay = false;
      inv.args["paper_schedule"] = true;
    }
    if (eval->parsed() && !shots.empty()) {
      eees::set_config_value(inv.config, "eval.shots", shots);
    }
    if (gradcheck->parsed()) {
      inv.args = {{"batches", batches}, {"n", sizes_n}, {"d", sizes_d},
                  {"h", h},             {"tol", tol},   {"h_sweep", h_sweep}};
      if (!corrupt.empty()) inv.args["corrupt"] = corrupt;
    }
    if (sweep->parsed()) inv.args = {{"param", param}, {"values", values}};
  }
  inv.config.validate();
  return eees::dispatch(inv, std::cout);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const eees::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return eees::kExitValidation;
  } catch (const eees::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return eees::kExitRuntime;
  } catch (const eees::Error& e) {
    // Shape, index, protocol and degenerate-input errors are input problems.
    std::cerr << "error: " << e.what() << "\n";
    return eees::kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return eees::kExitRuntime;
  }
}
