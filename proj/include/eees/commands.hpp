#pragma once

// Command implementations behind the `eees` executable. Each command takes a
// fully resolved Invocation, writes its artifacts under inv.out and finishes
// with a manifest.json from which `eees rerun` can replay it.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "eees/common.hpp"
#include "eees/config.hpp"
#include "eees/evaluator.hpp"
#include "eees/gradcheck.hpp"
#include "eees/model.hpp"
#include "eees/synthdata.hpp"
#include "eees/trainer.hpp"

namespace eees {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kOutRootEnv = "EEES_OUT_ROOT";

inline constexpr const char* kAblationCsvVersion = "# eees ablation csv v1";
inline constexpr const char* kAblationCsvHeader =
    "method,ese,cvsc,cmsp,seed,rank1,map,gap_ratio,untrained_gap_ratio,conflict_sensitivity";
inline constexpr const char* kSweepCsvVersion = "# eees sweep csv v1";
inline constexpr const char* kSweepCsvHeader = "param,value,seed,shots,rank1,map";
inline constexpr const char* kGradcheckCsvVersion = "# eees gradcheck csv v1";
inline constexpr const char* kGradcheckCsvHeader = "h,loss,batches,checked,skipped,max_rel_error,status";

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

struct Invocation {
  std::string command;
  RunConfig config;
  std::string config_file;
  Json overrides = Json::object();  // command-line config overrides, verbatim
  Json args = Json::object();       // command-specific options
  std::string data;
  std::string checkpoint;
  std::string out;
};

inline std::filesystem::path default_out_dir(const std::string& command) {
  const char* root = std::getenv(kOutRootEnv);
  std::filesystem::path base = root && *root ? root : "runs";
  return base / command;
}

namespace cmd_detail {

inline std::string absolute_or_empty(const std::string& p) {
  return p.empty() ? p : std::filesystem::absolute(p).lexically_normal().string();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

class Outputs {
 public:
  explicit Outputs(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
  }

  const std::filesystem::path& root() const { return root_; }

  std::filesystem::path add(const std::filesystem::path& rel) {
    files_.push_back(rel.generic_string());
    auto full = root_ / rel;
    if (full.has_parent_path()) std::filesystem::create_directories(full.parent_path());
    return full;
  }

  const std::vector<std::string>& files() const { return files_; }

 private:
  std::filesystem::path root_;
  std::vector<std::string> files_;
};

inline void write_manifest(const Invocation& inv, const Outputs& outs,
                           const std::vector<std::uint64_t>& seeds, double seconds) {
  Json m = {{"kind", "eees.manifest"},
            {"version", 1},
            {"tool_version", kToolVersion},
            {"command", inv.command},
            {"config_file", inv.config_file},
            {"overrides", inv.overrides},
            {"config", to_flat_json(inv.config)},
            {"seeds", seeds},
            {"args", inv.args},
            {"inputs", {{"data", inv.data}, {"checkpoint", inv.checkpoint}}},
            {"out", inv.out},
            {"outputs", outs.files()},
            {"wall_clock_seconds", seconds}};
  write_text(outs.root() / "manifest.json", m.dump(2) + "\n");
}

inline std::vector<std::uint64_t> seed_list(const RunConfig& c) {
  std::vector<std::uint64_t> out;
  for (int s = 0; s < c.seeds; ++s) out.push_back(c.seed + static_cast<std::uint64_t>(s));
  return out;
}

inline Dataset load_data(const Invocation& inv) {
  if (inv.data.empty()) throw ConfigError("data", "--data is required");
  if (!std::filesystem::exists(std::filesystem::path(inv.data) / "train.jsonl"))
    throw ProtocolError("no dataset at " + inv.data + " (train.jsonl missing)");
  return read_dataset(inv.data);
}

inline Protocol protocol_for(const RunConfig& c, Shots shots) {
  return {c.query, c.query == Modality::V ? Modality::R : Modality::V, shots, c.seed};
}

inline std::string fixed3(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << v;
  return os.str();
}

// Trains one configuration and stores its checkpoint and log under `rel`.
inline ModelParams train_into(Outputs& outs, const std::filesystem::path& rel,
                              const TrainConfig& tc, const Dataset& ds) {
  auto res = run_training(tc, ds);
  save_checkpoint(outs.add(rel / "checkpoint.jsonl"), res.params);
  std::ofstream log(outs.add(rel / "trainlog.jsonl"), std::ios::binary);
  res.log.write_jsonl(log);
  return std::move(res.params);
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace cmd_detail

inline int cmd_gen(const Invocation& inv, std::ostream& os) {
  using namespace cmd_detail;
  Timer timer;
  inv.config.gen.validate();
  auto ds = generate_dataset(inv.config.gen);
  Outputs outs(inv.out);
  outs.add("train.jsonl");
  outs.add("test.jsonl");
  outs.add("meta.json");
  write_dataset(outs.root(), ds);
  os << "wrote " << ds.train.samples.size() << " train and " << ds.test.samples.size()
     << " test samples to " << outs.root().string() << "\n";
  write_manifest(inv, outs, {inv.config.seed}, timer.seconds());
  return kExitOk;
}

inline int cmd_train(const Invocation& inv, std::ostream& os) {
  using namespace cmd_detail;
  Timer timer;
  const auto& tc = inv.config.train;
  tc.validate();
  auto ds = load_data(inv);
  auto res = run_training(tc, ds, [&](const EpochSnapshot& s) {
    os << "epoch " << s.epoch << " l_total=" << s.mean_l_total << " rank1=" << fixed3(s.rank1)
       << " map=" << fixed3(s.map) << "\n";
  });
  Outputs outs(inv.out);
  save_checkpoint(outs.add("checkpoint.jsonl"), res.params);
  {
    std::ofstream log(outs.add("trainlog.jsonl"), std::ios::binary);
    res.log.write_jsonl(log);
  }
  write_manifest(inv, outs, {tc.seed}, timer.seconds());
  return kExitOk;
}

inline int cmd_eval(const Invocation& inv, std::ostream& os) {
  using namespace cmd_detail;
  Timer timer;
  if (inv.checkpoint.empty()) throw ConfigError("checkpoint", "--checkpoint is required");
  auto mp = load_checkpoint(inv.checkpoint);
  auto ds = load_data(inv);
  if (ds.test.samples.empty()) throw ProtocolError("dataset has an empty test split");
  const auto& s0 = ds.test.samples.front();
  if (s0.x_raw.size() != static_cast<std::size_t>(mp.config.d_in_visual))
    throw DimensionError("checkpoint expects visual inputs of shape (1, " +
                         std::to_string(mp.config.d_in_visual) + ") but the dataset has (1, " +
                         std::to_string(s0.x_raw.size()) + ")");
  std::vector<RetrievalReport> reports;
  for (auto shots : inv.config.shot_modes())
    reports.push_back(evaluate(mp, ds.test, protocol_for(inv.config, shots), &ds));

  Outputs outs(inv.out);
  Json arr = Json::array();
  std::string csv = std::string(kReportCsvVersion) + "\n" + kReportCsvHeader + "\n";
  for (const auto& r : reports) {
    arr.push_back(to_json(r));
    csv += csv_row(r) + "\n";
    os << r.protocol.name() << " rank1=" << fixed3(r.rank(1)) << " map=" << fixed3(r.map);
    if (r.n_excluded) os << " (" << r.n_excluded << " queries without a gallery match excluded)";
    os << "\n";
  }
  write_text(outs.add("report.json"), arr.dump(2) + "\n");
  write_text(outs.add("report.csv"), csv);
  write_manifest(inv, outs, {inv.config.seed}, timer.seconds());
  return kExitOk;
}

inline GradCheckOptions gradcheck_options(const Invocation& inv) {
  GradCheckOptions o;
  o.seed = inv.config.seed;
  const auto& a = inv.args;
  if (a.contains("batches")) o.batches = a.at("batches").get<int>();
  if (a.contains("n")) o.sizes_n = a.at("n").get<std::vector<int>>();
  if (a.contains("d")) o.sizes_d = a.at("d").get<std::vector<int>>();
  if (a.contains("h")) o.h = a.at("h").get<double>();
  if (a.contains("tol")) o.tol = a.at("tol").get<double>();
  if (a.contains("corrupt")) o.corrupt = a.at("corrupt").get<std::string>();
  return o;
}

inline int cmd_gradcheck(const Invocation& inv, std::ostream& os) {
  using namespace cmd_detail;
  Timer timer;
  auto base = gradcheck_options(inv);
  base.validate();
  std::vector<double> steps = {base.h};
  if (inv.args.value("h_sweep", false)) steps = {1e-4, 1e-5, 1e-6};

  std::string csv = std::string(kGradcheckCsvVersion) + "\n" + kGradcheckCsvHeader + "\n";
  std::vector<std::string> failed;
  os << std::left << std::setw(8) << "h" << std::setw(15) << "loss" << std::setw(9) << "batches"
     << std::setw(9) << "checked" << std::setw(9) << "skipped" << std::setw(15) << "max_rel_err"
     << "status\n";
  for (double h : steps) {
    auto opt = base;
    opt.h = h;
    for (const auto& s : run_gradcheck(opt)) {
      const char* status = s.passed ? "pass" : "FAIL";
      std::ostringstream hs;
      hs << h;
      os << std::left << std::setw(8) << hs.str() << std::setw(15) << s.loss << std::setw(9)
         << s.batches << std::setw(9) << s.checked << std::setw(9) << s.skipped << std::setw(15)
         << std::setprecision(3) << std::scientific << s.max_rel_error << std::defaultfloat
         << status << "\n";
      csv += hs.str() + "," + s.loss + "," + std::to_string(s.batches) + "," +
             std::to_string(s.checked) + "," + std::to_string(s.skipped) + "," +
             format_number(s.max_rel_error) + "," + status + "\n";
      if (!s.passed) {
        failed.push_back(s.loss);
        std::cerr << "gradient check failed for " << s.loss << " (h=" << hs.str()
                  << "): " << s.first_failure << "\n";
      }
    }
  }
  Outputs outs(inv.out);
  write_text(outs.add("gradcheck.csv"), csv);
  write_manifest(inv, outs, {base.seed}, timer.seconds());
  if (!failed.empty()) {
    std::cerr << "failing losses:";
    for (const auto& f : failed) std::cerr << ' ' << f;
    std::cerr << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

struct AblationCell {
  std::string method;
  bool ese, cvsc, cmsp;
};

inline const std::vector<AblationCell>& ablation_lattice() {
  static const std::vector<AblationCell> cells = {{"baseline", false, false, false},
                                                  {"ese", true, false, false},
                                                  {"ese_cvsc", true, true, false},
                                                  {"ese_cmsp", true, false, true},
                                                  {"full", true, true, true}};
  return cells;
}

// Loss weights for one lattice cell, starting from the configured weights.
// Cells without cross-view compensation run with M = 0 and the many-to-many
// term switched off.
inline LossWeights ablation_weights(const AblationCell& cell, LossWeights w) {
  if (!cell.ese) w.lambda2 = 0.0;
  if (!cell.cvsc) {
    w.lambda3 = 0.0;
    w.M = 0;
    w.many_to_many = false;
  }
  if (!cell.cmsp) w.lambda4 = 0.0;
  return w;
}

inline int cmd_ablate(const Invocation& inv, std::ostream& os) {
  using namespace cmd_detail;
  Timer timer;
  inv.config.train.validate();
  auto ds = load_data(inv);
  Outputs outs(inv.out);
  const auto seeds = seed_list(inv.config);
  const auto protocol_shots = inv.config.shot_modes().front();

  std::string csv = std::string(kAblationCsvVersion) + "\n" + kAblationCsvHeader + "\n";
  for (const auto& cell : ablation_lattice()) {
    double sum_r1 = 0.0, sum_map = 0.0;
    for (auto seed : seeds) {
      TrainConfig tc = inv.config.train;
      tc.weights = ablation_weights(cell, tc.weights);
      tc.seed = seed;
      const auto untrained_gap = modality_gap(init_model(encoder_config_for(tc, ds)), ds.test);
      auto mp = train_into(outs, std::filesystem::path("cells") / cell.method /
                                     ("seed-" + std::to_string(seed)),
                           tc, ds);
      auto p = protocol_for(inv.config, protocol_shots);
      p.seed = seed;
      auto rep = evaluate(mp, ds.test, p, &ds);
      csv += cell.method + "," + (cell.ese ? "1" : "0") + "," + (cell.cvsc ? "1" : "0") + "," +
             (cell.cmsp ? "1" : "0") + "," + std::to_string(seed) + "," +
             format_number(rep.rank(1)) + "," + format_number(rep.map) + "," +
             format_number(rep.gap.gap_ratio) + "," + format_number(untrained_gap.gap_ratio) +
             "," + format_number(rep.conflict_sensitivity.value_or(NAN)) + "\n";
      sum_r1 += rep.rank(1);
      sum_map += rep.map;
    }
    os << std::left << std::setw(10) << cell.method << " mean rank1=" << fixed3(sum_r1 / seeds.size())
       << " map=" << fixed3(sum_map / seeds.size()) << "\n";
  }
  write_text(outs.add("ablation.csv"), csv);
  write_manifest(inv, outs, seeds, timer.seconds());
  return kExitOk;
}

inline const std::vector<std::string>& sweep_params() {
  static const std::vector<std::string> names = {"lambda1", "lambda2", "lambda3", "lambda4", "M"};
  return names;
}

struct SweepValue {
  std::string text;  // as written to the CSV
  double value = 0.0;
};

inline std::vector<SweepValue> parse_sweep_values(const std::string& param,
                                                  const std::vector<std::string>& raw) {
  std::vector<SweepValue> out;
  bool has_zero = false;
  for (const auto& r : raw) {
    SweepValue v;
    std::size_t used = 0;
    try {
      v.value = std::stod(r, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != r.size() || r.empty() || !std::isfinite(v.value) || v.value < 0.0)
      throw ConfigError("sweep.values", "expected non-negative numbers, got '" + r + "'");
    if (param == "M" && v.value != std::floor(v.value))
      throw ConfigError("sweep.values", "M takes integer values, got '" + r + "'");
    v.text = param == "M" ? std::to_string(static_cast<int>(v.value)) : format_number(v.value);
    has_zero = has_zero || v.value == 0.0;
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("sweep.values", "at least one value is required");
  // Every sweep carries the switched-off setting for comparison.
  if (!has_zero) out.insert(out.begin(), SweepValue{"0", 0.0});
  return out;
}

inline void check_sweep_param(const std::string& param) {
  for (const auto& p : sweep_params())
    if (p == param) return;
  std::string valid;
  for (const auto& p : sweep_params()) valid += (valid.empty() ? "" : ", ") + p;
  throw ConfigError("sweep.param", "unknown parameter '" + param + "'; valid names: " + valid);
}

inline int cmd_sweep(const Invocation& inv, std::ostream& os) {
  using namespace cmd_detail;
  Timer timer;
  const auto param = inv.args.value("param", std::string());
  check_sweep_param(param);
  const auto values =
      parse_sweep_values(param, inv.args.value("values", std::vector<std::string>{}));
  inv.config.train.validate();
  auto ds = load_data(inv);
  Outputs outs(inv.out);
  const auto seeds = seed_list(inv.config);

  std::string csv = std::string(kSweepCsvVersion) + "\n" + kSweepCsvHeader + "\n";
  for (const auto& v : values) {
    for (auto seed : seeds) {
      TrainConfig tc = inv.config.train;
      auto& w = tc.weights;
      if (param == "lambda1") w.lambda1 = v.value;
      if (param == "lambda2") w.lambda2 = v.value;
      if (param == "lambda3") w.lambda3 = v.value;
      if (param == "lambda4") w.lambda4 = v.value;
      if (param == "M") w.M = static_cast<int>(v.value);
      tc.seed = seed;
      auto mp = train_into(outs, std::filesystem::path("cells") / (param + "=" + v.text) /
                                     ("seed-" + std::to_string(seed)),
                           tc, ds);
      for (auto shots : inv.config.shot_modes()) {
        auto p = protocol_for(inv.config, shots);
        p.seed = seed;
        auto rep = evaluate(mp, ds.test, p);
        csv += param + "," + v.text + "," + std::to_string(seed) + "," +
               std::string(to_string(shots)) + "," + format_number(rep.rank(1)) + "," +
               format_number(rep.map) + "\n";
        os << param << "=" << v.text << " seed=" << seed << " " << to_string(shots)
           << " rank1=" << fixed3(rep.rank(1)) << " map=" << fixed3(rep.map) << "\n";
      }
    }
  }
  write_text(outs.add("sweep.csv"), csv);
  write_manifest(inv, outs, seeds, timer.seconds());
  return kExitOk;
}

inline int dispatch(const Invocation& inv, std::ostream& os) {
  if (inv.command == "gen") return cmd_gen(inv, os);
  if (inv.command == "train") return cmd_train(inv, os);
  if (inv.command == "eval") return cmd_eval(inv, os);
  if (inv.command == "gradcheck") return cmd_gradcheck(inv, os);
  if (inv.command == "ablate") return cmd_ablate(inv, os);
  if (inv.command == "sweep") return cmd_sweep(inv, os);
  throw ConfigError("command", "unknown command '" + inv.command + "'");
}

// Rebuilds the invocation recorded in a manifest. `out` replaces the recorded
// output directory when non-empty.
inline Invocation invocation_from_manifest(const std::filesystem::path& path,
                                           const std::string& out = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("manifest", "cannot read " + path.string());
  Json m;
  try {
    m = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("manifest", e.what());
  }
  if (m.value("kind", "") != "eees.manifest")
    throw ConfigError("manifest", path.string() + " is not a run manifest");
  Invocation inv;
  inv.command = m.at("command").get<std::string>();
  inv.config = config_from_flat_json(m.at("config"));
  inv.config_file = m.value("config_file", "");
  inv.overrides = m.value("overrides", Json::object());
  inv.args = m.value("args", Json::object());
  inv.data = m.at("inputs").value("data", "");
  inv.checkpoint = m.at("inputs").value("checkpoint", "");
  inv.out = out.empty() ? m.at("out").get<std::string>() : cmd_detail::absolute_or_empty(out);
  return inv;
}

}  // namespace eees
