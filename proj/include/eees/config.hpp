#pragma once

// Run configuration as flat dotted keys ("loss.lambda1", "train.epochs", ...).
// A config file is a JSON object whose keys are those names (nested objects
// are flattened, so {"loss": {"lambda1": 0.3}} works too). Command-line
// overrides arrive as strings and are parsed per key.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "eees/common.hpp"
#include "eees/evaluator.hpp"
#include "eees/synthdata.hpp"
#include "eees/trainer.hpp"

namespace eees {

using Json = nlohmann::ordered_json;

struct RunConfig {
  std::uint64_t seed = 0;
  int seeds = 5;  // ablate / sweep: seeds seed, seed+1, ...
  GeneratorConfig gen;
  TrainConfig train;
  bool auto_decay = true;  // train.decay_epochs follows train.epochs
  std::string shots = "single";  // single | multi | both
  Modality query = Modality::R;

  // Fills the fields that are derived rather than set directly.
  void resolve() {
    gen.seed = seed;
    train.seed = seed;
    if (auto_decay) train.decay_epochs = TrainConfig::default_decay_epochs(train.epochs);
  }

  std::vector<Shots> shot_modes() const {
    if (shots == "both") return {Shots::Single, Shots::Multi};
    return {parse_shots(shots)};
  }

  void validate() const {
    if (seeds <= 0) throw ConfigError("seeds", "must be positive");
    gen.validate();
    train.validate();
    if (shots != "both") parse_shots(shots);
  }
};

namespace cfg_detail {

[[noreturn]] inline void bad(const std::string& key, const std::string& what) {
  throw ConfigError(key, what);
}

// Values from the command line are strings; values from a file are typed.
inline Json coerce(const std::string& key, const Json& v, const char* want) {
  if (!v.is_string()) return v;
  const auto& s = v.get_ref<const std::string&>();
  if (std::string_view(want) == "string") return v;
  try {
    return Json::parse(s);
  } catch (const nlohmann::json::parse_error&) {
    bad(key, std::string("expected ") + want + ", got '" + s + "'");
  }
}

inline double as_double(const std::string& key, const Json& raw) {
  auto v = coerce(key, raw, "a number");
  if (!v.is_number()) bad(key, "expected a number, got " + raw.dump());
  return v.get<double>();
}

inline long long as_integer(const std::string& key, const Json& raw) {
  auto v = coerce(key, raw, "an integer");
  if (v.is_number_integer()) return v.get<long long>();
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (d == static_cast<double>(static_cast<long long>(d))) return static_cast<long long>(d);
  }
  bad(key, "expected an integer, got " + raw.dump());
}

inline int as_int(const std::string& key, const Json& raw) {
  const auto v = as_integer(key, raw);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    bad(key, "out of range");
  return static_cast<int>(v);
}

inline std::uint64_t as_seed(const std::string& key, const Json& raw) {
  auto v = coerce(key, raw, "a non-negative integer");
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0)
    return static_cast<std::uint64_t>(v.get<long long>());
  bad(key, "expected a non-negative integer, got " + raw.dump());
}

inline bool as_bool(const std::string& key, const Json& raw) {
  auto v = coerce(key, raw, "true or false");
  if (!v.is_boolean()) bad(key, "expected true or false, got " + raw.dump());
  return v.get<bool>();
}

inline std::string as_string(const std::string& key, const Json& raw) {
  if (!raw.is_string()) bad(key, "expected a string, got " + raw.dump());
  return raw.get<std::string>();
}

// "auto", a JSON list, or a comma-separated list.
inline std::vector<int> as_int_list(const std::string& key, const Json& raw) {
  Json v = raw;
  if (raw.is_string()) {
    const auto& s = raw.get_ref<const std::string&>();
    if (!s.empty() && s.front() == '[') {
      v = coerce(key, raw, "a list");
    } else {
      v = Json::array();
      std::size_t pos = 0;
      while (pos <= s.size() && !s.empty()) {
        const auto comma = s.find(',', pos);
        const auto tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        int x = 0;
        auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), x);
        if (ec != std::errc() || p != tok.data() + tok.size())
          bad(key, "expected a list of integers, got '" + s + "'");
        v.push_back(x);
        if (comma == std::string::npos) break;
        pos = comma + 1;
      }
    }
  }
  if (!v.is_array()) bad(key, "expected a list of integers or \"auto\"");
  std::vector<int> out;
  for (const auto& e : v) out.push_back(as_int(key, e));
  return out;
}

struct Field {
  std::function<void(RunConfig&, const Json&)> set;
  std::function<Json(const RunConfig&)> get;
};

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    auto add_int = [&](const std::string& k, auto member) {
      t[k] = {[k, member](RunConfig& c, const Json& v) { member(c) = as_int(k, v); },
              [member](const RunConfig& c) { return Json(member(const_cast<RunConfig&>(c))); }};
    };
    auto add_double = [&](const std::string& k, auto member) {
      t[k] = {[k, member](RunConfig& c, const Json& v) { member(c) = as_double(k, v); },
              [member](const RunConfig& c) { return Json(member(const_cast<RunConfig&>(c))); }};
    };
    auto add_bool = [&](const std::string& k, auto member) {
      t[k] = {[k, member](RunConfig& c, const Json& v) { member(c) = as_bool(k, v); },
              [member](const RunConfig& c) { return Json(member(const_cast<RunConfig&>(c))); }};
    };

    t["seed"] = {[](RunConfig& c, const Json& v) { c.seed = as_seed("seed", v); },
                 [](const RunConfig& c) { return Json(c.seed); }};
    add_int("seeds", [](RunConfig& c) -> int& { return c.seeds; });

    add_int("gen.n_identities_train", [](RunConfig& c) -> int& { return c.gen.n_identities_train; });
    add_int("gen.n_identities_test", [](RunConfig& c) -> int& { return c.gen.n_identities_test; });
    add_int("gen.samples_per_identity_per_modality",
            [](RunConfig& c) -> int& { return c.gen.samples_per_identity_per_modality; });
    add_int("gen.d_id", [](RunConfig& c) -> int& { return c.gen.d_id; });
    add_int("gen.d_view", [](RunConfig& c) -> int& { return c.gen.d_view; });
    add_int("gen.d_conflict", [](RunConfig& c) -> int& { return c.gen.d_conflict; });
    add_double("gen.sigma_view", [](RunConfig& c) -> double& { return c.gen.sigma_view; });
    add_double("gen.sigma_noise", [](RunConfig& c) -> double& { return c.gen.sigma_noise; });
    add_double("gen.sigma_text", [](RunConfig& c) -> double& { return c.gen.sigma_text; });
    add_double("gen.mask_keep_prob", [](RunConfig& c) -> double& { return c.gen.mask_keep_prob; });

    add_int("model.d_hidden", [](RunConfig& c) -> int& { return c.train.d_hidden; });
    add_int("model.d_embed", [](RunConfig& c) -> int& { return c.train.d_embed; });
    add_double("model.init_scale", [](RunConfig& c) -> double& { return c.train.init_scale; });

    add_int("train.epochs", [](RunConfig& c) -> int& { return c.train.epochs; });
    add_int("train.batches_per_epoch", [](RunConfig& c) -> int& { return c.train.batches_per_epoch; });
    add_double("train.lr_visual", [](RunConfig& c) -> double& { return c.train.lr_visual; });
    add_double("train.lr_text", [](RunConfig& c) -> double& { return c.train.lr_text; });
    add_double("train.decay_factor", [](RunConfig& c) -> double& { return c.train.decay_factor; });
    add_double("train.momentum", [](RunConfig& c) -> double& { return c.train.momentum; });
    add_int("train.batch_identities", [](RunConfig& c) -> int& { return c.train.batch_identities; });
    add_int("train.batch_k", [](RunConfig& c) -> int& { return c.train.batch_k; });
    add_bool("train.eval_each_epoch", [](RunConfig& c) -> bool& { return c.train.eval_each_epoch; });
    t["train.decay_epochs"] = {
        [](RunConfig& c, const Json& v) {
          if (v.is_string() && v.get<std::string>() == "auto") {
            c.auto_decay = true;
            return;
          }
          c.auto_decay = false;
          c.train.decay_epochs = as_int_list("train.decay_epochs", v);
        },
        [](const RunConfig& c) {
          return c.auto_decay ? Json("auto") : Json(c.train.decay_epochs);
        }};

    add_double("loss.lambda1", [](RunConfig& c) -> double& { return c.train.weights.lambda1; });
    add_double("loss.lambda2", [](RunConfig& c) -> double& { return c.train.weights.lambda2; });
    add_double("loss.lambda3", [](RunConfig& c) -> double& { return c.train.weights.lambda3; });
    add_double("loss.lambda4", [](RunConfig& c) -> double& { return c.train.weights.lambda4; });
    add_double("loss.tau", [](RunConfig& c) -> double& { return c.train.weights.tau; });
    add_int("loss.M", [](RunConfig& c) -> int& { return c.train.weights.M; });
    add_bool("loss.label_aware_contrastive",
             [](RunConfig& c) -> bool& { return c.train.weights.label_aware_contrastive; });
    add_bool("loss.cross_modal_fusion",
             [](RunConfig& c) -> bool& { return c.train.weights.cross_modal_fusion; });
    add_bool("loss.kd_text", [](RunConfig& c) -> bool& { return c.train.weights.kd_text; });
    add_bool("loss.many_to_many", [](RunConfig& c) -> bool& { return c.train.weights.many_to_many; });

    t["eval.shots"] = {[](RunConfig& c, const Json& v) {
                         auto s = as_string("eval.shots", v);
                         if (s != "single" && s != "multi" && s != "both")
                           bad("eval.shots", "expected single, multi or both, got '" + s + "'");
                         c.shots = s;
                       },
                       [](const RunConfig& c) { return Json(c.shots); }};
    t["eval.query"] = {[](RunConfig& c, const Json& v) {
                         try {
                           c.query = parse_modality(as_string("eval.query", v));
                         } catch (const Error& e) {
                           bad("eval.query", e.what());
                         }
                       },
                       [](const RunConfig& c) { return Json(std::string(to_string(c.query))); }};
    return t;
  }();
  return table;
}

inline void flatten(const Json& j, const std::string& prefix, std::vector<std::pair<std::string, Json>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object())
      flatten(*it, key, out);
    else
      out.emplace_back(key, *it);
  }
}

}  // namespace cfg_detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : cfg_detail::fields()) out.push_back(k);
  return out;
}

inline bool is_config_key(const std::string& key) { return cfg_detail::fields().count(key) != 0; }

inline void set_config_value(RunConfig& c, const std::string& key, const Json& value) {
  auto it = cfg_detail::fields().find(key);
  if (it == cfg_detail::fields().end()) throw ConfigError(key, "unknown config key");
  it->second.set(c, value);
}

// Every key with its resolved value, in key order.
inline Json to_flat_json(const RunConfig& c) {
  Json out = Json::object();
  for (const auto& [k, f] : cfg_detail::fields()) out[k] = f.get(c);
  return out;
}

inline void apply_config_json(RunConfig& c, const Json& j) {
  if (!j.is_object()) throw ConfigError("config", "top level must be an object");
  std::vector<std::pair<std::string, Json>> flat;
  cfg_detail::flatten(j, "", flat);
  for (const auto& [k, v] : flat) set_config_value(c, k, v);
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config", path.string() + ": " + e.what());
  }
  apply_config_json(c, j);
}

inline RunConfig config_from_flat_json(const Json& j) {
  RunConfig c;
  apply_config_json(c, j);
  c.resolve();
  return c;
}

}  // namespace eees
