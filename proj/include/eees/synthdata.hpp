#pragma once

// Seeded synthetic bimodal identity data.
//
// Each identity y owns an attribute latent a_y and one conflict latent per
// modality (c_y^V, c_y^R drawn independently, so the two modalities disagree
// on those attributes). A sample of modality m observes a random subset of the
// identity attributes (a per-sample keep mask), view noise v and its
// modality's conflict latent:
//
//   x_raw = W_m [mask*a_y, v, c_y^m] + eps        (modality-specific mixing)
//   l_raw = U   [mask*a_y, 0, c_y^m] + eps_t      (one shared text mixing)
//
// Train and test identity sets are disjoint.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "eees/common.hpp"
#include "eees/numerics.hpp"
#include "eees/random.hpp"

namespace eees {

struct GeneratorConfig {
  int n_identities_train = 32;
  int n_identities_test = 16;
  int samples_per_identity_per_modality = 8;
  int d_id = 16;
  int d_view = 4;
  int d_conflict = 4;
  double sigma_view = 0.5;
  double sigma_noise = 0.1;
  double sigma_text = -1.0;  // < 0: same as sigma_noise
  double mask_keep_prob = 0.7;
  std::uint64_t seed = 0;

  int d_latent() const { return d_id + d_view + d_conflict; }
  int d_raw() const { return d_latent(); }
  double text_noise() const { return sigma_text < 0.0 ? sigma_noise : sigma_text; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(name, "must be a positive integer, got " + std::to_string(v));
    };
    positive(n_identities_train, "gen.n_identities_train");
    positive(n_identities_test, "gen.n_identities_test");
    positive(samples_per_identity_per_modality, "gen.samples_per_identity_per_modality");
    positive(d_id, "gen.d_id");
    positive(d_view, "gen.d_view");
    positive(d_conflict, "gen.d_conflict");
    if (!(sigma_view >= 0.0)) throw ConfigError("gen.sigma_view", "must be >= 0");
    if (!(sigma_noise >= 0.0)) throw ConfigError("gen.sigma_noise", "must be >= 0");
    if (!(mask_keep_prob > 0.0 && mask_keep_prob <= 1.0))
      throw ConfigError("gen.mask_keep_prob", "must lie in (0, 1]");
  }

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

inline nlohmann::ordered_json to_json(const GeneratorConfig& c) {
  return {{"n_identities_train", c.n_identities_train},
          {"n_identities_test", c.n_identities_test},
          {"samples_per_identity_per_modality", c.samples_per_identity_per_modality},
          {"d_id", c.d_id},
          {"d_view", c.d_view},
          {"d_conflict", c.d_conflict},
          {"sigma_view", c.sigma_view},
          {"sigma_noise", c.sigma_noise},
          {"sigma_text", c.sigma_text},
          {"mask_keep_prob", c.mask_keep_prob},
          {"seed", c.seed}};
}

inline GeneratorConfig generator_config_from_json(const nlohmann::ordered_json& j) {
  GeneratorConfig c;
  c.n_identities_train = j.at("n_identities_train").get<int>();
  c.n_identities_test = j.at("n_identities_test").get<int>();
  c.samples_per_identity_per_modality = j.at("samples_per_identity_per_modality").get<int>();
  c.d_id = j.at("d_id").get<int>();
  c.d_view = j.at("d_view").get<int>();
  c.d_conflict = j.at("d_conflict").get<int>();
  c.sigma_view = j.at("sigma_view").get<double>();
  c.sigma_noise = j.at("sigma_noise").get<double>();
  c.sigma_text = j.at("sigma_text").get<double>();
  c.mask_keep_prob = j.at("mask_keep_prob").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

struct Sample {
  int sample_id = 0;
  int identity = 0;
  Modality modality = Modality::V;
  int view = 0;
  Vec x_raw;
  Vec l_raw;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Split {
  std::vector<Sample> samples;

  std::vector<int> identities() const {
    std::set<int> ids;
    for (const auto& s : samples) ids.insert(s.identity);
    return {ids.begin(), ids.end()};
  }

  friend bool operator==(const Split&, const Split&) = default;
};

// Fixed random mixing operators, regenerable from the generator seed.
struct MixingMatrices {
  Mat w_v, w_r, u;  // d_raw x d_latent each

  const Mat& visual(Modality m) const { return m == Modality::V ? w_v : w_r; }
};

struct IdentityLatent {
  int identity = 0;
  Vec a, c_v, c_r;
  std::vector<std::vector<int>> masks;  // per generated sample, both modalities
};

struct Dataset {
  GeneratorConfig config;
  Split train, test;
  std::optional<MixingMatrices> mixing;  // absent when loaded without metadata
  std::vector<IdentityLatent> latents;   // only populated by generate_dataset
};

inline MixingMatrices make_mixing(const GeneratorConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, {0x313C}));
  const auto rows = static_cast<std::size_t>(cfg.d_raw());
  const auto cols = static_cast<std::size_t>(cfg.d_latent());
  const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
  auto draw = [&] {
    Mat m(rows, cols);
    for (auto& v : m.data()) v = rng.normal() * scale;
    return m;
  };
  MixingMatrices mix;
  mix.w_v = draw();
  mix.w_r = draw();
  mix.u = draw();
  return mix;
}

inline Vec mat_vec(const Mat& w, std::span<const double> z) {
  Vec out(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) out[r] = dot(w.row(r), z);
  return out;
}

inline Dataset generate_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  ds.mixing = make_mixing(cfg);
  const auto& mix = *ds.mixing;

  Rng rng(derive_seed(cfg.seed, {0xDA7A}));
  const int n_total = cfg.n_identities_train + cfg.n_identities_test;
  const int id_dims = cfg.d_id;
  const int view_dims = cfg.d_view;
  const int k = cfg.samples_per_identity_per_modality;
  int next_id = 0;
  Vec z(static_cast<std::size_t>(cfg.d_latent()));

  for (int y = 0; y < n_total; ++y) {
    IdentityLatent lat;
    lat.identity = y;
    lat.a.resize(static_cast<std::size_t>(id_dims));
    for (auto& v : lat.a) v = rng.normal();
    lat.c_v.resize(static_cast<std::size_t>(cfg.d_conflict));
    lat.c_r.resize(static_cast<std::size_t>(cfg.d_conflict));
    for (auto& v : lat.c_v) v = rng.normal();
    for (auto& v : lat.c_r) v = rng.normal();

    Split& split = y < cfg.n_identities_train ? ds.train : ds.test;
    for (Modality m : {Modality::V, Modality::R}) {
      const Vec& c = m == Modality::V ? lat.c_v : lat.c_r;
      for (int s = 0; s < k; ++s) {
        std::vector<int> mask(static_cast<std::size_t>(id_dims));
        for (auto& bit : mask) bit = rng.bernoulli(cfg.mask_keep_prob) ? 1 : 0;
        for (int i = 0; i < id_dims; ++i) z[i] = mask[i] * lat.a[i];
        for (int i = 0; i < view_dims; ++i) z[id_dims + i] = rng.normal() * cfg.sigma_view;
        for (int i = 0; i < cfg.d_conflict; ++i) z[id_dims + view_dims + i] = c[i];

        Sample smp;
        smp.sample_id = next_id++;
        smp.identity = y;
        smp.modality = m;
        smp.view = s;
        smp.x_raw = mat_vec(mix.visual(m), z);
        for (auto& v : smp.x_raw) v += rng.normal() * cfg.sigma_noise;

        for (int i = 0; i < view_dims; ++i) z[id_dims + i] = 0.0;
        smp.l_raw = mat_vec(mix.u, z);
        for (auto& v : smp.l_raw) v += rng.normal() * cfg.text_noise();

        split.samples.push_back(std::move(smp));
        lat.masks.push_back(std::move(mask));
      }
    }
    ds.latents.push_back(std::move(lat));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// PK batches.

struct BatchRow {
  std::size_t visible = 0;   // index into Split::samples
  std::size_t infrared = 0;  // index into Split::samples
  int label = 0;
};

struct Batch {
  std::vector<BatchRow> rows;
  std::vector<int> labels;
  std::vector<std::vector<std::size_t>> candidates;  // same identity, excluding self

  std::size_t size() const { return rows.size(); }
};

inline Batch sample_batch(const Split& split, int n_ids, int k_per_modality, std::uint64_t seed) {
  if (n_ids <= 0 || k_per_modality <= 0)
    throw ProtocolError("sample_batch: n_ids and k_per_modality must be positive");
  std::map<int, std::vector<std::size_t>> by_id_v, by_id_r;
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    const auto& s = split.samples[i];
    (s.modality == Modality::V ? by_id_v : by_id_r)[s.identity].push_back(i);
  }
  std::vector<int> eligible;
  for (const auto& [id, v] : by_id_v) {
    auto it = by_id_r.find(id);
    if (it != by_id_r.end() && v.size() >= static_cast<std::size_t>(k_per_modality) &&
        it->second.size() >= static_cast<std::size_t>(k_per_modality))
      eligible.push_back(id);
  }
  if (eligible.size() < static_cast<std::size_t>(n_ids))
    throw ProtocolError("sample_batch: need " + std::to_string(n_ids) + " identities with >= " +
                        std::to_string(k_per_modality) + " samples per modality, split has " +
                        std::to_string(eligible.size()));

  Rng rng(seed);
  auto take = [&rng](std::vector<std::size_t> pool, std::size_t count) {
    for (std::size_t m = 0; m < count; ++m) std::swap(pool[m], pool[m + rng.index(pool.size() - m)]);
    pool.resize(count);
    return pool;
  };
  std::vector<std::size_t> id_pos(eligible.size());
  std::iota(id_pos.begin(), id_pos.end(), 0);
  auto chosen = take(id_pos, static_cast<std::size_t>(n_ids));

  Batch b;
  for (std::size_t pos : chosen) {
    const int id = eligible[pos];
    auto vs = take(by_id_v[id], static_cast<std::size_t>(k_per_modality));
    auto rs = take(by_id_r[id], static_cast<std::size_t>(k_per_modality));
    for (int j = 0; j < k_per_modality; ++j) {
      b.rows.push_back({vs[j], rs[j], id});
      b.labels.push_back(id);
    }
  }
  b.candidates.resize(b.rows.size());
  for (std::size_t i = 0; i < b.rows.size(); ++i)
    for (std::size_t j = 0; j < b.rows.size(); ++j)
      if (j != i && b.labels[j] == b.labels[i]) b.candidates[i].push_back(j);
  return b;
}

// ---------------------------------------------------------------------------
// Line-delimited serialization: <dir>/train.jsonl, <dir>/test.jsonl and the
// sidecar <dir>/meta.json holding the generator config (and thus the mixing
// seed) for exact regeneration.

inline nlohmann::ordered_json to_json(const Sample& s) {
  return {{"sample_id", s.sample_id}, {"identity", s.identity},
          {"modality", std::string(to_string(s.modality))},
          {"view", s.view}, {"x_raw", s.x_raw}, {"l_raw", s.l_raw}};
}

inline Sample sample_from_json(const nlohmann::ordered_json& j) {
  Sample s;
  s.sample_id = j.at("sample_id").get<int>();
  s.identity = j.at("identity").get<int>();
  s.modality = parse_modality(j.at("modality").get<std::string>());
  s.view = j.at("view").get<int>();
  s.x_raw = j.at("x_raw").get<Vec>();
  s.l_raw = j.at("l_raw").get<Vec>();
  return s;
}

inline void write_split(const std::filesystem::path& path, const Split& split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ProtocolError("cannot write " + path.string());
  for (const auto& s : split.samples) out << to_json(s).dump() << '\n';
}

inline Split read_split(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ProtocolError("cannot read " + path.string());
  Split split;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      split.samples.push_back(sample_from_json(nlohmann::ordered_json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return split;
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  write_split(dir / "train.jsonl", ds.train);
  write_split(dir / "test.jsonl", ds.test);
  nlohmann::ordered_json meta = {{"kind", "eees.dataset"},
                                 {"version", 1},
                                 {"generator", to_json(ds.config)},
                                 {"mixing_seed", ds.config.seed}};
  std::ofstream out(dir / "meta.json", std::ios::binary);
  out << meta.dump(2) << '\n';
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.train = read_split(dir / "train.jsonl");
  ds.test = read_split(dir / "test.jsonl");
  const auto meta_path = dir / "meta.json";
  if (std::filesystem::exists(meta_path)) {
    std::ifstream in(meta_path);
    auto meta = nlohmann::ordered_json::parse(in);
    ds.config = generator_config_from_json(meta.at("generator"));
    ds.mixing = make_mixing(ds.config);
  }
  return ds;
}

}  // namespace eees
