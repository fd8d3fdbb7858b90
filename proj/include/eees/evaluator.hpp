#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "eees/common.hpp"
#include "eees/model.hpp"
#include "eees/numerics.hpp"
#include "eees/random.hpp"
#include "eees/synthdata.hpp"

namespace eees {

enum class Shots { Single, Multi };

inline std::string_view to_string(Shots s) { return s == Shots::Single ? "single" : "multi"; }

inline Shots parse_shots(std::string_view s) {
  if (s == "single") return Shots::Single;
  if (s == "multi") return Shots::Multi;
  throw ConfigError("eval.shots", "expected single or multi, got '" + std::string(s) + "'");
}

struct Protocol {
  Modality query = Modality::R;
  Modality gallery = Modality::V;
  Shots shots = Shots::Single;
  std::uint64_t seed = 0;

  void validate() const {
    if (query == gallery)
      throw ConfigError("eval.gallery_modality", "query and gallery modality must differ");
  }

  // e.g. "R2V-single"
  std::string name() const {
    return std::string(to_string(query)) + "2" + std::string(to_string(gallery)) + "-" +
           std::string(to_string(shots));
  }
};

struct GapDiagnostics {
  double intra = 0.0;  // mean same-identity, same-modality distance
  double inter = 0.0;  // mean same-identity, cross-modality distance
  double gap_ratio = 0.0;
  std::size_t skipped_identities = 0;
};

struct RetrievalReport {
  Protocol protocol;
  std::vector<double> cmc;  // cmc[k-1] = rank-k accuracy
  double map = 0.0;
  std::size_t n_queries = 0;   // queries scored
  std::size_t n_excluded = 0;  // queries without a gallery match
  std::size_t n_gallery = 0;
  GapDiagnostics gap;
  std::optional<double> conflict_sensitivity;

  double rank(std::size_t k) const {
    if (cmc.empty()) return 0.0;
    return cmc[std::min(k, cmc.size()) - 1];
  }
};

// Cosine similarity used for ranking; a zero-norm embedding scores 0 against
// everything instead of raising.
inline double retrieval_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

struct RankingScore {
  std::vector<double> cmc;
  double map = 0.0;
  std::size_t n_queries = 0;
  std::size_t n_excluded = 0;
};

// Ranks the gallery per query by similarity (descending, ties broken by
// gallery sample id ascending) and scores CMC up to min(20, gallery size) and
// mAP. Queries whose identity is absent from the gallery are excluded.
inline RankingScore score_rankings(const Mat& query_emb, std::span<const int> query_ids,
                                   const Mat& gallery_emb, std::span<const int> gallery_ids,
                                   std::span<const int> gallery_sample_ids,
                                   std::size_t max_rank = 20) {
  const std::size_t nq = query_emb.rows();
  const std::size_t ng = gallery_emb.rows();
  if (query_ids.size() != nq || gallery_ids.size() != ng || gallery_sample_ids.size() != ng)
    throw DimensionError("score_rankings: id lists do not match embedding rows");
  if (ng == 0) throw ProtocolError("score_rankings: empty gallery");
  if (nq > 0 && query_emb.cols() != gallery_emb.cols())
    throw DimensionError("score_rankings: query " + query_emb.shape_string() + " vs gallery " +
                         gallery_emb.shape_string());

  const std::size_t k_max = std::min(max_rank, ng);
  RankingScore out;
  out.cmc.assign(k_max, 0.0);
  std::vector<std::size_t> order(ng);
  Vec sim(ng);
  for (std::size_t q = 0; q < nq; ++q) {
    const bool has_match =
        std::find(gallery_ids.begin(), gallery_ids.end(), query_ids[q]) != gallery_ids.end();
    if (!has_match) {
      ++out.n_excluded;
      continue;
    }
    for (std::size_t g = 0; g < ng; ++g)
      sim[g] = retrieval_similarity(query_emb.row(q), gallery_emb.row(g));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (sim[a] != sim[b]) return sim[a] > sim[b];
      return gallery_sample_ids[a] < gallery_sample_ids[b];
    });

    std::size_t first_hit = ng;
    std::size_t hits = 0;
    double ap = 0.0;
    for (std::size_t r = 0; r < ng; ++r) {
      if (gallery_ids[order[r]] != query_ids[q]) continue;
      if (first_hit == ng) first_hit = r;
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
    for (std::size_t k = first_hit; k < k_max; ++k) out.cmc[k] += 1.0;
    out.map += ap / static_cast<double>(hits);
    ++out.n_queries;
  }
  if (out.n_queries == 0)
    throw ProtocolError("evaluate: all " + std::to_string(nq) +
                        " queries excluded (no gallery match)");
  for (auto& v : out.cmc) v /= static_cast<double>(out.n_queries);
  out.map /= static_cast<double>(out.n_queries);
  return out;
}

// Indices (into split.samples) forming the gallery. Single-shot keeps one
// sample per identity; the choice depends only on the seed and the sample ids,
// not on the order of the split.
inline std::vector<std::size_t> select_gallery(const Split& split, const Protocol& p) {
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < split.samples.size(); ++i)
    if (split.samples[i].modality == p.gallery) by_id[split.samples[i].identity].push_back(i);
  std::vector<std::size_t> out;
  for (auto& [id, idx] : by_id) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return split.samples[a].sample_id < split.samples[b].sample_id;
    });
    if (p.shots == Shots::Multi) {
      out.insert(out.end(), idx.begin(), idx.end());
    } else {
      Rng rng(derive_seed(p.seed, {static_cast<std::uint64_t>(id)}));
      out.push_back(idx[rng.index(idx.size())]);
    }
  }
  return out;
}

// Embeds the listed samples with the visual encoder.
inline Mat embed_samples(const ModelParams& mp, const Split& split,
                         const std::vector<std::size_t>& idx) {
  Mat out(idx.size(), static_cast<std::size_t>(mp.config.d_embed));
  for (Modality m : {Modality::V, Modality::R}) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (split.samples[idx[i]].modality == m) rows.push_back(i);
    if (rows.empty()) continue;
    Mat x(rows.size(), split.samples[idx[rows[0]]].x_raw.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto& raw = split.samples[idx[rows[r]]].x_raw;
      if (raw.size() != x.cols()) throw DimensionError("embed_samples: ragged x_raw");
      std::copy(raw.begin(), raw.end(), x.row(r).begin());
    }
    Mat f = encode_visual_batch(mp, x, m).out;
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(f.row(r).begin(), f.row(r).end(), out.row(rows[r]).begin());
  }
  return out;
}

// Mean cross-modality vs intra-modality distance over same-identity pairs.
// `emb` row i belongs to split.samples[i].
inline GapDiagnostics modality_gap(const Split& split, const Mat& emb) {
  std::map<int, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> by_id;
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    auto& e = by_id[split.samples[i].identity];
    (split.samples[i].modality == Modality::V ? e.first : e.second).push_back(i);
  }
  GapDiagnostics g;
  double intra_sum = 0.0, inter_sum = 0.0;
  std::size_t intra_n = 0, inter_n = 0;
  auto by_sample_id = [&](std::size_t a, std::size_t b) {
    return split.samples[a].sample_id < split.samples[b].sample_id;
  };
  for (auto& [id, vr] : by_id) {
    auto& [vs, rs] = vr;
    std::sort(vs.begin(), vs.end(), by_sample_id);
    std::sort(rs.begin(), rs.end(), by_sample_id);
    if (vs.empty() || rs.empty()) {
      ++g.skipped_identities;
      continue;
    }
    for (std::size_t a : vs)
      for (std::size_t b : rs) {
        inter_sum += euclidean_distance(emb.row(a), emb.row(b));
        ++inter_n;
      }
    for (const auto* group : {&vs, &rs})
      for (std::size_t a = 0; a < group->size(); ++a)
        for (std::size_t b = a + 1; b < group->size(); ++b) {
          intra_sum += euclidean_distance(emb.row((*group)[a]), emb.row((*group)[b]));
          ++intra_n;
        }
  }
  if (inter_n == 0) throw ProtocolError("modality_gap: no identity has both modalities");
  g.inter = inter_sum / static_cast<double>(inter_n);
  g.intra = intra_n ? intra_sum / static_cast<double>(intra_n) : 0.0;
  if (g.intra > 0.0)
    g.gap_ratio = g.inter / g.intra;
  else
    g.gap_ratio = g.inter == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  return g;
}

inline GapDiagnostics modality_gap(const ModelParams& mp, const Split& split) {
  std::vector<std::size_t> all(split.samples.size());
  std::iota(all.begin(), all.end(), 0);
  return modality_gap(split, embed_samples(mp, split, all));
}

struct SensitivityOptions {
  double epsilon = 1e-3;
  int directions = 4;
  std::uint64_t seed = 0;
};

// Mean over samples (and random unit directions u) of
//   || embed(x_raw + W_m^conflict * eps*u) - embed(x_raw) || / eps
// where W_m^conflict is the conflict-latent block of the sample's mixing
// matrix: how strongly embeddings respond to the modality-conflicting channel.
template <class EmbedFn>
double conflict_sensitivity(EmbedFn&& embed, const GeneratorConfig& cfg,
                            const MixingMatrices* mixing, const Split& split,
                            const SensitivityOptions& opt = {}) {
  if (!mixing) throw ProtocolError("conflict_sensitivity: generator metadata (mixing) missing");
  if (split.samples.empty()) throw ProtocolError("conflict_sensitivity: empty split");
  const auto offset = static_cast<std::size_t>(cfg.d_id + cfg.d_view);
  const auto dc = static_cast<std::size_t>(cfg.d_conflict);
  Rng rng(derive_seed(opt.seed, {0xC0F1}));
  double total = 0.0;
  std::size_t count = 0;
  Vec u(dc);
  for (const auto& s : split.samples) {
    const Mat& w = mixing->visual(s.modality);
    if (w.rows() != s.x_raw.size() || w.cols() < offset + dc)
      throw DimensionError("conflict_sensitivity: mixing matrix does not match sample dims");
    const Vec base = embed(std::span<const double>(s.x_raw), s.modality);
    for (int k = 0; k < opt.directions; ++k) {
      double nu = 0.0;
      while (nu == 0.0) {
        for (auto& v : u) v = rng.normal();
        nu = norm(u);
      }
      Vec x = s.x_raw;
      for (std::size_t r = 0; r < x.size(); ++r) {
        double delta = 0.0;
        for (std::size_t c = 0; c < dc; ++c) delta += w(r, offset + c) * u[c] / nu;
        x[r] += opt.epsilon * delta;
      }
      const Vec moved = embed(std::span<const double>(x), s.modality);
      total += euclidean_distance(moved, base) / opt.epsilon;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

inline double conflict_sensitivity(const ModelParams& mp, const Dataset& ds, const Split& split,
                                   const SensitivityOptions& opt = {}) {
  return conflict_sensitivity(
      [&mp](std::span<const double> x, Modality m) { return encode_visual(mp, x, m); },
      ds.config, ds.mixing ? &*ds.mixing : nullptr, split, opt);
}

// Embeds queries and gallery with the visual encoder only and scores them.
// When `source` carries generator metadata the conflict sensitivity is
// filled in too.
inline RetrievalReport evaluate(const ModelParams& mp, const Split& test, const Protocol& p,
                                const Dataset* source = nullptr) {
  p.validate();
  if (test.samples.empty()) throw ProtocolError("evaluate: empty test split");
  std::vector<std::size_t> q_idx;
  for (std::size_t i = 0; i < test.samples.size(); ++i)
    if (test.samples[i].modality == p.query) q_idx.push_back(i);
  // Fixed query order keeps the mAP sum independent of how the split is stored.
  std::sort(q_idx.begin(), q_idx.end(), [&](std::size_t a, std::size_t b) {
    return test.samples[a].sample_id < test.samples[b].sample_id;
  });
  const auto g_idx = select_gallery(test, p);

  std::vector<int> q_ids, g_ids, g_sids;
  for (auto i : q_idx) q_ids.push_back(test.samples[i].identity);
  for (auto i : g_idx) {
    g_ids.push_back(test.samples[i].identity);
    g_sids.push_back(test.samples[i].sample_id);
  }
  auto score = score_rankings(embed_samples(mp, test, q_idx), q_ids, embed_samples(mp, test, g_idx),
                              g_ids, g_sids);
  RetrievalReport rep;
  rep.protocol = p;
  rep.cmc = std::move(score.cmc);
  rep.map = score.map;
  rep.n_queries = score.n_queries;
  rep.n_excluded = score.n_excluded;
  rep.n_gallery = g_idx.size();
  rep.gap = modality_gap(mp, test);
  if (source && source->mixing) rep.conflict_sensitivity = conflict_sensitivity(mp, *source, test);
  return rep;
}

// ---------------------------------------------------------------------------
// Output formats.

inline nlohmann::ordered_json to_json(const RetrievalReport& r) {
  nlohmann::ordered_json j = {
      {"kind", "eees.report"},
      {"protocol", r.protocol.name()},
      {"query_modality", std::string(to_string(r.protocol.query))},
      {"gallery_modality", std::string(to_string(r.protocol.gallery))},
      {"shots", std::string(to_string(r.protocol.shots))},
      {"seed", r.protocol.seed},
      {"cmc", r.cmc},
      {"map", r.map},
      {"n_queries", r.n_queries},
      {"n_excluded", r.n_excluded},
      {"n_gallery", r.n_gallery},
      {"diagnostics",
       {{"intra_distance", r.gap.intra},
        {"inter_distance", r.gap.inter},
        {"gap_ratio", r.gap.gap_ratio}}}};
  if (r.conflict_sensitivity) j["diagnostics"]["conflict_sensitivity"] = *r.conflict_sensitivity;
  return j;
}

inline constexpr const char* kReportCsvVersion = "# eees report csv v1";
inline constexpr const char* kReportCsvHeader =
    "protocol,seed,rank1,rank5,rank10,map,gap_ratio,conflict_sensitivity";

// Shortest text that parses back to the same double.
inline std::string format_number(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string csv_row(const RetrievalReport& r) {
  std::ostringstream os;
  os << r.protocol.name() << ',' << r.protocol.seed << ',' << format_number(r.rank(1)) << ','
     << format_number(r.rank(5)) << ',' << format_number(r.rank(10)) << ','
     << format_number(r.map) << ',' << format_number(r.gap.gap_ratio) << ','
     << (r.conflict_sensitivity ? format_number(*r.conflict_sensitivity) : std::string());
  return os.str();
}

}  // namespace eees
