#pragma once

// Objectives for cross-modality image-text metric learning, each returning a
// scalar together with its analytic gradient:
//
//   identity_loss          shared-classifier cross entropy on both modalities
//   wrt_loss               weighted-regularization triplet over (f_v; f_r)
//   contrastive_pair_loss  symmetric image<->text InfoNCE on cosine / tau
//   contrastive_o / _m     one-to-one and many-to-many (fused) alignment
//   kd_loss                fused (teacher, detached) -> single-view MSE
//   cmsp_loss              intra- vs inter-modality image-text distance gap
//   total_loss             weighted sum with a per-term breakdown

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "eees/common.hpp"
#include "eees/numerics.hpp"
#include "eees/random.hpp"

namespace eees {

// Distances below this are treated as zero; the distance gradient there is
// taken to be the zero vector.
inline constexpr double kZeroDistance = 1e-12;

// Four aligned N x d blocks; row i of every block carries labels[i].
struct EmbeddingSet {
  Mat f_v, f_r, t_v, t_r;
  std::vector<int> labels;

  std::size_t n() const { return f_v.rows(); }
  std::size_t dim() const { return f_v.cols(); }

  void validate() const {
    if (!f_v.same_shape(f_r) || !f_v.same_shape(t_v) || !f_v.same_shape(t_r))
      throw DimensionError("EmbeddingSet: blocks disagree in shape (f_v " + f_v.shape_string() +
                           ", f_r " + f_r.shape_string() + ", t_v " + t_v.shape_string() +
                           ", t_r " + t_r.shape_string() + ")");
    if (labels.size() != f_v.rows())
      throw DimensionError("EmbeddingSet: " + std::to_string(labels.size()) + " labels for " +
                           std::to_string(f_v.rows()) + " rows");
  }
};

// Gradient with respect to the four blocks of an EmbeddingSet (or of a
// FusedSet, in which case f_v means fm_v and so on).
struct EmbeddingGrads {
  Mat f_v, f_r, t_v, t_r;

  static EmbeddingGrads zeros(std::size_t n, std::size_t d) {
    return {Mat(n, d), Mat(n, d), Mat(n, d), Mat(n, d)};
  }

  EmbeddingGrads& add_scaled(const EmbeddingGrads& o, double alpha) {
    f_v.add_scaled(o.f_v, alpha);
    f_r.add_scaled(o.f_r, alpha);
    t_v.add_scaled(o.t_v, alpha);
    t_r.add_scaled(o.t_r, alpha);
    return *this;
  }
};

struct LossWeights {
  double lambda1 = 0.25;
  double lambda2 = 0.2;
  double lambda3 = 0.08;
  double lambda4 = 0.01;
  double tau = 0.07;
  int M = 1;
  // Contrastive positives = every same-identity column instead of index i.
  bool label_aware_contrastive = false;
  // Fusion partners may also be drawn from the other modality.
  bool cross_modal_fusion = false;
  // Include the two textual terms in kd_loss.
  bool kd_text = true;
  // Off: the many-to-many term is dropped (reported as 0). The ablation cells
  // without cross-view compensation use this so that M = 0 does not simply
  // count the one-to-one term twice.
  bool many_to_many = true;

  void validate() const {
    auto nonneg = [](double v, const char* name) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(name, "must be a finite value >= 0");
    };
    nonneg(lambda1, "loss.lambda1");
    nonneg(lambda2, "loss.lambda2");
    nonneg(lambda3, "loss.lambda3");
    nonneg(lambda4, "loss.lambda4");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("loss.tau", "must be > 0");
    if (M < 0) throw ConfigError("loss.M", "must be >= 0");
  }
};

struct LossBreakdown {
  double l_id = 0.0;
  double l_wrt = 0.0;
  double l_con_o = 0.0;
  double l_con_m = 0.0;
  double l_kd = 0.0;
  double l_cmsp = 0.0;
  double l_total = 0.0;

  double recompose(const LossWeights& w) const {
    return l_id + w.lambda1 * l_wrt + w.lambda2 * (l_con_o + l_con_m) + w.lambda3 * l_kd +
           w.lambda4 * l_cmsp;
  }
};

// ---------------------------------------------------------------------------
// Identity loss.

struct IdentityLossResult {
  double value = 0.0;
  Mat grad_v, grad_r;
};

inline IdentityLossResult identity_loss(const Mat& logits_v, const Mat& logits_r,
                                        std::span<const int> labels) {
  logits_v.require_same_shape(logits_r, "identity_loss");
  const std::size_t n = logits_v.rows();
  const std::size_t c = logits_v.cols();
  if (c < 2) throw DimensionError("identity_loss: need at least 2 classes");
  if (labels.size() != n)
    throw DimensionError("identity_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw IndexError("identity_loss: label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " outside [0, " + std::to_string(c) + ")");

  IdentityLossResult out{0.0, Mat(n, c), Mat(n, c)};
  const double inv_n = 1.0 / static_cast<double>(n);
  auto one_block = [&](const Mat& logits, Mat& grad) {
    for (std::size_t i = 0; i < n; ++i) {
      auto row = logits.row(i);
      const double lse = log_sum_exp(row);
      const auto y = static_cast<std::size_t>(labels[i]);
      out.value -= (row[y] - lse) * inv_n;
      auto g = grad.row(i);
      for (std::size_t k = 0; k < c; ++k) g[k] = std::exp(row[k] - lse) * inv_n;
      g[y] -= inv_n;
    }
  };
  one_block(logits_v, out.grad_v);
  one_block(logits_r, out.grad_r);
  return out;
}

// ---------------------------------------------------------------------------
// Weighted regularization triplet.

struct MatLossResult {
  double value = 0.0;
  Mat grad;
};

namespace detail {

inline double softplus(double s) { return s > 0.0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }

inline double sigmoid(double s) {
  if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

// Accumulates coef * d||a - b|| / d(a, b) into ga / gb.
inline void add_distance_grad(std::span<const double> a, std::span<const double> b, double dist,
                              double coef, std::span<double> ga, std::span<double> gb) {
  if (dist < kZeroDistance || coef == 0.0) return;
  const double s = coef / dist;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double g = s * (a[k] - b[k]);
    ga[k] += g;
    gb[k] -= g;
  }
}

inline Mat stack_rows(const Mat& top, const Mat& bottom) {
  if (top.cols() != bottom.cols())
    throw DimensionError("stack_rows: " + top.shape_string() + " vs " + bottom.shape_string());
  Mat out(top.rows() + bottom.rows(), top.cols());
  std::copy(top.data().begin(), top.data().end(), out.data().begin());
  std::copy(bottom.data().begin(), bottom.data().end(),
            out.data().begin() + static_cast<std::ptrdiff_t>(top.size()));
  return out;
}

}  // namespace detail

// Per anchor: positives weighted by softmax of their distances, negatives by
// softmax of negated distances; loss is the mean soft-plus of the weighted
// positive minus weighted negative distance. Gradients flow through both the
// distances and the weights.
inline MatLossResult wrt_loss(const Mat& x, std::span<const int> labels) {
  const std::size_t n = x.rows();
  if (labels.size() != n)
    throw DimensionError("wrt_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  Mat dist(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) dist(i, j) = dist(j, i) = euclidean_distance(x.row(i), x.row(j));

  MatLossResult out{0.0, Mat(n, x.cols())};
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<std::size_t> pos, neg;
  Vec wp, wn;
  for (std::size_t i = 0; i < n; ++i) {
    pos.clear();
    neg.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      (labels[j] == labels[i] ? pos : neg).push_back(j);
    }
    if (pos.empty())
      throw ProtocolError("wrt_loss: anchor " + std::to_string(i) + " (label " +
                          std::to_string(labels[i]) + ") has no positive");
    if (neg.empty())
      throw ProtocolError("wrt_loss: anchor " + std::to_string(i) + " (label " +
                          std::to_string(labels[i]) + ") has no negative");

    wp.resize(pos.size());
    wn.resize(neg.size());
    for (std::size_t a = 0; a < pos.size(); ++a) wp[a] = dist(i, pos[a]);
    for (std::size_t a = 0; a < neg.size(); ++a) wn[a] = -dist(i, neg[a]);
    wp = softmax_stable(wp);
    wn = softmax_stable(wn);

    double sp = 0.0, sn = 0.0;
    for (std::size_t a = 0; a < pos.size(); ++a) sp += wp[a] * dist(i, pos[a]);
    for (std::size_t a = 0; a < neg.size(); ++a) sn += wn[a] * dist(i, neg[a]);
    const double s = sp - sn;
    out.value += detail::softplus(s) * inv_n;

    const double g = detail::sigmoid(s) * inv_n;
    auto gi = out.grad.row(i);
    for (std::size_t a = 0; a < pos.size(); ++a) {
      const std::size_t j = pos[a];
      const double coef = g * wp[a] * (1.0 + dist(i, j) - sp);
      detail::add_distance_grad(x.row(i), x.row(j), dist(i, j), coef, gi, out.grad.row(j));
    }
    for (std::size_t a = 0; a < neg.size(); ++a) {
      const std::size_t k = neg[a];
      const double coef = -g * wn[a] * (1.0 - dist(i, k) + sn);
      detail::add_distance_grad(x.row(i), x.row(k), dist(i, k), coef, gi, out.grad.row(k));
    }
  }
  return out;
}

// WRT over the stacked visual blocks (f_v; f_r), gradients split back.
struct VisualPairGrads {
  double value = 0.0;
  Mat grad_v, grad_r;
};

inline VisualPairGrads wrt_loss(const Mat& f_v, const Mat& f_r, std::span<const int> labels) {
  f_v.require_same_shape(f_r, "wrt_loss");
  std::vector<int> stacked(labels.begin(), labels.end());
  stacked.insert(stacked.end(), labels.begin(), labels.end());
  auto r = wrt_loss(detail::stack_rows(f_v, f_r), stacked);
  const std::size_t n = f_v.rows();
  VisualPairGrads out{r.value, Mat(n, f_v.cols()), Mat(n, f_v.cols())};
  const auto half = static_cast<std::ptrdiff_t>(f_v.size());
  std::copy(r.grad.data().begin(), r.grad.data().begin() + half, out.grad_v.data().begin());
  std::copy(r.grad.data().begin() + half, r.grad.data().end(), out.grad_r.data().begin());
  return out;
}

// ---------------------------------------------------------------------------
// Contrastive image-text alignment.

struct PairLossResult {
  double value = 0.0;
  Mat grad_f, grad_t;
};

// S_ij = cos(F_i, T_j) / tau. Returns the image->text row term plus the
// text->image column term. With `labels` empty the positive of row i is
// column i; otherwise every column sharing row i's label is a positive and the
// term is -log of the total positive probability mass.
inline PairLossResult contrastive_pair_loss(const Mat& f, const Mat& t, double tau,
                                            std::span<const int> labels = {}) {
  f.require_same_shape(t, "contrastive_pair_loss");
  const std::size_t n = f.rows();
  const std::size_t d = f.cols();
  if (n == 0) throw DimensionError("contrastive_pair_loss: empty batch");
  if (!(tau > 0.0)) throw ProtocolError("contrastive_pair_loss: tau must be > 0");
  if (!labels.empty() && labels.size() != n)
    throw DimensionError("contrastive_pair_loss: label count mismatch");

  Vec nf(n), nt(n);
  Mat fh(n, d), th(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    nf[i] = norm(f.row(i));
    nt[i] = norm(t.row(i));
    if (nf[i] == 0.0)
      throw DegenerateInputError("contrastive_pair_loss: image row " + std::to_string(i) +
                                 " has zero norm");
    if (nt[i] == 0.0)
      throw DegenerateInputError("contrastive_pair_loss: text row " + std::to_string(i) +
                                 " has zero norm");
    for (std::size_t k = 0; k < d; ++k) {
      fh(i, k) = f(i, k) / nf[i];
      th(i, k) = t(i, k) / nt[i];
    }
  }

  Mat s(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) s(i, j) = dot(fh.row(i), th.row(j)) / tau;

  auto positive = [&](std::size_t a, std::size_t b) {
    return labels.empty() ? a == b : labels[a] == labels[b];
  };

  const double inv_n = 1.0 / static_cast<double>(n);
  double value = 0.0;
  Mat gs(n, n);  // dL/dS
  Vec buf(n), pos_buf;
  for (int direction = 0; direction < 2; ++direction) {
    for (std::size_t i = 0; i < n; ++i) {
      // direction 0: row i of S (image i against all texts)
      // direction 1: column i of S (text i against all images)
      pos_buf.clear();
      for (std::size_t j = 0; j < n; ++j) {
        buf[j] = direction == 0 ? s(i, j) : s(j, i);
        if (positive(i, j)) pos_buf.push_back(buf[j]);
      }
      const double lse_all = log_sum_exp(buf);
      const double lse_pos = log_sum_exp(pos_buf);
      value -= (lse_pos - lse_all) * inv_n;
      for (std::size_t j = 0; j < n; ++j) {
        double g = std::exp(buf[j] - lse_all);
        if (positive(i, j)) g -= std::exp(buf[j] - lse_pos);
        (direction == 0 ? gs(i, j) : gs(j, i)) += g * inv_n;
      }
    }
  }

  // dL/dfh_i = sum_j gs_ij th_j / tau ; dL/dth_j = sum_i gs_ij fh_i / tau
  Mat gfh(n, d), gth(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double g = gs(i, j) / tau;
      if (g == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) {
        gfh(i, k) += g * th(j, k);
        gth(j, k) += g * fh(i, k);
      }
    }

  // Back through x / ||x||: (g - (g . xh) xh) / ||x||.
  auto unnormalize = [&](const Mat& gh, const Mat& xh, const Vec& nx) {
    Mat gx(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      const double proj = dot(gh.row(i), xh.row(i));
      for (std::size_t k = 0; k < d; ++k) gx(i, k) = (gh(i, k) - proj * xh(i, k)) / nx[i];
    }
    return gx;
  };
  return {value, unnormalize(gfh, fh, nf), unnormalize(gth, th, nt)};
}

struct SetLossResult {
  double value = 0.0;
  EmbeddingGrads grad;
};

// One-to-one alignment: each modality against its own texts only.
inline SetLossResult contrastive_o(const EmbeddingSet& emb, double tau, bool label_aware = false) {
  emb.validate();
  std::span<const int> labels;
  if (label_aware) labels = emb.labels;
  auto v = contrastive_pair_loss(emb.f_v, emb.t_v, tau, labels);
  auto r = contrastive_pair_loss(emb.f_r, emb.t_r, tau, labels);
  return {v.value + r.value,
          {std::move(v.grad_f), std::move(r.grad_f), std::move(v.grad_t), std::move(r.grad_t)}};
}

// ---------------------------------------------------------------------------
// Multi-view fusion.

struct PartnerRef {
  std::size_t row = 0;
  bool other_modality = false;

  bool operator==(const PartnerRef&) const = default;
};

// Sampled fusion partners. partners_v[i] feeds fm_v[i] and tm_v[i] (the same
// indices for the image block and its paired text block); partners_r likewise.
struct FusionPlan {
  int M = 0;
  std::vector<std::vector<PartnerRef>> partners_v, partners_r;
  std::size_t fallback_rows = 0;  // rows that had no candidate and fused with themselves
};

struct FusedSet {
  Mat fm_v, fm_r, tm_v, tm_r;
  int M = 0;
  FusionPlan plan;
};

// candidates[i]: same-identity, same-modality row indices other than i.
inline FusionPlan plan_fusion(std::span<const int> labels,
                              const std::vector<std::vector<std::size_t>>& candidates, int M,
                              std::uint64_t seed, bool cross_modal = false,
                              bool allow_fallback = true) {
  const std::size_t n = labels.size();
  if (M < 0) throw ProtocolError("plan_fusion: M must be >= 0");
  if (candidates.size() != n)
    throw DimensionError("plan_fusion: " + std::to_string(candidates.size()) +
                         " candidate lists for " + std::to_string(n) + " rows");
  FusionPlan plan;
  plan.M = M;
  plan.partners_v.resize(n);
  plan.partners_r.resize(n);
  if (M == 0) return plan;

  std::vector<PartnerRef> pool;
  for (int side = 0; side < 2; ++side) {
    Rng rng(derive_seed(seed, {0xF05E, static_cast<std::uint64_t>(side)}));
    auto& partners = side == 0 ? plan.partners_v : plan.partners_r;
    for (std::size_t i = 0; i < n; ++i) {
      pool.clear();
      for (std::size_t c : candidates[i]) {
        if (c >= n || c == i || labels[c] != labels[i])
          throw ProtocolError("plan_fusion: invalid candidate " + std::to_string(c) +
                              " for row " + std::to_string(i));
        pool.push_back({c, false});
      }
      if (cross_modal)
        for (std::size_t j = 0; j < n; ++j)
          if (labels[j] == labels[i]) pool.push_back({j, true});

      auto& out = partners[i];
      if (pool.empty()) {
        if (!allow_fallback)
          throw ProtocolError("plan_fusion: row " + std::to_string(i) +
                              " has no fusion candidate");
        out.assign(static_cast<std::size_t>(M), PartnerRef{i, false});
        if (side == 0) ++plan.fallback_rows;
      } else if (pool.size() >= static_cast<std::size_t>(M)) {
        // partial Fisher-Yates: M distinct partners
        for (std::size_t m = 0; m < static_cast<std::size_t>(M); ++m) {
          const std::size_t pick = m + rng.index(pool.size() - m);
          std::swap(pool[m], pool[pick]);
          out.push_back(pool[m]);
        }
      } else {
        for (int m = 0; m < M; ++m) out.push_back(pool[rng.index(pool.size())]);
      }
    }
  }
  return plan;
}

inline FusedSet fuse(const EmbeddingSet& emb, const FusionPlan& plan) {
  emb.validate();
  const std::size_t n = emb.n();
  if (plan.partners_v.size() != n || plan.partners_r.size() != n)
    throw DimensionError("fuse: plan built for a different batch size");
  FusedSet out{emb.f_v, emb.f_r, emb.t_v, emb.t_r, plan.M, plan};
  if (plan.M == 0) return out;
  const double scale = 1.0 / (plan.M + 1.0);
  auto fuse_side = [&](const Mat& img_same, const Mat& img_other, const Mat& txt_same,
                       const Mat& txt_other, const std::vector<std::vector<PartnerRef>>& partners,
                       Mat& img_out, Mat& txt_out) {
    for (std::size_t i = 0; i < n; ++i) {
      auto fi = img_out.row(i);
      auto ti = txt_out.row(i);
      for (const auto& p : partners[i]) {
        auto fp = (p.other_modality ? img_other : img_same).row(p.row);
        auto tp = (p.other_modality ? txt_other : txt_same).row(p.row);
        for (std::size_t k = 0; k < fi.size(); ++k) {
          fi[k] += fp[k];
          ti[k] += tp[k];
        }
      }
      for (auto& x : fi) x *= scale;
      for (auto& x : ti) x *= scale;
    }
  };
  fuse_side(emb.f_v, emb.f_r, emb.t_v, emb.t_r, plan.partners_v, out.fm_v, out.tm_v);
  fuse_side(emb.f_r, emb.f_v, emb.t_r, emb.t_v, plan.partners_r, out.fm_r, out.tm_r);
  return out;
}

inline FusedSet fuse_multiview(const EmbeddingSet& emb,
                               const std::vector<std::vector<std::size_t>>& candidates, int M,
                               std::uint64_t seed, bool cross_modal = false,
                               bool allow_fallback = true) {
  auto plan = plan_fusion(emb.labels, candidates, M, seed, cross_modal, allow_fallback);
  if (plan.fallback_rows > 0)
    std::cerr << "warning: fuse_multiview: " << plan.fallback_rows
              << " row(s) without fusion candidates fused with themselves\n";
  return fuse(emb, plan);
}

// Maps gradients on the fused blocks back onto the source blocks.
inline EmbeddingGrads backprop_fusion(const FusionPlan& plan, const EmbeddingGrads& grad_fused) {
  EmbeddingGrads g = grad_fused;
  if (plan.M == 0) return g;
  const double scale = 1.0 / (plan.M + 1.0);
  for (Mat* m : {&g.f_v, &g.f_r, &g.t_v, &g.t_r}) *m *= scale;
  auto side = [&](const Mat& gimg, const Mat& gtxt,
                  const std::vector<std::vector<PartnerRef>>& partners, Mat& img_same,
                  Mat& img_other, Mat& txt_same, Mat& txt_other) {
    for (std::size_t i = 0; i < partners.size(); ++i)
      for (const auto& p : partners[i]) {
        auto gi = gimg.row(i);
        auto ti = gtxt.row(i);
        auto dst_f = (p.other_modality ? img_other : img_same).row(p.row);
        auto dst_t = (p.other_modality ? txt_other : txt_same).row(p.row);
        for (std::size_t k = 0; k < gi.size(); ++k) {
          dst_f[k] += scale * gi[k];
          dst_t[k] += scale * ti[k];
        }
      }
  };
  side(grad_fused.f_v, grad_fused.t_v, plan.partners_v, g.f_v, g.f_r, g.t_v, g.t_r);
  side(grad_fused.f_r, grad_fused.t_r, plan.partners_r, g.f_r, g.f_v, g.t_r, g.t_v);
  return g;
}

struct FusedLossResult {
  double value = 0.0;
  EmbeddingGrads grad_fused;  // w.r.t. fm_v, fm_r, tm_v, tm_r
  EmbeddingGrads grad;        // pulled back through the fusion average
};

// Many-to-many alignment on the fused blocks.
inline FusedLossResult contrastive_m(const FusedSet& fused, double tau,
                                     std::span<const int> labels = {}) {
  auto v = contrastive_pair_loss(fused.fm_v, fused.tm_v, tau, labels);
  auto r = contrastive_pair_loss(fused.fm_r, fused.tm_r, tau, labels);
  FusedLossResult out;
  out.value = v.value + r.value;
  out.grad_fused = {std::move(v.grad_f), std::move(r.grad_f), std::move(v.grad_t),
                    std::move(r.grad_t)};
  out.grad = backprop_fusion(fused.plan, out.grad_fused);
  return out;
}

// ---------------------------------------------------------------------------
// Distillation and purification.

// Mean squared residual between the fused teacher and the single-view student
// for each block. The teacher is a constant: gradients reach only `emb`.
inline SetLossResult kd_loss(const EmbeddingSet& emb, const FusedSet& fused,
                             bool include_text = true) {
  emb.validate();
  const std::size_t n = emb.n();
  const std::size_t d = emb.dim();
  for (const Mat* m : {&fused.fm_v, &fused.fm_r, &fused.tm_v, &fused.tm_r})
    if (m->rows() != n || m->cols() != d)
      throw DimensionError("kd_loss: fused block " + m->shape_string() + " vs embeddings " +
                           emb.f_v.shape_string());
  SetLossResult out{0.0, EmbeddingGrads::zeros(n, d)};
  const double inv_n = 1.0 / static_cast<double>(n);
  auto term = [&](const Mat& student, const Mat& teacher, Mat& grad) {
    for (std::size_t i = 0; i < student.size(); ++i) {
      const double r = student.data()[i] - teacher.data()[i];
      out.value += r * r * inv_n;
      grad.data()[i] = 2.0 * r * inv_n;
    }
  };
  term(emb.f_v, fused.fm_v, out.grad.f_v);
  term(emb.f_r, fused.fm_r, out.grad.f_r);
  if (include_text) {
    term(emb.t_v, fused.tm_v, out.grad.t_v);
    term(emb.t_r, fused.tm_r, out.grad.t_r);
  }
  return out;
}

// (1/N) sum (|f_v - t_v| - |f_v - t_r|)^2 + (1/N) sum (|f_r - t_r| - |f_r - t_v|)^2
inline SetLossResult cmsp_loss(const EmbeddingSet& emb) {
  emb.validate();
  const std::size_t n = emb.n();
  if (n == 0) throw DimensionError("cmsp_loss: empty batch");
  SetLossResult out{0.0, EmbeddingGrads::zeros(n, emb.dim())};
  const double inv_n = 1.0 / static_cast<double>(n);
  auto& g = out.grad;
  for (std::size_t i = 0; i < n; ++i) {
    const double d_vv = euclidean_distance(emb.f_v.row(i), emb.t_v.row(i));
    const double d_vr = euclidean_distance(emb.f_v.row(i), emb.t_r.row(i));
    const double d_rr = euclidean_distance(emb.f_r.row(i), emb.t_r.row(i));
    const double d_rv = euclidean_distance(emb.f_r.row(i), emb.t_v.row(i));
    const double gap_v = d_vv - d_vr;
    const double gap_r = d_rr - d_rv;
    out.value += (gap_v * gap_v + gap_r * gap_r) * inv_n;

    const double cv = 2.0 * gap_v * inv_n;
    const double cr = 2.0 * gap_r * inv_n;
    detail::add_distance_grad(emb.f_v.row(i), emb.t_v.row(i), d_vv, cv, g.f_v.row(i), g.t_v.row(i));
    detail::add_distance_grad(emb.f_v.row(i), emb.t_r.row(i), d_vr, -cv, g.f_v.row(i), g.t_r.row(i));
    detail::add_distance_grad(emb.f_r.row(i), emb.t_r.row(i), d_rr, cr, g.f_r.row(i), g.t_r.row(i));
    detail::add_distance_grad(emb.f_r.row(i), emb.t_v.row(i), d_rv, -cr, g.f_r.row(i), g.t_v.row(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Total objective.

struct TotalLossResult {
  LossBreakdown breakdown;
  EmbeddingGrads grad;        // w.r.t. the source embeddings
  Mat grad_logits_v, grad_logits_r;
  EmbeddingGrads grad_fused;  // portion routed through the fused blocks
};

// `fused` must be fuse(emb, fused.plan). The distillation target defaults to
// `fused` itself (held constant); pass `kd_teacher` to pin it to a different
// snapshot, e.g. when perturbing `emb` for finite differences.
inline TotalLossResult total_loss(const EmbeddingSet& emb, const FusedSet& fused,
                                  const Mat& logits_v, const Mat& logits_r, const LossWeights& w,
                                  const FusedSet* kd_teacher = nullptr) {
  emb.validate();
  std::span<const int> con_labels;
  if (w.label_aware_contrastive) con_labels = emb.labels;

  auto id = identity_loss(logits_v, logits_r, emb.labels);
  auto wrt = wrt_loss(emb.f_v, emb.f_r, emb.labels);
  auto con_o = contrastive_o(emb, w.tau, w.label_aware_contrastive);
  FusedLossResult con_m;
  if (w.many_to_many) {
    con_m = contrastive_m(fused, w.tau, con_labels);
  } else {
    con_m.grad = EmbeddingGrads::zeros(emb.n(), emb.dim());
    con_m.grad_fused = EmbeddingGrads::zeros(emb.n(), emb.dim());
  }
  auto kd = kd_loss(emb, kd_teacher ? *kd_teacher : fused, w.kd_text);
  auto cmsp = cmsp_loss(emb);

  TotalLossResult out;
  auto& b = out.breakdown;
  b.l_id = id.value;
  b.l_wrt = wrt.value;
  b.l_con_o = con_o.value;
  b.l_con_m = con_m.value;
  b.l_kd = kd.value;
  b.l_cmsp = cmsp.value;
  b.l_total = b.recompose(w);

  const std::size_t n = emb.n();
  const std::size_t d = emb.dim();
  out.grad = EmbeddingGrads::zeros(n, d);
  out.grad.f_v.add_scaled(wrt.grad_v, w.lambda1);
  out.grad.f_r.add_scaled(wrt.grad_r, w.lambda1);
  out.grad.add_scaled(con_o.grad, w.lambda2);
  out.grad.add_scaled(con_m.grad, w.lambda2);
  out.grad.add_scaled(kd.grad, w.lambda3);
  out.grad.add_scaled(cmsp.grad, w.lambda4);
  out.grad_logits_v = std::move(id.grad_v);
  out.grad_logits_r = std::move(id.grad_r);
  out.grad_fused = EmbeddingGrads::zeros(n, d);
  out.grad_fused.add_scaled(con_m.grad_fused, w.lambda2);
  return out;
}

}  // namespace eees
