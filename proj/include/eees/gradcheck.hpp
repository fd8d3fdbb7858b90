#pragma once

// Seeded central-difference checks of every loss gradient and of the whole
// model. Each loss is checked with respect to the embedding blocks it reads;
// the model check perturbs the encoder parameters themselves.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "eees/losses.hpp"
#include "eees/model.hpp"
#include "eees/numerics.hpp"
#include "eees/random.hpp"
#include "eees/trainer.hpp"

namespace eees {

inline const std::vector<std::string>& gradcheck_loss_names() {
  static const std::vector<std::string> names = {"identity", "wrt", "contrastive_o",
                                                 "contrastive_m", "kd", "cmsp",
                                                 "total", "model"};
  return names;
}

struct GradCheckOptions {
  std::uint64_t seed = 0;
  int batches = 50;
  std::vector<int> sizes_n = {2, 4, 8};
  std::vector<int> sizes_d = {4, 8};
  double h = 1e-5;
  double tol = 1e-4;
  // Test hook: the analytic gradient of this loss is perturbed before checking.
  std::string corrupt;

  void validate() const {
    if (batches <= 0) throw ConfigError("gradcheck.batches", "must be positive");
    if (sizes_n.empty()) throw ConfigError("gradcheck.n", "needs at least one batch size");
    if (sizes_d.empty()) throw ConfigError("gradcheck.d", "needs at least one dimension");
    for (int n : sizes_n)
      if (n < 2) throw ConfigError("gradcheck.n", "batch sizes must be >= 2");
    for (int d : sizes_d)
      if (d < 1) throw ConfigError("gradcheck.d", "dimensions must be >= 1");
    if (!(h >= 1e-7 && h <= 1e-3)) throw ConfigError("gradcheck.h", "must lie in [1e-7, 1e-3]");
    if (!(tol > 0.0)) throw ConfigError("gradcheck.tol", "must be > 0");
    if (!corrupt.empty()) {
      bool known = false;
      for (const auto& n : gradcheck_loss_names()) known = known || n == corrupt;
      if (!known) throw ConfigError("gradcheck.corrupt", "unknown loss '" + corrupt + "'");
    }
  }
};

struct LossCheckSummary {
  std::string loss;
  int batches = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
  bool passed = true;
  std::string first_failure;
};

namespace gc_detail {

struct RandomBatch {
  std::size_t n = 0, d = 0;
  int n_classes = 0;
  std::vector<int> labels;
  std::vector<std::vector<std::size_t>> candidates;
  bool label_aware = false;
  bool cross_modal = false;
  int M = 1;
  std::uint64_t fusion_seed = 0;
};

inline RandomBatch make_batch(const GradCheckOptions& opt, int b, Rng& rng) {
  RandomBatch rb;
  rb.n = static_cast<std::size_t>(opt.sizes_n[static_cast<std::size_t>(b) % opt.sizes_n.size()]);
  rb.d = static_cast<std::size_t>(
      opt.sizes_d[(static_cast<std::size_t>(b) / opt.sizes_n.size()) % opt.sizes_d.size()]);
  const int n_ids = std::max<int>(2, static_cast<int>(rb.n) / 2);
  rb.n_classes = n_ids + 1;
  for (std::size_t i = 0; i < rb.n; ++i) rb.labels.push_back(static_cast<int>(i) % n_ids);
  rb.candidates.resize(rb.n);
  for (std::size_t i = 0; i < rb.n; ++i)
    for (std::size_t j = 0; j < rb.n; ++j)
      if (j != i && rb.labels[j] == rb.labels[i]) rb.candidates[i].push_back(j);
  rb.label_aware = b % 2 == 1;
  rb.cross_modal = b % 3 == 2;
  rb.M = 1 + b % 3;
  rb.fusion_seed = rng.next();
  return rb;
}

inline Mat random_mat(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Mat m(r, c);
  for (auto& v : m.data()) v = scale * rng.normal();
  return m;
}

inline EmbeddingSet embeddings_of(const ParamStore& ps, const std::vector<int>& labels) {
  return {ps.value("f_v"), ps.value("f_r"), ps.value("t_v"), ps.value("t_r"), labels};
}

inline void set_grads(ParamStore& ps, const EmbeddingGrads& g) {
  ps.grad("f_v") = g.f_v;
  ps.grad("f_r") = g.f_r;
  ps.grad("t_v") = g.t_v;
  ps.grad("t_r") = g.t_r;
}

inline void corrupt_first(ParamStore& ps) {
  auto& p = ps.params().front();
  if (!p.grad.data().empty()) p.grad.data()[0] += 0.5;
}

inline void merge(LossCheckSummary& s, const GradCheckReport& r, int batch) {
  ++s.batches;
  s.checked += r.checked;
  s.skipped += r.skipped;
  s.max_rel_error = std::max(s.max_rel_error, r.max_error());
  if (r.passed()) return;
  if (s.passed) {
    if (!r.failure.empty()) {
      s.first_failure = "batch " + std::to_string(batch) + ": " + r.failure;
    } else if (r.nonfinite) {
      s.first_failure = "batch " + std::to_string(batch) + ": non-finite loss";
    } else {
      const auto& e = r.flagged.front();
      s.first_failure = "batch " + std::to_string(batch) + ": " + e.param + "[" +
                        std::to_string(e.index) + "] analytic " + std::to_string(e.analytic) +
                        " numeric " + std::to_string(e.numeric);
    }
  }
  s.passed = false;
}

}  // namespace gc_detail

inline std::vector<LossCheckSummary> run_gradcheck(const GradCheckOptions& opt) {
  using namespace gc_detail;
  opt.validate();
  std::vector<LossCheckSummary> out;
  for (const auto& name : gradcheck_loss_names()) {
    out.emplace_back();
    out.back().loss = name;
  }
  auto summary = [&](const std::string& name) -> LossCheckSummary& {
    for (auto& s : out)
      if (s.loss == name) return s;
    throw IndexError("unknown loss " + name);
  };

  for (int b = 0; b < opt.batches; ++b) {
    Rng rng(derive_seed(opt.seed, {0x6C, static_cast<std::uint64_t>(b)}));
    const auto rb = make_batch(opt, b, rng);
    const double tau = rb.label_aware ? 0.5 : 0.07 + 0.5 * rng.uniform();

    ParamStore emb_ps;
    for (const char* k : {"f_v", "f_r", "t_v", "t_r"}) emb_ps.add(k, random_mat(rb.n, rb.d, rng));
    const auto plan =
        plan_fusion(rb.labels, rb.candidates, rb.M, rb.fusion_seed, rb.cross_modal);
    const FusedSet teacher = fuse(embeddings_of(emb_ps, rb.labels), plan);

    auto check = [&](const std::string& name, ParamStore& ps,
                     const std::function<double(const ParamStore&)>& fn) {
      if (opt.corrupt == name) corrupt_first(ps);
      merge(summary(name), finite_difference_check(fn, ps, opt.h, opt.tol), b);
    };

    {  // identity
      ParamStore ps;
      ps.add("logits_v", random_mat(rb.n, static_cast<std::size_t>(rb.n_classes), rng, 2.0));
      ps.add("logits_r", random_mat(rb.n, static_cast<std::size_t>(rb.n_classes), rng, 2.0));
      auto r = identity_loss(ps.value("logits_v"), ps.value("logits_r"), rb.labels);
      ps.grad("logits_v") = r.grad_v;
      ps.grad("logits_r") = r.grad_r;
      check("identity", ps, [&](const ParamStore& p) {
        return identity_loss(p.value("logits_v"), p.value("logits_r"), rb.labels).value;
      });
    }
    {  // wrt
      ParamStore ps;
      ps.add("f_v", emb_ps.value("f_v"));
      ps.add("f_r", emb_ps.value("f_r"));
      auto r = wrt_loss(ps.value("f_v"), ps.value("f_r"), rb.labels);
      ps.grad("f_v") = r.grad_v;
      ps.grad("f_r") = r.grad_r;
      check("wrt", ps, [&](const ParamStore& p) {
        return wrt_loss(p.value("f_v"), p.value("f_r"), rb.labels).value;
      });
    }
    {  // one-to-one contrastive
      ParamStore ps = emb_ps;
      set_grads(ps, contrastive_o(embeddings_of(ps, rb.labels), tau, rb.label_aware).grad);
      check("contrastive_o", ps, [&](const ParamStore& p) {
        return contrastive_o(embeddings_of(p, rb.labels), tau, rb.label_aware).value;
      });
    }
    std::span<const int> con_labels;
    if (rb.label_aware) con_labels = rb.labels;
    {  // many-to-many contrastive, through the fusion average
      ParamStore ps = emb_ps;
      set_grads(ps, contrastive_m(fuse(embeddings_of(ps, rb.labels), plan), tau, con_labels).grad);
      check("contrastive_m", ps, [&](const ParamStore& p) {
        return contrastive_m(fuse(embeddings_of(p, rb.labels), plan), tau, con_labels).value;
      });
    }
    {  // distillation against the frozen teacher
      ParamStore ps = emb_ps;
      set_grads(ps, kd_loss(embeddings_of(ps, rb.labels), teacher).grad);
      check("kd", ps, [&](const ParamStore& p) {
        return kd_loss(embeddings_of(p, rb.labels), teacher).value;
      });
    }
    {  // purification
      ParamStore ps = emb_ps;
      set_grads(ps, cmsp_loss(embeddings_of(ps, rb.labels)).grad);
      check("cmsp", ps, [&](const ParamStore& p) {
        return cmsp_loss(embeddings_of(p, rb.labels)).value;
      });
    }
    {  // weighted total with random weights
      LossWeights w;
      w.lambda1 = 0.1 + rng.uniform();
      w.lambda2 = 0.1 + rng.uniform();
      w.lambda3 = 0.1 + rng.uniform();
      w.lambda4 = 0.1 + rng.uniform();
      w.tau = tau;
      w.M = rb.M;
      w.label_aware_contrastive = rb.label_aware;
      w.cross_modal_fusion = rb.cross_modal;
      ParamStore ps = emb_ps;
      ps.add("logits_v", random_mat(rb.n, static_cast<std::size_t>(rb.n_classes), rng, 2.0));
      ps.add("logits_r", random_mat(rb.n, static_cast<std::size_t>(rb.n_classes), rng, 2.0));
      auto eval = [&](const ParamStore& p) {
        auto emb = embeddings_of(p, rb.labels);
        return total_loss(emb, fuse(emb, plan), p.value("logits_v"), p.value("logits_r"), w,
                          &teacher);
      };
      auto r = eval(ps);
      set_grads(ps, r.grad);
      ps.grad("logits_v") = r.grad_logits_v;
      ps.grad("logits_r") = r.grad_logits_r;
      check("total", ps, [&](const ParamStore& p) { return eval(p).breakdown.l_total; });
    }
    {  // whole model, perturbing encoder parameters
      EncoderConfig ec;
      ec.d_in_visual = 6;
      ec.d_in_text = 5;
      ec.d_hidden = 6;
      ec.d_embed = static_cast<int>(rb.d);
      ec.n_classes = rb.n_classes;
      ec.init_scale = 0.5;
      ec.seed = rng.next();
      auto mp = init_model(ec);
      BatchTensors bt{random_mat(rb.n, 6, rng), random_mat(rb.n, 6, rng),
                      random_mat(rb.n, 5, rng), random_mat(rb.n, 5, rng),
                      rb.labels, rb.candidates, {}, {}};
      LossWeights w;
      w.M = rb.M;
      w.tau = tau;
      w.label_aware_contrastive = rb.label_aware;
      w.cross_modal_fusion = rb.cross_modal;
      const FusedSet model_teacher = forward(mp, bt, w, rb.fusion_seed).fused;
      compute_gradients(mp, bt, w, rb.fusion_seed, &model_teacher);
      if (opt.corrupt == "model") corrupt_first(mp.store);
      auto fn = [&](const ParamStore&) {
        auto fp = forward(mp, bt, w, rb.fusion_seed);
        auto tl = total_loss(fp.emb, fp.fused, fp.logits_v, fp.logits_r, w, &model_teacher);
        return RegionValue{tl.breakdown.l_total, fp.region_hash()};
      };
      merge(summary("model"), finite_difference_check_piecewise(fn, mp.store, opt.h, opt.tol), b);
    }
  }
  return out;
}

}  // namespace eees
