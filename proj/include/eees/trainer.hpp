#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "eees/common.hpp"
#include "eees/evaluator.hpp"
#include "eees/losses.hpp"
#include "eees/model.hpp"
#include "eees/numerics.hpp"
#include "eees/random.hpp"
#include "eees/synthdata.hpp"

namespace eees {

struct TrainConfig {
  int epochs = 60;
  int batches_per_epoch = 20;
  // 3e-4 leaves momentum SGD at chance on the synthetic benchmark within the
  // desk schedule.
  double lr_visual = 2e-3;
  double lr_text = 2e-3;
  double decay_factor = 0.1;
  std::vector<int> decay_epochs = default_decay_epochs(60);
  double momentum = 0.9;
  int batch_identities = 8;
  int batch_k = 4;
  int d_hidden = 64;
  int d_embed = 32;
  double init_scale = 0.1;
  LossWeights weights;
  std::uint64_t seed = 0;
  bool eval_each_epoch = true;

  // Decays at 1/3 and 7/12 of the run (40 and 70 for 120 epochs).
  static std::vector<int> default_decay_epochs(int epochs) {
    std::vector<int> out;
    for (int e : {epochs / 3, 7 * epochs / 12})
      if (e > 0 && e < epochs && (out.empty() || e > out.back())) out.push_back(e);
    return out;
  }

  void use_paper_schedule() {
    epochs = 120;
    decay_epochs = {40, 70};
  }

  void validate() const {
    if (epochs <= 0) throw ConfigError("train.epochs", "must be positive");
    if (batches_per_epoch <= 0) throw ConfigError("train.batches_per_epoch", "must be positive");
    if (!(lr_visual >= 0.0)) throw ConfigError("train.lr_visual", "must be >= 0");
    if (!(lr_text >= 0.0)) throw ConfigError("train.lr_text", "must be >= 0");
    if (!(decay_factor > 0.0)) throw ConfigError("train.decay_factor", "must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum", "must lie in [0, 1)");
    for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
      if (decay_epochs[i] < 0 || decay_epochs[i] >= epochs)
        throw ConfigError("train.decay_epochs", "each decay epoch must lie in [0, epochs)");
      if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1])
        throw ConfigError("train.decay_epochs", "must be strictly increasing");
    }
    if (batch_identities < 2) throw ConfigError("train.batch_identities", "must be >= 2");
    if (batch_k <= 0) throw ConfigError("train.batch_k", "must be positive");
    if (d_hidden <= 0) throw ConfigError("model.d_hidden", "must be positive");
    if (d_embed <= 0) throw ConfigError("model.d_embed", "must be positive");
    weights.validate();
  }
};

inline nlohmann::ordered_json to_json(const LossWeights& w) {
  return {{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3},
          {"lambda4", w.lambda4}, {"tau", w.tau},         {"M", w.M},
          {"label_aware_contrastive", w.label_aware_contrastive},
          {"cross_modal_fusion", w.cross_modal_fusion},
          {"kd_text", w.kd_text},
          {"many_to_many", w.many_to_many}};
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batches_per_epoch", c.batches_per_epoch},
          {"lr_visual", c.lr_visual},
          {"lr_text", c.lr_text},
          {"decay_factor", c.decay_factor},
          {"decay_epochs", c.decay_epochs},
          {"momentum", c.momentum},
          {"batch_identities", c.batch_identities},
          {"batch_k", c.batch_k},
          {"d_hidden", c.d_hidden},
          {"d_embed", c.d_embed},
          {"init_scale", c.init_scale},
          {"weights", to_json(c.weights)},
          {"seed", c.seed}};
}

inline nlohmann::ordered_json to_json(const LossBreakdown& b) {
  return {{"l_id", b.l_id},     {"l_wrt", b.l_wrt}, {"l_con_o", b.l_con_o},
          {"l_con_m", b.l_con_m}, {"l_kd", b.l_kd},   {"l_cmsp", b.l_cmsp},
          {"l_total", b.l_total}};
}

struct LearningRates {
  double visual = 0.0;
  double text = 0.0;

  double for_group(ParamGroup g) const { return g == ParamGroup::Text ? text : visual; }
};

inline LearningRates lr_at(int epoch, const TrainConfig& cfg) {
  int passed = 0;
  for (int e : cfg.decay_epochs)
    if (e <= epoch) ++passed;
  const double f = std::pow(cfg.decay_factor, passed);
  return {cfg.lr_visual * f, cfg.lr_text * f};
}

// Raw inputs of one batch, rows aligned with Batch::rows.
struct BatchTensors {
  Mat x_v, x_r, l_v, l_r;
  std::vector<int> labels;  // classifier indices
  std::vector<std::vector<std::size_t>> candidates;
  std::vector<int> sample_ids_v, sample_ids_r;
};

inline BatchTensors make_batch_tensors(const Split& split, const Batch& batch,
                                       const std::map<int, int>& class_of) {
  const std::size_t n = batch.size();
  if (n == 0) throw ProtocolError("make_batch_tensors: empty batch");
  const auto& first = split.samples[batch.rows[0].visible];
  BatchTensors t{Mat(n, first.x_raw.size()), Mat(n, first.x_raw.size()),
                 Mat(n, first.l_raw.size()), Mat(n, first.l_raw.size()), {}, batch.candidates,
                 {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const auto& v = split.samples[batch.rows[i].visible];
    const auto& r = split.samples[batch.rows[i].infrared];
    std::copy(v.x_raw.begin(), v.x_raw.end(), t.x_v.row(i).begin());
    std::copy(r.x_raw.begin(), r.x_raw.end(), t.x_r.row(i).begin());
    std::copy(v.l_raw.begin(), v.l_raw.end(), t.l_v.row(i).begin());
    std::copy(r.l_raw.begin(), r.l_raw.end(), t.l_r.row(i).begin());
    auto it = class_of.find(batch.labels[i]);
    if (it == class_of.end())
      throw ProtocolError("make_batch_tensors: identity " + std::to_string(batch.labels[i]) +
                          " has no classifier index");
    t.labels.push_back(it->second);
    t.sample_ids_v.push_back(v.sample_id);
    t.sample_ids_r.push_back(r.sample_id);
  }
  return t;
}

struct ForwardPass {
  EncoderCache fv, fr, tv, tr;
  Mat logits_v, logits_r;
  EmbeddingSet emb;
  FusedSet fused;

  std::uint64_t region_hash() const {
    std::uint64_t h = 0;
    for (const auto* c : {&fv, &fr, &tv, &tr}) h = mix64(h ^ c->region_hash());
    return h;
  }
};

inline ForwardPass forward(const ModelParams& mp, const BatchTensors& bt, const LossWeights& w,
                           std::uint64_t fusion_seed) {
  ForwardPass fp;
  fp.fv = encode_visual_batch(mp, bt.x_v, Modality::V);
  fp.fr = encode_visual_batch(mp, bt.x_r, Modality::R);
  fp.tv = encode_text_batch(mp, bt.l_v);
  fp.tr = encode_text_batch(mp, bt.l_r);
  fp.logits_v = classify_batch(mp, fp.fv.out);
  fp.logits_r = classify_batch(mp, fp.fr.out);
  fp.emb = {fp.fv.out, fp.fr.out, fp.tv.out, fp.tr.out, bt.labels};
  auto plan = plan_fusion(bt.labels, bt.candidates, w.M, fusion_seed, w.cross_modal_fusion);
  fp.fused = fuse(fp.emb, plan);
  return fp;
}

struct GradientResult {
  LossBreakdown breakdown;
  EmbeddingGrads grad_fused;
};

// Zeroes and fills mp.store gradients for one batch. `kd_teacher` pins the
// distillation target (defaults to this pass's own fused set).
inline GradientResult compute_gradients(ModelParams& mp, const BatchTensors& bt,
                                        const LossWeights& w, std::uint64_t fusion_seed,
                                        const FusedSet* kd_teacher = nullptr) {
  mp.store.zero_grad();
  auto fp = forward(mp, bt, w, fusion_seed);
  auto tl = total_loss(fp.emb, fp.fused, fp.logits_v, fp.logits_r, w, kd_teacher);
  Mat gf_v = tl.grad.f_v;
  Mat gf_r = tl.grad.f_r;
  gf_v += backward_classify(mp, fp.fv.out, tl.grad_logits_v);
  gf_r += backward_classify(mp, fp.fr.out, tl.grad_logits_r);
  backward_encoder(mp, fp.fv, gf_v);
  backward_encoder(mp, fp.fr, gf_r);
  backward_encoder(mp, fp.tv, tl.grad.t_v);
  backward_encoder(mp, fp.tr, tl.grad.t_r);
  return {tl.breakdown, std::move(tl.grad_fused)};
}

// Momentum SGD: v <- mu v + g ; theta <- theta - lr_group v.
class MomentumSgd {
 public:
  explicit MomentumSgd(double momentum) : momentum_(momentum) {}

  void step(ModelParams& mp, const LearningRates& lr,
            const std::function<bool(const std::string&)>& trainable = {}) {
    auto& params = mp.store.params();
    if (velocity_.empty())
      for (const auto& p : params) velocity_.push_back(Mat::zeros_like(p.value));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (trainable && !trainable(p.name)) continue;
      const double rate = lr.for_group(group_of(p.name));
      auto& v = velocity_[i].data();
      auto& theta = p.value.data();
      const auto& g = p.grad.data();
      for (std::size_t k = 0; k < theta.size(); ++k) {
        v[k] = momentum_ * v[k] + g[k];
        theta[k] -= rate * v[k];
      }
    }
  }

 private:
  double momentum_;
  std::vector<Mat> velocity_;
};

inline std::string describe_batch(const BatchTensors& bt) {
  std::ostringstream os;
  os << "batch rows (label: visible sample / infrared sample):";
  for (std::size_t i = 0; i < bt.labels.size(); ++i)
    os << ' ' << bt.labels[i] << ':' << bt.sample_ids_v[i] << '/' << bt.sample_ids_r[i];
  return os.str();
}

inline LossBreakdown train_step(ModelParams& mp, MomentumSgd& opt, const BatchTensors& bt,
                                const LossWeights& w, const LearningRates& lr,
                                std::uint64_t fusion_seed,
                                const std::function<bool(const std::string&)>& trainable = {}) {
  auto res = compute_gradients(mp, bt, w, fusion_seed);
  const auto& b = res.breakdown;
  if (!std::isfinite(b.l_total))
    throw NumericalError("non-finite loss (" + to_json(b).dump() + "); " + describe_batch(bt));
  opt.step(mp, lr, trainable);
  return b;
}

struct StepRecord {
  int epoch = 0;
  int step = 0;
  LearningRates lr;
  LossBreakdown loss;
};

struct EpochSnapshot {
  int epoch = 0;
  double mean_l_total = 0.0;
  double rank1 = 0.0;
  double map = 0.0;
};

struct TrainLog {
  TrainConfig config;
  std::vector<StepRecord> steps;
  std::vector<EpochSnapshot> epochs;
  double wall_clock_seconds = 0.0;  // not part of the serialized log

  void write_jsonl(std::ostream& out) const {
    nlohmann::ordered_json head = {{"kind", "eees.trainlog"}, {"version", 1},
                                   {"config", to_json(config)}};
    out << head.dump() << '\n';
    std::size_t si = 0;
    for (const auto& ep : epochs) {
      for (; si < steps.size() && steps[si].epoch == ep.epoch; ++si) {
        const auto& s = steps[si];
        nlohmann::ordered_json rec = {{"type", "step"},           {"epoch", s.epoch},
                                      {"step", s.step},           {"lr_visual", s.lr.visual},
                                      {"lr_text", s.lr.text}};
        const auto loss = to_json(s.loss);
        for (auto& [k, v] : loss.items()) rec[k] = v;
        out << rec.dump() << '\n';
      }
      nlohmann::ordered_json rec = {{"type", "epoch"},
                                    {"epoch", ep.epoch},
                                    {"mean_l_total", ep.mean_l_total},
                                    {"rank1", ep.rank1},
                                    {"map", ep.map}};
      out << rec.dump() << '\n';
    }
  }
};

struct TrainResult {
  ModelParams params;
  TrainLog log;
};

inline std::map<int, int> class_indices(const Split& split) {
  std::map<int, int> out;
  int next = 0;
  for (int id : split.identities()) out[id] = next++;
  return out;
}

inline EncoderConfig encoder_config_for(const TrainConfig& cfg, const Dataset& ds) {
  if (ds.train.samples.empty()) throw ProtocolError("run_training: empty training split");
  EncoderConfig ec;
  ec.d_in_visual = static_cast<int>(ds.train.samples[0].x_raw.size());
  ec.d_in_text = static_cast<int>(ds.train.samples[0].l_raw.size());
  ec.d_hidden = cfg.d_hidden;
  ec.d_embed = cfg.d_embed;
  ec.n_classes = static_cast<int>(ds.train.identities().size());
  ec.init_scale = cfg.init_scale;
  ec.seed = derive_seed(cfg.seed, {0x1417});
  return ec;
}

using EpochCallback = std::function<void(const EpochSnapshot&)>;

inline TrainResult run_training(const TrainConfig& cfg, const Dataset& ds,
                                const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  TrainResult res{init_model(encoder_config_for(cfg, ds)), {}};
  res.log.config = cfg;
  const auto classes = class_indices(ds.train);
  MomentumSgd opt(cfg.momentum);
  const Protocol snapshot_protocol{Modality::R, Modality::V, Shots::Single, cfg.seed};

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto lr = lr_at(epoch, cfg);
    double sum = 0.0;
    for (int b = 0; b < cfg.batches_per_epoch; ++b) {
      const auto e = static_cast<std::uint64_t>(epoch);
      const auto bi = static_cast<std::uint64_t>(b);
      auto batch = sample_batch(ds.train, cfg.batch_identities, cfg.batch_k,
                                derive_seed(cfg.seed, {e, bi, 1}));
      auto bt = make_batch_tensors(ds.train, batch, classes);
      auto loss = train_step(res.params, opt, bt, cfg.weights, lr, derive_seed(cfg.seed, {e, bi, 2}));
      res.log.steps.push_back({epoch, epoch * cfg.batches_per_epoch + b, lr, loss});
      sum += loss.l_total;
    }
    EpochSnapshot snap{epoch, sum / cfg.batches_per_epoch, 0.0, 0.0};
    if (cfg.eval_each_epoch && !ds.test.samples.empty()) {
      auto rep = evaluate(res.params, ds.test, snapshot_protocol);
      snap.rank1 = rep.rank(1);
      snap.map = rep.map;
    }
    res.log.epochs.push_back(snap);
    if (on_epoch) on_epoch(snap);
  }
  res.log.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace eees
