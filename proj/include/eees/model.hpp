#pragma once

// Desk-scale encoders:
//
//   visual  f = trunk(relu(stem_m(x)))     stem per modality, trunk shared
//   text    t = text_enc(l)                one encoder for both modalities
//   logits    = classifier(f)              shared by both modalities
//
// trunk and text_enc are affine -> relu -> affine stacks.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>

#include "json.hpp"

#include "eees/common.hpp"
#include "eees/numerics.hpp"
#include "eees/random.hpp"

namespace eees {

struct EncoderConfig {
  int d_in_visual = 24;
  int d_in_text = 24;
  int d_hidden = 64;
  int d_embed = 32;
  int n_classes = 32;
  double init_scale = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(name, "must be positive");
    };
    positive(d_in_visual, "model.d_in_visual");
    positive(d_in_text, "model.d_in_text");
    positive(d_hidden, "model.d_hidden");
    positive(d_embed, "model.d_embed");
    if (n_classes < 2) throw ConfigError("model.n_classes", "must be >= 2");
    if (!(init_scale >= 0.0)) throw ConfigError("model.init_scale", "must be >= 0");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline nlohmann::ordered_json to_json(const EncoderConfig& c) {
  return {{"d_in_visual", c.d_in_visual}, {"d_in_text", c.d_in_text},
          {"d_hidden", c.d_hidden},       {"d_embed", c.d_embed},
          {"n_classes", c.n_classes},     {"init_scale", c.init_scale},
          {"seed", c.seed}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::ordered_json& j) {
  EncoderConfig c;
  c.d_in_visual = j.at("d_in_visual").get<int>();
  c.d_in_text = j.at("d_in_text").get<int>();
  c.d_hidden = j.at("d_hidden").get<int>();
  c.d_embed = j.at("d_embed").get<int>();
  c.n_classes = j.at("n_classes").get<int>();
  c.init_scale = j.at("init_scale").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

enum class ParamGroup { Visual, Text };

inline ParamGroup group_of(const std::string& name) {
  return name.rfind("text.", 0) == 0 ? ParamGroup::Text : ParamGroup::Visual;
}

struct ModelParams {
  EncoderConfig config;
  ParamStore store;

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.config == b.config && a.store == b.store;
  }
};

namespace param {
inline const std::string kStemV = "stem_v";
inline const std::string kStemR = "stem_r";
inline const std::string kTrunk0 = "trunk.0";
inline const std::string kTrunk1 = "trunk.1";
inline const std::string kText0 = "text.0";
inline const std::string kText1 = "text.1";
inline const std::string kClassifier = "classifier";

inline std::string weight(const std::string& layer) { return layer + ".weight"; }
inline std::string bias(const std::string& layer) { return layer + ".bias"; }
inline const std::string& stem(Modality m) { return m == Modality::V ? kStemV : kStemR; }
}  // namespace param

inline ModelParams init_model(const EncoderConfig& cfg) {
  cfg.validate();
  ModelParams mp{cfg, {}};
  Rng rng(derive_seed(cfg.seed, {0x1417}));
  auto layer = [&](const std::string& name, int out, int in) {
    Mat w(static_cast<std::size_t>(out), static_cast<std::size_t>(in));
    Mat b(1, static_cast<std::size_t>(out));
    for (auto& v : w.data()) v = rng.uniform(-cfg.init_scale, cfg.init_scale);
    for (auto& v : b.data()) v = rng.uniform(-cfg.init_scale, cfg.init_scale);
    mp.store.add(param::weight(name), std::move(w));
    mp.store.add(param::bias(name), std::move(b));
  };
  layer(param::kStemV, cfg.d_hidden, cfg.d_in_visual);
  layer(param::kStemR, cfg.d_hidden, cfg.d_in_visual);
  layer(param::kTrunk0, cfg.d_hidden, cfg.d_hidden);
  layer(param::kTrunk1, cfg.d_embed, cfg.d_hidden);
  layer(param::kText0, cfg.d_hidden, cfg.d_in_text);
  layer(param::kText1, cfg.d_embed, cfg.d_hidden);
  layer(param::kClassifier, cfg.n_classes, cfg.d_embed);
  return mp;
}

// Forward activations kept for the backward pass. For text encoding the stem
// slot holds text.0 and the trunk slot holds nothing.
struct EncoderCache {
  Mat input;
  std::vector<Mat> pre;     // pre-activations of each relu
  std::vector<Mat> hidden;  // relu outputs
  Mat out;
  bool text = false;
  Modality modality = Modality::V;

  // Sign pattern of every pre-activation, hashed; identifies the linear region
  // of the network for finite-difference checks.
  std::uint64_t region_hash() const {
    std::uint64_t h = 0x84222325cbf29ce4ULL;
    for (const auto& p : pre)
      for (double v : p.data()) h = mix64(h ^ (v > 0.0 ? 0x9e37ULL : 0x7f4aULL));
    return h;
  }
};

namespace detail {

inline void require_input(const Mat& x, int expected, const char* what) {
  if (x.cols() != static_cast<std::size_t>(expected))
    throw DimensionError(std::string(what) + ": input dim " + std::to_string(x.cols()) +
                         " != configured " + std::to_string(expected));
}

inline Mat layer_forward(const ParamStore& ps, const std::string& layer, const Mat& x) {
  return affine(x, ps.value(param::weight(layer)), ps.value(param::bias(layer)));
}

inline Mat layer_backward(ParamStore& ps, const std::string& layer, const Mat& x, const Mat& dy) {
  Mat& db = ps.grad(param::bias(layer));
  return affine_backward(x, ps.value(param::weight(layer)), dy, ps.grad(param::weight(layer)), &db);
}

}  // namespace detail

inline EncoderCache encode_visual_batch(const ModelParams& mp, const Mat& x, Modality m) {
  detail::require_input(x, mp.config.d_in_visual, "encode_visual");
  EncoderCache c;
  c.input = x;
  c.modality = m;
  c.pre.push_back(detail::layer_forward(mp.store, param::stem(m), x));
  c.hidden.push_back(relu(c.pre.back()));
  c.pre.push_back(detail::layer_forward(mp.store, param::kTrunk0, c.hidden.back()));
  c.hidden.push_back(relu(c.pre.back()));
  c.out = detail::layer_forward(mp.store, param::kTrunk1, c.hidden.back());
  return c;
}

inline EncoderCache encode_text_batch(const ModelParams& mp, const Mat& l) {
  detail::require_input(l, mp.config.d_in_text, "encode_text");
  EncoderCache c;
  c.input = l;
  c.text = true;
  c.pre.push_back(detail::layer_forward(mp.store, param::kText0, l));
  c.hidden.push_back(relu(c.pre.back()));
  c.out = detail::layer_forward(mp.store, param::kText1, c.hidden.back());
  return c;
}

// Accumulates parameter gradients for d(loss)/d(cache.out) = grad_out.
inline void backward_encoder(ModelParams& mp, const EncoderCache& c, const Mat& grad_out) {
  auto& ps = mp.store;
  if (c.text) {
    Mat dh = detail::layer_backward(ps, param::kText1, c.hidden[0], grad_out);
    detail::layer_backward(ps, param::kText0, c.input, relu_backward(c.pre[0], dh));
    return;
  }
  Mat dh1 = detail::layer_backward(ps, param::kTrunk1, c.hidden[1], grad_out);
  Mat dh0 = detail::layer_backward(ps, param::kTrunk0, c.hidden[0], relu_backward(c.pre[1], dh1));
  detail::layer_backward(ps, param::stem(c.modality), c.input, relu_backward(c.pre[0], dh0));
}

inline Mat classify_batch(const ModelParams& mp, const Mat& f) {
  detail::require_input(f, mp.config.d_embed, "classify");
  return detail::layer_forward(mp.store, param::kClassifier, f);
}

// Returns d(loss)/d(f) and accumulates classifier gradients.
inline Mat backward_classify(ModelParams& mp, const Mat& f, const Mat& grad_logits) {
  return detail::layer_backward(mp.store, param::kClassifier, f, grad_logits);
}

inline Mat row_matrix(std::span<const double> v) { return Mat(1, v.size(), Vec(v.begin(), v.end())); }

inline Vec encode_visual(const ModelParams& mp, std::span<const double> x_raw, Modality m) {
  return encode_visual_batch(mp, row_matrix(x_raw), m).out.data();
}

inline Vec encode_text(const ModelParams& mp, std::span<const double> l_raw) {
  return encode_text_batch(mp, row_matrix(l_raw)).out.data();
}

inline Vec classify(const ModelParams& mp, std::span<const double> f) {
  return classify_batch(mp, row_matrix(f)).data();
}

// ---------------------------------------------------------------------------
// Checkpoints: a header record with the encoder config followed by one record
// per parameter tensor (name, shape, row-major data).

inline void write_checkpoint(std::ostream& out, const ModelParams& mp) {
  nlohmann::ordered_json header = {{"kind", "eees.checkpoint"},
                                   {"version", 1},
                                   {"encoder", to_json(mp.config)},
                                   {"n_tensors", mp.store.size()}};
  out << header.dump() << '\n';
  for (const auto& p : mp.store.params()) {
    nlohmann::ordered_json rec = {{"name", p.name},
                                  {"rows", p.value.rows()},
                                  {"cols", p.value.cols()},
                                  {"data", p.value.data()}};
    out << rec.dump() << '\n';
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& mp) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ProtocolError("cannot write checkpoint " + path.string());
  write_checkpoint(out, mp);
}

inline ModelParams read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ProtocolError("checkpoint: empty stream");
  auto header = nlohmann::ordered_json::parse(line);
  if (header.value("kind", "") != "eees.checkpoint")
    throw ProtocolError("checkpoint: unexpected header kind");
  ModelParams mp{encoder_config_from_json(header.at("encoder")), {}};
  const auto n = header.at("n_tensors").get<std::size_t>();
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw ProtocolError("checkpoint: truncated");
    auto rec = nlohmann::ordered_json::parse(line);
    mp.store.add(rec.at("name").get<std::string>(),
                 Mat(rec.at("rows").get<std::size_t>(), rec.at("cols").get<std::size_t>(),
                     rec.at("data").get<Vec>()));
  }
  // Shapes must match what init_model would build for this config.
  auto expected = init_model(mp.config);
  for (const auto& p : expected.store.params()) {
    if (!mp.store.contains(p.name)) throw ProtocolError("checkpoint: missing tensor " + p.name);
    if (!mp.store.value(p.name).same_shape(p.value))
      throw DimensionError("checkpoint: tensor " + p.name + " has shape " +
                           mp.store.value(p.name).shape_string() + ", expected " +
                           p.value.shape_string());
  }
  return mp;
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ProtocolError("cannot read checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace eees
