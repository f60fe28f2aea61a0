// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "soundloc/audio.hpp"
#include "soundloc/autograd.hpp"
#include "soundloc/image.hpp"
#include "soundloc/nn.hpp"
#include "soundloc/tensor_archive.hpp"

namespace soundloc::model {

using ag::RVar;

struct ModelConfig {
  int channels = 32;       // shared embedding width C
  int visual_width = 16;   // first visual conv width
  int audio_width = 12;    // first audio conv width
  int clusters = 8;        // dictionary size K
  int num_categories = 4;
  double lambda = 0.5;     // stage-2 loss balance
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  int spec_frames = 201;
  int mel_bands = 64;

  static constexpr int kStride = 8;  // total visual downsampling

  void validate() const {
    if (channels < 1 || visual_width < 1 || audio_width < 1) {
      throw ConfigError("ModelConfig: widths must be positive");
    }
    if (clusters < num_categories) {
      throw ConfigError(
          "ModelConfig: clusters must be no less than num_categories");
    }
    if (num_categories < 1) {
      throw ConfigError("ModelConfig: need at least one category");
    }
    if (lambda < 0.0) throw ConfigError("ModelConfig: lambda must be >= 0");
    if (learning_rate <= 0.0) {
      throw ConfigError("ModelConfig: learning rate must be positive");
    }
    if (spec_frames < 16 || mel_bands < 16) {
      throw ConfigError("ModelConfig: spectrogram input too small");
    }
  }

  nlohmann::json to_json() const {
    return {{"channels", channels},
            {"visual_width", visual_width},
            {"audio_width", audio_width},
            {"clusters", clusters},
            {"num_categories", num_categories},
            {"lambda", lambda},
            {"learning_rate", learning_rate},
            {"seed", seed},
            {"spec_frames", spec_frames},
            {"mel_bands", mel_bands}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {
        "channels",   "visual_width",  "audio_width", "clusters",
        "num_categories", "lambda",    "learning_rate", "seed",
        "spec_frames", "mel_bands"};
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool ok = false;
      for (const auto& k : known) ok = ok || it.key() == k;
      if (!ok) throw ConfigError("ModelConfig: unknown key '" + it.key() + "'");
    }
    ModelConfig c;
    c.channels = j.value("channels", c.channels);
    c.visual_width = j.value("visual_width", c.visual_width);
    c.audio_width = j.value("audio_width", c.audio_width);
    c.clusters = j.value("clusters", c.clusters);
    c.num_categories = j.value("num_categories", c.num_categories);
    c.lambda = j.value("lambda", c.lambda);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    c.spec_frames = j.value("spec_frames", c.spec_frames);
    c.mel_bands = j.value("mel_bands", c.mel_bands);
    c.validate();
    return c;
  }
};

/// Fixed input transforms. Images map to zero-centered [-0.5, 0.5]; log-mel
/// values (roughly [log 1e-6, 5]) map through an affine constant chosen to
/// land near unit scale.
inline RTensor image_to_input(const img::Image& image) {
  if (image.width <= 0 || image.height <= 0) {
    throw InvalidInput("image_to_input: empty image");
  }
  RTensor t({3, image.height, image.width});
  for (int ch = 0; ch < 3; ++ch) {
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) {
        t(ch, y, x) = image.at(x, y, ch) / 255.0 - 0.5;
      }
    }
  }
  return t;
}

inline RTensor spec_to_input(const audio::LogMelSpectrogram& spec) {
  RTensor t({1, spec.frames(), spec.bands()});
  for (int a = 0; a < spec.frames(); ++a) {
    for (int b = 0; b < spec.bands(); ++b) {
      t(0, a, b) = (spec.values(a, b) + 14.0) * 0.1;
    }
  }
  return t;
}

/// Audio encoder g, visual encoder f, the 1x1-conv+sigmoid correspondence
/// head, and the two classification heads h_a / h_v.
class Model {
 public:
  ModelConfig cfg;
  std::string stage = "init";

  explicit Model(const ModelConfig& config) : cfg(config) {
    cfg.validate();
    Rng rng(splitmix64(cfg.seed ^ 0x6d6f64656cULL));
    const int w = cfg.visual_width, a = cfg.audio_width, c = cfg.channels;
    v1_ = nn::Conv2d<double>(3, w, 3, 2, 1, rng);
    v2_ = nn::Conv2d<double>(w, 2 * w, 3, 2, 1, rng);
    v3_ = nn::Conv2d<double>(2 * w, 2 * w, 3, 2, 1, rng);
    v4_ = nn::Conv2d<double>(2 * w, c, 3, 1, 1, rng);
    a1_ = nn::Conv2d<double>(1, a, 3, 2, 1, rng);
    a2_ = nn::Conv2d<double>(a, 2 * a, 3, 2, 1, rng);
    a3_ = nn::Conv2d<double>(2 * a, 2 * a, 3, 2, 1, rng);
    a4_ = nn::Conv2d<double>(2 * a, c, 3, 2, 1, rng);
    // identity-scale init keeps the untrained map a monotone function of
    // the raw cosine
    head_ = nn::Conv2d<double>(1, 1, 1, 1, 0, rng);
    head_.w->value.fill(1.0);
    head_.b->value.fill(0.0);
    ha1_ = nn::Linear<double>(c, 2 * c, rng);
    ha2_ = nn::Linear<double>(2 * c, cfg.clusters, rng);
    hv1_ = nn::Linear<double>(c, 2 * c, rng);
    hv2_ = nn::Linear<double>(2 * c, cfg.clusters, rng);
  }

  std::vector<RVar> parameters() const {
    std::vector<RVar> out;
    v1_.collect(out);
    v2_.collect(out);
    v3_.collect(out);
    v4_.collect(out);
    a1_.collect(out);
    a2_.collect(out);
    a3_.collect(out);
    a4_.collect(out);
    head_.collect(out);
    ha1_.collect(out);
    ha2_.collect(out);
    hv1_.collect(out);
    hv2_.collect(out);
    return out;
  }

  /// frames: [B,3,S,S] with S divisible by the total stride.
  RVar forward_visual(const RVar& frames) const {
    const RTensor& v = frames->value;
    if (v.ndim() != 4 || v.dim(1) != 3) {
      throw InvalidInput("forward_visual: expected [B,3,H,W] RGB input");
    }
    if (v.dim(2) % ModelConfig::kStride != 0 ||
        v.dim(3) % ModelConfig::kStride != 0) {
      throw InvalidInput("forward_visual: sides must be divisible by stride");
    }
    auto h = ag::relu(v1_(frames));
    h = ag::relu(v2_(h));
    h = ag::relu(v3_(h));
    // fixed 1/sqrt(C) output scaling keeps dictionary inner products near
    // unit range so the pooled-activation softmax stays trainable; cosine
    // terms are unaffected
    return ag::scale(v4_(h), 1.0 / std::sqrt(static_cast<double>(cfg.channels)));
  }

  /// specs: [B,1,T,M] matching the configured spectrogram shape -> [B,C].
  RVar forward_audio(const RVar& specs) const {
    const RTensor& v = specs->value;
    if (v.ndim() != 4 || v.dim(1) != 1 || v.dim(2) != cfg.spec_frames ||
        v.dim(3) != cfg.mel_bands) {
      throw InvalidInput("forward_audio: spectrogram shape mismatch");
    }
    auto h = ag::relu(a1_(specs));
    h = ag::relu(a2_(h));
    h = ag::relu(a3_(h));
    h = a4_(h);
    return ag::gap2d(h);
  }

  /// Paired localization maps: g [P,C], f [P,C,H,W] -> probabilities
  /// [P,1,H,W] via cosine similarity, 1x1 conv and sigmoid.
  RVar localization_map(const RVar& g, const RVar& f) const {
    if (g->value.dim(1) != f->value.dim(1)) {
      throw InvalidInput("localization_map: embedding/feature width mismatch");
    }
    return ag::sigmoid(head_(ag::cosine_map(g, f)));
  }

  RVar audio_logits(const RVar& g) const {
    return ha2_(ag::relu(ha1_(g)));
  }

  RVar visual_logits(const RVar& f) const {
    return hv2_(ag::relu(hv1_(ag::gap2d(f))));
  }

  // ---- single-sample inference wrappers (no gradients) ----

  RTensor encode_visual(const RTensor& frame) const {
    if (frame.ndim() != 3) throw InvalidInput("encode_visual: expected [3,H,W]");
    RTensor batched({1, frame.dim(0), frame.dim(1), frame.dim(2)});
    std::copy(frame.data(), frame.data() + frame.numel(), batched.data());
    auto out = forward_visual(ag::constant(batched));
    const RTensor& v = out->value;
    RTensor f({v.dim(1), v.dim(2), v.dim(3)});
    std::copy(v.data(), v.data() + v.numel(), f.data());
    return f;
  }

  RTensor encode_audio(const RTensor& spec_input) const {
    if (spec_input.ndim() != 3) {
      throw InvalidInput("encode_audio: expected [1,T,M]");
    }
    RTensor batched({1, spec_input.dim(0), spec_input.dim(1), spec_input.dim(2)});
    std::copy(spec_input.data(), spec_input.data() + spec_input.numel(),
              batched.data());
    auto out = forward_audio(ag::constant(batched));
    RTensor g({out->value.dim(1)});
    std::copy(out->value.data(), out->value.data() + out->value.numel(),
              g.data());
    return g;
  }

  RTensor localization_map(const RTensor& g, const RTensor& f) const {
    if (g.ndim() != 1 || f.ndim() != 3 || g.dim(0) != f.dim(0)) {
      throw InvalidInput("localization_map: expected g [C], f [C,H,W]");
    }
    RTensor gb({1, g.dim(0)});
    std::copy(g.data(), g.data() + g.numel(), gb.data());
    RTensor fb({1, f.dim(0), f.dim(1), f.dim(2)});
    std::copy(f.data(), f.data() + f.numel(), fb.data());
    auto out = localization_map(ag::constant(gb), ag::constant(fb));
    RTensor map({f.dim(1), f.dim(2)});
    std::copy(out->value.data(), out->value.data() + out->value.numel(),
              map.data());
    return map;
  }

  RTensor classify_audio(const RTensor& g) const {
    RTensor gb({1, g.dim(0)});
    std::copy(g.data(), g.data() + g.numel(), gb.data());
    auto out = audio_logits(ag::constant(gb));
    RTensor logits({cfg.clusters});
    std::copy(out->value.data(), out->value.data() + out->value.numel(),
              logits.data());
    return logits;
  }

  RTensor classify_visual(const RTensor& f) const {
    RTensor fb({1, f.dim(0), f.dim(1), f.dim(2)});
    std::copy(f.data(), f.data() + f.numel(), fb.data());
    auto out = visual_logits(ag::constant(fb));
    RTensor logits({cfg.clusters});
    std::copy(out->value.data(), out->value.data() + out->value.numel(),
              logits.data());
    return logits;
  }

  /// Deep copy. Layer weights are shared_ptr leaves, so the implicit copy
  /// constructor aliases them; clone() duplicates the values instead.
  Model clone() const {
    Model out(cfg);
    out.stage = stage;
    auto src = named_parameters();
    auto dst = out.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i].second->value = src[i].second->value;
    }
    return out;
  }

  // ---- named weight access for checkpointing ----

  std::vector<std::pair<std::string, RVar>> named_parameters() const {
    return {{"v1.w", v1_.w},   {"v1.b", v1_.b},   {"v2.w", v2_.w},
            {"v2.b", v2_.b},   {"v3.w", v3_.w},   {"v3.b", v3_.b},
            {"v4.w", v4_.w},   {"v4.b", v4_.b},   {"a1.w", a1_.w},
            {"a1.b", a1_.b},   {"a2.w", a2_.w},   {"a2.b", a2_.b},
            {"a3.w", a3_.w},   {"a3.b", a3_.b},   {"a4.w", a4_.w},
            {"a4.b", a4_.b},   {"head.w", head_.w}, {"head.b", head_.b},
            {"ha1.w", ha1_.w}, {"ha1.b", ha1_.b}, {"ha2.w", ha2_.w},
            {"ha2.b", ha2_.b}, {"hv1.w", hv1_.w}, {"hv1.b", hv1_.b},
            {"hv2.w", hv2_.w}, {"hv2.b", hv2_.b}};
  }

 private:
  nn::Conv2d<double> v1_, v2_, v3_, v4_;
  nn::Conv2d<double> a1_, a2_, a3_, a4_;
  nn::Conv2d<double> head_;
  nn::Linear<double> ha1_, ha2_, hv1_, hv2_;
};

inline void save_checkpoint(const Model& model, const std::string& path) {
  TensorArchive ar;
  ar.header = {{"format", "soundloc-checkpoint"},
               {"config", model.cfg.to_json()},
               {"seed", model.cfg.seed},
               {"stage", model.stage}};
  for (const auto& [name, var] : model.named_parameters()) {
    ar.reals.emplace(name, var->value);
  }
  ar.save(path);
}

inline Model load_checkpoint(const std::string& path) {
  TensorArchive ar = TensorArchive::load(path);
  if (ar.header.value("format", "") != "soundloc-checkpoint") {
    throw CorruptFile("load_checkpoint: not a checkpoint file: " + path);
  }
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(ar.header.at("config"));
  } catch (const nlohmann::json::exception&) {
    throw CorruptFile("load_checkpoint: unreadable config in " + path);
  }
  Model model(cfg);
  model.stage = ar.header.value("stage", "init");
  for (const auto& [name, var] : model.named_parameters()) {
    const RTensor& stored = ar.real(name);
    if (!stored.same_shape(var->value)) {
      throw VersionMismatch("load_checkpoint: shape mismatch for '" + name +
                            "' (configured model disagrees with file)");
    }
    var->value = stored;
  }
  return model;
}

}  // namespace soundloc::model
