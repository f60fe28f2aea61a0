// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "soundloc/dictionary.hpp"
#include "soundloc/stage1.hpp"

namespace soundloc::stage2 {

using ag::RVar;
using model::Model;

/// Per-key inner-product maps for one feature map: m^k(h,w) = d_k . f(:,h,w).
inline std::vector<RTensor> category_maps(
    const RTensor& f, const dictionary::ObjectDictionary& dict) {
  if (f.ndim() != 3) throw InvalidInput("category_maps: expected [C,H,W]");
  if (dict.key_dim() != f.dim(0)) {
    throw InvalidInput("category_maps: key width does not match features");
  }
  const int k = dict.num_keys(), c = f.dim(0), h = f.dim(1), w = f.dim(2);
  std::vector<RTensor> out;
  for (int ki = 0; ki < k; ++ki) {
    RTensor map({h, w});
    for (int ch = 0; ch < c; ++ch) {
      const double kv = dict.keys(ki, ch);
      const double* plane = f.data() + static_cast<std::int64_t>(ch) * h * w;
      for (int i = 0; i < h * w; ++i) map[i] += kv * plane[i];
    }
    out.push_back(std::move(map));
  }
  return out;
}

/// Sounding-object filter: s^k = m^k o l (Hadamard).
inline std::vector<RTensor> suppress_silent(const std::vector<RTensor>& maps,
                                            const RTensor& l) {
  std::vector<RTensor> out;
  for (const RTensor& m : maps) {
    if (!m.same_shape(l)) throw InvalidInput("suppress_silent: shape mismatch");
    RTensor s(m.shape());
    for (std::int64_t i = 0; i < m.numel(); ++i) s[i] = m[i] * l[i];
    out.push_back(std::move(s));
  }
  return out;
}

/// Category distribution of the visual scene: softmax over the GAP of each
/// map.
inline RTensor visual_distribution(const std::vector<RTensor>& maps) {
  if (maps.size() < 2) {
    throw InvalidInput("visual_distribution: need at least 2 maps");
  }
  RTensor probs({static_cast<int>(maps.size())});
  double mx = -std::numeric_limits<double>::max();
  for (std::size_t k = 0; k < maps.size(); ++k) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < maps[k].numel(); ++i) acc += maps[k][i];
    probs(static_cast<int>(k)) = acc / static_cast<double>(maps[k].numel());
    mx = std::max(mx, probs(static_cast<int>(k)));
  }
  double z = 0.0;
  for (std::int64_t i = 0; i < probs.numel(); ++i) {
    probs[i] = std::exp(probs[i] - mx);
    z += probs[i];
  }
  for (std::int64_t i = 0; i < probs.numel(); ++i) probs[i] /= z;
  return probs;
}

/// Audio category distribution softmax(h_a(g)). Requires a stage-1-trained
/// head.
inline RTensor audio_distribution(const Model& m, const RTensor& g) {
  if (m.stage == "init") {
    throw InvalidInput("audio_distribution: classification head is untrained");
  }
  RTensor logits = m.classify_audio(g);
  double mx = logits.max_value();
  double z = 0.0;
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    logits[i] = std::exp(logits[i] - mx);
    z += logits[i];
  }
  for (std::int64_t i = 0; i < logits.numel(); ++i) logits[i] /= z;
  return logits;
}

/// KL(pv || pa) with the same floor semantics as the training loss.
inline double consistency_loss(const RTensor& pv, const RTensor& pa,
                               double floor = 1e-8) {
  if (!pv.same_shape(pa) || pv.ndim() != 1) {
    throw InvalidInput("consistency_loss: expected matching vectors");
  }
  double acc = 0.0;
  for (std::int64_t i = 0; i < pv.numel(); ++i) {
    if (pv[i] <= 0.0) continue;
    acc += pv[i] * std::log(pv[i] / std::max(pa[i], floor));
  }
  return acc;
}

/// Final class-specific maps: per-cell softmax across the K maps.
inline std::vector<RTensor> infer_class_maps(const std::vector<RTensor>& maps) {
  if (maps.size() < 2) {
    throw InvalidInput("infer_class_maps: need at least 2 maps");
  }
  const int k = static_cast<int>(maps.size());
  for (const RTensor& m : maps) {
    if (!m.same_shape(maps[0])) {
      throw InvalidInput("infer_class_maps: map shape mismatch");
    }
  }
  std::vector<RTensor> out(maps.begin(), maps.end());
  for (std::int64_t i = 0; i < maps[0].numel(); ++i) {
    double mx = maps[0][i];
    for (int ki = 1; ki < k; ++ki) mx = std::max(mx, maps[static_cast<std::size_t>(ki)][i]);
    double z = 0.0;
    for (int ki = 0; ki < k; ++ki) {
      out[static_cast<std::size_t>(ki)][i] =
          std::exp(maps[static_cast<std::size_t>(ki)][i] - mx);
      z += out[static_cast<std::size_t>(ki)][i];
    }
    for (int ki = 0; ki < k; ++ki) out[static_cast<std::size_t>(ki)][i] /= z;
  }
  return out;
}

struct Stage2Flags {
  bool use_loc = true;          // lambda * L_loc term
  bool use_prod = true;         // Hadamard filter before the distribution
  bool use_consistency = true;  // KL alignment term
};

struct Stage2LossParts {
  RVar total;
  double consistency_value = 0.0;
  double localization_value = 0.0;
};

/// Combined stage-2 objective L_2 = L_c + lambda * L_loc over one batch.
/// `keys` must be a non-trainable leaf (the dictionary is frozen). The
/// audio distribution acts as the alignment target: its softmax is
/// detached, so the KL term shapes the sounding-object distribution
/// instead of letting both sides drift to a degenerate match.
inline Stage2LossParts stage2_loss(const Model& m, const RVar& keys,
                                   const RVar& g, const RVar& f,
                                   const stage1::PairCombos& combos,
                                   double lambda, const Stage2Flags& flags) {
  if (lambda < 0.0) throw InvalidInput("stage2_loss: lambda must be >= 0");
  Stage2LossParts parts;

  RVar consistency;
  if (flags.use_consistency) {
    auto l = m.localization_map(g, f);  // matched pairs only
    auto maps = ag::category_maps(f, keys);
    auto s = flags.use_prod ? ag::hadamard_map(maps, l) : maps;
    auto pv = ag::softmax_rows(ag::gap2d(s));
    auto pa = ag::constant(ag::softmax_rows(m.audio_logits(g))->value);
    consistency = ag::kl_mean(pv, pa);
    parts.consistency_value = consistency->value[0];
  }
  RVar localization;
  if (flags.use_loc) {
    localization = stage1::loc_loss(m, g, f, combos);
    parts.localization_value = localization->value[0];
  }

  if (flags.use_consistency && flags.use_loc) {
    parts.total = ag::add_scaled(consistency, localization, lambda);
  } else if (flags.use_consistency) {
    parts.total = consistency;
  } else if (flags.use_loc) {
    parts.total = ag::scale(localization, lambda);
  } else {
    parts.total = ag::constant(RTensor({1}));
  }
  return parts;
}

struct Stage2Options {
  int steps = 200;
  int batch_size = 16;
  double lambda = 0.5;
  double learning_rate = 0.0;     // 0: reuse the checkpoint's configured rate
  double visual_lr_scale = 1.0;   // fine-tuning factor for the visual encoder
  Stage2Flags flags;
};

struct Stage2Result {
  Model model;
  std::vector<stage1::LogEntry> log;
};

/// Stage-2 training over cocktail clips. Encoders and heads keep receiving
/// gradients; the dictionary keys are frozen constants.
inline Stage2Result train_stage2(const std::vector<stage1::LoadedClip>& multis,
                                 const Model& stage1_model,
                                 const dictionary::ObjectDictionary& dict,
                                 const Stage2Options& options) {
  if (stage1_model.stage == "init") {
    throw InvalidInput("train_stage2: stage-1 checkpoint required");
  }
  if (dict.keys.numel() == 0) {
    throw InvalidInput("train_stage2: missing dictionary");
  }
  if (dict.key_dim() != stage1_model.cfg.channels) {
    throw InvalidInput("train_stage2: dictionary width mismatch");
  }
  if (options.steps > 0 && multis.size() < 2) {
    throw InvalidInput("train_stage2: need at least 2 cocktail clips");
  }

  Stage2Result result{stage1_model.clone(), {}};
  Model& m = result.model;
  auto keys = ag::constant(dict.keys);
  const double lr = options.learning_rate > 0.0 ? options.learning_rate
                                                : m.cfg.learning_rate;
  // the dictionary indexes stage-1 visual features, so the visual encoder
  // moves on a reduced rate while the audio side adapts to mixtures
  std::vector<ag::RVar> visual_params, other_params;
  for (const auto& [name, var] : m.named_parameters()) {
    (name[0] == 'v' ? visual_params : other_params).push_back(var);
  }
  nn::Adam<double> opt(other_params, lr);
  nn::Adam<double> visual_opt(visual_params, lr * options.visual_lr_scale);
  if (options.steps > 0) {
    stage1::BatchStream stream(
        static_cast<int>(multis.size()), options.batch_size,
        stream_rng(m.cfg.seed, "stage2_batches"));
    for (int step = 0; step < options.steps; ++step) {
      const std::vector<int> batch = stream.next();
      auto f = m.forward_visual(
          ag::constant(stage1::batch_frames(multis, batch)));
      auto g = m.forward_audio(
          ag::constant(stage1::batch_specs(multis, batch)));
      const stage1::PairCombos combos = stage1::make_pair_combos(
          stage1::batch_ids(multis, batch), stream.rng());
      Stage2LossParts parts =
          stage2_loss(m, keys, g, f, combos, options.lambda, options.flags);
      opt.zero_grad();
      visual_opt.zero_grad();
      ag::backward(parts.total);
      opt.step();
      visual_opt.step();
      result.log.push_back({step, "stage2", parts.total->value[0], -1.0});
    }
  }
  m.stage = "stage2";
  return result;
}

}  // namespace soundloc::stage2
