// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "soundloc/data.hpp"
#include "soundloc/dictionary.hpp"
#include "soundloc/model.hpp"
#include "soundloc/wav.hpp"

namespace soundloc::stage1 {

using ag::RVar;
using model::Model;
using model::ModelConfig;

/// Clip with its cached model-ready tensors.
struct LoadedClip {
  data::ClipRecord record;
  RTensor frame_input;  // [3,S,S]
  RTensor spec_input;   // [1,T,M]
};

/// In-memory dataset view. Media is decoded once: audio is resampled to
/// 16 kHz and turned into log-mel inputs, frames into normalized tensors.
struct Dataset {
  std::vector<LoadedClip> singles;
  std::vector<LoadedClip> multis;

  static Dataset load(const std::string& manifest_path,
                      const ModelConfig& cfg) {
    Dataset out;
    for (data::ClipRecord& rec : data::load_manifest(manifest_path)) {
      LoadedClip clip;
      audio::AudioClip wav = audio::read_wav(rec.audio_path);
      wav = audio::resample(wav, 16000);
      const audio::LogMelSpectrogram spec =
          audio::log_mel(wav, 160, 80, cfg.mel_bands);
      if (spec.frames() != cfg.spec_frames) {
        throw InvalidInput("Dataset: clip '" + rec.clip_id + "' yields " +
                           std::to_string(spec.frames()) +
                           " frames, config expects " +
                           std::to_string(cfg.spec_frames));
      }
      clip.spec_input = model::spec_to_input(spec);
      clip.frame_input = model::image_to_input(img::read_png(rec.frame_path));
      clip.record = std::move(rec);
      (clip.record.split == "single" ? out.singles : out.multis)
          .push_back(std::move(clip));
    }
    return out;
  }
};

/// Matched/mismatched combinations over one batch. Positives pair each clip
/// with itself; negatives re-pair audio with a derangement of the visual
/// entries, so i != j always and one negative exists per positive.
struct PairCombos {
  std::vector<int> audio_index;
  std::vector<int> visual_index;
  std::vector<double> label;
};

inline PairCombos make_pair_combos(const std::vector<std::string>& clip_ids,
                                   Rng& rng) {
  const int b = static_cast<int>(clip_ids.size());
  if (b < 2) throw InvalidInput("make_pair_combos: need at least 2 clips");
  PairCombos combos;
  for (int i = 0; i < b; ++i) {
    combos.audio_index.push_back(i);
    combos.visual_index.push_back(i);
    combos.label.push_back(1.0);
  }
  const std::vector<int> perm = rng.derangement(b);
  for (int i = 0; i < b; ++i) {
    if (perm[static_cast<std::size_t>(i)] == i ||
        clip_ids[static_cast<std::size_t>(i)] ==
            clip_ids[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]) {
      throw InvalidInput("make_pair_combos: negative pair collides with clip");
    }
    combos.audio_index.push_back(i);
    combos.visual_index.push_back(perm[static_cast<std::size_t>(i)]);
    combos.label.push_back(0.0);
  }
  return combos;
}

/// Correspondence loss: BCE between match labels and the global max pooled
/// localization map of each combination.
inline RVar loc_loss(const Model& m, const RVar& g, const RVar& f,
                     const PairCombos& combos) {
  bool has_pos = false, has_neg = false;
  for (const double y : combos.label) {
    has_pos = has_pos || y > 0.5;
    has_neg = has_neg || y < 0.5;
  }
  if (!has_pos || !has_neg) {
    throw InvalidInput("loc_loss: need at least one positive and one negative");
  }
  auto maps = m.localization_map(ag::gather(g, combos.audio_index),
                                 ag::gather(f, combos.visual_index));
  return ag::bce_mean(ag::gmp_map(maps), combos.label);
}

/// Weighted pooling of feature columns under the thresholded localization
/// map. If no cell reaches the threshold the raw map is used as weights;
/// an all-zero map falls back to uniform pooling.
inline RTensor extract_object_representation(const RTensor& f,
                                             const RTensor& l,
                                             double binarize_threshold = 0.05) {
  if (f.ndim() != 3 || l.ndim() != 2 || f.dim(1) != l.dim(0) ||
      f.dim(2) != l.dim(1)) {
    throw InvalidInput("extract_object_representation: shape mismatch");
  }
  if (binarize_threshold <= 0.0 || binarize_threshold >= 1.0) {
    throw InvalidInput(
        "extract_object_representation: threshold must be in (0,1)");
  }
  const int c = f.dim(0), hw = l.dim(0) * l.dim(1);
  std::vector<double> w(static_cast<std::size_t>(hw));
  double total = 0.0;
  for (int i = 0; i < hw; ++i) {
    const double v = l[i] >= binarize_threshold ? l[i] : 0.0;
    w[static_cast<std::size_t>(i)] = v;
    total += v;
  }
  if (total <= 0.0) {
    total = 0.0;
    for (int i = 0; i < hw; ++i) {
      w[static_cast<std::size_t>(i)] = l[i];
      total += l[i];
    }
  }
  RTensor rep({c});
  if (total <= 0.0) {  // degenerate all-zero map: uniform pooling
    for (int i = 0; i < hw; ++i) w[static_cast<std::size_t>(i)] = 1.0;
    total = hw;
  }
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = f.data() + static_cast<std::int64_t>(ch) * hw;
    double acc = 0.0;
    for (int i = 0; i < hw; ++i) acc += plane[i] * w[static_cast<std::size_t>(i)];
    rep(ch) = acc / total;
  }
  return rep;
}

/// Pseudo-label classification loss: cross entropy of both heads, summed.
inline RVar classification_loss(const Model& m, const RVar& g, const RVar& f,
                                const std::vector<int>& labels) {
  return ag::add(ag::ce_mean(m.audio_logits(g), labels),
                 ag::ce_mean(m.visual_logits(f), labels));
}

struct Stage1Schedule {
  int alternations = 4;
  int loc_epochs = 1;
  int cls_epochs = 1;
  int loc_steps = 0;  // per phase; overrides epochs when > 0
  int cls_steps = 0;
  int batch_size = 16;
  double cls_lr_scale = 1.0;  // classification-phase learning-rate factor
};

enum class Supervision { kPseudo, kOracleAudio, kOracleVisual };

inline Supervision supervision_from_string(const std::string& s) {
  if (s == "pseudo") return Supervision::kPseudo;
  if (s == "oracle-a") return Supervision::kOracleAudio;
  if (s == "oracle-v") return Supervision::kOracleVisual;
  throw ConfigError("unknown supervision source '" + s +
                    "' (want pseudo, oracle-a or oracle-v)");
}

struct LogEntry {
  int step = 0;
  std::string phase;
  double loss = 0.0;
  double pair_accuracy = -1.0;  // negative when not applicable
};

struct Stage1Result {
  Model model;
  dictionary::ObjectDictionary dict;
  RTensor representations;  // [N, C]
  std::vector<int> pseudo_labels;
  std::vector<std::string> clip_ids;
  std::vector<LogEntry> log;
};

namespace detail {

inline RTensor stack_rows(const std::vector<const RTensor*>& rows) {
  std::vector<int> shape = rows.front()->shape();
  shape.insert(shape.begin(), static_cast<int>(rows.size()));
  RTensor out(shape);
  const std::int64_t stride = rows.front()->numel();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i]->data(), rows[i]->data() + stride,
              out.data() + static_cast<std::int64_t>(i) * stride);
  }
  return out;
}

}  // namespace detail

inline RTensor batch_frames(const std::vector<LoadedClip>& clips,
                            const std::vector<int>& indices) {
  std::vector<const RTensor*> rows;
  for (const int i : indices) {
    rows.push_back(&clips[static_cast<std::size_t>(i)].frame_input);
  }
  return detail::stack_rows(rows);
}

inline RTensor batch_specs(const std::vector<LoadedClip>& clips,
                           const std::vector<int>& indices) {
  std::vector<const RTensor*> rows;
  for (const int i : indices) {
    rows.push_back(&clips[static_cast<std::size_t>(i)].spec_input);
  }
  return detail::stack_rows(rows);
}

inline std::vector<std::string> batch_ids(const std::vector<LoadedClip>& clips,
                                          const std::vector<int>& indices) {
  std::vector<std::string> ids;
  for (const int i : indices) {
    ids.push_back(clips[static_cast<std::size_t>(i)].record.clip_id);
  }
  return ids;
}

/// Endless shuffled index stream over a dataset split.
class BatchStream {
 public:
  BatchStream(int n, int batch, Rng rng)
      : n_(n), batch_(std::min(batch, n)), rng_(std::move(rng)) {
    if (n_ < 2) throw InvalidInput("BatchStream: need at least 2 clips");
    if (batch_ < 2) batch_ = 2;
    order_.resize(static_cast<std::size_t>(n_));
    for (int i = 0; i < n_; ++i) order_[static_cast<std::size_t>(i)] = i;
    rng_.shuffle(order_);
  }

  std::vector<int> next() {
    std::vector<int> out;
    while (static_cast<int>(out.size()) < batch_) {
      if (pos_ >= n_) {
        rng_.shuffle(order_);
        pos_ = 0;
      }
      out.push_back(order_[static_cast<std::size_t>(pos_++)]);
    }
    return out;
  }

  int steps_per_epoch() const { return std::max(1, n_ / batch_); }
  Rng& rng() { return rng_; }

 private:
  int n_, batch_;
  int pos_ = 0;
  std::vector<int> order_;
  Rng rng_;
};

/// Extracts the masked object representation of every clip in `clips`
/// under the current model, in manifest order.
inline RTensor extract_all_representations(const Model& m,
                                           const std::vector<LoadedClip>& clips,
                                           double binarize_threshold = 0.05,
                                           int batch = 32) {
  if (clips.empty()) {
    throw InvalidInput("extract_all_representations: empty clip set");
  }
  RTensor reps({static_cast<int>(clips.size()), m.cfg.channels});
  for (std::size_t start = 0; start < clips.size();
       start += static_cast<std::size_t>(batch)) {
    std::vector<int> indices;
    for (std::size_t i = start;
         i < std::min(clips.size(), start + static_cast<std::size_t>(batch));
         ++i) {
      indices.push_back(static_cast<int>(i));
    }
    auto f = m.forward_visual(ag::constant(batch_frames(clips, indices)));
    auto g = m.forward_audio(ag::constant(batch_specs(clips, indices)));
    auto maps = m.localization_map(g, f);
    const RTensor& fv = f->value;
    const int c = fv.dim(1), h = fv.dim(2), w = fv.dim(3);
    for (std::size_t bi = 0; bi < indices.size(); ++bi) {
      RTensor fi({c, h, w});
      std::copy(&fv(static_cast<int>(bi), 0, 0, 0),
                &fv(static_cast<int>(bi), 0, 0, 0) + fi.numel(), fi.data());
      RTensor li({h, w});
      std::copy(&maps->value(static_cast<int>(bi), 0, 0, 0),
                &maps->value(static_cast<int>(bi), 0, 0, 0) + li.numel(),
                li.data());
      const RTensor rep = extract_object_representation(fi, li, binarize_threshold);
      std::copy(rep.data(), rep.data() + rep.numel(),
                &reps(static_cast<int>(indices[bi]), 0));
    }
  }
  return reps;
}

/// Fraction of matched/mismatched combinations classified correctly by
/// thresholding the pooled localization map at 0.5. When every clip is
/// labeled, mismatched pairs are drawn across categories; same-category
/// clips of this dataset family are interchangeable, so clip-identity
/// negatives would cap the measurable accuracy below 1. Unlabeled clips
/// fall back to the training derangement rule.
inline double pair_accuracy(const Model& m,
                            const std::vector<LoadedClip>& clips,
                            std::uint64_t seed) {
  if (clips.size() < 2) throw InvalidInput("pair_accuracy: need >= 2 clips");
  std::vector<int> indices;
  std::vector<std::string> ids;
  bool labeled = true;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    indices.push_back(static_cast<int>(i));
    ids.push_back(clips[i].record.clip_id);
    labeled = labeled && clips[i].record.category >= 0;
  }
  auto f = m.forward_visual(ag::constant(batch_frames(clips, indices)));
  auto g = m.forward_audio(ag::constant(batch_specs(clips, indices)));
  Rng rng = stream_rng(seed, "pair_accuracy");
  PairCombos combos;
  bool cross_category = labeled;
  if (labeled) {
    const int n = static_cast<int>(clips.size());
    for (int i = 0; i < n; ++i) {
      combos.audio_index.push_back(i);
      combos.visual_index.push_back(i);
      combos.label.push_back(1.0);
    }
    for (int i = 0; i < n; ++i) {
      std::vector<int> others;
      for (int j = 0; j < n; ++j) {
        if (clips[static_cast<std::size_t>(j)].record.category !=
            clips[static_cast<std::size_t>(i)].record.category) {
          others.push_back(j);
        }
      }
      if (others.empty()) {
        cross_category = false;
        break;
      }
      combos.audio_index.push_back(i);
      combos.visual_index.push_back(
          others[static_cast<std::size_t>(rng.uniform_int(
              static_cast<int>(others.size())))]);
      combos.label.push_back(0.0);
    }
  }
  if (!cross_category) combos = make_pair_combos(ids, rng);
  auto maps = m.localization_map(ag::gather(g, combos.audio_index),
                                 ag::gather(f, combos.visual_index));
  auto pooled = ag::gmp_map(maps);
  int correct = 0;
  for (std::size_t i = 0; i < combos.label.size(); ++i) {
    const bool predicted = pooled->value[static_cast<std::int64_t>(i)] >= 0.5;
    const bool actual = combos.label[i] > 0.5;
    if (predicted == actual) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(combos.label.size());
}

namespace detail {

inline std::vector<int> oracle_labels(const std::vector<LoadedClip>& clips) {
  std::vector<int> labels;
  for (const LoadedClip& c : clips) {
    if (c.record.category < 0) {
      throw InvalidInput("oracle supervision requires labeled clips (clip '" +
                         c.record.clip_id + "' has no category)");
    }
    labels.push_back(c.record.category);
  }
  return labels;
}

/// Builds the dictionary for the current encoder state. Pseudo supervision
/// clusters the representations; oracle supervision takes the provided
/// labels as assignments and label-group means as keys.
inline std::pair<dictionary::ObjectDictionary, std::vector<int>>
build_dictionary(const Model& m, const std::vector<LoadedClip>& clips,
                 const RTensor& reps, Supervision supervision,
                 std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const LoadedClip& c : clips) ids.push_back(c.record.clip_id);
  if (supervision == Supervision::kPseudo) {
    dictionary::ObjectDictionary dict =
        dictionary::fit_dictionary(reps, ids, m.cfg.clusters, seed);
    return {dict, dict.assignments};
  }
  const std::vector<int> labels = oracle_labels(clips);
  dictionary::ObjectDictionary dict;
  dict.clip_ids = ids;
  dict.assignments = labels;
  dict.keys = RTensor({m.cfg.num_categories, m.cfg.channels});
  std::vector<int> counts(static_cast<std::size_t>(m.cfg.num_categories), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y >= m.cfg.num_categories) {
      throw InvalidInput("oracle label out of configured category range");
    }
    ++counts[static_cast<std::size_t>(y)];
    for (int ch = 0; ch < m.cfg.channels; ++ch) {
      dict.keys(y, ch) += reps(static_cast<int>(i), ch);
    }
  }
  for (int y = 0; y < m.cfg.num_categories; ++y) {
    if (counts[static_cast<std::size_t>(y)] > 0) {
      for (int ch = 0; ch < m.cfg.channels; ++ch) {
        dict.keys(y, ch) /= counts[static_cast<std::size_t>(y)];
      }
    }
  }
  return {dict, labels};
}

/// Permutes the cluster ids of a fresh fit so each key lands on its nearest
/// predecessor; keeps pseudo labels stable across alternations so the
/// classification heads are not reset by an arbitrary relabeling.
inline void align_clusters(dictionary::ObjectDictionary& dict,
                           const RTensor& previous_keys) {
  const int k = dict.num_keys(), c = dict.key_dim();
  if (!previous_keys.same_shape(dict.keys)) return;
  struct Cand {
    double dist;
    int from, to;
  };
  std::vector<Cand> cands;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      double d = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const double diff = dict.keys(i, ch) - previous_keys(j, ch);
        d += diff * diff;
      }
      cands.push_back({d, i, j});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    return a.from != b.from ? a.from < b.from : a.to < b.to;
  });
  std::vector<int> target(static_cast<std::size_t>(k), -1);
  std::vector<bool> taken(static_cast<std::size_t>(k), false);
  int assigned = 0;
  for (const Cand& cand : cands) {
    if (assigned == k) break;
    if (target[static_cast<std::size_t>(cand.from)] >= 0 ||
        taken[static_cast<std::size_t>(cand.to)]) {
      continue;
    }
    target[static_cast<std::size_t>(cand.from)] = cand.to;
    taken[static_cast<std::size_t>(cand.to)] = true;
    ++assigned;
  }
  RTensor keys({k, c});
  for (int i = 0; i < k; ++i) {
    const int j = target[static_cast<std::size_t>(i)];
    for (int ch = 0; ch < c; ++ch) keys(j, ch) = dict.keys(i, ch);
  }
  dict.keys = std::move(keys);
  for (int& a : dict.assignments) a = target[static_cast<std::size_t>(a)];
}

}  // namespace detail

/// Stage-1 training: alternates the correspondence objective with
/// clustering (no gradient) and pseudo-label classification, then emits the
/// final dictionary built from the trained encoders.
inline Stage1Result train_stage1(const Dataset& dataset,
                                 const ModelConfig& cfg,
                                 const Stage1Schedule& schedule,
                                 Supervision supervision = Supervision::kPseudo,
                                 double binarize_threshold = 0.05) {
  if (dataset.singles.size() < 2) {
    throw InvalidInput("train_stage1: need at least 2 single-source clips");
  }
  Stage1Result result{Model(cfg), {}, RTensor({1}), {}, {}, {}};
  Model& m = result.model;
  // the two phases keep separate optimizer state
  nn::Adam<double> loc_opt(m.parameters(), cfg.learning_rate);
  nn::Adam<double> cls_opt(m.parameters(),
                           cfg.learning_rate * schedule.cls_lr_scale);
  BatchStream stream(
      static_cast<int>(dataset.singles.size()), schedule.batch_size,
      stream_rng(cfg.seed, "stage1_batches"));
  const int loc_steps = schedule.loc_steps > 0
                            ? schedule.loc_steps
                            : schedule.loc_epochs * stream.steps_per_epoch();
  const int cls_steps = schedule.cls_steps > 0
                            ? schedule.cls_steps
                            : schedule.cls_epochs * stream.steps_per_epoch();

  int global_step = 0;
  std::vector<int> labels;  // per-singles pseudo labels, set at clustering
  RTensor previous_keys({1});
  for (int alt = 0; alt < schedule.alternations; ++alt) {
    for (int step = 0; step < loc_steps; ++step) {
      const std::vector<int> batch = stream.next();
      auto f = m.forward_visual(
          ag::constant(batch_frames(dataset.singles, batch)));
      auto g = m.forward_audio(
          ag::constant(batch_specs(dataset.singles, batch)));
      const PairCombos combos =
          make_pair_combos(batch_ids(dataset.singles, batch), stream.rng());
      auto loss = loc_loss(m, g, f, combos);
      loc_opt.zero_grad();
      ag::backward(loss);
      loc_opt.step();

      auto maps = m.localization_map(ag::gather(g, combos.audio_index),
                                     ag::gather(f, combos.visual_index));
      auto pooled = ag::gmp_map(maps);
      int correct = 0;
      for (std::size_t i = 0; i < combos.label.size(); ++i) {
        if ((pooled->value[static_cast<std::int64_t>(i)] >= 0.5) ==
            (combos.label[i] > 0.5)) {
          ++correct;
        }
      }
      result.log.push_back({global_step++, "localization", loss->value[0],
                            static_cast<double>(correct) /
                                static_cast<double>(combos.label.size())});
    }

    // clustering step: representations only, no gradient to the encoders
    const RTensor reps = extract_all_representations(
        m, dataset.singles, binarize_threshold);
    auto [dict, pseudo] = detail::build_dictionary(
        m, dataset.singles, reps, supervision,
        splitmix64(cfg.seed ^ (0x636c75ULL + static_cast<std::uint64_t>(alt))));
    if (supervision == Supervision::kPseudo && alt > 0) {
      detail::align_clusters(dict, previous_keys);
      labels = dict.assignments;
    } else {
      labels = pseudo;
    }
    previous_keys = dict.keys;

    for (int step = 0; step < cls_steps; ++step) {
      const std::vector<int> batch = stream.next();
      auto f = m.forward_visual(
          ag::constant(batch_frames(dataset.singles, batch)));
      auto g = m.forward_audio(
          ag::constant(batch_specs(dataset.singles, batch)));
      std::vector<int> batch_labels;
      for (const int i : batch) {
        batch_labels.push_back(labels[static_cast<std::size_t>(i)]);
      }
      auto loss = classification_loss(m, g, f, batch_labels);
      cls_opt.zero_grad();
      ag::backward(loss);
      cls_opt.step();
      result.log.push_back(
          {global_step++, "classification", loss->value[0], -1.0});
    }
  }

  // final dictionary from the trained encoders
  result.representations =
      extract_all_representations(m, dataset.singles, binarize_threshold);
  auto [dict, pseudo] = detail::build_dictionary(
      m, dataset.singles, result.representations, supervision,
      splitmix64(cfg.seed ^ 0x66696e616cULL));
  if (supervision == Supervision::kPseudo && previous_keys.numel() > 1) {
    detail::align_clusters(dict, previous_keys);
    pseudo = dict.assignments;
  }
  result.dict = std::move(dict);
  result.pseudo_labels = std::move(pseudo);
  for (const LoadedClip& c : dataset.singles) {
    result.clip_ids.push_back(c.record.clip_id);
  }
  m.stage = "stage1";
  return result;
}

}  // namespace soundloc::stage1
