// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "soundloc/dictionary.hpp"
#include "soundloc/metrics.hpp"
#include "soundloc/stage1.hpp"
#include "soundloc/stage2.hpp"

namespace soundloc::eval {

using dictionary::CategoryAssignment;
using dictionary::ObjectDictionary;
using model::Model;
using stage1::LoadedClip;

struct SingleEvalResult {
  double iou_at = 0.0;  // fraction of clips with IoU >= success threshold
  double auc = 0.0;
  std::vector<double> ious;
};

/// Single-source localization quality: the sigmoid map is upsampled to the
/// frame, max-normalized, thresholded at `box_threshold` and compared to
/// the annotated box by pixel counting.
inline SingleEvalResult evaluate_single(const Model& m,
                                        const std::vector<LoadedClip>& clips,
                                        double box_threshold = 0.5,
                                        double success_iou = 0.5) {
  if (clips.empty()) throw InvalidInput("evaluate_single: no clips");
  SingleEvalResult out;
  for (const LoadedClip& clip : clips) {
    if (!clip.record.has_box) {
      throw InvalidInput("evaluate_single: clip '" + clip.record.clip_id +
                         "' has no box annotation");
    }
    const RTensor f = m.encode_visual(clip.frame_input);
    const RTensor g = m.encode_audio(clip.spec_input);
    const RTensor l = m.localization_map(g, f);
    const int side = clip.frame_input.dim(1);
    const RTensor up = img::upsample_bilinear(l, side, side);
    const double mx = up.max_value();
    RTensor mask({side, side});
    if (mx > 0.0) {
      for (std::int64_t i = 0; i < up.numel(); ++i) {
        mask[i] = up[i] / mx >= box_threshold ? 1.0 : 0.0;
      }
    }
    out.ious.push_back(metrics::iou(mask, clip.record.box));
  }
  int pass = 0;
  for (const double v : out.ious) {
    if (v >= success_iou) ++pass;
  }
  out.iou_at = static_cast<double>(pass) / static_cast<double>(out.ious.size());
  out.auc = metrics::auc(out.ious);
  return out;
}

struct MultiEvalOptions {
  double box_threshold = 0.5;   // heatmap_to_box / IoU binarization rule
  double nsa_tau = 0.05;
  double ciou_threshold = 0.3;
  double map_iou = 0.3;
  std::uint64_t baseline_seed = 0;  // category shuffle for the random baseline
};

struct MultiEvalResult {
  metrics::CiouSummary ciou;
  metrics::CiouSummary random_baseline;  // shuffled category labels, same maps
  double nsa = 0.0;
  double sounding_map = 0.0;
  std::vector<metrics::EvalRecord> records;
};

/// Class-aware multi-source evaluation. Cluster maps are filtered by the
/// localization map and aggregated into per-category maps through the
/// cluster-to-category assignment. Predicted regions and boxes come from
/// each category map normalized by its own max and thresholded; NSA is
/// computed on the same maps normalized by the per-sample max and clamped
/// to [0,1].
inline MultiEvalResult evaluate_multi(const Model& m,
                                      const ObjectDictionary& dict,
                                      const CategoryAssignment& assignment,
                                      const std::vector<LoadedClip>& clips,
                                      const MultiEvalOptions& options = {}) {
  if (clips.empty()) throw InvalidInput("evaluate_multi: no clips");
  const int ncat = m.cfg.num_categories;
  MultiEvalResult out;
  std::vector<RTensor> silent_maps;
  std::vector<metrics::Detection> detections;
  std::vector<metrics::GroundTruthBox> ground_truth;
  std::vector<metrics::EvalRecord> baseline_records;
  Rng baseline_rng = stream_rng(options.baseline_seed, "random_baseline");

  for (std::size_t ci = 0; ci < clips.size(); ++ci) {
    const LoadedClip& clip = clips[ci];
    if (clip.record.split != "multi") {
      throw InvalidInput("evaluate_multi: clip '" + clip.record.clip_id +
                         "' is not a multi-source record");
    }
    const RTensor f = m.encode_visual(clip.frame_input);
    const RTensor g = m.encode_audio(clip.spec_input);
    const RTensor l = m.localization_map(g, f);
    const std::vector<RTensor> cluster_maps = stage2::category_maps(f, dict);
    const std::vector<RTensor> filtered = stage2::suppress_silent(cluster_maps, l);
    const std::vector<RTensor> per_category =
        dictionary::category_activation(filtered, assignment, ncat);

    // per-category detection score: sounding-object distribution mass
    const RTensor pv = stage2::visual_distribution(filtered);
    std::vector<double> cat_score(static_cast<std::size_t>(ncat), 0.0);
    for (std::size_t k = 0; k < filtered.size(); ++k) {
      cat_score[static_cast<std::size_t>(
          assignment.cluster_to_category[k])] += pv[static_cast<std::int64_t>(k)];
    }

    const int side = clip.frame_input.dim(1);
    std::vector<RTensor> up;
    double sample_max = 0.0;
    for (int c = 0; c < ncat; ++c) {
      up.push_back(img::upsample_bilinear(per_category[static_cast<std::size_t>(c)],
                                          side, side));
      sample_max = std::max(sample_max, up.back().max_value());
    }

    metrics::EvalRecord record;
    record.area = side * side;
    record.sounding.resize(static_cast<std::size_t>(ncat), 0);
    record.iou.resize(static_cast<std::size_t>(ncat), 0.0);
    std::vector<RTensor> masks;
    for (int c = 0; c < ncat; ++c) {
      const RTensor& map = up[static_cast<std::size_t>(c)];
      RTensor mask({side, side});
      const double mx = map.max_value();
      if (mx > 0.0) {
        for (std::int64_t i = 0; i < map.numel(); ++i) {
          mask[i] = map[i] / mx >= options.box_threshold ? 1.0 : 0.0;
        }
      }
      masks.push_back(std::move(mask));
    }

    for (std::size_t bi = 0; bi < clip.record.boxes.size(); ++bi) {
      const metrics::BoundingBox& box = clip.record.boxes[bi];
      const int c = box.category;
      if (c < 0 || c >= ncat) {
        throw InvalidInput("evaluate_multi: box category out of range");
      }
      record.sounding[static_cast<std::size_t>(c)] =
          clip.record.sounding[bi] ? 1 : 0;
      record.iou[static_cast<std::size_t>(c)] =
          metrics::iou(masks[static_cast<std::size_t>(c)], box);
      if (clip.record.sounding[bi]) {
        metrics::GroundTruthBox gt;
        gt.sample = static_cast<int>(ci);
        gt.box = box;
        ground_truth.push_back(gt);
      }
    }

    // NSA input: per-sample max normalization, clamped to [0,1]
    for (int c = 0; c < ncat; ++c) {
      if (record.sounding[static_cast<std::size_t>(c)]) continue;
      RTensor norm = up[static_cast<std::size_t>(c)];
      for (std::int64_t i = 0; i < norm.numel(); ++i) {
        norm[i] = sample_max > 0.0 ? std::clamp(norm[i] / sample_max, 0.0, 1.0)
                                   : 0.0;
      }
      silent_maps.push_back(std::move(norm));
    }

    // detections from the per-category heatmaps
    for (int c = 0; c < ncat; ++c) {
      const RTensor& map = up[static_cast<std::size_t>(c)];
      if (!(map.max_value() > 0.0)) continue;
      metrics::Detection det;
      det.sample = static_cast<int>(ci);
      det.box = metrics::heatmap_to_box(map, options.box_threshold);
      det.box.category = c;
      det.score = cat_score[static_cast<std::size_t>(c)];
      detections.push_back(det);
    }

    // random baseline: same masks, shuffled category claim
    std::vector<int> perm(static_cast<std::size_t>(ncat));
    for (int c = 0; c < ncat; ++c) perm[static_cast<std::size_t>(c)] = c;
    baseline_rng.shuffle(perm);
    metrics::EvalRecord baseline = record;
    for (std::size_t bi = 0; bi < clip.record.boxes.size(); ++bi) {
      const metrics::BoundingBox& box = clip.record.boxes[bi];
      baseline.iou[static_cast<std::size_t>(box.category)] = metrics::iou(
          masks[static_cast<std::size_t>(
              perm[static_cast<std::size_t>(box.category)])],
          box);
    }
    baseline_records.push_back(std::move(baseline));
    out.records.push_back(std::move(record));
  }

  out.ciou = metrics::ciou(out.records, options.ciou_threshold);
  out.random_baseline = metrics::ciou(baseline_records, options.ciou_threshold);
  out.nsa = silent_maps.empty() ? 1.0 : metrics::nsa(silent_maps, options.nsa_tau);
  out.sounding_map = ground_truth.empty()
                         ? 0.0
                         : metrics::sounding_map(detections, ground_truth,
                                                 options.map_iou);
  return out;
}

/// NMI between nearest-key cluster assignments of the given clips and their
/// category labels.
inline double nearest_key_nmi(const Model& m, const ObjectDictionary& dict,
                              const std::vector<LoadedClip>& clips,
                              double binarize_threshold = 0.05) {
  const RTensor reps =
      stage1::extract_all_representations(m, clips, binarize_threshold);
  std::vector<int> assignments, labels;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (clips[i].record.category < 0) {
      throw InvalidInput("nearest_key_nmi: unlabeled clip '" +
                         clips[i].record.clip_id + "'");
    }
    labels.push_back(clips[i].record.category);
    double best = std::numeric_limits<double>::max();
    int arg = 0;
    for (int k = 0; k < dict.num_keys(); ++k) {
      double d = 0.0;
      for (int c = 0; c < dict.key_dim(); ++c) {
        const double diff = reps(static_cast<int>(i), c) - dict.keys(k, c);
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        arg = k;
      }
    }
    assignments.push_back(arg);
  }
  return metrics::nmi(assignments, labels);
}

}  // namespace soundloc::eval
