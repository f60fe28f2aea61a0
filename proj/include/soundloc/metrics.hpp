// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "soundloc/common.hpp"
#include "soundloc/tensor.hpp"

namespace soundloc::metrics {

/// Axis-aligned pixel box, inclusive-exclusive coordinates.
struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int category = -1;
  bool sounding = false;

  int area() const { return (x1 - x0) * (y1 - y0); }

  void validate(int width, int height) const {
    if (x0 >= x1 || y0 >= y1 || x0 < 0 || y0 < 0 || x1 > width || y1 > height) {
      throw InvalidInput("BoundingBox: invalid or out of bounds");
    }
  }
};

struct EvalRecord {
  std::vector<double> iou;         // per category
  std::vector<std::uint8_t> sounding;  // delta_k
  int area = 0;                    // H * W of the localization map
};

struct CiouSummary {
  double at_threshold = 0.0;  // fraction of samples with score >= threshold
  double mean_score = 0.0;    // raw per-sample weighted-average mean
};

struct Detection {
  int sample = 0;
  BoundingBox box;
  double score = 0.0;
};

struct GroundTruthBox {
  int sample = 0;
  BoundingBox box;
};

/// Minimal box covering all cells whose max-normalized value reaches
/// `rel_threshold`. Throws on maps with no positive activation.
inline BoundingBox heatmap_to_box(const RTensor& map,
                                  double rel_threshold = 0.5) {
  if (map.ndim() != 2) throw InvalidInput("heatmap_to_box: expected H x W map");
  const int H = map.dim(0), W = map.dim(1);
  const double mx = map.max_value();
  if (!(mx > 0.0)) {
    throw InvalidInput("heatmap_to_box: map has no positive activation");
  }
  int x0 = W, y0 = H, x1 = 0, y1 = 0;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      if (map(r, c) / mx >= rel_threshold) {
        x0 = std::min(x0, c);
        y0 = std::min(y0, r);
        x1 = std::max(x1, c + 1);
        y1 = std::max(y1, r + 1);
      }
    }
  }
  BoundingBox box;
  box.x0 = x0;
  box.y0 = y0;
  box.x1 = x1;
  box.y1 = y1;
  return box;
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const int ix0 = std::max(a.x0, b.x0);
  const int iy0 = std::max(a.y0, b.y0);
  const int ix1 = std::min(a.x1, b.x1);
  const int iy1 = std::min(a.y1, b.y1);
  const int inter = std::max(0, ix1 - ix0) * std::max(0, iy1 - iy0);
  const int uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / uni : 0.0;
}

/// IoU between a binary mask (entries > 0.5 are foreground) and a box.
inline double iou(const RTensor& mask, const BoundingBox& box) {
  if (mask.ndim() != 2) throw InvalidInput("iou: expected H x W mask");
  const int H = mask.dim(0), W = mask.dim(1);
  std::int64_t inter = 0, uni = 0;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const bool in_mask = mask(r, c) > 0.5;
      const bool in_box = c >= box.x0 && c < box.x1 && r >= box.y0 && r < box.y1;
      if (in_mask && in_box) ++inter;
      if (in_mask || in_box) ++uni;
    }
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Success-ratio curve r(t) on the grid t in {0, 0.05, ..., 1.0}, integrated
/// with the trapezoid rule.
inline double auc(const std::vector<double>& ious) {
  if (ious.empty()) throw InvalidInput("auc: empty IoU list");
  for (const double v : ious) {
    if (v < 0.0 || v > 1.0) throw InvalidInput("auc: IoU outside [0,1]");
  }
  constexpr int kSteps = 20;
  std::vector<double> ratio(kSteps + 1, 0.0);
  for (int i = 0; i <= kSteps; ++i) {
    const double t = static_cast<double>(i) / kSteps;
    int pass = 0;
    for (const double v : ious) {
      if (v >= t) ++pass;
    }
    ratio[static_cast<std::size_t>(i)] =
        static_cast<double>(pass) / static_cast<double>(ious.size());
  }
  double area = 0.0;
  for (int i = 0; i < kSteps; ++i) {
    area += 0.5 *
            (ratio[static_cast<std::size_t>(i)] +
             ratio[static_cast<std::size_t>(i) + 1]) /
            kSteps;
  }
  return area;
}

/// Per-sample score: sum_k delta_k IoU_k / sum_k delta_k. `at_threshold` is
/// the fraction of samples whose score reaches the threshold, `mean_score`
/// the raw mean.
inline CiouSummary ciou(const std::vector<EvalRecord>& records,
                        double iou_threshold = 0.3) {
  if (records.empty()) throw InvalidInput("ciou: no records");
  double sum = 0.0;
  int pass = 0;
  for (const EvalRecord& r : records) {
    if (r.iou.size() != r.sounding.size()) {
      throw InvalidInput("ciou: record field length mismatch");
    }
    double num = 0.0;
    int den = 0;
    for (std::size_t k = 0; k < r.iou.size(); ++k) {
      if (r.sounding[k]) {
        num += r.iou[k];
        ++den;
      }
    }
    if (den == 0) throw InvalidInput("ciou: record with no sounding category");
    const double score = num / den;
    sum += score;
    if (score >= iou_threshold) ++pass;
  }
  CiouSummary out;
  out.mean_score = sum / static_cast<double>(records.size());
  out.at_threshold = static_cast<double>(pass) / static_cast<double>(records.size());
  return out;
}

/// Fraction of silent-map area below tau. Maps must already be normalized
/// to [0,1] by the per-sample maximum.
inline double nsa(const std::vector<RTensor>& silent_maps, double tau = 0.05) {
  if (silent_maps.empty()) throw InvalidInput("nsa: no silent maps");
  std::int64_t below = 0, total = 0;
  for (const RTensor& m : silent_maps) {
    for (std::int64_t i = 0; i < m.numel(); ++i) {
      if (m[i] < tau) ++below;
    }
    total += m.numel();
  }
  return static_cast<double>(below) / static_cast<double>(total);
}

/// Mutual information normalized by the arithmetic mean of the entropies.
/// If both partitions are single-class the partitions coincide and NMI is 1;
/// if exactly one is single-class it is 0.
inline double nmi(const std::vector<int>& assignments,
                  const std::vector<int>& labels) {
  if (assignments.size() != labels.size() || assignments.empty()) {
    throw InvalidInput("nmi: length mismatch or empty input");
  }
  const double n = static_cast<double>(assignments.size());
  std::map<int, double> ca, cb;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    ca[assignments[i]] += 1.0;
    cb[labels[i]] += 1.0;
    joint[{assignments[i], labels[i]}] += 1.0;
  }
  double ha = 0.0, hb = 0.0;
  for (const auto& [k, c] : ca) {
    const double p = c / n;
    ha -= p * std::log(p);
  }
  for (const auto& [k, c] : cb) {
    const double p = c / n;
    hb -= p * std::log(p);
  }
  if (ha <= 0.0 && hb <= 0.0) return 1.0;
  if (ha <= 0.0 || hb <= 0.0) return 0.0;
  double mi = 0.0;
  for (const auto& [kv, c] : joint) {
    const double pij = c / n;
    const double pi = ca[kv.first] / n;
    const double pj = cb[kv.second] / n;
    mi += pij * std::log(pij / (pi * pj));
  }
  return std::clamp(2.0 * mi / (ha + hb), 0.0, 1.0);
}

/// Sounding mAP: 11-point interpolated average precision per category at
/// IoU >= iou_t, averaged over the categories present in the ground truth.
/// Ground truth must contain only sounding objects.
inline double sounding_map(std::vector<Detection> detections,
                           const std::vector<GroundTruthBox>& ground_truth,
                           double iou_t = 0.3) {
  if (ground_truth.empty()) throw InvalidInput("sounding_map: no ground truth");
  std::map<int, std::vector<GroundTruthBox>> gt_by_cat;
  for (const GroundTruthBox& g : ground_truth) {
    gt_by_cat[g.box.category].push_back(g);
  }

  std::sort(detections.begin(), detections.end(),
            [](const Detection& a, const Detection& b) {
              if (a.score != b.score) return a.score > b.score;
              if (a.sample != b.sample) return a.sample < b.sample;
              return a.box.x0 < b.box.x0;
            });

  double ap_sum = 0.0;
  for (const auto& [cat, gts] : gt_by_cat) {
    std::vector<bool> taken(gts.size(), false);
    std::vector<int> tp_flags;
    for (const Detection& d : detections) {
      if (d.box.category != cat) continue;
      double best = -1.0;
      int best_idx = -1;
      for (std::size_t gi = 0; gi < gts.size(); ++gi) {
        if (gts[gi].sample != d.sample || taken[gi]) continue;
        const double v = iou(d.box, gts[gi].box);
        if (v > best) {
          best = v;
          best_idx = static_cast<int>(gi);
        }
      }
      if (best >= iou_t && best_idx >= 0) {
        taken[static_cast<std::size_t>(best_idx)] = true;
        tp_flags.push_back(1);
      } else {
        tp_flags.push_back(0);
      }
    }
    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const int f : tp_flags) {
      if (f) ++tp;
      else ++fp;
      precision.push_back(static_cast<double>(tp) / (tp + fp));
      recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
    }
    double ap = 0.0;
    for (int i = 0; i <= 10; ++i) {
      const double r = static_cast<double>(i) / 10.0;
      double pmax = 0.0;
      for (std::size_t j = 0; j < precision.size(); ++j) {
        if (recall[j] >= r) pmax = std::max(pmax, precision[j]);
      }
      ap += pmax / 11.0;
    }
    ap_sum += ap;
  }
  return ap_sum / static_cast<double>(gt_by_cat.size());
}

}  // namespace soundloc::metrics
