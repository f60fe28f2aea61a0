// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "soundloc/common.hpp"
#include "soundloc/tensor.hpp"
#include "soundloc/tensor_archive.hpp"

namespace soundloc::dictionary {

/// K-means dictionary over object representations. `objective_history`
/// records the clustering objective after every assignment pass.
struct ObjectDictionary {
  RTensor keys;  // [K, C]
  std::vector<std::string> clip_ids;
  std::vector<int> assignments;  // nearest-key index per clip
  double inertia = 0.0;
  std::vector<double> objective_history;

  int num_keys() const { return keys.dim(0); }
  int key_dim() const { return keys.dim(1); }
};

struct CategoryAssignment {
  std::vector<int> cluster_to_category;  // length K, surjective onto categories
  double purity = 0.0;
};

namespace detail {

inline double sq_distance(const double* a, const double* b, int c) {
  double acc = 0.0;
  for (int i = 0; i < c; ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. Runs at most `max_iters`
/// passes or until the largest center shift drops below `tol`. Empty
/// clusters are reseeded from the point farthest from its current center.
inline ObjectDictionary fit_dictionary(const RTensor& reps,
                                       std::vector<std::string> clip_ids,
                                       int k, std::uint64_t seed,
                                       int max_iters = 300,
                                       double tol = 1e-6) {
  if (reps.ndim() != 2) throw InvalidInput("fit_dictionary: expected [N,C]");
  const int n = reps.dim(0), c = reps.dim(1);
  if (k <= 0) throw InvalidInput("fit_dictionary: k must be positive");
  if (n < k) {
    throw InvalidInput("fit_dictionary: fewer representations than clusters");
  }
  if (!clip_ids.empty() && static_cast<int>(clip_ids.size()) != n) {
    throw InvalidInput("fit_dictionary: clip id count mismatch");
  }
  if (!reps.all_finite()) {
    throw InvalidInput("fit_dictionary: non-finite representation");
  }

  Rng rng(splitmix64(seed ^ 0x6b6d65616e73ULL));
  ObjectDictionary dict;
  dict.clip_ids = std::move(clip_ids);
  dict.keys = RTensor({k, c});
  dict.assignments.assign(static_cast<std::size_t>(n), 0);

  // k-means++ seeding
  std::vector<double> d2(static_cast<std::size_t>(n),
                         std::numeric_limits<double>::max());
  int first = rng.uniform_int(n);
  std::copy(&reps(first, 0), &reps(first, 0) + c, &dict.keys(0, 0));
  for (int ki = 1; ki < k; ++ki) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const double d = detail::sq_distance(&reps(i, 0),
                                           &dict.keys(ki - 1, 0), c);
      d2[static_cast<std::size_t>(i)] =
          std::min(d2[static_cast<std::size_t>(i)], d);
      total += d2[static_cast<std::size_t>(i)];
    }
    int chosen = 0;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        acc += d2[static_cast<std::size_t>(i)];
        if (acc >= target) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = rng.uniform_int(n);  // all points identical
    }
    std::copy(&reps(chosen, 0), &reps(chosen, 0) + c, &dict.keys(ki, 0));
  }

  std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
  RTensor sums({k, c});
  RTensor prev_keys = dict.keys;
  for (int iter = 0; iter < max_iters; ++iter) {
    // assignment pass + objective under current keys
    double objective = 0.0;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      int arg = 0;
      for (int ki = 0; ki < k; ++ki) {
        const double d = detail::sq_distance(&reps(i, 0), &dict.keys(ki, 0), c);
        if (d < best) {
          best = d;
          arg = ki;
        }
      }
      dict.assignments[static_cast<std::size_t>(i)] = arg;
      objective += best;
    }
    dict.objective_history.push_back(objective);

    // mean update
    sums.fill(0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (int i = 0; i < n; ++i) {
      const int a = dict.assignments[static_cast<std::size_t>(i)];
      ++counts[static_cast<std::size_t>(a)];
      for (int j = 0; j < c; ++j) sums(a, j) += reps(i, j);
    }
    prev_keys = dict.keys;
    std::vector<bool> reused(static_cast<std::size_t>(n), false);
    for (int ki = 0; ki < k; ++ki) {
      if (counts[static_cast<std::size_t>(ki)] > 0) {
        for (int j = 0; j < c; ++j) {
          dict.keys(ki, j) =
              sums(ki, j) / static_cast<double>(counts[static_cast<std::size_t>(ki)]);
        }
      } else {
        // reseed from the farthest point not already claimed
        double best = -1.0;
        int arg = 0;
        for (int i = 0; i < n; ++i) {
          if (reused[static_cast<std::size_t>(i)]) continue;
          const int a = dict.assignments[static_cast<std::size_t>(i)];
          const double d = detail::sq_distance(&reps(i, 0), &prev_keys(a, 0), c);
          if (d > best) {
            best = d;
            arg = i;
          }
        }
        reused[static_cast<std::size_t>(arg)] = true;
        for (int j = 0; j < c; ++j) dict.keys(ki, j) = reps(arg, j);
      }
    }

    double shift = 0.0;
    for (int ki = 0; ki < k; ++ki) {
      shift = std::max(shift,
                       detail::sq_distance(&dict.keys(ki, 0), &prev_keys(ki, 0), c));
    }
    if (std::sqrt(shift) < tol) break;
  }

  // final consistency pass: each point on its nearest key
  dict.inertia = 0.0;
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::max();
    int arg = 0;
    for (int ki = 0; ki < k; ++ki) {
      const double d = detail::sq_distance(&reps(i, 0), &dict.keys(ki, 0), c);
      if (d < best) {
        best = d;
        arg = ki;
      }
    }
    dict.assignments[static_cast<std::size_t>(i)] = arg;
    dict.inertia += best;
  }
  return dict;
}

/// Purity of one cluster-to-category map: sum over clusters of the fraction
/// of the cluster's samples whose label equals the mapped category. Empty
/// clusters contribute 0.
inline double map_purity(const std::vector<std::vector<std::int64_t>>& counts,
                         const std::vector<std::int64_t>& sizes,
                         const std::vector<int>& mapping) {
  double purity = 0.0;
  for (std::size_t ki = 0; ki < mapping.size(); ++ki) {
    if (sizes[ki] == 0) continue;
    purity += static_cast<double>(
                  counts[ki][static_cast<std::size_t>(mapping[ki])]) /
              static_cast<double>(sizes[ki]);
  }
  return purity;
}

/// Enumerates every surjective cluster-to-category map (each cluster gets
/// exactly one category, every category is covered) and returns the one
/// with the largest purity. Ties break to the lexicographically smallest
/// map. Throws when the candidate-map count exceeds `enumeration_cap`.
inline CategoryAssignment assign_categories(
    const ObjectDictionary& dict,
    const std::map<std::string, int>& labels, int num_categories,
    std::int64_t enumeration_cap = 20000000) {
  const int k = dict.num_keys();
  if (num_categories <= 0) {
    throw InvalidInput("assign_categories: need at least one category");
  }
  if (k < num_categories) {
    throw InvalidInput("assign_categories: fewer clusters than categories");
  }
  if (dict.clip_ids.size() != dict.assignments.size()) {
    throw InvalidInput("assign_categories: dictionary without clip ids");
  }

  double candidates = 1.0;
  for (int i = 0; i < k; ++i) candidates *= num_categories;
  if (candidates > static_cast<double>(enumeration_cap)) {
    throw EnumerationTooLarge(
        "assign_categories: " + std::to_string(num_categories) + "^" +
        std::to_string(k) +
        " candidate maps exceed the enumeration cap; use fewer clusters");
  }

  std::vector<std::vector<std::int64_t>> counts(
      static_cast<std::size_t>(k),
      std::vector<std::int64_t>(static_cast<std::size_t>(num_categories), 0));
  std::vector<std::int64_t> sizes(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < dict.clip_ids.size(); ++i) {
    const auto it = labels.find(dict.clip_ids[i]);
    if (it == labels.end()) {
      throw InvalidInput("assign_categories: missing label for clip " +
                         dict.clip_ids[i]);
    }
    if (it->second < 0 || it->second >= num_categories) {
      throw InvalidInput("assign_categories: label out of range for clip " +
                         dict.clip_ids[i]);
    }
    const int a = dict.assignments[i];
    ++counts[static_cast<std::size_t>(a)][static_cast<std::size_t>(it->second)];
    ++sizes[static_cast<std::size_t>(a)];
  }

  CategoryAssignment best;
  best.purity = -1.0;
  std::vector<int> mapping(static_cast<std::size_t>(k), 0);
  while (true) {
    // surjectivity check
    std::vector<bool> covered(static_cast<std::size_t>(num_categories), false);
    for (const int m : mapping) covered[static_cast<std::size_t>(m)] = true;
    bool surjective = true;
    for (const bool b : covered) surjective = surjective && b;
    if (surjective) {
      const double p = map_purity(counts, sizes, mapping);
      if (p > best.purity) {  // lexicographic order of enumeration breaks ties
        best.purity = p;
        best.cluster_to_category = mapping;
      }
    }
    // odometer increment, most significant digit first for lexicographic order
    int pos = k - 1;
    while (pos >= 0 && mapping[static_cast<std::size_t>(pos)] ==
                           num_categories - 1) {
      mapping[static_cast<std::size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
    ++mapping[static_cast<std::size_t>(pos)];
  }
  return best;
}

inline void save_dictionary(const ObjectDictionary& dict,
                            const CategoryAssignment* assignment,
                            std::uint64_t seed, const std::string& path) {
  TensorArchive ar;
  ar.header = {{"format", "soundloc-dictionary"},
               {"k", dict.num_keys()},
               {"c", dict.key_dim()},
               {"seed", seed},
               {"inertia", dict.inertia},
               {"clip_ids", dict.clip_ids}};
  if (assignment != nullptr) {
    ar.header["category_assignment"] = {
        {"cluster_to_category", assignment->cluster_to_category},
        {"purity", assignment->purity}};
  }
  ar.reals.emplace("keys", dict.keys);
  Tensor<std::int64_t> assignments({static_cast<int>(dict.assignments.size())});
  for (std::size_t i = 0; i < dict.assignments.size(); ++i) {
    assignments[static_cast<std::int64_t>(i)] = dict.assignments[i];
  }
  ar.ints.emplace("assignments", std::move(assignments));
  ar.save(path);
}

struct LoadedDictionary {
  ObjectDictionary dict;
  bool has_assignment = false;
  CategoryAssignment assignment;
};

inline LoadedDictionary load_dictionary(const std::string& path) {
  TensorArchive ar = TensorArchive::load(path);
  if (ar.header.value("format", "") != "soundloc-dictionary") {
    throw CorruptFile("load_dictionary: not a dictionary archive: " + path);
  }
  LoadedDictionary out;
  out.dict.keys = ar.real("keys");
  out.dict.inertia = ar.header.value("inertia", 0.0);
  out.dict.clip_ids =
      ar.header.value("clip_ids", std::vector<std::string>{});
  const auto& assignments = ar.integer("assignments");
  for (std::int64_t i = 0; i < assignments.numel(); ++i) {
    out.dict.assignments.push_back(static_cast<int>(assignments[i]));
  }
  if (ar.header.contains("category_assignment")) {
    const auto& ca = ar.header.at("category_assignment");
    out.assignment.cluster_to_category =
        ca.at("cluster_to_category").get<std::vector<int>>();
    out.assignment.purity = ca.at("purity").get<double>();
    if (static_cast<int>(out.assignment.cluster_to_category.size()) !=
        out.dict.num_keys()) {
      throw CorruptFile("load_dictionary: assignment length mismatch");
    }
    out.has_assignment = true;
  }
  return out;
}

/// Sums per-cluster activation maps into per-category maps.
inline std::vector<RTensor> category_activation(
    const std::vector<RTensor>& cluster_maps,
    const CategoryAssignment& assignment, int num_categories) {
  if (cluster_maps.size() != assignment.cluster_to_category.size()) {
    throw InvalidInput("category_activation: map/assignment size mismatch");
  }
  if (cluster_maps.empty()) {
    throw InvalidInput("category_activation: no cluster maps");
  }
  std::vector<RTensor> out;
  out.reserve(static_cast<std::size_t>(num_categories));
  for (int c = 0; c < num_categories; ++c) {
    out.emplace_back(cluster_maps[0].shape());
  }
  for (std::size_t ki = 0; ki < cluster_maps.size(); ++ki) {
    const int cat = assignment.cluster_to_category[ki];
    if (cat < 0 || cat >= num_categories) {
      throw InvalidInput("category_activation: category index out of range");
    }
    if (!cluster_maps[ki].same_shape(out[static_cast<std::size_t>(cat)])) {
      throw InvalidInput("category_activation: map shape mismatch");
    }
    for (std::int64_t i = 0; i < cluster_maps[ki].numel(); ++i) {
      out[static_cast<std::size_t>(cat)][i] += cluster_maps[ki][i];
    }
  }
  return out;
}

}  // namespace soundloc::dictionary
