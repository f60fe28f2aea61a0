// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <string>
#include <vector>

#include "soundloc/dictionary.hpp"
#include "soundloc/metrics.hpp"

using namespace soundloc::dictionary;
using soundloc::EnumerationTooLarge;
using soundloc::InvalidInput;
using soundloc::Rng;
using soundloc::RTensor;

namespace {

std::vector<std::string> make_ids(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("clip_" + std::to_string(i));
  return ids;
}

// Exhaustive purity maximizer written independently of the library path:
// recursive assignment over clusters, purity recomputed from raw labels.
void brute_force_rec(const std::vector<int>& assignments,
                     const std::vector<int>& labels, int k, int ncat,
                     std::vector<int>& mapping, int pos, double& best_purity,
                     std::vector<int>& best_map) {
  if (pos == k) {
    std::vector<bool> covered(static_cast<std::size_t>(ncat), false);
    for (const int m : mapping) covered[static_cast<std::size_t>(m)] = true;
    for (const bool b : covered) {
      if (!b) return;
    }
    double purity = 0.0;
    for (int ki = 0; ki < k; ++ki) {
      int total = 0, matching = 0;
      for (std::size_t i = 0; i < assignments.size(); ++i) {
        if (assignments[i] != ki) continue;
        ++total;
        if (labels[i] == mapping[static_cast<std::size_t>(ki)]) ++matching;
      }
      if (total > 0) purity += static_cast<double>(matching) / total;
    }
    if (purity > best_purity + 1e-15) {
      best_purity = purity;
      best_map = mapping;
    }
    return;
  }
  for (int c = 0; c < ncat; ++c) {
    mapping[static_cast<std::size_t>(pos)] = c;
    brute_force_rec(assignments, labels, k, ncat, mapping, pos + 1,
                    best_purity, best_map);
  }
}

std::pair<std::vector<int>, double> brute_force_best(
    const std::vector<int>& assignments, const std::vector<int>& labels,
    int k, int ncat) {
  std::vector<int> mapping(static_cast<std::size_t>(k), 0), best_map;
  double best_purity = -1.0;
  brute_force_rec(assignments, labels, k, ncat, mapping, 0, best_purity,
                  best_map);
  return {best_map, best_purity};
}

ObjectDictionary dict_from_assignments(const std::vector<int>& assignments,
                                       int k) {
  ObjectDictionary d;
  d.keys = RTensor({k, 1});
  d.assignments = assignments;
  d.clip_ids = make_ids(static_cast<int>(assignments.size()));
  return d;
}

std::map<std::string, int> label_map(const std::vector<int>& labels) {
  std::map<std::string, int> m;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    m["clip_" + std::to_string(i)] = labels[i];
  }
  return m;
}

}  // namespace

TEST_CASE("fit_dictionary recovers exactly repeated points") {
  const int k = 3;
  RTensor reps({30, 2});
  for (int i = 0; i < 30; ++i) {
    const int which = i % k;
    reps(i, 0) = 10.0 * which;
    reps(i, 1) = -5.0 * which;
  }
  ObjectDictionary d = fit_dictionary(reps, make_ids(30), k, 42);
  CHECK(d.inertia == doctest::Approx(0.0));
  // every key equals one of the distinct points
  for (int ki = 0; ki < k; ++ki) {
    bool matched = false;
    for (int which = 0; which < k; ++which) {
      if (d.keys(ki, 0) == doctest::Approx(10.0 * which).epsilon(1e-12) &&
          d.keys(ki, 1) == doctest::Approx(-5.0 * which).epsilon(1e-12)) {
        matched = true;
      }
    }
    CHECK(matched);
  }
}

TEST_CASE("fit_dictionary with one cluster returns the mean") {
  Rng rng(3);
  RTensor reps({17, 3});
  for (std::int64_t i = 0; i < reps.numel(); ++i) reps[i] = rng.normal();
  ObjectDictionary d = fit_dictionary(reps, make_ids(17), 1, 0);
  for (int j = 0; j < 3; ++j) {
    double mean = 0.0;
    for (int i = 0; i < 17; ++i) mean += reps(i, j);
    mean /= 17.0;
    CHECK(d.keys(0, j) == doctest::Approx(mean).epsilon(1e-9));
  }
}

TEST_CASE("fit_dictionary recovers planted gaussian blobs") {
  Rng rng(123);
  const int k = 12, per = 20;
  RTensor reps({k * per, 2});
  std::vector<int> truth;
  for (int b = 0; b < k; ++b) {
    const double cx = 3.0 * (b % 4), cy = 3.0 * (b / 4);
    for (int i = 0; i < per; ++i) {
      reps(b * per + i, 0) = cx + 0.01 * rng.normal();
      reps(b * per + i, 1) = cy + 0.01 * rng.normal();
      truth.push_back(b);
    }
  }
  ObjectDictionary d = fit_dictionary(reps, make_ids(k * per), k, 7);
  CHECK(soundloc::metrics::nmi(d.assignments, truth) == doctest::Approx(1.0));
}

TEST_CASE("fit_dictionary objective descends monotonically") {
  Rng rng(77);
  RTensor reps({200, 4});
  for (std::int64_t i = 0; i < reps.numel(); ++i) reps[i] = rng.normal();
  ObjectDictionary d = fit_dictionary(reps, make_ids(200), 8, 5);
  REQUIRE(d.objective_history.size() >= 2);
  for (std::size_t i = 1; i < d.objective_history.size(); ++i) {
    CHECK(d.objective_history[i] <= d.objective_history[i - 1] + 1e-9);
  }
}

TEST_CASE("fit_dictionary handles duplicate points without crashing") {
  RTensor reps({20, 2});
  for (int i = 0; i < 20; ++i) {
    reps(i, 0) = 1.0;
    reps(i, 1) = 2.0;
  }
  ObjectDictionary d = fit_dictionary(reps, make_ids(20), 3, 9);
  CHECK(d.keys.all_finite());
  CHECK(d.inertia == doctest::Approx(0.0));
}

TEST_CASE("fit_dictionary rejects fewer points than clusters") {
  RTensor reps({3, 2});
  CHECK_THROWS_AS(fit_dictionary(reps, make_ids(3), 5, 0), InvalidInput);
}

TEST_CASE("assign_categories on pure clusters reaches purity K") {
  // 3 clusters, 3 categories, each cluster pure
  std::vector<int> assignments, labels;
  for (int k = 0; k < 3; ++k) {
    for (int i = 0; i < 5; ++i) {
      assignments.push_back(k);
      labels.push_back((k + 1) % 3);  // pure but permuted
    }
  }
  ObjectDictionary d = dict_from_assignments(assignments, 3);
  CategoryAssignment ca = assign_categories(d, label_map(labels), 3);
  CHECK(ca.purity == doctest::Approx(3.0));
  CHECK(ca.cluster_to_category == std::vector<int>({1, 2, 0}));
}

TEST_CASE("assign_categories hand-checked two-cluster case") {
  // counts: cluster0 = [3 A, 1 B], cluster1 = [0 A, 4 B]
  std::vector<int> assignments = {0, 0, 0, 0, 1, 1, 1, 1};
  std::vector<int> labels = {0, 0, 0, 1, 1, 1, 1, 1};
  ObjectDictionary d = dict_from_assignments(assignments, 2);
  CategoryAssignment ca = assign_categories(d, label_map(labels), 2);
  CHECK(ca.cluster_to_category == std::vector<int>({0, 1}));
  CHECK(ca.purity == doctest::Approx(3.0 / 4.0 + 4.0 / 4.0));
}

TEST_CASE("assign_categories equals exhaustive brute force") {
  Rng rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    const int k = 2 + rng.uniform_int(4);       // 2..5 clusters
    const int ncat = 2 + rng.uniform_int(std::min(k, 3) - 1);  // 2..min(k,3)
    const int n = 10 + rng.uniform_int(30);
    std::vector<int> assignments, labels;
    for (int i = 0; i < n; ++i) {
      assignments.push_back(rng.uniform_int(k));
      labels.push_back(rng.uniform_int(ncat));
    }
    ObjectDictionary d = dict_from_assignments(assignments, k);
    CategoryAssignment ca = assign_categories(d, label_map(labels), ncat);
    const auto [bmap, bpurity] = brute_force_best(assignments, labels, k, ncat);
    CHECK(ca.purity == doctest::Approx(bpurity).epsilon(1e-12));
  }
}

TEST_CASE("assign_categories beats random surjective maps") {
  Rng rng(99);
  const int k = 4, ncat = 3, n = 60;
  std::vector<int> assignments, labels;
  for (int i = 0; i < n; ++i) {
    assignments.push_back(rng.uniform_int(k));
    labels.push_back(rng.uniform_int(ncat));
  }
  ObjectDictionary d = dict_from_assignments(assignments, k);
  CategoryAssignment ca = assign_categories(d, label_map(labels), ncat);

  std::vector<std::vector<std::int64_t>> counts(
      k, std::vector<std::int64_t>(ncat, 0));
  std::vector<std::int64_t> sizes(k, 0);
  for (int i = 0; i < n; ++i) {
    ++counts[static_cast<std::size_t>(assignments[static_cast<std::size_t>(i)])]
            [static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    ++sizes[static_cast<std::size_t>(assignments[static_cast<std::size_t>(i)])];
  }
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> mapping;
    for (int i = 0; i < ncat; ++i) mapping.push_back(i);  // cover everything
    for (int i = ncat; i < k; ++i) mapping.push_back(rng.uniform_int(ncat));
    rng.shuffle(mapping);
    CHECK(ca.purity >= map_purity(counts, sizes, mapping) - 1e-12);
  }
}

TEST_CASE("assign_categories permutation equivariance") {
  Rng rng(55);
  const int k = 4, ncat = 2, n = 40;
  std::vector<int> assignments, labels;
  for (int i = 0; i < n; ++i) {
    assignments.push_back(rng.uniform_int(k));
    labels.push_back(rng.uniform_int(ncat));
  }
  ObjectDictionary d = dict_from_assignments(assignments, k);
  CategoryAssignment base = assign_categories(d, label_map(labels), ncat);

  const std::vector<int> perm = {2, 0, 3, 1};  // new index of each old cluster
  std::vector<int> permuted_assignments;
  for (const int a : assignments) {
    permuted_assignments.push_back(perm[static_cast<std::size_t>(a)]);
  }
  ObjectDictionary dp = dict_from_assignments(permuted_assignments, k);
  CategoryAssignment moved = assign_categories(dp, label_map(labels), ncat);
  CHECK(moved.purity == doctest::Approx(base.purity).epsilon(1e-12));
  for (int ki = 0; ki < k; ++ki) {
    CHECK(moved.cluster_to_category[static_cast<std::size_t>(
              perm[static_cast<std::size_t>(ki)])] ==
          base.cluster_to_category[static_cast<std::size_t>(ki)]);
  }
}

TEST_CASE("assign_categories enforces the enumeration cap") {
  std::vector<int> assignments(10, 0);
  ObjectDictionary d = dict_from_assignments(assignments, 8);
  std::vector<int> labels(10, 0);
  auto lm = label_map(labels);
  lm.clear();
  for (int i = 0; i < 10; ++i) lm["clip_" + std::to_string(i)] = i % 2;
  CHECK_THROWS_AS(assign_categories(d, lm, 2, /*enumeration_cap=*/100),
                  EnumerationTooLarge);
}

TEST_CASE("category_activation identity and summation") {
  RTensor a({2, 2});
  a(0, 0) = 1.0;
  a(1, 1) = 2.0;
  RTensor b = RTensor::full({2, 2}, 0.5);
  RTensor c({2, 2});
  c(0, 1) = -1.0;

  CategoryAssignment one_per;
  one_per.cluster_to_category = {0, 1};
  auto maps = category_activation({a, b}, one_per, 2);
  for (std::int64_t i = 0; i < 4; ++i) {
    CHECK(maps[0][i] == a[i]);
    CHECK(maps[1][i] == b[i]);
  }

  CategoryAssignment merged;
  merged.cluster_to_category = {0, 0};
  auto summed = category_activation({a, b}, merged, 1);
  for (std::int64_t i = 0; i < 4; ++i) {
    CHECK(summed[0][i] == doctest::Approx(a[i] + b[i]));
  }

  CategoryAssignment three;
  three.cluster_to_category = {1, 0, 1};
  auto mixed = category_activation({a, b, c}, three, 2);
  for (std::int64_t i = 0; i < 4; ++i) {
    CHECK(mixed[0][i] == doctest::Approx(b[i]));
    CHECK(mixed[1][i] == doctest::Approx(a[i] + c[i]));
  }
}
