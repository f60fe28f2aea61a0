// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "soundloc/common.hpp"
#include "soundloc/metrics.hpp"

using namespace soundloc::metrics;
using soundloc::InvalidInput;
using soundloc::Rng;
using soundloc::RTensor;

TEST_CASE("heatmap_to_box covers a single hot cell") {
  RTensor map({8, 8});
  map(3, 4) = 1.0;
  const BoundingBox b = heatmap_to_box(map);
  CHECK(b.x0 == 4);
  CHECK(b.y0 == 3);
  CHECK(b.x1 == 5);
  CHECK(b.y1 == 4);
}

TEST_CASE("heatmap_to_box on uniform map returns the full image") {
  RTensor map = RTensor::full({6, 5}, 0.7);
  const BoundingBox b = heatmap_to_box(map);
  CHECK(b.x0 == 0);
  CHECK(b.y0 == 0);
  CHECK(b.x1 == 5);
  CHECK(b.y1 == 6);
}

TEST_CASE("heatmap_to_box spans opposite hot corners") {
  RTensor map({8, 8});
  map(0, 0) = 2.0;
  map(7, 7) = 2.0;
  const BoundingBox b = heatmap_to_box(map);
  CHECK(b.x0 == 0);
  CHECK(b.y0 == 0);
  CHECK(b.x1 == 8);
  CHECK(b.y1 == 8);
}

TEST_CASE("heatmap_to_box rejects all-zero maps") {
  RTensor map({4, 4});
  CHECK_THROWS_AS(heatmap_to_box(map), InvalidInput);
}

TEST_CASE("iou closed forms") {
  BoundingBox a{0, 0, 10, 10};
  BoundingBox b{0, 0, 10, 10};
  CHECK(iou(a, b) == doctest::Approx(1.0));
  BoundingBox c{20, 20, 30, 30};
  CHECK(iou(a, c) == doctest::Approx(0.0));
  BoundingBox shifted{5, 0, 15, 10};
  CHECK(iou(a, shifted) == doctest::Approx(50.0 / 150.0));
}

TEST_CASE("iou symmetry and shift monotonicity") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    BoundingBox a{rng.uniform_int(10), rng.uniform_int(10), 0, 0};
    a.x1 = a.x0 + 1 + rng.uniform_int(8);
    a.y1 = a.y0 + 1 + rng.uniform_int(8);
    BoundingBox b{rng.uniform_int(10), rng.uniform_int(10), 0, 0};
    b.x1 = b.x0 + 1 + rng.uniform_int(8);
    b.y1 = b.y0 + 1 + rng.uniform_int(8);
    CHECK(iou(a, b) == doctest::Approx(iou(b, a)).epsilon(1e-12));
    CHECK(iou(a, a) == doctest::Approx(1.0));
  }
  // shifting one box away never increases IoU
  BoundingBox base{0, 0, 6, 6};
  double prev = 1.0;
  for (int dx = 0; dx < 10; ++dx) {
    BoundingBox moved{dx, 0, dx + 6, 6};
    const double v = iou(base, moved);
    CHECK(v <= prev + 1e-12);
    prev = v;
  }
}

TEST_CASE("mask iou agrees with box iou for rasterized boxes") {
  BoundingBox a{1, 2, 5, 6};
  BoundingBox b{3, 3, 7, 8};
  RTensor mask({10, 10});
  for (int r = a.y0; r < a.y1; ++r) {
    for (int c = a.x0; c < a.x1; ++c) mask(r, c) = 1.0;
  }
  CHECK(iou(mask, b) == doctest::Approx(iou(a, b)).epsilon(1e-12));
}

TEST_CASE("auc closed forms") {
  CHECK(auc({1.0, 1.0, 1.0}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(auc({0.0, 0.0}) == doctest::Approx(0.025).epsilon(1e-12));
  const std::vector<double> v = {0.1, 0.6, 0.4};
  std::vector<double> doubled = v;
  doubled.insert(doubled.end(), v.begin(), v.end());
  CHECK(auc(doubled) == doctest::Approx(auc(v)).epsilon(1e-12));
  CHECK_THROWS_AS(auc({}), InvalidInput);
}

TEST_CASE("auc monotone under pointwise-larger lists") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> lo, hi;
    const int n = 1 + rng.uniform_int(20);
    for (int i = 0; i < n; ++i) {
      const double a = rng.uniform();
      lo.push_back(a);
      hi.push_back(a + (1.0 - a) * rng.uniform());
    }
    CHECK(auc(hi) >= auc(lo) - 1e-12);
  }
}

TEST_CASE("ciou closed forms") {
  EvalRecord perfect{{1.0}, {1}, 64};
  const CiouSummary s1 = ciou({perfect}, 0.3);
  CHECK(s1.mean_score == doctest::Approx(1.0));
  CHECK(s1.at_threshold == doctest::Approx(1.0));

  EvalRecord mixed{{0.6, 0.2, 0.9}, {1, 1, 0}, 64};
  const CiouSummary s2 = ciou({mixed}, 0.3);
  CHECK(s2.mean_score == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(s2.at_threshold == doctest::Approx(1.0));

  EvalRecord zero{{0.0, 0.0}, {1, 1}, 64};
  CHECK(ciou({zero}, 0.3).mean_score == doctest::Approx(0.0));

  EvalRecord silent_only{{0.5}, {0}, 64};
  CHECK_THROWS_AS(ciou({silent_only}, 0.3), InvalidInput);
}

TEST_CASE("ciou ignores silent-category IoU perturbations") {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + rng.uniform_int(3);
    EvalRecord r;
    r.area = 64;
    bool any_sounding = false;
    for (int i = 0; i < k; ++i) {
      r.iou.push_back(rng.uniform());
      r.sounding.push_back(rng.uniform() < 0.5 ? 1 : 0);
      any_sounding |= r.sounding.back() != 0;
    }
    if (!any_sounding) r.sounding[0] = 1;
    EvalRecord perturbed = r;
    for (int i = 0; i < k; ++i) {
      if (!perturbed.sounding[static_cast<std::size_t>(i)]) {
        perturbed.iou[static_cast<std::size_t>(i)] = rng.uniform();
      }
    }
    CHECK(ciou({r}).mean_score ==
          doctest::Approx(ciou({perturbed}).mean_score).epsilon(1e-12));
  }
}

TEST_CASE("nsa closed forms") {
  RTensor zeros({4, 4});
  CHECK(nsa({zeros}, 0.05) == doctest::Approx(1.0));
  RTensor ones = RTensor::full({4, 4}, 1.0);
  CHECK(nsa({ones}, 0.05) == doctest::Approx(0.0));
  RTensor half({2, 2});
  half(0, 0) = 0.0;
  half(0, 1) = 0.0;
  half(1, 0) = 1.0;
  half(1, 1) = 1.0;
  CHECK(nsa({half}, 0.05) == doctest::Approx(0.5));
}

TEST_CASE("nsa bounded and monotone in tau") {
  Rng rng(29);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<RTensor> maps;
    const int n = 1 + rng.uniform_int(3);
    for (int i = 0; i < n; ++i) {
      RTensor m({4, 4});
      for (std::int64_t j = 0; j < m.numel(); ++j) m[j] = rng.uniform();
      maps.push_back(m);
    }
    double prev = 0.0;
    for (double tau = 0.0; tau <= 1.0; tau += 0.1) {
      const double v = nsa(maps, tau);
      CHECK(v >= prev - 1e-12);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      prev = v;
    }
  }
}

TEST_CASE("nmi closed forms and invariances") {
  CHECK(nmi({0, 0, 1, 1, 2, 2}, {0, 0, 1, 1, 2, 2}) == doctest::Approx(1.0));
  // relabeling clusters leaves NMI unchanged
  CHECK(nmi({2, 2, 0, 0, 1, 1}, {0, 0, 1, 1, 2, 2}) == doctest::Approx(1.0));
  // degenerate cases
  CHECK(nmi({0, 0, 0}, {0, 1, 2}) == doctest::Approx(0.0));
  CHECK(nmi({0, 0, 0}, {5, 5, 5}) == doctest::Approx(1.0));
}

TEST_CASE("nmi of independent partitions is near zero") {
  Rng rng(31);
  const int n = 10000;
  std::vector<int> a, b;
  for (int i = 0; i < n; ++i) {
    a.push_back(rng.uniform_int(4));
    b.push_back(rng.uniform_int(4));
  }
  CHECK(nmi(a, b) < 0.05);
}

TEST_CASE("sounding_map closed forms") {
  std::vector<GroundTruthBox> gt;
  gt.push_back({0, {2, 2, 6, 6, 0, true}});
  gt.push_back({0, {8, 8, 12, 12, 1, true}});

  std::vector<Detection> perfect;
  perfect.push_back({0, {2, 2, 6, 6, 0, true}, 1.0});
  perfect.push_back({0, {8, 8, 12, 12, 1, true}, 1.0});
  CHECK(sounding_map(perfect, gt) == doctest::Approx(1.0));

  CHECK(sounding_map({}, gt) == doctest::Approx(0.0));

  // one correct category, one wrongly labeled: AP = 1 for the hit, 0 for the
  // miss, mean 0.5
  std::vector<Detection> mixed;
  mixed.push_back({0, {2, 2, 6, 6, 0, true}, 0.9});
  mixed.push_back({0, {2, 2, 6, 6, 1, true}, 0.8});
  CHECK(sounding_map(mixed, gt) == doctest::Approx(0.5));

  CHECK_THROWS_AS(sounding_map(perfect, {}), InvalidInput);
}
