// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "soundloc/metrics.hpp"
#include "soundloc/stage1.hpp"

using namespace soundloc::stage1;
using soundloc::InvalidInput;
using soundloc::Rng;
using soundloc::RTensor;
using soundloc::model::Model;
using soundloc::model::ModelConfig;
namespace ag = soundloc::ag;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.visual_width = 4;
  cfg.audio_width = 4;
  cfg.clusters = 4;
  cfg.num_categories = 4;
  cfg.seed = 3;
  return cfg;
}

const Dataset& toy_dataset() {
  static Dataset dataset = [] {
    soundloc::data::ToyConfig cfg;
    cfg.num_categories = 4;
    cfg.clips_per_category = 4;
    cfg.multi_train = 2;
    cfg.multi_test = 1;
    cfg.seed = 99;
    fs::remove_all("stage1_toy_data");
    const auto gen =
        soundloc::data::generate_toy_dataset(cfg, "stage1_toy_data");
    return Dataset::load(gen.train_manifest, tiny_model_config());
  }();
  return dataset;
}

}  // namespace

TEST_CASE("make_pair_combos yields one negative per positive, never self") {
  Rng rng(1);
  std::vector<std::string> ids = {"a", "b", "c", "d", "e"};
  for (int trial = 0; trial < 50; ++trial) {
    const PairCombos combos = make_pair_combos(ids, rng);
    REQUIRE(combos.label.size() == 10);
    int pos = 0, neg = 0;
    for (std::size_t i = 0; i < combos.label.size(); ++i) {
      if (combos.label[i] > 0.5) {
        ++pos;
        CHECK(combos.audio_index[i] == combos.visual_index[i]);
      } else {
        ++neg;
        CHECK(combos.audio_index[i] != combos.visual_index[i]);
      }
    }
    CHECK(pos == 5);
    CHECK(neg == 5);
  }
  std::vector<std::string> two = {"x", "y"};
  const PairCombos combos = make_pair_combos(two, rng);
  CHECK(combos.label.size() == 4);
}

TEST_CASE("loc_loss closed forms at map value 0.5") {
  ModelConfig cfg = tiny_model_config();
  cfg.channels = 2;
  Model m(cfg);

  // both clips: g along channel 0, features along channel 1 -> cosine 0,
  // sigmoid 0.5 everywhere, GMP 0.5
  RTensor g({2, 2});
  g(0, 0) = 1.0;
  g(1, 0) = 2.0;
  RTensor f({2, 2, 2, 2});
  for (int b = 0; b < 2; ++b) {
    for (int i = 0; i < 4; ++i) f.data()[b * 8 + 4 + i] = 3.0;
  }
  auto gv = ag::constant(g);
  auto fv = ag::constant(f);

  PairCombos combos;
  combos.audio_index = {0, 0};
  combos.visual_index = {0, 1};
  combos.label = {1.0, 0.0};
  auto loss = loc_loss(m, gv, fv, combos);
  // both combos give BCE(-ln 0.5) so the mean is ln 2
  CHECK(loss->value[0] == doctest::Approx(std::log(2.0)).epsilon(1e-9));

  PairCombos single_pos = combos;
  single_pos.label = {1.0, 0.0};
  auto a = loc_loss(m, gv, fv, single_pos);
  single_pos.label = {0.0, 1.0};
  auto b = loc_loss(m, gv, fv, single_pos);
  // BCE at p=0.5 is symmetric in the label
  CHECK(a->value[0] == doctest::Approx(b->value[0]).epsilon(1e-12));
}

TEST_CASE("loc_loss is invariant to combo ordering") {
  ModelConfig cfg = tiny_model_config();
  Model m(cfg);
  Rng rng(7);
  RTensor g({4, cfg.channels}), f({4, cfg.channels, 3, 3});
  for (std::int64_t i = 0; i < g.numel(); ++i) g[i] = rng.normal();
  for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = rng.normal();
  auto gv = ag::constant(g);
  auto fv = ag::constant(f);
  PairCombos combos;
  combos.audio_index = {0, 1, 2, 3, 0, 1, 2, 3};
  combos.visual_index = {0, 1, 2, 3, 1, 2, 3, 0};
  combos.label = {1, 1, 1, 1, 0, 0, 0, 0};
  PairCombos reversed;
  for (int i = 7; i >= 0; --i) {
    reversed.audio_index.push_back(combos.audio_index[static_cast<std::size_t>(i)]);
    reversed.visual_index.push_back(combos.visual_index[static_cast<std::size_t>(i)]);
    reversed.label.push_back(combos.label[static_cast<std::size_t>(i)]);
  }
  CHECK(loc_loss(m, gv, fv, combos)->value[0] ==
        doctest::Approx(loc_loss(m, gv, fv, reversed)->value[0]).epsilon(1e-12));
}

TEST_CASE("loc_loss requires both polarities") {
  ModelConfig cfg = tiny_model_config();
  Model m(cfg);
  RTensor g({2, cfg.channels}), f({2, cfg.channels, 2, 2});
  PairCombos combos;
  combos.audio_index = {0, 1};
  combos.visual_index = {0, 1};
  combos.label = {1.0, 1.0};
  CHECK_THROWS_AS(loc_loss(m, ag::constant(g), ag::constant(f), combos),
                  InvalidInput);
}

TEST_CASE("extract_object_representation closed forms") {
  Rng rng(11);
  RTensor f({3, 2, 2});
  for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = rng.normal();

  // uniform map -> spatial mean
  RTensor ones = RTensor::full({2, 2}, 1.0);
  RTensor rep = extract_object_representation(f, ones, 0.05);
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (int i = 0; i < 4; ++i) mean += f.data()[c * 4 + i];
    CHECK(rep(c) == doctest::Approx(mean / 4.0).epsilon(1e-12));
  }

  // delta map -> that column
  RTensor delta({2, 2});
  delta(1, 0) = 1.0;
  rep = extract_object_representation(f, delta, 0.05);
  for (int c = 0; c < 3; ++c) {
    CHECK(rep(c) == doctest::Approx(f(c, 1, 0)).epsilon(1e-12));
  }

  // 2x2 toy with one surviving cell, cross-checked against the raw
  // weighted-sum formula
  RTensor l({2, 2});
  l(0, 0) = 0.5;
  rep = extract_object_representation(f, l, 0.05);
  for (int c = 0; c < 3; ++c) {
    CHECK(rep(c) == doctest::Approx(f(c, 0, 0)).epsilon(1e-12));
    const double direct = (f(c, 0, 0) * 0.5) / 0.5;
    CHECK(rep(c) == doctest::Approx(direct).epsilon(1e-12));
  }

  // all weights under the threshold fall back to raw-map weighting
  RTensor faint({2, 2});
  faint(0, 0) = 0.01;
  faint(0, 1) = 0.03;
  faint(1, 0) = 0.02;
  faint(1, 1) = 0.04;
  rep = extract_object_representation(f, faint, 0.05);
  for (int c = 0; c < 3; ++c) {
    double num = 0.0, den = 0.0;
    for (int i = 0; i < 4; ++i) {
      num += f.data()[c * 4 + i] * faint[i];
      den += faint[i];
    }
    CHECK(rep(c) == doctest::Approx(num / den).epsilon(1e-12));
  }
}

TEST_CASE("extract_object_representation stays in per-channel hull") {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    RTensor f({4, 3, 3});
    for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = rng.normal();
    RTensor l({3, 3});
    for (std::int64_t i = 0; i < l.numel(); ++i) l[i] = rng.uniform();
    RTensor rep = extract_object_representation(f, l, 0.05);
    for (int c = 0; c < 4; ++c) {
      double lo = f.data()[c * 9], hi = f.data()[c * 9];
      for (int i = 1; i < 9; ++i) {
        lo = std::min(lo, f.data()[c * 9 + i]);
        hi = std::max(hi, f.data()[c * 9 + i]);
      }
      CHECK(rep(c) >= lo - 1e-9);
      CHECK(rep(c) <= hi + 1e-9);
    }
  }
}

TEST_CASE("classification_loss equals 2 ln K for zeroed heads") {
  ModelConfig cfg = tiny_model_config();
  Model m(cfg);
  for (const auto& [name, var] : m.named_parameters()) {
    if (name.rfind("ha", 0) == 0 || name.rfind("hv", 0) == 0) {
      var->value.fill(0.0);
    }
  }
  Rng rng(17);
  RTensor g({3, cfg.channels}), f({3, cfg.channels, 2, 2});
  for (std::int64_t i = 0; i < g.numel(); ++i) g[i] = rng.normal();
  for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = rng.normal();
  auto loss = classification_loss(m, ag::constant(g), ag::constant(f), {0, 1, 3});
  CHECK(loss->value[0] ==
        doctest::Approx(2.0 * std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("no-op schedule leaves the checkpoint at initialization") {
  const Dataset& dataset = toy_dataset();
  ModelConfig cfg = tiny_model_config();
  Stage1Schedule schedule;
  schedule.alternations = 2;
  schedule.loc_epochs = 0;
  schedule.cls_epochs = 0;
  schedule.batch_size = 4;
  Stage1Result result = train_stage1(dataset, cfg, schedule);

  Model fresh(cfg);
  auto trained = result.model.named_parameters();
  auto pristine = fresh.named_parameters();
  for (std::size_t i = 0; i < trained.size(); ++i) {
    REQUIRE(trained[i].first == pristine[i].first);
    for (std::int64_t j = 0; j < trained[i].second->value.numel(); ++j) {
      CHECK(trained[i].second->value[j] == pristine[i].second->value[j]);
    }
  }
  // clustering still ran and produced a full dictionary
  CHECK(result.dict.num_keys() == cfg.clusters);
  CHECK(result.pseudo_labels.size() == dataset.singles.size());
  CHECK(result.model.stage == "stage1");
}

TEST_CASE("oracle-v supervision pins assignments to the true labels") {
  const Dataset& dataset = toy_dataset();
  ModelConfig cfg = tiny_model_config();
  Stage1Schedule schedule;
  schedule.alternations = 1;
  schedule.loc_epochs = 0;
  schedule.cls_epochs = 0;
  schedule.batch_size = 4;
  Stage1Result result =
      train_stage1(dataset, cfg, schedule, Supervision::kOracleVisual);
  std::vector<int> truth;
  for (const LoadedClip& c : dataset.singles) truth.push_back(c.record.category);
  CHECK(soundloc::metrics::nmi(result.pseudo_labels, truth) ==
        doctest::Approx(1.0));
}

TEST_CASE("clustering error propagates when clips are fewer than K") {
  const Dataset& dataset = toy_dataset();
  Dataset small;
  for (int i = 0; i < 4; ++i) small.singles.push_back(dataset.singles[static_cast<std::size_t>(i)]);
  ModelConfig cfg = tiny_model_config();
  cfg.clusters = 8;
  Stage1Schedule schedule;
  schedule.alternations = 1;
  schedule.loc_epochs = 0;
  schedule.cls_epochs = 0;
  schedule.batch_size = 4;
  CHECK_THROWS_AS(train_stage1(small, cfg, schedule), InvalidInput);
}

TEST_CASE("short training run logs both phases with monotone steps") {
  const Dataset& dataset = toy_dataset();
  ModelConfig cfg = tiny_model_config();
  Stage1Schedule schedule;
  schedule.alternations = 2;
  schedule.loc_steps = 3;
  schedule.cls_steps = 2;
  schedule.batch_size = 4;
  Stage1Result result = train_stage1(dataset, cfg, schedule);
  REQUIRE(result.log.size() == 2 * (3 + 2));
  for (std::size_t i = 0; i < result.log.size(); ++i) {
    CHECK(result.log[i].step == static_cast<int>(i));
    CHECK(std::isfinite(result.log[i].loss));
  }
  CHECK(result.log.front().phase == "localization");
  CHECK(result.log.back().phase == "classification");
  CHECK(result.representations.dim(0) ==
        static_cast<int>(dataset.singles.size()));
  CHECK(result.representations.all_finite());

  const double acc = pair_accuracy(result.model, dataset.singles, 5);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
}
