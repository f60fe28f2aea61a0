// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "soundloc/audio.hpp"
#include "soundloc/common.hpp"
#include "soundloc/image.hpp"
#include "soundloc/metrics.hpp"
#include "soundloc/wav.hpp"

namespace soundloc::data {

using metrics::BoundingBox;

struct ClipRecord {
  std::string clip_id;
  std::string split;  // "single" | "multi"
  std::string audio_path;
  std::string frame_path;
  // single-source fields
  int category = -1;  // -1 when unlabeled
  bool has_box = false;
  BoundingBox box;
  // multi-source fields
  std::vector<int> categories;
  std::vector<bool> sounding;
  std::vector<BoundingBox> boxes;
};

namespace detail {

inline nlohmann::json box_to_json(const BoundingBox& b) {
  return nlohmann::json::array({b.x0, b.y0, b.x1, b.y1});
}

inline BoundingBox box_from_json(const nlohmann::json& j, int line) {
  if (!j.is_array() || j.size() != 4) {
    throw InvalidInput("manifest line " + std::to_string(line) +
                       ": box must be [x0,y0,x1,y1]");
  }
  BoundingBox b;
  b.x0 = j[0].get<int>();
  b.y0 = j[1].get<int>();
  b.x1 = j[2].get<int>();
  b.y1 = j[3].get<int>();
  if (b.x0 >= b.x1 || b.y0 >= b.y1 || b.x0 < 0 || b.y0 < 0) {
    throw InvalidInput("manifest line " + std::to_string(line) +
                       ": degenerate box");
  }
  return b;
}

}  // namespace detail

inline nlohmann::json record_to_json(const ClipRecord& r) {
  nlohmann::json j = {{"clip_id", r.clip_id},
                      {"split", r.split},
                      {"audio", r.audio_path},
                      {"frame", r.frame_path}};
  if (r.split == "single") {
    if (r.category >= 0) j["category"] = r.category;
    if (r.has_box) j["box"] = detail::box_to_json(r.box);
  } else {
    j["categories"] = r.categories;
    j["sounding"] = r.sounding;
    nlohmann::json boxes = nlohmann::json::array();
    for (const BoundingBox& b : r.boxes) boxes.push_back(detail::box_to_json(b));
    j["boxes"] = boxes;
  }
  return j;
}

inline ClipRecord record_from_json(const nlohmann::json& j, int line) {
  auto fail = [line](const std::string& msg) -> InvalidInput {
    return InvalidInput("manifest line " + std::to_string(line) + ": " + msg);
  };
  static const std::set<std::string> known = {
      "clip_id", "split", "audio", "frame", "category",
      "box",     "categories", "sounding", "boxes"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw fail("unknown key '" + it.key() + "'");
  }
  ClipRecord r;
  try {
    r.clip_id = j.at("clip_id").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.audio_path = j.at("audio").get<std::string>();
    r.frame_path = j.at("frame").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw fail("missing or mistyped required field");
  }
  if (r.split == "single") {
    if (j.contains("categories") || j.contains("sounding") || j.contains("boxes")) {
      throw fail("single record with multi-source fields");
    }
    if (j.contains("category")) r.category = j.at("category").get<int>();
    if (j.contains("box")) {
      r.box = detail::box_from_json(j.at("box"), line);
      r.has_box = true;
    }
  } else if (r.split == "multi") {
    if (j.contains("category") || j.contains("box")) {
      throw fail("multi record with single-source fields");
    }
    try {
      r.categories = j.at("categories").get<std::vector<int>>();
      r.sounding = j.at("sounding").get<std::vector<bool>>();
    } catch (const nlohmann::json::exception&) {
      throw fail("multi record needs categories and sounding arrays");
    }
    if (!j.contains("boxes") || !j.at("boxes").is_array()) {
      throw fail("multi record needs boxes");
    }
    for (const auto& bj : j.at("boxes")) {
      r.boxes.push_back(detail::box_from_json(bj, line));
    }
    if (r.categories.size() != r.sounding.size() ||
        r.categories.size() != r.boxes.size() || r.categories.empty()) {
      throw fail("categories/sounding/boxes length mismatch");
    }
    for (std::size_t i = 0; i < r.boxes.size(); ++i) {
      r.boxes[i].category = r.categories[i];
      r.boxes[i].sounding = r.sounding[i];
    }
  } else {
    throw fail("split must be 'single' or 'multi'");
  }
  return r;
}

/// Loads a JSONL manifest. Media paths are resolved relative to the
/// manifest's directory. Clip ids must be unique; an id may not appear in
/// both splits.
inline std::vector<ClipRecord> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("load_manifest: cannot open " + path);
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  std::vector<ClipRecord> records;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw InvalidInput("manifest line " + std::to_string(line_no) +
                         ": invalid JSON");
    }
    ClipRecord r = record_from_json(j, line_no);
    if (!seen.insert(r.clip_id).second) {
      throw InvalidInput("manifest line " + std::to_string(line_no) +
                         ": clip_id '" + r.clip_id +
                         "' violates the split partition (duplicate id)");
    }
    r.audio_path = (base / r.audio_path).string();
    r.frame_path = (base / r.frame_path).string();
    records.push_back(std::move(r));
  }
  return records;
}

inline void save_manifest(const std::string& path,
                          const std::vector<ClipRecord>& records) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("save_manifest: cannot open " + path);
  for (const ClipRecord& r : records) {
    f << record_to_json(r).dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// Toy dataset
// ---------------------------------------------------------------------------

struct ToyConfig {
  int num_categories = 4;
  int clips_per_category = 50;
  int multi_train = 100;
  int multi_test = 50;
  int image_side = 64;
  int sample_rate = 16000;
  double clip_seconds = 1.0;
  double test_fraction = 0.2;
  int missing_categories = 0;
  double noise_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_categories < 4 || num_categories > 8) {
      throw ConfigError("ToyConfig: num_categories must be in [4, 8]");
    }
    if (clips_per_category < 2) {
      throw ConfigError("ToyConfig: need at least 2 clips per category");
    }
    if (image_side < 32 || image_side % 16 != 0) {
      throw ConfigError("ToyConfig: image_side must be a multiple of 16, >= 32");
    }
    if (test_fraction <= 0.0 || test_fraction >= 1.0) {
      throw ConfigError("ToyConfig: test_fraction must be in (0,1)");
    }
    if (missing_categories < 0 || missing_categories >= num_categories) {
      throw ConfigError("ToyConfig: missing_categories out of range");
    }
    if (noise_rate < 0.0 || noise_rate > 1.0) {
      throw ConfigError("ToyConfig: noise_rate must be in [0,1]");
    }
    if (sample_rate <= 0 || clip_seconds <= 0.0) {
      throw ConfigError("ToyConfig: invalid audio parameters");
    }
  }
};

namespace toy {

/// Per-category shape/color table (distinct shape and color per category).
inline const char* shape_name(int category) {
  static const std::array<const char*, 8> names = {
      "circle", "square", "triangle", "cross",
      "diamond", "ring", "hbar", "vbar"};
  return names[static_cast<std::size_t>(category)];
}

inline std::array<std::uint8_t, 3> shape_color(int category) {
  static const std::array<std::array<std::uint8_t, 3>, 8> colors = {{
      {220, 40, 40},    // red
      {40, 200, 40},    // green
      {50, 80, 230},    // blue
      {230, 220, 40},   // yellow
      {220, 60, 220},   // magenta
      {60, 220, 220},   // cyan
      {235, 235, 235},  // white
      {240, 150, 40},   // orange
  }};
  return colors[static_cast<std::size_t>(category)];
}

/// Fundamental tone per category, geometrically spaced so neighbouring
/// categories land in clearly separated mel bands.
inline double tone_frequency(int category) {
  static const std::array<double, 8> freqs = {330.0,  495.0,  742.0,  1114.0,
                                              1670.0, 2506.0, 3759.0, 5638.0};
  return freqs[static_cast<std::size_t>(category)];
}

inline bool shape_hit(int category, int dx, int dy, int radius) {
  const double r = radius;
  switch (category) {
    case 0:
      return dx * dx + dy * dy <= radius * radius;
    case 1:
      return std::abs(dx) <= radius && std::abs(dy) <= radius;
    case 2: {  // upward triangle
      if (dy < -radius || dy > radius) return false;
      const double half = (dy + r) / 2.0;
      return std::abs(dx) <= half;
    }
    case 3:
      return (std::abs(dx) <= radius / 3 && std::abs(dy) <= radius) ||
             (std::abs(dy) <= radius / 3 && std::abs(dx) <= radius);
    case 4:
      return std::abs(dx) + std::abs(dy) <= radius;
    case 5: {
      const int d2 = dx * dx + dy * dy;
      return d2 <= radius * radius && d2 >= (radius / 2) * (radius / 2);
    }
    case 6:
      return std::abs(dy) <= radius / 3 && std::abs(dx) <= radius;
    case 7:
      return std::abs(dx) <= radius / 3 && std::abs(dy) <= radius;
    default:
      throw InvalidInput("shape_hit: unsupported category");
  }
}

struct RenderedClip {
  img::Image frame;
  BoundingBox box;  // exact cover of the shape's pixels
  audio::AudioClip clip;
};

/// Renders one solo clip: a shape over uniform background noise plus the
/// category tone with two harmonics, amplitude jitter and a faint noise
/// floor.
inline RenderedClip render_solo(int category, int image_side, int sample_rate,
                                double seconds, Rng& rng) {
  RenderedClip out;
  out.frame = img::Image(image_side, image_side);
  for (int y = 0; y < image_side; ++y) {
    for (int x = 0; x < image_side; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        out.frame.at(x, y, ch) =
            static_cast<std::uint8_t>(rng.uniform_int(60));
      }
    }
  }
  const int rmin = image_side / 6;
  const int rmax = image_side / 4;
  const int radius = rmin + rng.uniform_int(rmax - rmin + 1);
  const int cx = radius + 1 + rng.uniform_int(image_side - 2 * radius - 2);
  const int cy = radius + 1 + rng.uniform_int(image_side - 2 * radius - 2);
  const auto color = shape_color(category);
  int x0 = image_side, y0 = image_side, x1 = 0, y1 = 0;
  for (int y = 0; y < image_side; ++y) {
    for (int x = 0; x < image_side; ++x) {
      if (!shape_hit(category, x - cx, y - cy, radius)) continue;
      for (int ch = 0; ch < 3; ++ch) out.frame.at(x, y, ch) = color[static_cast<std::size_t>(ch)];
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x + 1);
      y1 = std::max(y1, y + 1);
    }
  }
  out.box = BoundingBox{x0, y0, x1, y1, category, true};

  const auto n = static_cast<std::size_t>(std::llround(seconds * sample_rate));
  out.clip.sample_rate = sample_rate;
  out.clip.samples.resize(n);
  const double f = tone_frequency(category);
  const double gain = rng.uniform(0.5, 1.0);  // amplitude jitter
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate;
    double v = 0.6 * std::sin(2.0 * M_PI * f * t + phase) +
               0.25 * std::sin(2.0 * M_PI * 2.0 * f * t + phase) +
               0.15 * std::sin(2.0 * M_PI * 3.0 * f * t + phase);
    v = gain * 0.5 * v + 0.002 * rng.normal();
    out.clip.samples[i] = std::clamp(v, -1.0, 1.0);
  }
  return out;
}

}  // namespace toy

/// Mixes four solo records of distinct categories into one cocktail-party
/// record: the frame is a 2x2 tile of the half-scaled solo frames in
/// category-sorted row-major order; the audio is the sum of two randomly
/// chosen solos with uniform [0.5, 1.5] gain jitter, attenuated afterwards
/// if the peak exceeds 1. Exactly two categories are marked sounding.
inline ClipRecord synthesize_cocktail(std::vector<ClipRecord> solos,
                                      const std::string& out_dir,
                                      const std::string& clip_id, Rng& rng) {
  if (solos.size() != 4) {
    throw InvalidInput("synthesize_cocktail: need exactly 4 solo records");
  }
  std::sort(solos.begin(), solos.end(),
            [](const ClipRecord& a, const ClipRecord& b) {
              return a.category < b.category;
            });
  std::set<int> cats;
  for (const ClipRecord& r : solos) {
    if (r.split != "single" || r.category < 0 || !r.has_box) {
      throw InvalidInput(
          "synthesize_cocktail: sources must be labeled single records");
    }
    cats.insert(r.category);
  }
  if (cats.size() != 4) {
    throw InvalidInput("synthesize_cocktail: categories must be distinct");
  }

  // frame: 2x2 tile of half-scaled solos
  std::vector<img::Image> frames;
  for (const ClipRecord& r : solos) frames.push_back(img::read_png(r.frame_path));
  const int side = frames[0].width;
  for (const img::Image& f : frames) {
    if (f.width != side || f.height != side) {
      throw InvalidInput("synthesize_cocktail: frame sizes differ");
    }
  }
  img::Image tiled(side, side);
  std::vector<BoundingBox> boxes;
  for (int i = 0; i < 4; ++i) {
    const img::Image half = img::downscale_half(frames[static_cast<std::size_t>(i)]);
    const int offx = (i % 2) * (side / 2);
    const int offy = (i / 2) * (side / 2);
    for (int y = 0; y < half.height; ++y) {
      for (int x = 0; x < half.width; ++x) {
        for (int ch = 0; ch < 3; ++ch) {
          tiled.at(offx + x, offy + y, ch) = half.at(x, y, ch);
        }
      }
    }
    const BoundingBox& src = solos[static_cast<std::size_t>(i)].box;
    BoundingBox b;
    b.x0 = offx + src.x0 / 2;
    b.y0 = offy + src.y0 / 2;
    b.x1 = offx + (src.x1 + 1) / 2;
    b.y1 = offy + (src.y1 + 1) / 2;
    b.category = solos[static_cast<std::size_t>(i)].category;
    boxes.push_back(b);
  }

  // audio: two random sources with gain jitter
  std::vector<audio::AudioClip> clips;
  for (const ClipRecord& r : solos) clips.push_back(audio::read_wav(r.audio_path));
  const std::size_t n = clips[0].samples.size();
  for (const audio::AudioClip& c : clips) {
    if (c.samples.size() != n || c.sample_rate != clips[0].sample_rate) {
      throw InvalidInput("synthesize_cocktail: source durations differ");
    }
  }
  std::vector<int> order = {0, 1, 2, 3};
  rng.shuffle(order);
  const int sa = order[0], sb = order[1];
  const double ga = rng.uniform(0.5, 1.5);
  const double gb = rng.uniform(0.5, 1.5);
  audio::AudioClip mix;
  mix.sample_rate = clips[0].sample_rate;
  mix.samples.resize(n);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mix.samples[i] = ga * clips[static_cast<std::size_t>(sa)].samples[i] +
                     gb * clips[static_cast<std::size_t>(sb)].samples[i];
    peak = std::max(peak, std::fabs(mix.samples[i]));
  }
  if (peak > 1.0) {
    for (double& s : mix.samples) s /= peak;
  }

  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "audio");
  fs::create_directories(fs::path(out_dir) / "frames");
  ClipRecord rec;
  rec.clip_id = clip_id;
  rec.split = "multi";
  rec.audio_path = (fs::path(out_dir) / "audio" / (clip_id + ".wav")).string();
  rec.frame_path = (fs::path(out_dir) / "frames" / (clip_id + ".png")).string();
  audio::write_wav_pcm16(rec.audio_path, mix);
  img::write_png(rec.frame_path, tiled);
  for (int i = 0; i < 4; ++i) {
    rec.categories.push_back(solos[static_cast<std::size_t>(i)].category);
    const bool sounding = i == sa || i == sb;
    rec.sounding.push_back(sounding);
    boxes[static_cast<std::size_t>(i)].sounding = sounding;
    rec.boxes.push_back(boxes[static_cast<std::size_t>(i)]);
  }
  return rec;
}

struct GeneratedDataset {
  std::string train_manifest;
  std::string test_manifest;
  int train_singles = 0, test_singles = 0;
  int train_multis = 0, test_multis = 0;
};

/// Generates the procedural desk-scale dataset: labeled solo clips plus
/// cocktail-party mixtures, written under `out_dir` with train/test
/// manifests. `missing_categories` drops the highest categories from the
/// single split only; `noise_rate` replaces that fraction of train solo
/// audio tracks with two-source mixtures.
inline GeneratedDataset generate_toy_dataset(const ToyConfig& cfg,
                                             const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "audio", ec);
  fs::create_directories(fs::path(out_dir) / "frames", ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw IoError("generate_toy_dataset: cannot create output directory " +
                  out_dir);
  }

  const int single_cats = cfg.num_categories - cfg.missing_categories;
  auto write_solo = [&](const std::string& id, int category) {
    Rng rng = stream_rng(cfg.seed, id);
    toy::RenderedClip r = toy::render_solo(category, cfg.image_side,
                                           cfg.sample_rate, cfg.clip_seconds,
                                           rng);
    ClipRecord rec;
    rec.clip_id = id;
    rec.split = "single";
    rec.category = category;
    rec.box = r.box;
    rec.has_box = true;
    rec.audio_path = (fs::path(out_dir) / "audio" / (id + ".wav")).string();
    rec.frame_path = (fs::path(out_dir) / "frames" / (id + ".png")).string();
    audio::write_wav_pcm16(rec.audio_path, r.clip);
    img::write_png(rec.frame_path, r.frame);
    return rec;
  };

  // solo pools, split into train/test; every category is rendered so that
  // cocktails can include categories missing from the single split
  std::vector<std::vector<ClipRecord>> train_pool(
      static_cast<std::size_t>(cfg.num_categories));
  std::vector<std::vector<ClipRecord>> test_pool(
      static_cast<std::size_t>(cfg.num_categories));
  std::vector<ClipRecord> train_singles, test_singles;
  const int per_cat_test = std::max(
      1, static_cast<int>(std::lround(cfg.clips_per_category * cfg.test_fraction)));
  for (int cat = 0; cat < cfg.num_categories; ++cat) {
    for (int i = 0; i < cfg.clips_per_category; ++i) {
      const bool is_test = i < per_cat_test;
      const std::string id = std::string(is_test ? "te" : "tr") + "_single_c" +
                             std::to_string(cat) + "_" + std::to_string(i);
      ClipRecord rec = write_solo(id, cat);
      auto& pool = is_test ? test_pool : train_pool;
      pool[static_cast<std::size_t>(cat)].push_back(rec);
      if (cat < single_cats) {
        (is_test ? test_singles : train_singles).push_back(rec);
      }
    }
  }

  auto make_cocktails = [&](int count, const char* prefix,
                            std::vector<std::vector<ClipRecord>>& pool) {
    std::vector<ClipRecord> out;
    for (int i = 0; i < count; ++i) {
      const std::string id = std::string(prefix) + "_multi_" + std::to_string(i);
      Rng rng = stream_rng(cfg.seed, id);
      std::vector<int> cats(static_cast<std::size_t>(cfg.num_categories));
      for (int c = 0; c < cfg.num_categories; ++c) cats[static_cast<std::size_t>(c)] = c;
      rng.shuffle(cats);
      std::vector<ClipRecord> solos;
      for (int pick = 0; pick < 4; ++pick) {
        auto& cat_pool = pool[static_cast<std::size_t>(cats[static_cast<std::size_t>(pick)])];
        solos.push_back(cat_pool[static_cast<std::size_t>(
            rng.uniform_int(static_cast<int>(cat_pool.size())))]);
      }
      out.push_back(synthesize_cocktail(std::move(solos), out_dir, id, rng));
    }
    return out;
  };
  // cocktails are mixed from the clean solos, before the noise knob touches
  // any audio on disk
  std::vector<ClipRecord> train_multis =
      make_cocktails(cfg.multi_train, "tr", train_pool);
  std::vector<ClipRecord> test_multis =
      make_cocktails(cfg.multi_test, "te", test_pool);

  // noise knob: replace audio of a deterministic subset of train solos with
  // a two-source mixture
  if (cfg.noise_rate > 0.0 && !train_singles.empty()) {
    Rng noise_rng = stream_rng(cfg.seed, "noise_pick");
    const int n_noise = static_cast<int>(
        std::lround(cfg.noise_rate * static_cast<double>(train_singles.size())));
    std::vector<std::size_t> order(train_singles.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    noise_rng.shuffle(order);
    for (int pick = 0; pick < n_noise; ++pick) {
      ClipRecord& rec = train_singles[order[static_cast<std::size_t>(pick)]];
      Rng rng = stream_rng(cfg.seed, rec.clip_id + "#noise");
      int other = rng.uniform_int(cfg.num_categories - 1);
      if (other >= rec.category) ++other;
      audio::AudioClip own = audio::read_wav(rec.audio_path);
      toy::RenderedClip extra = toy::render_solo(
          other, cfg.image_side, cfg.sample_rate, cfg.clip_seconds, rng);
      double peak = 0.0;
      for (std::size_t i = 0; i < own.samples.size(); ++i) {
        own.samples[i] += extra.clip.samples[i];
        peak = std::max(peak, std::fabs(own.samples[i]));
      }
      if (peak > 1.0) {
        for (double& s : own.samples) s /= peak;
      }
      audio::write_wav_pcm16(rec.audio_path, own);
    }
  }

  // manifests reference media relative to the dataset directory
  auto relativize = [&](std::vector<ClipRecord> records) {
    for (ClipRecord& r : records) {
      r.audio_path = fs::relative(r.audio_path, out_dir).string();
      r.frame_path = fs::relative(r.frame_path, out_dir).string();
    }
    return records;
  };
  GeneratedDataset result;
  result.train_manifest = (fs::path(out_dir) / "train_manifest.jsonl").string();
  result.test_manifest = (fs::path(out_dir) / "test_manifest.jsonl").string();
  std::vector<ClipRecord> train_records = relativize(train_singles);
  for (ClipRecord& r : relativize(train_multis)) train_records.push_back(std::move(r));
  std::vector<ClipRecord> test_records = relativize(test_singles);
  for (ClipRecord& r : relativize(test_multis)) test_records.push_back(std::move(r));
  save_manifest(result.train_manifest, train_records);
  save_manifest(result.test_manifest, test_records);
  result.train_singles = static_cast<int>(train_singles.size());
  result.test_singles = static_cast<int>(test_singles.size());
  result.train_multis = static_cast<int>(train_multis.size());
  result.test_multis = static_cast<int>(test_multis.size());
  return result;
}

}  // namespace soundloc::data
