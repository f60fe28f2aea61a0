// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "soundloc/data.hpp"
#include "soundloc/eval.hpp"
#include "soundloc/stage1.hpp"
#include "soundloc/stage2.hpp"

namespace soundloc::cli {

namespace fs = std::filesystem;

/// Full run configuration: model plus schedule plus metric options, loaded
/// from one JSON file with CLI-flag overrides. Unknown keys are rejected.
struct RunConfig {
  model::ModelConfig model;
  bool model_seed_set = false;
  stage1::Stage1Schedule schedule;
  std::string supervision = "pseudo";
  double binarize_threshold = 0.05;
  stage2::Stage2Options stage2;
  eval::MultiEvalOptions metrics;

  static RunConfig from_json(const nlohmann::json& j) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() != "model" && it.key() != "stage1" && it.key() != "stage2" &&
          it.key() != "metrics") {
        throw ConfigError("config: unknown section '" + it.key() + "'");
      }
    }
    RunConfig cfg;
    if (j.contains("model")) {
      cfg.model = model::ModelConfig::from_json(j.at("model"));
      cfg.model_seed_set = j.at("model").contains("seed");
    }
    if (j.contains("stage1")) {
      const auto& s = j.at("stage1");
      static const std::vector<std::string> known = {
          "alternations", "loc_epochs",  "cls_epochs",
          "loc_steps",    "cls_steps",   "batch_size",
          "supervision",  "cls_lr_scale", "binarize_threshold"};
      for (auto it = s.begin(); it != s.end(); ++it) {
        bool ok = false;
        for (const auto& k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("config.stage1: unknown key '" + it.key() + "'");
      }
      cfg.schedule.alternations = s.value("alternations", cfg.schedule.alternations);
      cfg.schedule.loc_epochs = s.value("loc_epochs", cfg.schedule.loc_epochs);
      cfg.schedule.cls_epochs = s.value("cls_epochs", cfg.schedule.cls_epochs);
      cfg.schedule.loc_steps = s.value("loc_steps", cfg.schedule.loc_steps);
      cfg.schedule.cls_steps = s.value("cls_steps", cfg.schedule.cls_steps);
      cfg.schedule.batch_size = s.value("batch_size", cfg.schedule.batch_size);
      cfg.schedule.cls_lr_scale = s.value("cls_lr_scale", cfg.schedule.cls_lr_scale);
      cfg.supervision = s.value("supervision", cfg.supervision);
      cfg.binarize_threshold =
          s.value("binarize_threshold", cfg.binarize_threshold);
    }
    if (j.contains("stage2")) {
      const auto& s = j.at("stage2");
      static const std::vector<std::string> known = {
          "steps",    "batch_size", "use_loc", "use_prod", "use_consistency",
          "learning_rate", "visual_lr_scale"};
      for (auto it = s.begin(); it != s.end(); ++it) {
        bool ok = false;
        for (const auto& k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("config.stage2: unknown key '" + it.key() + "'");
      }
      cfg.stage2.steps = s.value("steps", cfg.stage2.steps);
      cfg.stage2.batch_size = s.value("batch_size", cfg.stage2.batch_size);
      cfg.stage2.learning_rate = s.value("learning_rate", cfg.stage2.learning_rate);
      cfg.stage2.visual_lr_scale =
          s.value("visual_lr_scale", cfg.stage2.visual_lr_scale);
      cfg.stage2.flags.use_loc = s.value("use_loc", cfg.stage2.flags.use_loc);
      cfg.stage2.flags.use_prod = s.value("use_prod", cfg.stage2.flags.use_prod);
      cfg.stage2.flags.use_consistency =
          s.value("use_consistency", cfg.stage2.flags.use_consistency);
    }
    if (j.contains("metrics")) {
      const auto& s = j.at("metrics");
      static const std::vector<std::string> known = {
          "box_threshold", "nsa_tau", "ciou_threshold", "map_iou"};
      for (auto it = s.begin(); it != s.end(); ++it) {
        bool ok = false;
        for (const auto& k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("config.metrics: unknown key '" + it.key() + "'");
      }
      cfg.metrics.box_threshold = s.value("box_threshold", cfg.metrics.box_threshold);
      cfg.metrics.nsa_tau = s.value("nsa_tau", cfg.metrics.nsa_tau);
      cfg.metrics.ciou_threshold =
          s.value("ciou_threshold", cfg.metrics.ciou_threshold);
      cfg.metrics.map_iou = s.value("map_iou", cfg.metrics.map_iou);
    }
    cfg.stage2.lambda = cfg.model.lambda;
    return cfg;
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
    }
    return from_json(j);
  }
};

namespace detail {

/// Seed priority: explicit --seed flag, then the config file, then the
/// SOUNDLOC_SEED environment variable.
inline std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag,
                                  const RunConfig& cfg) {
  if (flag.has_value()) return *flag;
  if (cfg.model_seed_set) return cfg.model.seed;
  if (const char* env = std::getenv("SOUNDLOC_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError("SOUNDLOC_SEED is not an integer");
    }
  }
  return cfg.model.seed;
}

inline void write_produced_files(const std::string& out_dir,
                                 std::vector<std::string> files) {
  std::sort(files.begin(), files.end());
  nlohmann::json j = {{"files", files}};
  std::ofstream f(fs::path(out_dir) / "produced_files.json", std::ios::trunc);
  f << j.dump(2) << "\n";
}

inline void ensure_out_dir(const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw IoError("cannot create output directory " + out_dir);
  }
}

inline std::vector<std::string> list_files_recursive(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) {
      files.push_back(fs::relative(entry.path(), dir).string());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline void write_train_log(const std::string& path,
                            const std::vector<stage1::LogEntry>& log) {
  std::ofstream f(path, std::ios::trunc);
  for (const stage1::LogEntry& e : log) {
    nlohmann::json j = {{"step", e.step}, {"phase", e.phase}, {"loss", e.loss}};
    if (e.pair_accuracy >= 0.0) j["pair_accuracy"] = e.pair_accuracy;
    f << j.dump() << "\n";
  }
}

inline void save_representations(const std::string& path,
                                 const RTensor& reps,
                                 const std::vector<std::string>& clip_ids,
                                 const std::vector<int>& pseudo_labels) {
  TensorArchive ar;
  ar.header = {{"format", "soundloc-reps"}, {"clip_ids", clip_ids}};
  ar.reals.emplace("representations", reps);
  Tensor<std::int64_t> labels({static_cast<int>(pseudo_labels.size())});
  for (std::size_t i = 0; i < pseudo_labels.size(); ++i) {
    labels[static_cast<std::int64_t>(i)] = pseudo_labels[i];
  }
  ar.ints.emplace("pseudo_labels", std::move(labels));
  ar.save(path);
}

}  // namespace detail

struct GenToyArgs {
  std::string out;
  data::ToyConfig toy;
  std::optional<std::uint64_t> seed;
};

inline int cmd_gen_toy(GenToyArgs args) {
  if (args.seed.has_value()) {
    args.toy.seed = *args.seed;
  } else if (const char* env = std::getenv("SOUNDLOC_SEED")) {
    args.toy.seed = std::stoull(env);
  }
  detail::ensure_out_dir(args.out);
  const data::GeneratedDataset out = data::generate_toy_dataset(args.toy, args.out);
  detail::write_produced_files(args.out, detail::list_files_recursive(args.out));
  std::cout << "gen-toy: " << out.train_singles << " train singles, "
            << out.test_singles << " test singles, " << out.train_multis
            << " train multis, " << out.test_multis << " test multis under "
            << args.out << "\n";
  return 0;
}

struct TrainStage1Args {
  std::string manifest;
  std::string out;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;  // sets both phase step overrides
};

inline int cmd_train_stage1(const TrainStage1Args& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig{}
                                           : RunConfig::from_file(args.config_path);
  cfg.model.seed = detail::resolve_seed(args.seed, cfg);
  if (args.steps.has_value()) {
    cfg.schedule.loc_steps = *args.steps;
    cfg.schedule.cls_steps = *args.steps;
    if (*args.steps == 0) {
      cfg.schedule.loc_epochs = 0;
      cfg.schedule.cls_epochs = 0;
    }
  }
  cfg.model.validate();
  detail::ensure_out_dir(args.out);

  const stage1::Dataset dataset = stage1::Dataset::load(args.manifest, cfg.model);
  stage1::Stage1Result result = stage1::train_stage1(
      dataset, cfg.model, cfg.schedule,
      stage1::supervision_from_string(cfg.supervision), cfg.binarize_threshold);

  const std::string ckpt = (fs::path(args.out) / "checkpoint.slt").string();
  const std::string reps = (fs::path(args.out) / "object_reps.slt").string();
  const std::string dict_path = (fs::path(args.out) / "dictionary.slt").string();
  const std::string log_path = (fs::path(args.out) / "train_log.jsonl").string();
  model::save_checkpoint(result.model, ckpt);
  detail::save_representations(reps, result.representations, result.clip_ids,
                               result.pseudo_labels);

  // attach the purity-maximizing category assignment when labels exist
  bool labeled = true;
  std::map<std::string, int> labels;
  for (const auto& clip : dataset.singles) {
    if (clip.record.category < 0) {
      labeled = false;
      break;
    }
    labels[clip.record.clip_id] = clip.record.category;
  }
  if (labeled) {
    const dictionary::CategoryAssignment assignment = dictionary::assign_categories(
        result.dict, labels, cfg.model.num_categories);
    dictionary::save_dictionary(result.dict, &assignment, cfg.model.seed, dict_path);
  } else {
    dictionary::save_dictionary(result.dict, nullptr, cfg.model.seed, dict_path);
  }
  detail::write_train_log(log_path, result.log);
  detail::write_produced_files(
      args.out, {"checkpoint.slt", "object_reps.slt", "dictionary.slt",
                 "train_log.jsonl"});
  const double acc = stage1::pair_accuracy(result.model, dataset.singles,
                                           cfg.model.seed);
  std::cout << "train-stage1: " << result.log.size() << " steps, train pair accuracy "
            << acc << ", artifacts under " << args.out << "\n";
  return 0;
}

struct TrainStage2Args {
  std::string manifest;
  std::string stage1_ckpt;
  std::string dict_path;
  std::string out;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<double> lambda;
};

inline int cmd_train_stage2(const TrainStage2Args& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig{}
                                           : RunConfig::from_file(args.config_path);
  model::Model m = model::load_checkpoint(args.stage1_ckpt);
  if (args.seed.has_value()) m.cfg.seed = *args.seed;
  const dictionary::LoadedDictionary dict = dictionary::load_dictionary(args.dict_path);
  stage2::Stage2Options options = cfg.stage2;
  options.lambda = args.lambda.value_or(m.cfg.lambda);
  if (args.steps.has_value()) options.steps = *args.steps;

  detail::ensure_out_dir(args.out);
  const stage1::Dataset dataset = stage1::Dataset::load(args.manifest, m.cfg);
  stage2::Stage2Result result =
      stage2::train_stage2(dataset.multis, m, dict.dict, options);

  const std::string ckpt = (fs::path(args.out) / "checkpoint.slt").string();
  const std::string log_path = (fs::path(args.out) / "train_log.jsonl").string();
  model::save_checkpoint(result.model, ckpt);
  detail::write_train_log(log_path, result.log);
  detail::write_produced_files(args.out, {"checkpoint.slt", "train_log.jsonl"});
  std::cout << "train-stage2: " << result.log.size() << " steps, artifacts under "
            << args.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string manifest;
  std::string ckpt;
  std::string dict_path;
  std::string out;
  std::string split = "multi";  // single | multi | both
  std::string config_path;
};

inline int cmd_eval(const EvalArgs& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig{}
                                           : RunConfig::from_file(args.config_path);
  const model::Model m = model::load_checkpoint(args.ckpt);
  if (args.split != "single" && args.split != "multi" && args.split != "both") {
    throw ConfigError("eval: --split must be single, multi or both");
  }
  detail::ensure_out_dir(args.out);
  const stage1::Dataset dataset = stage1::Dataset::load(args.manifest, m.cfg);

  nlohmann::json report;
  nlohmann::json aggregates;
  if (args.split == "single" || args.split == "both") {
    const eval::SingleEvalResult single = eval::evaluate_single(
        m, dataset.singles, cfg.metrics.box_threshold, 0.5);
    aggregates["iou@0.5"] = single.iou_at;
    aggregates["auc"] = single.auc;
    aggregates["pair_accuracy"] =
        stage1::pair_accuracy(m, dataset.singles, m.cfg.seed);
    nlohmann::json samples = nlohmann::json::array();
    for (std::size_t i = 0; i < single.ious.size(); ++i) {
      samples.push_back({{"clip_id", dataset.singles[i].record.clip_id},
                         {"iou", single.ious[i]}});
    }
    report["single_samples"] = samples;
  }
  if (args.split == "multi" || args.split == "both") {
    if (args.dict_path.empty()) {
      throw ConfigError("eval: --dict is required for the multi split");
    }
    const dictionary::LoadedDictionary dict =
        dictionary::load_dictionary(args.dict_path);
    if (!dict.has_assignment) {
      throw ConfigError(
          "eval: dictionary archive carries no category assignment");
    }
    const eval::MultiEvalResult multi = eval::evaluate_multi(
        m, dict.dict, dict.assignment, dataset.multis, cfg.metrics);
    aggregates["ciou@0.3"] = multi.ciou.at_threshold;
    aggregates["ciou_mean"] = multi.ciou.mean_score;
    aggregates["ciou_random_baseline@0.3"] = multi.random_baseline.at_threshold;
    aggregates["nsa"] = multi.nsa;
    aggregates["sounding_map"] = multi.sounding_map;
    bool labeled = !dataset.singles.empty();
    for (const auto& clip : dataset.singles) {
      labeled = labeled && clip.record.category >= 0;
    }
    if (labeled) {
      aggregates["nmi"] =
          eval::nearest_key_nmi(m, dict.dict, dataset.singles,
                                cfg.binarize_threshold);
    }
    nlohmann::json samples = nlohmann::json::array();
    for (std::size_t i = 0; i < multi.records.size(); ++i) {
      samples.push_back({{"clip_id", dataset.multis[i].record.clip_id},
                         {"iou", multi.records[i].iou},
                         {"sounding", multi.records[i].sounding}});
    }
    report["multi_samples"] = samples;
  }
  report["aggregates"] = aggregates;

  const std::string report_path = (fs::path(args.out) / "report.json").string();
  std::ofstream f(report_path, std::ios::trunc);
  f << report.dump(2) << "\n";
  f.close();
  detail::write_produced_files(args.out, {"report.json"});
  std::cout << "eval: report written to " << report_path << "\n";
  std::cout << aggregates.dump(2) << "\n";
  return 0;
}

struct LocalizeArgs {
  std::string image;
  std::string audio;
  std::string ckpt;
  std::string dict_path;
  std::string out;
  bool boxes = false;
};

inline int cmd_localize(const LocalizeArgs& args) {
  const model::Model m = model::load_checkpoint(args.ckpt);
  const dictionary::LoadedDictionary dict = dictionary::load_dictionary(args.dict_path);
  if (dict.dict.key_dim() != m.cfg.channels) {
    throw InvalidInput("localize: dictionary width does not match checkpoint");
  }
  detail::ensure_out_dir(args.out);

  const img::Image image = img::read_png(args.image);
  audio::AudioClip clip = audio::read_wav(args.audio);
  clip = audio::resample(clip, 16000);
  const audio::LogMelSpectrogram spec = audio::log_mel(clip, 160, 80, m.cfg.mel_bands);
  if (spec.frames() != m.cfg.spec_frames) {
    throw InvalidInput("localize: audio yields " + std::to_string(spec.frames()) +
                       " frames, checkpoint expects " +
                       std::to_string(m.cfg.spec_frames));
  }

  const RTensor f = m.encode_visual(model::image_to_input(image));
  const RTensor g = m.encode_audio(model::spec_to_input(spec));
  const RTensor l = m.localization_map(g, f);
  const std::vector<RTensor> cluster_maps = stage2::category_maps(f, dict.dict);
  const std::vector<RTensor> filtered = stage2::suppress_silent(cluster_maps, l);

  std::vector<RTensor> maps = filtered;
  int categories = dict.dict.num_keys();
  if (dict.has_assignment) {
    maps = dictionary::category_activation(filtered, dict.assignment,
                                           m.cfg.num_categories);
    categories = m.cfg.num_categories;
  }
  const std::vector<RTensor> class_maps = stage2::infer_class_maps(maps);

  TensorArchive ar;
  ar.header = {{"format", "soundloc-heatmaps"},
               {"categories", categories},
               {"aggregated", dict.has_assignment}};
  ar.reals.emplace("localization", l);
  for (int c = 0; c < categories; ++c) {
    ar.reals.emplace("raw_" + std::to_string(c), maps[static_cast<std::size_t>(c)]);
    ar.reals.emplace("class_" + std::to_string(c),
                     class_maps[static_cast<std::size_t>(c)]);
  }
  const std::string heatmap_path = (fs::path(args.out) / "heatmaps.slt").string();
  ar.save(heatmap_path);

  std::vector<std::string> written = {"heatmaps.slt"};
  nlohmann::json boxes = nlohmann::json::array();
  for (int c = 0; c < categories; ++c) {
    const RTensor up = img::upsample_bilinear(
        class_maps[static_cast<std::size_t>(c)], image.height, image.width);
    const std::string heat_name = "heatmap_cat" + std::to_string(c) + ".png";
    img::Image heat(image.width, image.height);
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) {
        const auto v = static_cast<std::uint8_t>(
            std::lround(std::clamp(up(y, x), 0.0, 1.0) * 255.0));
        heat.at(x, y, 0) = v;
        heat.at(x, y, 1) = v;
        heat.at(x, y, 2) = v;
      }
    }
    img::write_png((fs::path(args.out) / heat_name).string(), heat);
    written.push_back(heat_name);

    const std::string overlay_name = "overlay_cat" + std::to_string(c) + ".png";
    img::write_png((fs::path(args.out) / overlay_name).string(),
                   img::overlay_heatmap(image, up));
    written.push_back(overlay_name);

    if (args.boxes && up.max_value() > 0.0) {
      const metrics::BoundingBox box = metrics::heatmap_to_box(up, 0.5);
      boxes.push_back({{"category", c},
                       {"box", {box.x0, box.y0, box.x1, box.y1}}});
    }
  }
  if (args.boxes) {
    std::ofstream f(fs::path(args.out) / "boxes.json", std::ios::trunc);
    f << boxes.dump(2) << "\n";
    written.push_back("boxes.json");
  }
  detail::write_produced_files(args.out, written);
  std::cout << "localize: wrote " << written.size() << " artifacts under "
            << args.out << "\n";
  return 0;
}

struct SynthCocktailArgs {
  std::string manifest;
  std::string out;
  int count = 10;
  std::optional<std::uint64_t> seed;
};

inline int cmd_synth_cocktail(const SynthCocktailArgs& args) {
  std::uint64_t seed = 0;
  if (args.seed.has_value()) {
    seed = *args.seed;
  } else if (const char* env = std::getenv("SOUNDLOC_SEED")) {
    seed = std::stoull(env);
  }
  detail::ensure_out_dir(args.out);
  std::map<int, std::vector<data::ClipRecord>> by_category;
  for (const data::ClipRecord& r : data::load_manifest(args.manifest)) {
    if (r.split == "single" && r.category >= 0 && r.has_box) {
      by_category[r.category].push_back(r);
    }
  }
  if (by_category.size() < 4) {
    throw InvalidInput("synth-cocktail: need labeled solos of >= 4 categories");
  }
  std::vector<int> categories;
  for (const auto& [cat, pool] : by_category) categories.push_back(cat);

  std::vector<data::ClipRecord> records;
  for (int i = 0; i < args.count; ++i) {
    const std::string id = "synth_multi_" + std::to_string(i);
    Rng rng = stream_rng(seed, id);
    std::vector<int> order = categories;
    rng.shuffle(order);
    std::vector<data::ClipRecord> solos;
    for (int pick = 0; pick < 4; ++pick) {
      const auto& pool = by_category.at(order[static_cast<std::size_t>(pick)]);
      solos.push_back(pool[static_cast<std::size_t>(
          rng.uniform_int(static_cast<int>(pool.size())))]);
    }
    records.push_back(data::synthesize_cocktail(solos, args.out, id, rng));
  }
  for (data::ClipRecord& r : records) {
    r.audio_path = fs::relative(r.audio_path, args.out).string();
    r.frame_path = fs::relative(r.frame_path, args.out).string();
  }
  data::save_manifest((fs::path(args.out) / "cocktail_manifest.jsonl").string(),
                      records);
  detail::write_produced_files(args.out, detail::list_files_recursive(args.out));
  std::cout << "synth-cocktail: wrote " << records.size()
            << " cocktail records under " << args.out << "\n";
  return 0;
}

/// Parses argv and dispatches. Exit codes: 0 success, 2 usage or
/// configuration error, 1 runtime failure.
inline int run_cli(const std::vector<std::string>& argv) {
  CLI::App app{"class-aware sounding-object localization toolkit"};
  app.require_subcommand(1);

  GenToyArgs gen;
  std::uint64_t seed_value = 0;
  auto* gen_cmd = app.add_subcommand("gen-toy", "generate the procedural toy dataset");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--categories", gen.toy.num_categories, "number of categories");
  gen_cmd->add_option("--clips-per-category", gen.toy.clips_per_category,
                      "solo clips per category");
  gen_cmd->add_option("--multi-train", gen.toy.multi_train, "train cocktails");
  gen_cmd->add_option("--multi-test", gen.toy.multi_test, "test cocktails");
  gen_cmd->add_option("--image-side", gen.toy.image_side, "frame side in pixels");
  gen_cmd->add_option("--test-fraction", gen.toy.test_fraction, "held-out fraction");
  gen_cmd->add_option("--missing-categories", gen.toy.missing_categories,
                      "categories absent from the single split");
  gen_cmd->add_option("--noise-rate", gen.toy.noise_rate,
                      "fraction of train solos given multi-source audio");
  auto* gen_seed = gen_cmd->add_option("--seed", seed_value, "global seed");

  TrainStage1Args s1;
  int steps_value = 0;
  double lambda_value = 0.0;
  auto* s1_cmd = app.add_subcommand("train-stage1", "train the single-source stage");
  s1_cmd->add_option("--manifest", s1.manifest, "train manifest")->required();
  s1_cmd->add_option("--config", s1.config_path, "run config JSON");
  s1_cmd->add_option("--out", s1.out, "output directory")->required();
  auto* s1_seed = s1_cmd->add_option("--seed", seed_value, "global seed");
  auto* s1_steps = s1_cmd->add_option("--steps", steps_value,
                                      "override steps per phase");

  TrainStage2Args s2;
  auto* s2_cmd = app.add_subcommand("train-stage2", "train the cocktail stage");
  s2_cmd->add_option("--manifest", s2.manifest, "train manifest")->required();
  s2_cmd->add_option("--stage1", s2.stage1_ckpt, "stage-1 checkpoint")->required();
  s2_cmd->add_option("--dict", s2.dict_path, "dictionary archive")->required();
  s2_cmd->add_option("--config", s2.config_path, "run config JSON");
  s2_cmd->add_option("--out", s2.out, "output directory")->required();
  auto* s2_seed = s2_cmd->add_option("--seed", seed_value, "global seed");
  auto* s2_steps = s2_cmd->add_option("--steps", steps_value, "training steps");
  auto* s2_lambda = s2_cmd->add_option("--lambda", lambda_value, "loss balance");

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  ev_cmd->add_option("--manifest", ev.manifest, "eval manifest")->required();
  ev_cmd->add_option("--ckpt", ev.ckpt, "model checkpoint")->required();
  ev_cmd->add_option("--dict", ev.dict_path, "dictionary archive");
  ev_cmd->add_option("--split", ev.split, "single | multi | both");
  ev_cmd->add_option("--config", ev.config_path, "run config JSON");
  ev_cmd->add_option("--out", ev.out, "output directory")->required();

  LocalizeArgs loc;
  auto* loc_cmd = app.add_subcommand("localize", "localize one image/audio pair");
  loc_cmd->add_option("--image", loc.image, "input PNG")->required();
  loc_cmd->add_option("--audio", loc.audio, "input WAV")->required();
  loc_cmd->add_option("--ckpt", loc.ckpt, "model checkpoint")->required();
  loc_cmd->add_option("--dict", loc.dict_path, "dictionary archive")->required();
  loc_cmd->add_option("--out", loc.out, "output directory")->required();
  loc_cmd->add_flag("--boxes", loc.boxes, "also emit bounding boxes");

  SynthCocktailArgs synth;
  auto* synth_cmd =
      app.add_subcommand("synth-cocktail", "mix cocktails from labeled solos");
  synth_cmd->add_option("--manifest", synth.manifest, "solo manifest")->required();
  synth_cmd->add_option("--out", synth.out, "output directory")->required();
  synth_cmd->add_option("--count", synth.count, "number of cocktails");
  auto* synth_seed = synth_cmd->add_option("--seed", seed_value, "global seed");

  std::vector<const char*> cargs;
  cargs.push_back("soundloc");
  for (const std::string& a : argv) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 2;
  }

  try {
    if (gen_cmd->parsed()) {
      if (gen_seed->count() > 0) gen.seed = seed_value;
      return cmd_gen_toy(gen);
    }
    if (s1_cmd->parsed()) {
      if (s1_seed->count() > 0) s1.seed = seed_value;
      if (s1_steps->count() > 0) s1.steps = steps_value;
      return cmd_train_stage1(s1);
    }
    if (s2_cmd->parsed()) {
      if (s2_seed->count() > 0) s2.seed = seed_value;
      if (s2_steps->count() > 0) s2.steps = steps_value;
      if (s2_lambda->count() > 0) s2.lambda = lambda_value;
      return cmd_train_stage2(s2);
    }
    if (ev_cmd->parsed()) return cmd_eval(ev);
    if (loc_cmd->parsed()) return cmd_localize(loc);
    if (synth_cmd->parsed()) {
      if (synth_seed->count() > 0) synth.seed = seed_value;
      return cmd_synth_cocktail(synth);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const VersionMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace soundloc::cli
