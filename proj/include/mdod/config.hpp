#pragma once

// Run configuration as a JSON document. Every section and key is optional;
// absent keys keep their defaults, unknown keys are rejected.
//
//   {
//     "data":      { image_size, num_classes, min_objects, max_objects,
//                    min_object_size, max_object_size, color_jitter, noise,
//                    max_overlap, seed, train_scenes, val_scenes },
//     "network":   { num_levels, feature_width, use_ltrb, use_center_limit,
//                    use_level_scale, init_seed },
//     "train":     { alpha, roi_multiplier, empty_scene_rois, iou_threshold,
//                    distribution, learning_rate, grad_clip, epochs,
//                    batch_size, seed, checkpoint_every },
//     "inference": { pi_filter, score_filter, nms_threshold },
//     "paths":     { dataset, train_split, val_split, output }
//   }

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "mdod/data.hpp"
#include "mdod/inference.hpp"
#include "mdod/network.hpp"
#include "mdod/training.hpp"

namespace mdod {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PathsConfig {
  std::string dataset = "data";
  std::string train_split = "train";
  std::string val_split = "val";
  std::string output = "runs/default";
};

struct RunConfig {
  DataGenConfig data;
  std::size_t train_scenes = 500;
  std::size_t val_scenes = 100;
  NetworkConfig network;
  std::uint64_t init_seed = 7;
  TrainConfig train;
  InferenceConfig inference;
  PathsConfig paths;

  /// Copies shared sizes (image size, class count) from the data section.
  void sync() {
    network.image_size = data.image_size;
    network.head.num_classes = data.num_classes;
  }
};

/// Head ablation presets: none, no-ltrb, no-center-limit, no-level-scale.
inline void apply_ablation(HeadConfig& head, const std::string& preset) {
  head.use_ltrb = head.use_center_limit = head.use_level_scale = true;
  if (preset == "none" || preset.empty()) return;
  if (preset == "no-ltrb") head.use_ltrb = false;
  else if (preset == "no-center-limit") head.use_center_limit = false;
  else if (preset == "no-level-scale") head.use_level_scale = false;
  else throw ConfigError("unknown ablation preset '" + preset + "'");
}

namespace detail {

using nlohmann::json;

class Section {
 public:
  Section(const json& root, const char* name) : name_(name) {
    if (root.contains(name)) {
      obj_ = root.at(name);
      if (!obj_.is_object()) throw ConfigError(std::string("config section '") + name + "' must be an object");
    }
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + name_ + "." + k + "'");
    }
  }

 private:
  std::string name_;
  json obj_ = json::object();
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text, const std::string& source = "config") {
  using nlohmann::json;
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  if (!root.is_object()) throw ConfigError(source + ": top level must be an object");
  for (const auto& [k, v] : root.items()) {
    if (k != "data" && k != "network" && k != "train" && k != "inference" && k != "paths") {
      throw ConfigError(source + ": unknown section '" + k + "'");
    }
  }
  RunConfig cfg;
  {
    detail::Section s(root, "data");
    s.get("image_size", cfg.data.image_size);
    s.get("num_classes", cfg.data.num_classes);
    s.get("min_objects", cfg.data.min_objects);
    s.get("max_objects", cfg.data.max_objects);
    s.get("min_object_size", cfg.data.min_object_size);
    s.get("max_object_size", cfg.data.max_object_size);
    s.get("color_jitter", cfg.data.color_jitter);
    s.get("noise", cfg.data.noise);
    s.get("max_overlap", cfg.data.max_overlap);
    s.get("seed", cfg.data.seed);
    s.get("train_scenes", cfg.train_scenes);
    s.get("val_scenes", cfg.val_scenes);
    s.finish();
  }
  {
    detail::Section s(root, "network");
    s.get("num_levels", cfg.network.num_levels);
    s.get("feature_width", cfg.network.head.feature_width);
    s.get("use_ltrb", cfg.network.head.use_ltrb);
    s.get("use_center_limit", cfg.network.head.use_center_limit);
    s.get("use_level_scale", cfg.network.head.use_level_scale);
    s.get("init_seed", cfg.init_seed);
    s.finish();
  }
  {
    detail::Section s(root, "train");
    std::string dist = to_string(cfg.train.distribution);
    s.get("alpha", cfg.train.alpha);
    s.get("roi_multiplier", cfg.train.roi_multiplier);
    s.get("empty_scene_rois", cfg.train.empty_scene_rois);
    s.get("iou_threshold", cfg.train.iou_threshold);
    s.get("distribution", dist);
    s.get("learning_rate", cfg.train.learning_rate);
    s.get("grad_clip", cfg.train.grad_clip);
    s.get("epochs", cfg.train.epochs);
    s.get("batch_size", cfg.train.batch_size);
    s.get("seed", cfg.train.seed);
    s.get("checkpoint_every", cfg.train.checkpoint_every);
    s.finish();
    try {
      cfg.train.distribution = parse_distribution(dist);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("train.distribution: ") + e.what());
    }
  }
  {
    detail::Section s(root, "inference");
    s.get("pi_filter", cfg.inference.pi_filter);
    s.get("score_filter", cfg.inference.score_filter);
    s.get("nms_threshold", cfg.inference.nms_threshold);
    s.finish();
  }
  {
    detail::Section s(root, "paths");
    s.get("dataset", cfg.paths.dataset);
    s.get("train_split", cfg.paths.train_split);
    s.get("val_split", cfg.paths.val_split);
    s.get("output", cfg.paths.output);
    s.finish();
  }
  cfg.sync();
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config(text, path.string());
}

/// Architecture description stored in checkpoint metadata.
inline std::string network_metadata(const NetworkConfig& n) {
  nlohmann::json j{{"image_size", n.image_size},
                   {"num_levels", n.num_levels},
                   {"num_classes", n.head.num_classes},
                   {"feature_width", n.head.feature_width},
                   {"use_ltrb", n.head.use_ltrb},
                   {"use_center_limit", n.head.use_center_limit},
                   {"use_level_scale", n.head.use_level_scale}};
  return j.dump();
}

inline NetworkConfig parse_network_metadata(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    NetworkConfig n;
    n.image_size = j.at("image_size").get<std::size_t>();
    n.num_levels = j.at("num_levels").get<std::size_t>();
    n.head.num_classes = j.at("num_classes").get<std::size_t>();
    n.head.feature_width = j.at("feature_width").get<std::size_t>();
    n.head.use_ltrb = j.at("use_ltrb").get<bool>();
    n.head.use_center_limit = j.at("use_center_limit").get<bool>();
    n.head.use_level_scale = j.at("use_level_scale").get<bool>();
    return n;
  } catch (const nlohmann::json::exception& e) {
    throw diff::CheckpointError(std::string("checkpoint metadata is not a network description: ") + e.what());
  }
}

/// Rebuilds a detector from a checkpoint file.
inline Detector load_detector(const std::filesystem::path& path) {
  const auto ck = diff::load_checkpoint(path);
  Detector net(parse_network_metadata(ck.metadata), 0);
  net.load_parameters(ck);
  return net;
}

}  // namespace mdod
