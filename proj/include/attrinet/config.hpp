#pragma once

// Run configuration: a JSON document merged over built-in defaults. Every key
// of the user document must exist in the defaults (unknown keys are rejected);
// keys whose default is null accept any value.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "attrinet/dataset.hpp"
#include "attrinet/error.hpp"
#include "attrinet/guidance.hpp"
#include "attrinet/losses.hpp"
#include "attrinet/metrics.hpp"
#include "attrinet/report.hpp"
#include "attrinet/task_switch.hpp"
#include "attrinet/trainer.hpp"

namespace attrinet {

using nlohmann::json;

inline json default_run_config() {
  TrainConfig t;
  json train = to_json(t);
  train.erase("guidance");
  train.erase("loss_weights");
  train.erase("seed");
  json lw = to_json(t).at("loss_weights");
  return {
      {"seed", 0},
      {"dataset", ""},
      {"validation", ""},
      {"out", ""},
      {"classes", json::array()},
      {"image_size", 64},
      {"arch",
       {{"scale", "desk"},
        {"generator_channels", nullptr},
        {"critic_channels", nullptr},
        {"res_blocks", nullptr},
        {"critic_layers", nullptr},
        {"pool_factor", nullptr}}},
      {"train", train},
      {"guidance",
       {{"mode", "none"},
        {"oversample_annotated_freq", 0.1},
        {"pseudo_mask", "binary"},
        {"pseudo_source_fraction", 0.4},
        {"avoidance", nullptr}}},
      {"loss_weights", lw},
      {"ablation", json::array()},
      {"eval",
       {{"metrics", {"auc", "class_sensitivity", "disease_sensitivity", "confounder_sensitivity"}},
        {"magnitude", "abs"},
        {"explanation", "weighted"},
        {"bootstrap_resamples", 1000},
        {"max_grids", 200},
        {"injection_log", ""}}},
  };
}

/// Merges `patch` into `base`, rejecting keys absent from `base`.
inline void merge_config(json& base, const json& patch, const std::string& where = "") {
  if (!patch.is_object()) throw usage_error("InvalidConfig", "config" + where + " must be a JSON object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = where + "." + it.key();
    if (!base.contains(it.key())) throw usage_error("UnknownConfigKey", "unknown config key '" + path.substr(1) + "'");
    auto& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) {
      merge_config(slot, it.value(), path);
    } else if (!slot.is_null() && !it.value().is_null() && slot.type() != it.value().type() &&
               !(slot.is_number() && it.value().is_number())) {
      throw usage_error("InvalidConfig", "config key '" + path.substr(1) + "' has the wrong type");
    } else {
      slot = it.value();
    }
  }
}

inline json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw usage_error("InvalidConfig", "cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw usage_error("InvalidConfig", "config " + path.string() + ": " + e.what());
  }
}

/// Sets a dotted key ("train.batch_size") through merge_config so type checks apply.
inline void set_config_value(json& cfg, const std::string& dotted, const json& value) {
  json patch = value;
  std::string key = dotted;
  for (auto pos = key.rfind('.'); pos != std::string::npos; pos = key.rfind('.')) {
    patch = json{{key.substr(pos + 1), patch}};
    key = key.substr(0, pos);
  }
  merge_config(cfg, json{{key, patch}});
}

inline void echo_config(const json& cfg, const std::filesystem::path& out_dir, const std::string& name) {
  std::filesystem::create_directories(out_dir);
  std::ofstream(out_dir / name) << cfg.dump(2) << "\n";
}

inline Box box_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 4) throw usage_error("InvalidConfig", what + " must be [x, y, w, h]");
  return Box{0, j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

inline ArchConfig arch_from_config(const json& cfg, int num_classes) {
  const auto& a = cfg.at("arch");
  const int size = cfg.at("image_size").get<int>();
  const auto scale = a.at("scale").get<std::string>();
  ArchConfig arch;
  if (scale == "desk") arch = ArchConfig::desk(num_classes, size);
  else if (scale == "full") arch = ArchConfig::full(num_classes, size);
  else throw usage_error("InvalidConfig", "arch.scale must be desk or full");
  if (!a.at("generator_channels").is_null()) arch.gen_channels = a["generator_channels"].get<int>();
  if (!a.at("critic_channels").is_null()) arch.critic_channels = a["critic_channels"].get<int>();
  if (!a.at("res_blocks").is_null()) arch.res_blocks = a["res_blocks"].get<int>();
  if (!a.at("critic_layers").is_null()) arch.critic_layers = a["critic_layers"].get<int>();
  if (!a.at("pool_factor").is_null()) arch.pool_factor = a["pool_factor"].get<int>();
  arch.validate();
  return arch;
}

inline LossWeights loss_weights_from_config(const json& cfg) {
  const auto& j = cfg.at("loss_weights");
  LossWeights w;
  w.adv = j.at("adv");
  w.cls = j.at("cls");
  w.reg = j.at("reg");
  w.ctr = j.at("ctr");
  w.gd = j.at("gd");
  w.alpha_neg = j.at("alpha_neg");
  w.alpha_pos = j.at("alpha_pos");
  w.gp = j.at("gp");
  const auto drop = cfg.at("ablation").get<std::vector<std::string>>();
  if (!drop.empty()) {
    std::vector<std::string> keep;
    for (const char* t : {"adv", "cls", "reg", "ctr", "gd"})
      if (std::find(drop.begin(), drop.end(), t) == drop.end()) keep.push_back(t);
    for (const auto& d : drop)
      if (d != "adv" && d != "cls" && d != "reg" && d != "ctr" && d != "gd")
        throw usage_error("InvalidConfig", "unknown loss term '" + d + "' in ablation");
    w = ablate(w, keep);
  }
  w.validate();
  return w;
}

inline TrainConfig train_config_from(const json& cfg) {
  const auto& j = cfg.at("train");
  TrainConfig t;
  t.generator_steps = j.at("generator_steps");
  t.batch_size = j.at("batch_size");
  t.lr_adam = j.at("lr_adam");
  t.adam_beta1 = j.at("adam_beta1");
  t.adam_beta2 = j.at("adam_beta2");
  t.lr_centers = j.at("lr_centers");
  t.critic_steps_per_gen = j.at("critic_steps_per_gen");
  t.critic_boost_every = j.at("critic_boost_every");
  t.critic_boost_steps = j.at("critic_boost_steps");
  t.critic_boost_initial = j.at("critic_boost_initial");
  t.critic_boost_additive = j.at("critic_boost_additive").get<bool>();
  t.classifier_steps_per_gen = j.at("classifier_steps_per_gen");
  t.checkpoint_every = j.at("checkpoint_every");
  t.class_order = j.at("class_order").get<std::string>();
  t.reg_pixels = parse_pixel_reduction(j.at("reg_pixel_reduction").get<std::string>());
  const auto& g = cfg.at("guidance");
  t.guidance.mode = parse_guidance_mode(g.at("mode").get<std::string>());
  t.guidance.oversample_annotated_freq = g.at("oversample_annotated_freq");
  t.loss_weights = loss_weights_from_config(cfg);
  t.seed = cfg.at("seed").get<std::uint64_t>();
  t.validate();
  return t;
}

/// Class-level masks for mixed guidance: an avoidance mask when configured,
/// otherwise pseudo masks built from a seeded share of the annotated records.
inline ClassMasks pseudo_masks_from_config(const json& cfg, const Dataset& train) {
  const auto& g = cfg.at("guidance");
  ClassMasks masks;
  if (g.at("mode") != "mixed") return masks;
  const int S = train.image_size();
  if (!g.at("avoidance").is_null()) {
    const auto& a = g["avoidance"];
    for (auto it = a.begin(); it != a.end(); ++it)
      if (it.key() != "class" && it.key() != "exclude" && it.key() != "center")
        throw usage_error("UnknownConfigKey", "unknown config key 'guidance.avoidance." + it.key() + "'");
    int c = a.value("class", 0);
    auto m = build_avoidance(box_from_json(a.at("exclude"), "avoidance.exclude"),
                             box_from_json(a.at("center"), "avoidance.center"), S, S);
    m.class_index = c;
    masks[c] = m;
    return masks;
  }
  const auto kind = g.at("pseudo_mask").get<std::string>();
  if (kind == "none") return masks;
  const double frac = g.at("pseudo_source_fraction");
  const auto seed = derive_seed(cfg.at("seed").get<std::uint64_t>(), {0x95e});
  for (int c = 0; c < train.num_classes(); ++c) {
    std::vector<int64_t> annotated;
    for (int64_t i = 0; i < train.size(); ++i)
      if (train.records()[i].has_annotation(c)) annotated.push_back(i);
    if (annotated.empty()) continue;
    auto source = split_annotated(annotated, frac, derive_seed(seed, {static_cast<std::uint64_t>(c)})).first;
    if (source.empty()) continue;
    std::vector<ImageRecord> recs;
    for (auto i : source) recs.push_back(train.records()[i]);
    if (kind == "binary") masks[c] = build_pseudo_binary(recs, c, S, S);
    else if (kind == "weighted") masks[c] = build_pseudo_weighted(recs, c, S, S);
    else if (kind == "bbox") masks[c] = build_pseudo_bbox(recs, c, S, S);
    else throw usage_error("InvalidConfig", "guidance.pseudo_mask must be binary, weighted, bbox or none");
  }
  return masks;
}

inline ReportOptions report_options_from(const json& cfg) {
  const auto& e = cfg.at("eval");
  ReportOptions o;
  o.metrics.clear();
  for (const auto& m : e.at("metrics").get<std::vector<std::string>>()) {
    if (m == "all") {
      o.metrics = ReportOptions{}.metrics;
      break;
    }
    if (m != "auc" && m != "class_sensitivity" && m != "disease_sensitivity" && m != "confounder_sensitivity")
      throw usage_error("InvalidConfig", "unknown metric '" + m + "'");
    o.metrics.insert(m);
  }
  o.magnitude = parse_magnitude(e.at("magnitude").get<std::string>());
  o.explanation = parse_explanation_kind(e.at("explanation").get<std::string>());
  o.bootstrap_resamples = e.at("bootstrap_resamples");
  o.max_grids = e.at("max_grids");
  o.seed = cfg.at("seed").get<std::uint64_t>();
  auto log = e.at("injection_log").get<std::string>();
  if (!log.empty()) o.tags = read_injection_log(log);
  return o;
}

}  // namespace attrinet
