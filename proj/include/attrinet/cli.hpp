#pragma once

// Subcommand CLI: make-synthetic, contaminate, train, eval, explain.
// Exit codes: 0 ok, 2 usage, 3 data, 4 numerical.

#include <torch/torch.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "attrinet/config.hpp"
#include "attrinet/dataset.hpp"
#include "attrinet/error.hpp"
#include "attrinet/explain.hpp"
#include "attrinet/model.hpp"
#include "attrinet/report.hpp"
#include "attrinet/trainer.hpp"

namespace attrinet::cli {

namespace fs = std::filesystem;

/// Applies ATTRINET_THREADS: unset leaves torch defaults, 0 means serial.
inline void apply_thread_env() {
  const char* v = std::getenv("ATTRINET_THREADS");
  if (!v || !*v) return;
  int n = 0;
  try {
    n = std::stoi(v);
  } catch (const std::exception&) {
    throw usage_error("InvalidConfig", "ATTRINET_THREADS must be an integer");
  }
  if (n < 0) throw usage_error("InvalidConfig", "ATTRINET_THREADS must be >= 0");
  torch::set_num_threads(n == 0 ? 1 : n);
}

/// A dataset argument may name the manifest or the directory holding manifest.csv.
inline fs::path manifest_path(const std::string& arg) {
  fs::path p(arg);
  if (fs::is_directory(p)) p /= "manifest.csv";
  if (!fs::exists(p)) throw data_error("MissingFile", "no manifest at " + p.string());
  return p;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (auto& part : detail::split(s, ','))
    if (auto t = detail::trim(part); !t.empty()) out.push_back(t);
  return out;
}

struct Args {
  // make-synthetic
  int n = 400, classes = 3, size = 64;
  double prevalence = 0.5, cooccurrence = 0.0, noise = 0.04;
  // contaminate
  int target_class = 0, tag_x = 5, tag_y = 2;
  double fraction = 0.5, pixel_value = 1.0;
  std::string text = "CXR-ROOM1";
  // shared
  std::uint64_t seed = 0;
  std::string out, dataset, config, checkpoint;
  // train
  std::string validation, guidance, ablation, resume;
  int steps = 0, image_size = 0;
  std::vector<std::string> sets;
  // eval
  std::string metrics, injection_log, magnitude, explanation;
  // explain
  std::vector<std::string> images;
  std::string explain_class;
  bool global = false, flip_sign = false;
};

/// Default config, then the --config file, then flags.
inline json effective_config(const Args& a, const CLI::App& sub) {
  json cfg = default_run_config();
  if (!a.config.empty()) merge_config(cfg, load_config_file(a.config));
  auto given = [&](const char* flag) {
    const auto* opt = sub.get_option_no_throw(flag);
    return opt && opt->count() > 0;
  };
  if (given("--seed")) cfg["seed"] = a.seed;
  if (given("--dataset")) cfg["dataset"] = a.dataset;
  if (given("--validation")) cfg["validation"] = a.validation;
  if (given("--out")) cfg["out"] = a.out;
  if (given("--image-size")) cfg["image_size"] = a.image_size;
  if (given("--guidance")) cfg["guidance"]["mode"] = a.guidance;
  if (given("--steps")) cfg["train"]["generator_steps"] = a.steps;
  if (given("--ablation")) cfg["ablation"] = split_list(a.ablation);
  if (given("--metrics")) cfg["eval"]["metrics"] = split_list(a.metrics);
  if (given("--injection-log")) cfg["eval"]["injection_log"] = a.injection_log;
  if (given("--magnitude")) cfg["eval"]["magnitude"] = a.magnitude;
  if (given("--explanation")) cfg["eval"]["explanation"] = a.explanation;
  for (const auto& s : a.sets) {
    auto eq = s.find('=');
    if (eq == std::string::npos) throw usage_error("InvalidConfig", "--set expects key=value, got '" + s + "'");
    json value;
    try {
      value = json::parse(s.substr(eq + 1));
    } catch (const json::parse_error&) {
      value = s.substr(eq + 1);
    }
    set_config_value(cfg, s.substr(0, eq), value);
  }
  if (cfg["out"].get<std::string>().empty()) throw usage_error("MissingFlag", "--out is required");
  return cfg;
}

inline std::vector<std::string> classes_of(const json& cfg) { return cfg.at("classes").get<std::vector<std::string>>(); }

inline int cmd_make_synthetic(const Args& a) {
  SyntheticOptions opt{a.prevalence, a.cooccurrence, a.noise};
  auto recs = make_synthetic(a.out, a.n, a.classes, a.size, a.seed, opt);
  echo_config({{"command", "make-synthetic"},
               {"n", a.n},
               {"classes", a.classes},
               {"size", a.size},
               {"seed", a.seed},
               {"prevalence", a.prevalence},
               {"cooccurrence", a.cooccurrence},
               {"noise", a.noise}},
              a.out, "effective_config.json");
  std::cout << "wrote " << recs.size() << " images to " << a.out << "\n";
  return 0;
}

inline int cmd_contaminate(const Args& a) {
  ContaminationSpec spec;
  spec.target_class = a.target_class;
  spec.fraction = a.fraction;
  spec.tag_text = a.text;
  spec.tag_region = ContaminationSpec::region_for(a.text, a.tag_x, a.tag_y);
  spec.pixel_value = a.pixel_value;
  auto log = contaminate(manifest_path(a.dataset), a.out, spec, a.seed);
  echo_config({{"command", "contaminate"},
               {"dataset", a.dataset},
               {"class", a.target_class},
               {"fraction", a.fraction},
               {"text", a.text},
               {"x", a.tag_x},
               {"y", a.tag_y},
               {"pixel_value", a.pixel_value},
               {"seed", a.seed}},
              a.out, "effective_config.json");
  std::cout << "tagged " << log.size() << " images\n";
  return 0;
}

inline int cmd_train(const Args& a, const CLI::App& sub) {
  auto cfg = effective_config(a, sub);
  if (cfg["dataset"].get<std::string>().empty()) throw usage_error("MissingFlag", "--dataset is required");
  const fs::path out = cfg["out"].get<std::string>();
  echo_config(cfg, out, "effective_config.json");
  const int size = cfg["image_size"];
  auto train = Dataset::load(manifest_path(cfg["dataset"]), size, classes_of(cfg));
  std::optional<Dataset> val;
  if (!cfg["validation"].get<std::string>().empty())
    val = Dataset::load(manifest_path(cfg["validation"]), size, train.class_names());
  auto tc = train_config_from(cfg);
  auto arch = arch_from_config(cfg, train.num_classes());
  auto masks = pseudo_masks_from_config(cfg, train);
  Trainer trainer(train, tc, arch, out, val ? &*val : nullptr, masks);
  if (!a.resume.empty()) trainer.resume(a.resume);
  auto best = trainer.run();
  std::cout << "best checkpoint: " << best.path.string() << " (step " << best.step << ")\n";
  return 0;
}

inline int cmd_eval(const Args& a, const CLI::App& sub) {
  if (a.checkpoint.empty()) throw usage_error("MissingFlag", "--checkpoint is required");
  auto cfg = effective_config(a, sub);
  const fs::path out = cfg["out"].get<std::string>();
  echo_config(cfg, out, "effective_config.json");
  auto model = AttriNet::load(a.checkpoint);
  auto ds = Dataset::load(manifest_path(cfg["dataset"]), model.arch.image_size, classes_of(cfg));
  auto opt = report_options_from(cfg);
  // A contaminated dataset carries its own injection log.
  auto beside = ds.root() / "injection_log.jsonl";
  if (cfg["eval"]["injection_log"].get<std::string>().empty() && fs::exists(beside)) opt.tags = read_injection_log(beside);
  auto rep = evaluate(model, ds, opt);
  write_report(rep, out);
  std::cout << "wrote " << rep.tables.size() << " metric tables to " << out.string() << "\n";
  return 0;
}

inline int cmd_explain(const Args& a, const CLI::App& sub) {
  if (a.checkpoint.empty()) throw usage_error("MissingFlag", "--checkpoint is required");
  auto cfg = effective_config(a, sub);
  const fs::path out = cfg["out"].get<std::string>();
  echo_config(cfg, out, "effective_config.json");
  auto ar = load_archive(a.checkpoint);
  auto model = AttriNet::from_archive(ar);
  std::vector<std::string> names;
  if (ar.meta.contains("class_names")) names = ar.meta["class_names"].get<std::vector<std::string>>();
  if (!a.images.empty()) {
    if (cfg["dataset"].get<std::string>().empty()) throw usage_error("MissingFlag", "--image needs --dataset");
    auto ds = Dataset::load(manifest_path(cfg["dataset"]), model.arch.image_size, classes_of(cfg));
    names = ds.class_names();
    std::vector<int> classes;
    for (int c = 0; c < ds.num_classes(); ++c)
      if (a.explain_class.empty() || a.explain_class == names[c] || a.explain_class == std::to_string(c))
        classes.push_back(c);
    if (classes.empty()) throw usage_error("UnknownClass", "no class named '" + a.explain_class + "'");
    for (const auto& id : a.images) {
      int64_t idx = -1;
      for (int64_t i = 0; i < ds.size(); ++i)
        if (ds.records()[i].id == id) idx = i;
      if (idx < 0) throw data_error("UnknownImage", "no image with id '" + id + "'");
      auto img = ds.images()[idx];
      for (int c : classes) export_local(local_explain(model, img, c), img, id, names[c], out, a.flip_sign);
    }
  }
  if (a.global) {
    if (names.empty())
      for (int c = 0; c < model.num_classes(); ++c) names.push_back("class" + std::to_string(c));
    export_global(global_explain(model), names, out, a.flip_sign);
  }
  if (a.images.empty() && !a.global) throw usage_error("MissingFlag", "explain needs --image and/or --global");
  return 0;
}

/// Parses argv and runs the chosen subcommand; returns the process exit code.
inline int run(int argc, char** argv) {
  CLI::App app{"Interpretable multi-label classifier: data, training, evaluation and explanations"};
  app.require_subcommand(1);
  Args a;

  auto* synth = app.add_subcommand("make-synthetic", "Generate a synthetic labelled dataset");
  synth->add_option("--n", a.n, "number of images");
  synth->add_option("--classes", a.classes, "number of classes (2..6)");
  synth->add_option("--size", a.size, "image side in pixels");
  synth->add_option("--seed", a.seed);
  synth->add_option("--prevalence", a.prevalence);
  synth->add_option("--cooccurrence", a.cooccurrence);
  synth->add_option("--noise", a.noise);
  synth->add_option("--out", a.out, "output directory")->required();

  auto* cont = app.add_subcommand("contaminate", "Copy a dataset, stamping a text tag on class positives");
  cont->add_option("--dataset", a.dataset, "source manifest or directory")->required();
  cont->add_option("--class", a.target_class);
  cont->add_option("--fraction", a.fraction, "share of positives to tag");
  cont->add_option("--text", a.text);
  cont->add_option("--x", a.tag_x);
  cont->add_option("--y", a.tag_y);
  cont->add_option("--pixel-value", a.pixel_value);
  cont->add_option("--seed", a.seed);
  cont->add_option("--out", a.out, "output directory")->required();

  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", a.config, "JSON run config");
    s->add_option("--dataset", a.dataset);
    s->add_option("--out", a.out);
    s->add_option("--seed", a.seed);
    s->add_option("--image-size", a.image_size);
    s->add_option("--set", a.sets, "override a config key, e.g. train.batch_size=8");
  };
  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train);
  train->add_option("--validation", a.validation);
  train->add_option("--guidance", a.guidance, "none | full | mixed");
  train->add_option("--steps", a.steps, "generator steps");
  train->add_option("--ablation", a.ablation, "comma-separated loss terms to zero (adv,cls,reg,ctr,gd)");
  train->add_option("--resume", a.resume, "checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "Compute metric tables");
  add_common(eval);
  eval->add_option("--checkpoint", a.checkpoint);
  eval->add_option("--metrics", a.metrics, "all or a comma-separated subset");
  eval->add_option("--injection-log", a.injection_log);
  eval->add_option("--magnitude", a.magnitude, "abs | positive_part");
  eval->add_option("--explanation", a.explanation, "weighted | attribution");

  auto* expl = app.add_subcommand("explain", "Export local and global explanations");
  add_common(expl);
  expl->add_option("--checkpoint", a.checkpoint);
  expl->add_option("--image", a.images, "image id (repeatable)");
  expl->add_option("--class", a.explain_class, "class name or index (default: all)");
  expl->add_flag("--global", a.global);
  expl->add_flag("--flip-sign", a.flip_sign, "negate maps in rendered panels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    apply_thread_env();
    if (*synth) return cmd_make_synthetic(a);
    if (*cont) return cmd_contaminate(a);
    if (*train) return cmd_train(a, *train);
    if (*eval) return cmd_eval(a, *eval);
    if (*expl) return cmd_explain(a, *expl);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const c10::Error& e) {
    std::cerr << "error: " << e.what_without_backtrace() << "\n";
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: InvalidConfig: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace attrinet::cli
