#pragma once

// Evaluation report: per-class AUC, class / disease / confounder sensitivity
// with percentile-bootstrap 95% intervals, written as CSV and JSON.

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "attrinet/dataset.hpp"
#include "attrinet/explain.hpp"
#include "attrinet/metrics.hpp"
#include "attrinet/model.hpp"

namespace attrinet {

enum class ExplanationKind { weighted, attribution };

inline ExplanationKind parse_explanation_kind(const std::string& s) {
  if (s == "weighted") return ExplanationKind::weighted;
  if (s == "attribution") return ExplanationKind::attribution;
  throw usage_error("InvalidConfig", "explanation must be weighted or attribution");
}

struct ReportOptions {
  std::set<std::string> metrics{"auc", "class_sensitivity", "disease_sensitivity", "confounder_sensitivity"};
  Magnitude magnitude = Magnitude::abs;
  ExplanationKind explanation = ExplanationKind::weighted;
  int max_grids = 200;
  int bootstrap_resamples = 1000;
  std::uint64_t seed = 0;
  std::vector<InjectionEntry> tags;  // from the contamination log; confounder metric skipped when empty
};

struct MetricRow {
  std::string label;
  double value = std::numeric_limits<double>::quiet_NaN();
  double ci_low = std::numeric_limits<double>::quiet_NaN();
  double ci_high = std::numeric_limits<double>::quiet_NaN();
  int n = 0;
  bool degenerate = false;
};

struct SampleScore {
  int64_t index = 0;
  double value = 0.0;
};

struct Report {
  std::map<std::string, std::vector<MetricRow>> tables;
  std::vector<std::vector<SampleScore>> disease_per_sample;  // per class
  std::vector<std::vector<int64_t>> disease_excluded;        // per class, ZeroAttribution samples
  std::vector<std::vector<SampleScore>> confounder_per_sample;
  std::vector<double> global_confounder;  // per class, v_pos of tagged classes (NaN otherwise)
};

/// Explanations from precomputed attribution maps (N,1,H,W) -> (N,H,W).
inline torch::Tensor explanations_from(const AttriNet& model, const torch::Tensor& maps, int c, ExplanationKind kind) {
  auto m = maps.squeeze(1);
  if (kind == ExplanationKind::attribution) return m;
  return m * upsample_weights(model.heads[c]->weight.detach(), model.arch.pool_factor);
}

/// Explanations of class c for every image, (N,H,W).
inline torch::Tensor explanations_for(AttriNet& model, const torch::Tensor& images, int c, ExplanationKind kind) {
  return explanations_from(model, model.attributions(images, c), c, kind);
}

namespace detail {

inline MetricRow summarize(const std::string& label, const std::vector<double>& values, std::uint64_t seed,
                           int resamples) {
  MetricRow row{label};
  row.n = static_cast<int>(values.size());
  if (values.empty()) return row;
  row.value = mean_of(values);
  auto ci = bootstrap_ci(values, mean_of, seed, resamples);
  row.ci_low = ci.low;
  row.ci_high = ci.high;
  row.degenerate = ci.degenerate;
  return row;
}

/// Bootstrap over samples for AUC; resamples missing a label value are redrawn.
inline MetricRow auc_row(const std::string& label, const std::vector<double>& scores, const std::vector<int>& labels,
                         std::uint64_t seed, int resamples) {
  MetricRow row{label};
  row.n = static_cast<int>(scores.size());
  try {
    row.value = auc(scores, labels);
  } catch (const Error&) {
    return row;
  }
  if (scores.size() < 2) {
    row.ci_low = row.ci_high = row.value;
    row.degenerate = true;
    return row;
  }
  Rng rng(seed);
  std::vector<double> stats, s(scores.size());
  std::vector<int> l(scores.size());
  int attempts = 0;
  while (static_cast<int>(stats.size()) < resamples && attempts < 20 * resamples) {
    ++attempts;
    int pos = 0;
    for (size_t i = 0; i < s.size(); ++i) {
      auto j = uniform_index(rng, scores.size());
      s[i] = scores[j];
      l[i] = labels[j];
      pos += l[i];
    }
    if (pos == 0 || pos == static_cast<int>(l.size())) continue;
    stats.push_back(auc(s, l));
  }
  std::sort(stats.begin(), stats.end());
  row.ci_low = percentile_sorted(stats, 0.025);
  row.ci_high = percentile_sorted(stats, 0.975);
  return row;
}

inline MetricRow mean_row(const std::vector<MetricRow>& rows) {
  MetricRow m{"mean"};
  std::vector<double> v;
  for (const auto& r : rows)
    if (!std::isnan(r.value)) v.push_back(r.value);
  m.n = static_cast<int>(v.size());
  if (!v.empty()) m.value = mean_of(v);
  return m;
}

}  // namespace detail

/// Evaluates `model` on `ds`. Thresholds come from the model (0.5 when uncalibrated).
inline Report evaluate(AttriNet& model, const Dataset& ds, const ReportOptions& opt) {
  model.train_mode(false);
  const int C = model.num_classes();
  if (ds.num_classes() != C) throw data_error("ShapeMismatch", "dataset and model class counts differ");
  Report rep;
  rep.disease_per_sample.resize(C);
  rep.disease_excluded.resize(C);
  rep.confounder_per_sample.resize(C);
  rep.global_confounder.assign(C, std::numeric_limits<double>::quiet_NaN());
  const auto& recs = ds.records();
  auto want = [&](const char* m) { return opt.metrics.count(m) > 0; };

  std::vector<MetricRow> auc_rows, cs_rows, ds_rows, cf_rows;
  for (int c = 0; c < C; ++c) {
    const auto& name = ds.class_names()[c];
    const auto seed = derive_seed(opt.seed, {static_cast<std::uint64_t>(c)});
    auto m = model.attributions(ds.images(), c);
    auto expl = explanations_from(model, m, c, opt.explanation);
    auto probs = torch::sigmoid(model.logits(m, c)).to(torch::kFloat64).contiguous();
    std::vector<double> p(probs.data_ptr<double>(), probs.data_ptr<double>() + probs.numel());
    std::vector<int> labels;
    for (const auto& r : recs) labels.push_back(r.labels[c]);

    if (want("auc")) auc_rows.push_back(detail::auc_row(name, p, labels, derive_seed(seed, {1}), opt.bootstrap_resamples));

    if (want("class_sensitivity")) {
      double tau = model.thresholds.empty() ? 0.5 : model.thresholds[c];
      std::vector<torch::Tensor> maps;
      for (int64_t i = 0; i < ds.size(); ++i) maps.push_back(expl[i]);
      try {
        auto cs = class_sensitivity(maps, p, labels, tau, opt.max_grids, opt.magnitude);
        cs_rows.push_back(detail::summarize(name, cs.grid_scores, derive_seed(seed, {2}), opt.bootstrap_resamples));
      } catch (const Error&) {
        cs_rows.push_back(MetricRow{name});
      }
    }

    if (want("disease_sensitivity")) {
      std::vector<double> v;
      for (int64_t i = 0; i < ds.size(); ++i) {
        if (!labels[i]) continue;
        auto g = ds.gt_mask(i, c);
        if (!g) continue;
        try {
          double d = disease_sensitivity(expl[i], *g, opt.magnitude);
          v.push_back(d);
          rep.disease_per_sample[c].push_back({i, d});
        } catch (const Error&) {
          rep.disease_excluded[c].push_back(i);
        }
      }
      ds_rows.push_back(detail::summarize(name, v, derive_seed(seed, {3}), opt.bootstrap_resamples));
    }

    if (want("confounder_sensitivity") && !opt.tags.empty()) {
      std::map<std::string, int64_t> by_id;
      for (int64_t i = 0; i < ds.size(); ++i) by_id[recs[i].id] = i;
      std::vector<double> v;
      std::vector<Box> all_boxes;
      for (const auto& t : opt.tags) {
        if (t.class_index != c) continue;
        all_boxes.push_back(t.box);
        auto it = by_id.find(t.id);
        if (it == by_id.end()) continue;
        double s = confounder_sensitivity(expl[it->second], {t.box});
        v.push_back(s);
        rep.confounder_per_sample[c].push_back({it->second, s});
      }
      if (!all_boxes.empty()) {
        rep.global_confounder[c] = confounder_sensitivity(model.centers[c].v_pos, all_boxes);
        cf_rows.push_back(detail::summarize(name, v, derive_seed(seed, {4}), opt.bootstrap_resamples));
        MetricRow g{"global_" + name, rep.global_confounder[c], rep.global_confounder[c], rep.global_confounder[c], 1,
                    true};
        cf_rows.push_back(g);
      }
    }
  }
  auto finish = [&](const char* key, std::vector<MetricRow>& rows) {
    if (!want(key)) return;
    std::vector<MetricRow> per_class;
    for (const auto& r : rows)
      if (r.label.rfind("global_", 0) != 0) per_class.push_back(r);
    rows.push_back(detail::mean_row(per_class));
    rep.tables[key] = rows;
  };
  finish("auc", auc_rows);
  finish("class_sensitivity", cs_rows);
  finish("disease_sensitivity", ds_rows);
  if (!opt.tags.empty()) finish("confounder_sensitivity", cf_rows);
  return rep;
}

namespace detail {
inline std::string fmt(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}
}  // namespace detail

/// <out>/<metric>.csv with rows class,value,ci_low,ci_high,n and <out>/report.json.
inline void write_report(const Report& rep, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, rows] : rep.tables) {
    std::ofstream out(out_dir / (name + ".csv"));
    out << "class,value,ci_low,ci_high,n\n";
    auto arr = nlohmann::json::array();
    for (const auto& r : rows) {
      out << r.label << "," << detail::fmt(r.value) << "," << detail::fmt(r.ci_low) << "," << detail::fmt(r.ci_high)
          << "," << r.n << "\n";
      auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
      arr.push_back({{"class", r.label},
                     {"value", num(r.value)},
                     {"ci_low", num(r.ci_low)},
                     {"ci_high", num(r.ci_high)},
                     {"n", r.n},
                     {"degenerate_ci", r.degenerate}});
    }
    j[name] = arr;
  }
  std::ofstream(out_dir / "report.json") << j.dump(2) << "\n";
}

}  // namespace attrinet
