#pragma once

// Evaluation metrics: ROC AUC, class sensitivity (2x2 grid energy share),
// disease sensitivity (energy pointing game), confounder sensitivity, plus
// bootstrap confidence intervals and a paired t-test.

#include <torch/torch.h>

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "attrinet/dataset.hpp"
#include "attrinet/error.hpp"
#include "attrinet/random.hpp"

namespace attrinet {

/// How attribution values turn into energy.
enum class Magnitude { abs, positive_part };

inline Magnitude parse_magnitude(const std::string& s) {
  if (s == "abs") return Magnitude::abs;
  if (s == "positive" || s == "positive_part") return Magnitude::positive_part;
  throw usage_error("InvalidConfig", "magnitude must be abs or positive_part");
}

inline torch::Tensor energy_map(const torch::Tensor& attr, Magnitude mode) {
  return mode == Magnitude::abs ? attr.abs() : attr.clamp_min(0.0);
}

inline double energy(const torch::Tensor& attr, Magnitude mode = Magnitude::abs) {
  return energy_map(attr.to(torch::kFloat64), mode).sum().item<double>();
}

/// Probability that a random positive outscores a random negative, ties counting 1/2.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw data_error("ShapeMismatch", "scores and labels differ in length");
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  // Midranks over tied groups, then Mann-Whitney U from the positive rank sum.
  double rank_sum = 0.0;
  double n_pos = 0, n_neg = 0;
  for (size_t i = 0; i < n;) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum += mid;
    i = j + 1;
  }
  for (int l : labels) (l ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0) throw data_error("DegenerateClass", "AUC needs both positive and negative samples");
  return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

struct ClassSensitivity {
  double mean = 0.0;
  std::vector<double> grid_scores;
};

/// Builds up to `max_grids` 2x2 grids, each holding one correctly predicted
/// positive (most confident first) and three negatives (lowest probability
/// first, reused cyclically when scarce). A grid scores the positive's share of
/// the grid's total energy; an all-zero grid scores 1/4.
inline ClassSensitivity class_sensitivity(const std::vector<torch::Tensor>& explanations,
                                          const std::vector<double>& probabilities, const std::vector<int>& labels,
                                          double threshold, int max_grids = 200, Magnitude mode = Magnitude::abs) {
  const size_t n = explanations.size();
  if (probabilities.size() != n || labels.size() != n)
    throw data_error("ShapeMismatch", "explanations, probabilities and labels differ in length");
  std::vector<size_t> pos, neg;
  for (size_t i = 0; i < n; ++i) {
    if (labels[i] && probabilities[i] >= threshold) pos.push_back(i);
    if (!labels[i]) neg.push_back(i);
  }
  if (pos.empty()) throw data_error("NoCorrectPositives", "no correctly predicted positive samples");
  if (neg.size() < 3) throw data_error("InsufficientNegatives", "class sensitivity needs at least 3 negatives");
  std::stable_sort(pos.begin(), pos.end(), [&](size_t a, size_t b) { return probabilities[a] > probabilities[b]; });
  std::stable_sort(neg.begin(), neg.end(), [&](size_t a, size_t b) { return probabilities[a] < probabilities[b]; });

  std::vector<double> e(n);
  for (size_t i = 0; i < n; ++i) e[i] = energy(explanations[i], mode);

  ClassSensitivity out;
  size_t grids = std::min(pos.size(), static_cast<size_t>(max_grids));
  for (size_t g = 0; g < grids; ++g) {
    double p = e[pos[g]];
    double total = p;
    for (size_t k = 0; k < 3; ++k) total += e[neg[(3 * g + k) % neg.size()]];
    out.grid_scores.push_back(total > 0.0 ? p / total : 0.25);
  }
  out.mean = std::accumulate(out.grid_scores.begin(), out.grid_scores.end(), 0.0) / static_cast<double>(grids);
  return out;
}

/// Share of attribution energy inside the annotated region (mask values > 0).
inline double disease_sensitivity(const torch::Tensor& explanation, const torch::Tensor& annotation,
                                   Magnitude mode = Magnitude::abs) {
  if (explanation.sizes() != annotation.sizes())
    throw data_error("ShapeMismatch", "explanation and annotation differ in shape");
  auto region = (annotation > 0).to(torch::kFloat64);
  if (region.sum().item<double>() == 0.0) throw data_error("EmptyAnnotation", "annotation region is empty");
  auto en = energy_map(explanation.to(torch::kFloat64), mode);
  double total = en.sum().item<double>();
  if (total <= 0.0) throw data_error("ZeroAttribution", "explanation has no energy");
  return (en * region).sum().item<double>() / total;
}

/// Fraction of tag-region pixels that fall among the top 10% of pixels by
/// attribution magnitude. Ties at the cut-off go to the lower pixel index.
inline double confounder_sensitivity(const torch::Tensor& attribution, const std::vector<Box>& tag_boxes,
                                     double top_fraction = 0.1) {
  if (attribution.dim() != 2) throw data_error("ShapeMismatch", "attribution must be (H,W)");
  const auto H = attribution.size(0), W = attribution.size(1);
  auto region = rasterize_boxes(tag_boxes, -1, static_cast<int>(H), static_cast<int>(W)).flatten();
  auto region_px = region.sum().item<double>();
  if (region_px == 0.0) throw data_error("EmptyTagRegion", "tag region is empty");

  auto mag = attribution.to(torch::kFloat64).abs().flatten().contiguous();
  const auto N = mag.numel();
  std::vector<double> v(mag.data_ptr<double>(), mag.data_ptr<double>() + N);
  std::vector<int64_t> order(static_cast<size_t>(N));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return v[a] > v[b]; });
  auto k = static_cast<int64_t>(std::ceil(top_fraction * static_cast<double>(N) - 1e-9));
  auto reg = region.contiguous();
  const float* r = reg.data_ptr<float>();
  double covered = 0.0;
  for (int64_t i = 0; i < k; ++i) covered += r[order[i]];
  return covered / region_px;
}

// ---------------------------------------------------------------------------
// Statistics helpers
// ---------------------------------------------------------------------------

/// Linear-interpolation percentile of sorted data, q in [0,1].
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw data_error("EmptyBatch", "percentile of empty data");
  double pos = q * static_cast<double>(sorted.size() - 1);
  auto lo = static_cast<size_t>(std::floor(pos));
  auto hi = std::min(lo + 1, sorted.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

struct ConfidenceInterval {
  double low = 0.0;
  double high = 0.0;
  bool degenerate = false;  // fewer than two observations
};

/// Percentile bootstrap CI of `statistic` over resamples (with replacement) of `values`.
inline ConfidenceInterval bootstrap_ci(const std::vector<double>& values,
                                       const std::function<double(const std::vector<double>&)>& statistic,
                                       std::uint64_t seed, int resamples = 1000, double level = 0.95) {
  ConfidenceInterval ci;
  if (values.size() < 2) {
    double v = values.empty() ? 0.0 : statistic(values);
    return {v, v, true};
  }
  Rng rng(seed);
  std::vector<double> stats;
  stats.reserve(static_cast<size_t>(resamples));
  std::vector<double> sample(values.size());
  for (int b = 0; b < resamples; ++b) {
    for (auto& s : sample) s = values[uniform_index(rng, values.size())];
    stats.push_back(statistic(sample));
  }
  std::sort(stats.begin(), stats.end());
  double alpha = (1.0 - level) / 2.0;
  ci.low = percentile_sorted(stats, alpha);
  ci.high = percentile_sorted(stats, 1.0 - alpha);
  return ci;
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  int df = 0;
  double mean_diff = 0.0;
};

/// Two-sided paired t-test of a - b.
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw data_error("InvalidArgument", "paired t-test needs >= 2 pairs");
  const double n = static_cast<double>(a.size());
  std::vector<double> d(a.size());
  for (size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  double m = mean_of(d);
  double ss = 0.0;
  for (double x : d) ss += (x - m) * (x - m);
  double sd = std::sqrt(ss / (n - 1));
  TTestResult r;
  r.df = static_cast<int>(a.size()) - 1;
  r.mean_diff = m;
  if (sd == 0.0) {
    r.t = m == 0.0 ? 0.0 : std::copysign(INFINITY, m);
    r.p = m == 0.0 ? 1.0 : 0.0;
    return r;
  }
  r.t = m / (sd / std::sqrt(n));
  boost::math::students_t dist(r.df);
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t)));
  return r;
}

}  // namespace attrinet
