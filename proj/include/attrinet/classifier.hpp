#pragma once

// Per-class logistic regression over average-pooled attribution maps, and
// Youden-index threshold calibration.

#include <torch/torch.h>

#include <algorithm>
#include <iostream>
#include <string>
#include <vector>

#include "attrinet/error.hpp"

namespace attrinet {

/// Average pooling by factor gamma: (B,1,H,W) -> (B,1,H/gamma,W/gamma).
inline torch::Tensor pool_attribution(const torch::Tensor& m, int gamma) {
  if (m.dim() != 4 || m.size(2) % gamma != 0 || m.size(3) % gamma != 0)
    throw data_error("ShapeMismatch", "attribution map spatial size must be divisible by " + std::to_string(gamma));
  if (gamma == 1) return m;
  return torch::avg_pool2d(m, {gamma, gamma}, {gamma, gamma});
}

/// Logistic regression without bias on a (H/gamma, W/gamma) weight grid.
struct LogRegHeadImpl : torch::nn::Module {
  torch::Tensor weight;
  int gamma;

  LogRegHeadImpl(int grid_h, int grid_w, int gamma_) : gamma(gamma_) {
    weight = register_parameter("weight", torch::zeros({grid_h, grid_w}));
  }

  /// Pre-sigmoid score per item, (B,).
  torch::Tensor logit(const torch::Tensor& m) {
    auto pooled = pool_attribution(m, gamma);
    if (pooled.size(2) != weight.size(0) || pooled.size(3) != weight.size(1))
      throw data_error("ShapeMismatch", "pooled map does not match the weight grid");
    return (pooled.squeeze(1) * weight).sum({1, 2});
  }

  torch::Tensor forward(const torch::Tensor& m) { return torch::sigmoid(logit(m)); }
};
TORCH_MODULE(LogRegHead);

struct Prediction {
  torch::Tensor logit;        // (B,)
  torch::Tensor probability;  // (B,)
};

inline Prediction predict(const torch::Tensor& attribution, LogRegHead& head) {
  auto z = head->logit(attribution);
  return {z, torch::sigmoid(z)};
}

struct ThresholdTable {
  std::vector<double> tau;
};

/// Youden index of rule "positive iff score >= threshold".
inline double youden_index(const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
  int tp = 0, fn = 0, tn = 0, fp = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    bool pred = scores[i] >= threshold;
    if (labels[i]) {
      (pred ? tp : fn)++;
    } else {
      (pred ? fp : tn)++;
    }
  }
  double sens = tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0;
  double spec = tn + fp ? static_cast<double>(tn) / (tn + fp) : 0.0;
  return sens + spec - 1.0;
}

/// Midpoints between consecutive distinct scores.
inline std::vector<double> candidate_thresholds(std::vector<double> scores) {
  std::sort(scores.begin(), scores.end());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  std::vector<double> out;
  for (size_t i = 0; i + 1 < scores.size(); ++i) out.push_back(0.5 * (scores[i] + scores[i + 1]));
  return out;
}

/// Threshold for one class maximising the Youden index over the candidates
/// (lowest candidate wins ties). Returns 0.5 with a warning when all scores coincide.
inline double calibrate_threshold(const std::vector<double>& scores, const std::vector<int>& labels, int class_index = 0) {
  if (scores.size() != labels.size()) throw data_error("ShapeMismatch", "scores and labels differ in length");
  bool has_pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
  bool has_neg = std::find(labels.begin(), labels.end(), 0) != labels.end();
  if (!has_pos || !has_neg)
    throw data_error("DegenerateClass", "class " + std::to_string(class_index) + " has only one label value");
  auto cands = candidate_thresholds(scores);
  if (cands.empty()) {
    std::cerr << "warning: class " << class_index << ": all scores identical, threshold set to 0.5\n";
    return 0.5;
  }
  double best = cands.front();
  double best_j = youden_index(scores, labels, best);
  for (double t : cands) {
    double j = youden_index(scores, labels, t);
    if (j > best_j) {
      best_j = j;
      best = t;
    }
  }
  return best;
}

/// scores[c][i], labels[c][i] -> one threshold per class.
inline ThresholdTable calibrate_thresholds(const std::vector<std::vector<double>>& scores,
                                           const std::vector<std::vector<int>>& labels) {
  if (scores.size() != labels.size()) throw data_error("ShapeMismatch", "class count differs");
  ThresholdTable t;
  for (size_t c = 0; c < scores.size(); ++c)
    t.tau.push_back(calibrate_threshold(scores[c], labels[c], static_cast<int>(c)));
  return t;
}

}  // namespace attrinet
