#pragma once

// Training objectives for generator, critic, classifier heads and class centers.
//
// Reduction conventions:
//  - L1 / squared-L2 norms of a map are sums over its pixels, then averaged over the batch.
//  - guidance loss of an all-zero map is 0 (there is no misplaced attribution).

#include <torch/torch.h>

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "attrinet/error.hpp"

namespace attrinet {

struct LossWeights {
  double adv = 1.0;
  double cls = 100.0;
  double reg = 100.0;
  double ctr = 0.01;
  double gd = 30.0;
  double alpha_neg = 2.0;  // L1 weight on maps of class-negative images
  double alpha_pos = 1.0;  // L1 weight on maps of class-positive images
  double gp = 10.0;        // gradient penalty coefficient in the critic loss

  void validate() const {
    for (double v : {adv, cls, reg, ctr, gd, alpha_neg, alpha_pos, gp})
      if (!(v >= 0.0)) throw usage_error("InvalidConfig", "loss weights must be nonnegative");
  }
};

/// Learnable mean attribution maps (H,W) of one class, for label bit 0 and 1.
struct ClassCenterPair {
  torch::Tensor v_neg;
  torch::Tensor v_pos;

  static ClassCenterPair zeros(int h, int w) { return {torch::zeros({h, w}), torch::zeros({h, w})}; }
  torch::Tensor& center(int bit) { return bit ? v_pos : v_neg; }
  const torch::Tensor& center(int bit) const { return bit ? v_pos : v_neg; }
};

namespace detail {
inline void require_nonempty(const torch::Tensor& t, const char* what) {
  if (!t.defined() || t.numel() == 0) throw data_error("EmptyBatch", std::string(what) + " is empty");
}
}  // namespace detail

/// mean(-D(real negatives)) + mean(D(fakes)) + gp_weight * penalty.
inline torch::Tensor critic_loss(const torch::Tensor& real_neg_scores, const torch::Tensor& fake_scores,
                                 const std::optional<torch::Tensor>& penalty = std::nullopt, double gp_weight = 10.0) {
  detail::require_nonempty(real_neg_scores, "real score batch");
  detail::require_nonempty(fake_scores, "fake score batch");
  auto loss = (-real_neg_scores).mean() + fake_scores.mean();
  if (penalty) loss = loss + gp_weight * *penalty;
  return loss;
}

/// mean(-D(x + M(x))) over class-positive images.
inline torch::Tensor adversarial_loss(const torch::Tensor& fake_scores) {
  detail::require_nonempty(fake_scores, "fake score batch");
  return (-fake_scores).mean();
}

/// Per-image sum of |M|: (B,1,H,W) -> (B,)
/// How the L1 term reduces over the pixels of one map.
enum class PixelReduction { sum, mean };

inline PixelReduction parse_pixel_reduction(const std::string& s) {
  if (s == "sum") return PixelReduction::sum;
  if (s == "mean") return PixelReduction::mean;
  throw usage_error("InvalidConfig", "pixel reduction must be sum or mean (got '" + s + "')");
}

inline const char* to_string(PixelReduction r) { return r == PixelReduction::sum ? "sum" : "mean"; }

inline torch::Tensor l1_per_image(const torch::Tensor& m, PixelReduction px = PixelReduction::sum) {
  auto a = m.abs().flatten(1);
  return px == PixelReduction::sum ? a.sum(1) : a.mean(1);
}

/// alpha_neg * mean ||M_neg||_1 + alpha_pos * mean ||M_pos||_1; an undefined or empty side contributes 0.
inline torch::Tensor reg_loss(const torch::Tensor& m_neg, const torch::Tensor& m_pos, double alpha_neg,
                              double alpha_pos, PixelReduction px = PixelReduction::sum) {
  auto loss = torch::zeros({});
  if (m_neg.defined() && m_neg.numel() > 0) loss = loss + alpha_neg * l1_per_image(m_neg, px).mean();
  if (m_pos.defined() && m_pos.numel() > 0) loss = loss + alpha_pos * l1_per_image(m_pos, px).mean();
  return loss;
}

/// Mean binary cross entropy from probabilities.
inline torch::Tensor classification_loss(const torch::Tensor& prob, const torch::Tensor& label) {
  if (prob.sizes() != label.sizes()) throw data_error("ShapeMismatch", "probabilities and labels differ in shape");
  auto p = prob.clamp(1e-12, 1.0 - 1e-12);
  auto y = label.to(prob.dtype());
  return -(y * p.log() + (1 - y) * (1 - p).log()).mean();
}

/// Same loss computed from logits (numerically stable; used during training).
inline torch::Tensor classification_loss_from_logits(const torch::Tensor& logit, const torch::Tensor& label) {
  if (logit.sizes() != label.sizes()) throw data_error("ShapeMismatch", "logits and labels differ in shape");
  return torch::binary_cross_entropy_with_logits(logit, label.to(logit.dtype()));
}

/// 1/2 * mean_b ||M_b - v||_2^2 with v the center for `label_bit`. M: (B,1,H,W).
inline torch::Tensor center_loss(const torch::Tensor& m, int label_bit, const ClassCenterPair& centers) {
  const auto& v = centers.center(label_bit);
  if (m.size(-1) != v.size(-1) || m.size(-2) != v.size(-2))
    throw data_error("ShapeMismatch", "attribution map and class center differ in shape");
  return 0.5 * (m - v.to(m.dtype())).pow(2).flatten(1).sum(1).mean();
}

/// One SGD step on the center loss for each label bit present in the batch:
/// v <- v - lr * mean over matching items of (v - M). Other centers are left unchanged.
inline void update_centers(ClassCenterPair& centers, const torch::Tensor& batch_m, const std::vector<int>& label_bits,
                           double lr) {
  torch::NoGradGuard no_grad;
  if (batch_m.size(0) != static_cast<int64_t>(label_bits.size()))
    throw data_error("ShapeMismatch", "one label bit per attribution map");
  auto m = batch_m.detach().squeeze(1).to(centers.v_pos.dtype());
  for (int bit : {0, 1}) {
    std::vector<int64_t> idx;
    for (size_t i = 0; i < label_bits.size(); ++i)
      if (label_bits[i] == bit) idx.push_back(static_cast<int64_t>(i));
    if (idx.empty()) continue;
    auto sel = m.index_select(0, torch::tensor(idx, torch::kInt64));
    auto& v = centers.center(bit);
    v = v - lr * (v.unsqueeze(0) - sel).mean(0);
  }
}

inline constexpr double kGuidanceEps = 1e-8;

/// Per-item energy loss 1 - sum(G*|M|)/sum(|M|). M: (B,1,H,W); G broadcastable to M
/// with values in [0,1]. Items whose map has (near) zero energy score 0.
inline torch::Tensor guidance_loss_per_item(const torch::Tensor& m, const torch::Tensor& g) {
  auto gb = g;
  while (gb.dim() < m.dim()) gb = gb.unsqueeze(0);
  if (gb.size(-1) != m.size(-1) || gb.size(-2) != m.size(-2))
    throw data_error("ShapeMismatch", "guidance mask and attribution map differ in shape");
  auto a = m.abs();
  auto total = a.flatten(1).sum(1);
  auto inside = (gb.to(m.dtype()) * a).expand_as(a).flatten(1).sum(1);
  auto safe_total = torch::where(total < kGuidanceEps, torch::ones_like(total), total);
  auto loss = 1 - inside / safe_total;
  return torch::where(total < kGuidanceEps, torch::zeros_like(loss), loss);
}

/// Batch mean of the energy loss.
inline torch::Tensor guidance_loss(const torch::Tensor& m, const torch::Tensor& g) {
  return guidance_loss_per_item(m, g).mean();
}

/// Per-class generator terms; `gd` is absent when guidance is off for the step.
struct ClassLossTerms {
  torch::Tensor adv, cls, reg, ctr;
  std::optional<torch::Tensor> gd;
};

/// Sum over classes of the lambda-weighted terms. A weight of exactly 0 drops its
/// term entirely (ablation), so NaNs in a disabled term cannot leak in.
inline torch::Tensor total_generator_loss(const std::vector<ClassLossTerms>& terms, const LossWeights& w) {
  auto total = torch::zeros({});
  auto add = [&](double weight, const torch::Tensor& t) {
    if (weight != 0.0 && t.defined()) total = total + weight * t;
  };
  for (const auto& t : terms) {
    add(w.adv, t.adv);
    add(w.cls, t.cls);
    add(w.reg, t.reg);
    add(w.ctr, t.ctr);
    if (t.gd) add(w.gd, *t.gd);
  }
  return total;
}

/// Loss-subset ablation: zeroes every weight whose name is not in `keep`
/// (names: adv, cls, reg, ctr, gd).
inline LossWeights ablate(LossWeights w, const std::vector<std::string>& keep) {
  auto has = [&](const char* n) { return std::find(keep.begin(), keep.end(), n) != keep.end(); };
  for (const auto& k : keep)
    if (k != "adv" && k != "cls" && k != "reg" && k != "ctr" && k != "gd")
      throw usage_error("InvalidConfig", "unknown loss term '" + k + "'");
  if (!has("adv")) w.adv = 0.0;
  if (!has("cls")) w.cls = 0.0;
  if (!has("reg")) w.reg = 0.0;
  if (!has("ctr")) w.ctr = 0.0;
  if (!has("gd")) w.gd = 0.0;
  return w;
}

}  // namespace attrinet
