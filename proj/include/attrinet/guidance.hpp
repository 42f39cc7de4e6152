#pragma once

// Guidance masks: ground truth, pseudo masks built from other cases' boxes,
// loose squares, avoidance masks, and the annotated-case oversampler.

#include <torch/torch.h>

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attrinet/dataset.hpp"
#include "attrinet/error.hpp"
#include "attrinet/random.hpp"

namespace attrinet {

enum class MaskKind { gt, pseudo_binary, pseudo_weighted, pseudo_bbox, loose_square, avoidance };

inline const char* to_string(MaskKind k) {
  switch (k) {
    case MaskKind::gt:
      return "gt";
    case MaskKind::pseudo_binary:
      return "pseudo_binary";
    case MaskKind::pseudo_weighted:
      return "pseudo_weighted";
    case MaskKind::pseudo_bbox:
      return "pseudo_bbox";
    case MaskKind::loose_square:
      return "loose_square";
    case MaskKind::avoidance:
      return "avoidance";
  }
  return "?";
}

struct GuidanceMask {
  torch::Tensor values;  // (H,W); {0,1} for binary kinds, [0,1] with max 1 for weighted
  int class_index = -1;
  MaskKind kind = MaskKind::gt;

  bool is_binary() const { return kind != MaskKind::pseudo_weighted; }
};

namespace detail {
inline std::vector<Box> class_boxes(const std::vector<ImageRecord>& records, int c) {
  std::vector<Box> out;
  for (const auto& r : records)
    for (const auto& b : r.boxes)
      if (b.class_index == c) out.push_back(b);
  if (out.empty()) throw data_error("NoAnnotations", "no boxes for class " + std::to_string(c));
  return out;
}
}  // namespace detail

/// Union of every box of class c across `records`.
inline GuidanceMask build_pseudo_binary(const std::vector<ImageRecord>& records, int c, int height, int width) {
  auto boxes = detail::class_boxes(records, c);
  return {rasterize_boxes(boxes, c, height, width), c, MaskKind::pseudo_binary};
}

/// Per-pixel count of covering boxes, normalised by the maximum count.
inline GuidanceMask build_pseudo_weighted(const std::vector<ImageRecord>& records, int c, int height, int width) {
  auto boxes = detail::class_boxes(records, c);
  auto count = torch::zeros({height, width});
  for (const auto& b : boxes) count += rasterize_boxes({b}, c, height, width);
  return {count / count.max(), c, MaskKind::pseudo_weighted};
}

/// Smallest single box enclosing every box of class c.
inline GuidanceMask build_pseudo_bbox(const std::vector<ImageRecord>& records, int c, int height, int width) {
  auto boxes = detail::class_boxes(records, c);
  int x0 = width, y0 = height, x1 = 0, y1 = 0;
  for (const auto& b : boxes) {
    x0 = std::min(x0, b.x);
    y0 = std::min(y0, b.y);
    x1 = std::max(x1, b.x + b.w);
    y1 = std::max(y1, b.y + b.h);
  }
  return {rasterize_boxes({Box{c, x0, y0, x1 - x0, y1 - y0}}, c, height, width), c, MaskKind::pseudo_bbox};
}

/// Centered side x side square of ones.
inline GuidanceMask build_loose_square(int side, int height, int width) {
  if (side <= 0) throw usage_error("EmptyMask", "square side must be positive");
  if (side > height || side > width) throw usage_error("InvalidArgument", "square larger than the image");
  int y0 = (height - side) / 2, x0 = (width - side) / 2;
  return {rasterize_boxes({Box{0, x0, y0, side, side}}, -1, height, width), -1, MaskKind::loose_square};
}

inline bool boxes_overlap(const Box& a, const Box& b) {
  return a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h;
}

/// Ones on `center_box`, zero elsewhere; the excluded region must not intersect it.
inline GuidanceMask build_avoidance(const Box& exclusion_box, const Box& center_box, int height, int width) {
  if (boxes_overlap(exclusion_box, center_box))
    throw usage_error("ConflictingRegions", "center region intersects the excluded region");
  auto m = rasterize_boxes({center_box}, -1, height, width);
  auto excl = rasterize_boxes({exclusion_box}, -1, height, width);
  if ((m * excl).sum().item<double>() != 0.0)
    throw usage_error("ConflictingRegions", "avoidance mask overlaps the excluded region");
  return {m, center_box.class_index, MaskKind::avoidance};
}

enum class GuidanceMode { none, full, mixed };

inline GuidanceMode parse_guidance_mode(const std::string& s) {
  if (s == "none") return GuidanceMode::none;
  if (s == "full") return GuidanceMode::full;
  if (s == "mixed") return GuidanceMode::mixed;
  throw usage_error("InvalidConfig", "guidance mode must be none, full or mixed (got '" + s + "')");
}

inline const char* to_string(GuidanceMode m) {
  switch (m) {
    case GuidanceMode::none:
      return "none";
    case GuidanceMode::full:
      return "full";
    case GuidanceMode::mixed:
      return "mixed";
  }
  return "?";
}

struct GuidancePolicy {
  GuidanceMode mode = GuidanceMode::none;
  double oversample_annotated_freq = 0.1;

  void validate() const {
    if (!(oversample_annotated_freq >= 0.0 && oversample_annotated_freq <= 1.0))
      throw usage_error("InvalidConfig", "oversample_annotated_freq must be in [0,1]");
  }
};

/// Class-level masks used when a record has no ground truth (mixed mode).
using ClassMasks = std::map<int, GuidanceMask>;

/// Mask guiding record `idx` for class c, or nothing when the guidance term is skipped.
inline std::optional<GuidanceMask> select_mask(const Dataset& ds, int64_t idx, int c, const GuidancePolicy& policy,
                                               const ClassMasks& pseudo_masks) {
  if (policy.mode == GuidanceMode::none) return std::nullopt;
  if (auto gt = ds.gt_mask(idx, c)) return GuidanceMask{*gt, c, MaskKind::gt};
  if (policy.mode == GuidanceMode::mixed) {
    auto it = pseudo_masks.find(c);
    if (it != pseudo_masks.end()) return it->second;
  }
  return std::nullopt;
}

/// Endless index stream in which annotated ids appear with long-run frequency `freq`.
class OversampleStream {
 public:
  OversampleStream(std::vector<int64_t> annotated, std::vector<int64_t> unannotated, double freq, std::uint64_t seed)
      : annotated_(std::move(annotated)), unannotated_(std::move(unannotated)), freq_(freq), rng_(seed) {
    if (!(freq >= 0.0 && freq <= 1.0)) throw usage_error("InvalidArgument", "frequency must be in [0,1]");
    if (annotated_.empty() && unannotated_.empty()) throw data_error("EmptyPool", "no ids to sample from");
  }

  int64_t next() {
    bool pick_annotated = uniform01(rng_) < freq_;
    if (annotated_.empty()) pick_annotated = false;
    if (unannotated_.empty()) pick_annotated = true;
    const auto& pool = pick_annotated ? annotated_ : unannotated_;
    return pool[uniform_index(rng_, pool.size())];
  }

 private:
  std::vector<int64_t> annotated_;
  std::vector<int64_t> unannotated_;
  double freq_;
  Rng rng_;
};

/// Splits annotated records into (pseudo-mask source, held-out evaluation) by `source_fraction`.
inline std::pair<std::vector<int64_t>, std::vector<int64_t>> split_annotated(std::vector<int64_t> ids,
                                                                             double source_fraction,
                                                                             std::uint64_t seed) {
  Rng rng(seed);
  auto shuffled = sample_without_replacement(ids, ids.size(), rng);
  auto k = static_cast<size_t>(std::lround(source_fraction * static_cast<double>(shuffled.size())));
  return {{shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(k)},
          {shuffled.begin() + static_cast<std::ptrdiff_t>(k), shuffled.end()}};
}

/// Binary masks as 0/255, weighted masks scaled to 8 bits.
inline void export_mask_png(const GuidanceMask& m, const fs::path& path) {
  auto v = (m.values.clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
  Raster r;
  r.height = static_cast<int>(v.size(0));
  r.width = static_cast<int>(v.size(1));
  r.data.assign(v.data_ptr<std::uint8_t>(), v.data_ptr<std::uint8_t>() + v.numel());
  write_png(path, r);
}

}  // namespace attrinet
