#pragma once

// Local explanations (attribution map weighted by the block-upsampled
// classifier grid) and global explanations (class centers + weight grids),
// with PNG panel and .npy export.

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "attrinet/classifier.hpp"
#include "attrinet/error.hpp"
#include "attrinet/image_io.hpp"
#include "attrinet/model.hpp"

namespace attrinet {

/// Nearest-neighbour block replication of a (h,w) grid by gamma -> (h*gamma, w*gamma).
inline torch::Tensor upsample_weights(const torch::Tensor& w, int gamma) {
  if (w.dim() != 2) throw data_error("ShapeMismatch", "weight grid must be 2-D");
  if (gamma < 1) throw usage_error("InvalidArgument", "gamma must be positive");
  if (gamma == 1) return w.clone();
  return w.repeat_interleave(gamma, 0).repeat_interleave(gamma, 1);
}

struct LocalExplanation {
  torch::Tensor attribution;    // M(x, t_c), (H,W)
  torch::Tensor weighted_map;   // M ⊙ upsample(w), (H,W)
  torch::Tensor positive_part;  // max(weighted_map, 0)
  double probability = 0.5;
  double logit = 0.0;
  int class_index = 0;
};

/// Explanation of class c for one image, (1,H,W) or (H,W).
inline LocalExplanation local_explain(AttriNet& model, const torch::Tensor& image, int c) {
  torch::NoGradGuard no_grad;
  auto x = image;
  if (x.dim() == 2) x = x.unsqueeze(0);
  if (x.dim() != 3 || x.size(0) != 1 || x.size(1) != model.arch.image_size || x.size(2) != model.arch.image_size)
    throw data_error("ShapeMismatch", "image must be (1,H,W) at the model resolution");
  if (c < 0 || c >= model.num_classes()) throw usage_error("IndexOutOfRange", "class index out of range");
  model.train_mode(false);
  auto m = model.attributions(x.unsqueeze(0), c);
  auto pred = predict(m, model.heads[c]);
  auto w = upsample_weights(model.heads[c]->weight.detach(), model.arch.pool_factor);
  LocalExplanation e;
  e.attribution = m[0][0].clone();
  e.weighted_map = e.attribution * w;
  e.positive_part = e.weighted_map.clamp_min(0.0);
  e.logit = pred.logit[0].item<double>();
  e.probability = pred.probability[0].item<double>();
  e.class_index = c;
  return e;
}

struct GlobalClassPanel {
  torch::Tensor v_pos;        // (H,W)
  torch::Tensor v_neg;        // (H,W)
  torch::Tensor weight_grid;  // upsampled to (H,W)
};

struct GlobalExplanation {
  std::vector<GlobalClassPanel> classes;
};

inline GlobalExplanation global_explain(const AttriNet& model) {
  GlobalExplanation g;
  for (int c = 0; c < model.num_classes(); ++c)
    g.classes.push_back({model.centers[c].v_pos.clone(), model.centers[c].v_neg.clone(),
                         upsample_weights(model.heads[c]->weight.detach(), model.arch.pool_factor)});
  return g;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

struct RGB {
  std::uint8_t r, g, b;
};

/// Blue (-1) -> white (0) -> red (+1).
inline RGB diverging_color(double v) {
  v = std::clamp(v, -1.0, 1.0);
  auto lerp = [](double a, double b, double t) { return static_cast<std::uint8_t>(std::lround(a + (b - a) * t)); };
  if (v >= 0) return {lerp(255, 178, v), lerp(255, 24, v), lerp(255, 43, v)};
  double t = -v;
  return {lerp(255, 33, t), lerp(255, 102, t), lerp(255, 172, t)};
}

/// One panel cell: either a grayscale image in [-1,1] or a signed map drawn
/// on the diverging scale normalised by its own max |value|.
struct PanelCell {
  torch::Tensor values;  // (H,W)
  bool signed_map = true;
};

/// Horizontal strip of cells separated by `gap` white pixels.
/// `flip_sign` negates signed maps for display only.
inline Raster render_panel(const std::vector<PanelCell>& cells, int gap = 2, bool flip_sign = false) {
  if (cells.empty()) throw usage_error("InvalidArgument", "panel needs at least one cell");
  const int H = static_cast<int>(cells[0].values.size(0)), W = static_cast<int>(cells[0].values.size(1));
  Raster r;
  r.channels = 3;
  r.height = H;
  r.width = static_cast<int>(cells.size()) * W + (static_cast<int>(cells.size()) - 1) * gap;
  r.data.assign(static_cast<size_t>(r.width) * r.height * 3, 255);
  for (size_t k = 0; k < cells.size(); ++k) {
    auto v = cells[k].values.detach().to(torch::kFloat64).contiguous();
    if (v.size(0) != H || v.size(1) != W) throw data_error("ShapeMismatch", "panel cells differ in size");
    const double* p = v.data_ptr<double>();
    double scale = 1.0;
    if (cells[k].signed_map) {
      double mx = v.abs().max().item<double>();
      scale = mx > 0 ? 1.0 / mx : 0.0;
      if (flip_sign) scale = -scale;
    }
    const int x0 = static_cast<int>(k) * (W + gap);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double val = p[y * W + x];
        RGB col;
        if (cells[k].signed_map) {
          col = diverging_color(val * scale);
        } else {
          auto g = static_cast<std::uint8_t>(std::lround(std::clamp((val + 1.0) * 127.5, 0.0, 255.0)));
          col = {g, g, g};
        }
        r.at(x0 + x, y, 0) = col.r;
        r.at(x0 + x, y, 1) = col.g;
        r.at(x0 + x, y, 2) = col.b;
      }
  }
  return r;
}

inline void write_npy(const std::filesystem::path& path, const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  std::vector<float> v(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
  write_npy(path, v, c.sizes().vec());
}

/// Writes explain/<id>_<class>.png (image | attribution | weighted map | positive part)
/// and explain/<id>_<class>.npy holding the weighted map.
inline void export_local(const LocalExplanation& e, const torch::Tensor& image, const std::string& id,
                         const std::string& class_name, const std::filesystem::path& out_dir, bool flip_sign = false) {
  auto dir = out_dir / "explain";
  std::filesystem::create_directories(dir);
  auto img = image.dim() == 3 ? image[0] : image;
  auto panel = render_panel({{img, false}, {e.attribution}, {e.weighted_map}, {e.positive_part}}, 2, flip_sign);
  write_png(dir / (id + "_" + class_name + ".png"), panel);
  write_npy(dir / (id + "_" + class_name + ".npy"), e.weighted_map);
}

/// Writes explain/global_<class>.png (v_pos | v_neg | weight grid) and the three raw arrays.
inline void export_global(const GlobalExplanation& g, const std::vector<std::string>& class_names,
                          const std::filesystem::path& out_dir, bool flip_sign = false) {
  auto dir = out_dir / "explain";
  std::filesystem::create_directories(dir);
  for (size_t c = 0; c < g.classes.size(); ++c) {
    const auto& p = g.classes[c];
    const std::string stem = "global_" + class_names.at(c);
    write_png(dir / (stem + ".png"), render_panel({{p.v_pos}, {p.v_neg}, {p.weight_grid}}, 2, flip_sign));
    write_npy(dir / (stem + "_v_pos.npy"), p.v_pos);
    write_npy(dir / (stem + "_v_neg.npy"), p.v_neg);
    write_npy(dir / (stem + "_weights.npy"), p.weight_grid);
  }
}

}  // namespace attrinet
