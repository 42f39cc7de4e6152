#pragma once

// Dataset ingestion: manifest CSV, in-memory image store, positive/negative
// sampling, the synthetic desk-scale dataset, and spurious-tag contamination.

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "attrinet/error.hpp"
#include "attrinet/font.hpp"
#include "attrinet/image_io.hpp"
#include "attrinet/random.hpp"

namespace attrinet {

namespace fs = std::filesystem;

/// Axis-aligned box in resized-pixel coordinates; covers [x, x+w) x [y, y+h).
struct Box {
  int class_index = 0;
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool operator==(const Box&) const = default;
};

struct SegMaskRef {
  int class_index = 0;
  std::string path;

  bool operator==(const SegMaskRef&) const = default;
};

struct ImageRecord {
  std::string id;
  std::string image_path;  // relative to the manifest directory unless absolute
  std::vector<int> labels;
  std::vector<Box> boxes;
  std::vector<SegMaskRef> seg_masks;

  bool has_annotation(int c) const {
    return std::any_of(boxes.begin(), boxes.end(), [c](const Box& b) { return b.class_index == c; }) ||
           std::any_of(seg_masks.begin(), seg_masks.end(), [c](const SegMaskRef& m) { return m.class_index == c; });
  }
};

/// Rescales a box proportionally from one square image size to another.
inline Box rescale_box(const Box& b, int from_size, int to_size) {
  double s = static_cast<double>(to_size) / from_size;
  Box r = b;
  r.x = static_cast<int>(std::floor(b.x * s));
  r.y = static_cast<int>(std::floor(b.y * s));
  r.w = std::max(1, static_cast<int>(std::lround(b.w * s)));
  r.h = std::max(1, static_cast<int>(std::lround(b.h * s)));
  r.w = std::min(r.w, to_size - r.x);
  r.h = std::min(r.h, to_size - r.y);
  return r;
}

inline bool box_inside(const Box& b, int width, int height) {
  return b.w > 0 && b.h > 0 && b.x >= 0 && b.y >= 0 && b.x + b.w <= width && b.y + b.h <= height;
}

// ---------------------------------------------------------------------------
// Manifest CSV: id,path,<class_0..C-1>,boxes,masks
// boxes: "c:x:y:w:h;c:x:y:w:h", masks: "c:path;c:path"
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline int parse_int(const std::string& s, const std::string& what) {
  try {
    size_t used = 0;
    int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw data_error("MalformedField", "cannot parse " + what + " '" + s + "'");
  }
}

}  // namespace detail

/// Class names listed in a manifest header (the columns between path and boxes).
inline std::vector<std::string> read_manifest_classes(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("IOError", "cannot open manifest " + path.string());
  std::string header;
  std::getline(in, header);
  auto cols = detail::split(detail::trim(header), ',');
  if (cols.size() < 4 || cols[0] != "id" || cols[1] != "path" || cols[cols.size() - 2] != "boxes" ||
      cols.back() != "masks")
    throw data_error("MissingColumn", "manifest header must be id,path,<classes>,boxes,masks");
  return {cols.begin() + 2, cols.end() - 2};
}

/// Parses and validates a manifest. `image_size` is the square side boxes are checked against.
inline std::vector<ImageRecord> load_manifest(const fs::path& path, const std::vector<std::string>& class_names,
                                              int image_size) {
  std::ifstream in(path);
  if (!in) throw data_error("IOError", "cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw data_error("MissingColumn", "manifest is empty");
  auto cols = detail::split(detail::trim(line), ',');
  for (auto& c : cols) c = detail::trim(c);

  auto find_col = [&](const std::string& name) -> int {
    auto it = std::find(cols.begin(), cols.end(), name);
    if (it == cols.end()) throw data_error("MissingColumn", "header row lacks column '" + name + "'");
    return static_cast<int>(it - cols.begin());
  };
  int id_col = find_col("id");
  int path_col = find_col("path");
  int boxes_col = find_col("boxes");
  int masks_col = find_col("masks");
  std::vector<int> label_cols;
  for (const auto& name : class_names) label_cols.push_back(find_col(name));
  for (size_t i = 0; i < cols.size(); ++i) {
    int ii = static_cast<int>(i);
    if (ii == id_col || ii == path_col || ii == boxes_col || ii == masks_col) continue;
    if (std::find(label_cols.begin(), label_cols.end(), ii) == label_cols.end())
      throw data_error("UnknownClass", "header row: column '" + cols[i] + "' is not a configured class");
  }

  const int C = static_cast<int>(class_names.size());
  std::vector<ImageRecord> records;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    line = detail::trim(line);
    if (line.empty()) continue;
    auto f = detail::split(line, ',');
    if (f.size() != cols.size())
      throw data_error("MissingColumn", "row " + std::to_string(row) + ": expected " + std::to_string(cols.size()) +
                                            " fields, got " + std::to_string(f.size()));
    std::string where = "row " + std::to_string(row);
    ImageRecord rec;
    rec.id = detail::trim(f[id_col]);
    rec.image_path = detail::trim(f[path_col]);
    for (int c = 0; c < C; ++c) {
      std::string v = detail::trim(f[label_cols[c]]);
      if (v != "0" && v != "1")
        throw data_error("InvalidLabel", where + ": label '" + v + "' for class " + class_names[c] + " not in {0,1}");
      rec.labels.push_back(v == "1" ? 1 : 0);
    }
    std::string boxes = detail::trim(f[boxes_col]);
    if (!boxes.empty()) {
      for (const auto& item : detail::split(boxes, ';')) {
        auto parts = detail::split(item, ':');
        if (parts.size() != 5) throw data_error("MalformedBox", where + ": box '" + item + "' is not c:x:y:w:h");
        Box b;
        try {
          b.class_index = detail::parse_int(parts[0], "class");
          b.x = detail::parse_int(parts[1], "x");
          b.y = detail::parse_int(parts[2], "y");
          b.w = detail::parse_int(parts[3], "w");
          b.h = detail::parse_int(parts[4], "h");
        } catch (const Error&) {
          throw data_error("MalformedBox", where + ": box '" + item + "' has non-integer fields");
        }
        if (b.class_index < 0 || b.class_index >= C)
          throw data_error("UnknownClass", where + ": box class index " + std::to_string(b.class_index));
        if (!box_inside(b, image_size, image_size))
          throw data_error("MalformedBox", where + ": box '" + item + "' outside [0," + std::to_string(image_size) +
                                               ")^2 or empty");
        rec.boxes.push_back(b);
      }
    }
    std::string masks = detail::trim(f[masks_col]);
    if (!masks.empty()) {
      for (const auto& item : detail::split(masks, ';')) {
        auto colon = item.find(':');
        if (colon == std::string::npos) throw data_error("MalformedMask", where + ": mask '" + item + "' is not c:path");
        SegMaskRef m;
        m.class_index = detail::parse_int(item.substr(0, colon), "mask class");
        if (m.class_index < 0 || m.class_index >= C)
          throw data_error("UnknownClass", where + ": mask class index " + std::to_string(m.class_index));
        m.path = item.substr(colon + 1);
        rec.seg_masks.push_back(m);
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline void write_manifest(const fs::path& path, const std::vector<std::string>& class_names,
                           const std::vector<ImageRecord>& records) {
  std::ofstream out(path);
  if (!out) throw data_error("IOError", "cannot write manifest " + path.string());
  out << "id,path";
  for (const auto& n : class_names) out << "," << n;
  out << ",boxes,masks\n";
  for (const auto& r : records) {
    out << r.id << "," << r.image_path;
    for (int l : r.labels) out << "," << l;
    out << ",";
    for (size_t i = 0; i < r.boxes.size(); ++i) {
      const auto& b = r.boxes[i];
      out << (i ? ";" : "") << b.class_index << ":" << b.x << ":" << b.y << ":" << b.w << ":" << b.h;
    }
    out << ",";
    for (size_t i = 0; i < r.seg_masks.size(); ++i)
      out << (i ? ";" : "") << r.seg_masks[i].class_index << ":" << r.seg_masks[i].path;
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Pixel conversion and rasterization
// ---------------------------------------------------------------------------

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5), 0L, 255L));
}
inline float from_byte(std::uint8_t b) { return static_cast<float>(b) / 127.5f - 1.0f; }

/// Gray raster -> (H,W) float tensor in [-1,1].
inline torch::Tensor raster_to_tensor(const Raster& r) {
  auto t = torch::from_blob(const_cast<std::uint8_t*>(r.data.data()), {r.height, r.width}, torch::kUInt8)
               .to(torch::kFloat32);
  return t / 127.5 - 1.0;
}

inline Raster tensor_to_raster(const torch::Tensor& img) {
  auto t = img.detach().to(torch::kFloat64).contiguous();
  Raster r;
  r.height = static_cast<int>(t.size(0));
  r.width = static_cast<int>(t.size(1));
  r.data.resize(static_cast<size_t>(r.width) * r.height);
  auto a = t.accessor<double, 2>();
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) r.at(x, y) = to_byte(a[y][x]);
  return r;
}

/// Binary (H,W) mask of the union of boxes of class c (all classes when c < 0).
inline torch::Tensor rasterize_boxes(const std::vector<Box>& boxes, int c, int height, int width) {
  auto m = torch::zeros({height, width});
  for (const auto& b : boxes) {
    if (c >= 0 && b.class_index != c) continue;
    int x0 = std::clamp(b.x, 0, width), x1 = std::clamp(b.x + b.w, 0, width);
    int y0 = std::clamp(b.y, 0, height), y1 = std::clamp(b.y + b.h, 0, height);
    if (x1 > x0 && y1 > y0) m.slice(0, y0, y1).slice(1, x0, x1).fill_(1.0);
  }
  return m;
}

// ---------------------------------------------------------------------------
// In-memory dataset and batches
// ---------------------------------------------------------------------------

struct ImageBatch {
  torch::Tensor pixels;          // (B,1,H,W) in [-1,1]
  torch::Tensor labels;          // (B,C) float {0,1}
  torch::Tensor masks;           // (B,C,H,W) binary; zeros where has_gt is false
  torch::Tensor has_gt;          // (B,C) bool
  std::vector<int64_t> indices;  // dataset row of each item

  int64_t size() const { return pixels.size(0); }

  void validate() const {
    if (pixels.dim() != 4 || pixels.size(1) != 1 || pixels.size(2) != pixels.size(3))
      throw data_error("ShapeMismatch", "batch pixels must be (B,1,H,H)");
    if (pixels.numel() > 0 && (pixels.min().item<float>() < -1.0f || pixels.max().item<float>() > 1.0f))
      throw data_error("RangeViolation", "batch pixels outside [-1,1]");
    if (masks.defined() && masks.numel() > 0 && !(masks.eq(0) | masks.eq(1)).all().item<bool>())
      throw data_error("RangeViolation", "batch masks are not binary");
  }
};

class Dataset {
 public:
  Dataset() = default;

  /// Loads a manifest and every referenced image and mask into memory.
  static Dataset load(const fs::path& manifest, int image_size, std::vector<std::string> class_names = {}) {
    if (class_names.empty()) class_names = read_manifest_classes(manifest);
    Dataset ds;
    ds.root_ = manifest.parent_path();
    ds.class_names_ = std::move(class_names);
    ds.size_ = image_size;
    ds.records_ = load_manifest(manifest, ds.class_names_, image_size);
    ds.load_pixels();
    return ds;
  }

  /// Builds a dataset from records already in memory (paths resolved against `root`).
  static Dataset from_records(fs::path root, std::vector<std::string> class_names, int image_size,
                              std::vector<ImageRecord> records) {
    Dataset ds;
    ds.root_ = std::move(root);
    ds.class_names_ = std::move(class_names);
    ds.size_ = image_size;
    ds.records_ = std::move(records);
    ds.load_pixels();
    return ds;
  }

  const std::vector<ImageRecord>& records() const { return records_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const fs::path& root() const { return root_; }
  int num_classes() const { return static_cast<int>(class_names_.size()); }
  int image_size() const { return size_; }
  int64_t size() const { return static_cast<int64_t>(records_.size()); }

  /// (N,1,H,W) pixels of all records.
  const torch::Tensor& images() const { return images_; }

  std::vector<int64_t> positives(int c) const { return with_label(c, 1); }
  std::vector<int64_t> negatives(int c) const { return with_label(c, 0); }

  /// Ground-truth mask for (record, class): the segmentation when present, else the union of boxes.
  std::optional<torch::Tensor> gt_mask(int64_t idx, int c) const {
    const auto& m = gt_masks_[static_cast<size_t>(idx) * num_classes() + c];
    if (!m.defined()) return std::nullopt;
    return m;
  }

  ImageBatch batch(const std::vector<int64_t>& indices) const {
    const int C = num_classes();
    const auto B = static_cast<int64_t>(indices.size());
    ImageBatch b;
    b.indices = indices;
    auto idx = torch::tensor(indices, torch::kInt64);
    b.pixels = images_.index_select(0, idx);
    b.labels = torch::zeros({B, C});
    b.masks = torch::zeros({B, C, size_, size_});
    b.has_gt = torch::zeros({B, C}, torch::kBool);
    for (int64_t i = 0; i < B; ++i) {
      const auto& rec = records_[indices[i]];
      for (int c = 0; c < C; ++c) {
        b.labels[i][c] = rec.labels[c];
        if (auto m = gt_mask(indices[i], c)) {
          b.masks[i][c].copy_(*m);
          b.has_gt[i][c] = true;
        }
      }
    }
    b.validate();
    return b;
  }

  /// Copy of this dataset where only the records in `keep` retain their annotations.
  Dataset with_annotations_only_for(const std::vector<int64_t>& keep) const {
    Dataset ds = *this;
    std::vector<bool> k(records_.size(), false);
    for (auto i : keep) k[i] = true;
    for (size_t i = 0; i < ds.records_.size(); ++i) {
      if (k[i]) continue;
      ds.records_[i].boxes.clear();
      ds.records_[i].seg_masks.clear();
      for (int c = 0; c < num_classes(); ++c) ds.gt_masks_[i * num_classes() + c] = torch::Tensor();
    }
    return ds;
  }

  fs::path resolve(const std::string& p) const {
    fs::path path(p);
    return path.is_absolute() ? path : root_ / path;
  }

 private:
  std::vector<int64_t> with_label(int c, int v) const {
    if (c < 0 || c >= num_classes()) throw data_error("IndexOutOfRange", "class " + std::to_string(c));
    std::vector<int64_t> out;
    for (size_t i = 0; i < records_.size(); ++i)
      if (records_[i].labels[c] == v) out.push_back(static_cast<int64_t>(i));
    return out;
  }

  torch::Tensor load_image(const fs::path& p, bool nearest) const {
    auto t = raster_to_tensor(read_png_gray(p));
    if (t.size(0) == size_ && t.size(1) == size_) return t;
    namespace F = torch::nn::functional;
    auto opts = F::InterpolateFuncOptions().size(std::vector<int64_t>{size_, size_});
    if (nearest)
      opts.mode(torch::kNearest);
    else
      opts.mode(torch::kArea);
    return F::interpolate(t.unsqueeze(0).unsqueeze(0), opts).squeeze(0).squeeze(0).clamp(-1.0, 1.0);
  }

  void load_pixels() {
    const int C = num_classes();
    const auto N = static_cast<int64_t>(records_.size());
    images_ = torch::empty({N, 1, size_, size_});
    gt_masks_.assign(static_cast<size_t>(N) * C, torch::Tensor());
    for (int64_t i = 0; i < N; ++i) {
      const auto& rec = records_[i];
      images_[i][0].copy_(load_image(resolve(rec.image_path), false));
      for (int c = 0; c < C; ++c) {
        torch::Tensor m;
        for (const auto& s : rec.seg_masks) {
          if (s.class_index != c) continue;
          auto raw = raster_to_tensor(read_png_gray(resolve(s.path)));
          if (raw.size(0) != size_ || raw.size(1) != size_) {
            namespace F = torch::nn::functional;
            raw = F::interpolate(raw.unsqueeze(0).unsqueeze(0),
                                 F::InterpolateFuncOptions()
                                     .size(std::vector<int64_t>{size_, size_})
                                     .mode(torch::kNearest))
                      .squeeze(0)
                      .squeeze(0);
          }
          auto bin = (raw > 0.0).to(torch::kFloat32);
          m = m.defined() ? torch::maximum(m, bin) : bin;
        }
        if (!m.defined()) {
          bool any = std::any_of(rec.boxes.begin(), rec.boxes.end(), [c](const Box& b) { return b.class_index == c; });
          if (any) m = rasterize_boxes(rec.boxes, c, size_, size_);
        }
        gt_masks_[static_cast<size_t>(i) * C + c] = m;
      }
    }
  }

  fs::path root_;
  std::vector<std::string> class_names_;
  int size_ = 0;
  std::vector<ImageRecord> records_;
  torch::Tensor images_;
  std::vector<torch::Tensor> gt_masks_;
};

/// Draws `batch_size` distinct indices from each of the positive and negative
/// pools of class c.
inline std::pair<std::vector<int64_t>, std::vector<int64_t>> sample_pair_indices(const Dataset& ds, int c,
                                                                                 int batch_size, std::uint64_t seed) {
  auto pos = ds.positives(c);
  auto neg = ds.negatives(c);
  auto need = static_cast<size_t>(batch_size);
  if (pos.size() < need)
    throw data_error("InsufficientSamples", "class " + std::to_string(c) + ": needed " + std::to_string(need) +
                                                " positives, available " + std::to_string(pos.size()));
  if (neg.size() < need)
    throw data_error("InsufficientSamples", "class " + std::to_string(c) + ": needed " + std::to_string(need) +
                                                " negatives, available " + std::to_string(neg.size()));
  Rng rng(seed);
  auto p = sample_without_replacement(std::move(pos), need, rng);
  auto n = sample_without_replacement(std::move(neg), need, rng);
  return {p, n};
}

inline std::pair<ImageBatch, ImageBatch> sample_pair(const Dataset& ds, int c, int batch_size, std::uint64_t seed) {
  auto [p, n] = sample_pair_indices(ds, c, batch_size, seed);
  return {ds.batch(p), ds.batch(n)};
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

struct SyntheticOptions {
  double prevalence = 0.5;    // P(label_c = 1)
  double cooccurrence = 0.0;  // probability that label_c (c>0) copies label_0
  double noise_std = 0.04;
};

namespace synth {

/// Names of the structures encoding each class, in class order.
inline const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names{"enlarged_heart", "left_basal_wedge", "right_upper_band",
                                              "right_basal_wedge", "left_upper_band", "apical_nodule"};
  return names;
}

struct Canvas {
  int size;
  std::vector<double> px;
  double& at(int x, int y) { return px[static_cast<size_t>(y) * size + x]; }
};

inline bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  double dx = (x - cx) / rx, dy = (y - cy) / ry;
  return dx * dx + dy * dy <= 1.0;
}

/// Pixel-center membership test of a class feature; `j` carries per-image jitter (dx, dy).
inline bool in_feature(int c, double x, double y, double S, double jx, double jy) {
  x -= jx;
  y -= jy;
  switch (c) {
    case 0:
      return in_ellipse(x, y, 0.5 * S, 0.62 * S, 0.18 * S, 0.15 * S);
    case 1:  // right triangle at the base of the left-image lung
      return y <= 0.78 * S && x >= 0.20 * S && (0.78 * S - y) <= 0.75 * (0.44 * S - x) && y >= 0.58 * S;
    case 2:
      return x >= 0.60 * S && x < 0.82 * S && y >= 0.34 * S && y < 0.42 * S;
    case 3:
      return y <= 0.78 * S && x <= 0.80 * S && (0.78 * S - y) <= 0.75 * (x - 0.56 * S) && y >= 0.58 * S;
    case 4:
      return x >= 0.18 * S && x < 0.40 * S && y >= 0.34 * S && y < 0.42 * S;
    case 5:
      return in_ellipse(x, y, 0.5 * S, 0.30 * S, 0.06 * S, 0.06 * S);
    default:
      return false;
  }
}

inline double feature_value(int c) {
  static const double v[] = {0.35, 0.30, 0.30, 0.30, 0.30, 0.45};
  return v[c];
}

}  // namespace synth

/// Writes `num_samples` images, per-class masks of the generating feature, and
/// manifest.csv into `out_dir`. Returns the records in manifest order.
inline std::vector<ImageRecord> make_synthetic(const fs::path& out_dir, int num_samples, int C, int size,
                                               std::uint64_t seed, const SyntheticOptions& opt = {}) {
  if (C < 2 || C > static_cast<int>(synth::feature_names().size()))
    throw usage_error("InvalidArgument", "synthetic classes must be in [2,6]");
  if (size < 32) throw usage_error("InvalidArgument", "synthetic image size must be >= 32");
  if (num_samples < 1) throw usage_error("InvalidArgument", "num_samples must be >= 1");
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "masks");

  const double S = size;
  std::vector<std::string> names(synth::feature_names().begin(), synth::feature_names().begin() + C);
  std::vector<ImageRecord> records;
  Rng rng(derive_seed(seed, {0x5e7}));
  for (int n = 0; n < num_samples; ++n) {
    char idbuf[16];
    std::snprintf(idbuf, sizeof idbuf, "s%05d", n);
    ImageRecord rec;
    rec.id = idbuf;
    rec.labels.resize(C);
    for (int c = 0; c < C; ++c) rec.labels[c] = uniform01(rng) < opt.prevalence ? 1 : 0;
    for (int c = 1; c < C; ++c)
      if (uniform01(rng) < opt.cooccurrence) rec.labels[c] = rec.labels[0];

    double offset = (uniform01(rng) - 0.5) * 0.1;
    double jx = (uniform01(rng) - 0.5) * 0.04 * S;
    double jy = (uniform01(rng) - 0.5) * 0.04 * S;
    std::vector<std::pair<double, double>> fj(C);
    for (auto& j : fj) j = {(uniform01(rng) - 0.5) * 0.05 * S, (uniform01(rng) - 0.5) * 0.05 * S};

    synth::Canvas img{size, std::vector<double>(static_cast<size_t>(size) * size)};
    std::vector<std::vector<std::uint8_t>> masks(C, std::vector<std::uint8_t>(static_cast<size_t>(size) * size, 0));
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        double px = x + 0.5, py = y + 0.5;
        double v = -0.9;
        if (synth::in_ellipse(px, py, 0.5 * S + jx, 0.56 * S + jy, 0.44 * S, 0.42 * S)) v = -0.1;
        if (synth::in_ellipse(px, py, 0.32 * S + jx, 0.52 * S + jy, 0.13 * S, 0.26 * S) ||
            synth::in_ellipse(px, py, 0.68 * S + jx, 0.52 * S + jy, 0.13 * S, 0.26 * S))
          v = -0.6;
        if (synth::in_ellipse(px, py, 0.5 * S + jx, 0.62 * S + jy, 0.11 * S, 0.09 * S)) v = 0.35;
        for (int c = 0; c < C; ++c) {
          if (!rec.labels[c]) continue;
          if (synth::in_feature(c, px, py, S, jx + fj[c].first, jy + fj[c].second)) {
            v = synth::feature_value(c);
            masks[c][static_cast<size_t>(y) * size + x] = 255;
          }
        }
        img.at(x, y) = v + offset;
      }
    }
    Raster r{size, size, 1, std::vector<std::uint8_t>(static_cast<size_t>(size) * size)};
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) r.at(x, y) = to_byte(img.at(x, y) + opt.noise_std * normal01(rng));
    rec.image_path = "images/" + rec.id + ".png";
    write_png(out_dir / rec.image_path, r);

    for (int c = 0; c < C; ++c) {
      if (!rec.labels[c]) continue;
      int x0 = size, y0 = size, x1 = -1, y1 = -1;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          if (masks[c][static_cast<size_t>(y) * size + x]) {
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x);
            y1 = std::max(y1, y);
          }
      if (x1 < 0) continue;
      Raster mr{size, size, 1, masks[c]};
      std::string mpath = "masks/" + rec.id + "_c" + std::to_string(c) + ".png";
      write_png(out_dir / mpath, mr);
      rec.seg_masks.push_back({c, mpath});
      rec.boxes.push_back({c, x0, y0, x1 - x0 + 1, y1 - y0 + 1});
    }
    records.push_back(std::move(rec));
  }
  write_manifest(out_dir / "manifest.csv", names, records);
  return records;
}

// ---------------------------------------------------------------------------
// Contamination
// ---------------------------------------------------------------------------

struct ContaminationSpec {
  int target_class = 0;
  double fraction = 0.5;
  std::string tag_text = "CXR-ROOM1";
  Box tag_region;  // where the text is drawn; class_index is ignored
  double pixel_value = 1.0;

  /// Region sized to the rendered text with its top-left corner at (x, y).
  static Box region_for(const std::string& text, int x, int y) {
    auto [w, h] = font::text_extent(text);
    return Box{0, x, y, w, h};
  }
};

struct InjectionEntry {
  std::string id;
  int class_index = 0;
  Box box;
};

inline nlohmann::json to_json(const InjectionEntry& e) {
  return {{"id", e.id}, {"class", e.class_index}, {"box", {e.box.x, e.box.y, e.box.w, e.box.h}}};
}

inline std::vector<InjectionEntry> read_injection_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("IOError", "cannot open injection log " + path.string());
  std::vector<InjectionEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line);
    InjectionEntry e;
    e.id = j.at("id").get<std::string>();
    e.class_index = j.at("class").get<int>();
    auto b = j.at("box");
    e.box = Box{e.class_index, b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
    out.push_back(e);
  }
  return out;
}

/// Burns `spec.tag_text` into exactly round(fraction * #positives) positive
/// images of the target class. Reads the dataset at `src_manifest`, writes a
/// full copy to `out_dir` (images, masks, manifest.csv, injection_log.jsonl).
inline std::vector<InjectionEntry> contaminate(const fs::path& src_manifest, const fs::path& out_dir,
                                               const ContaminationSpec& spec, std::uint64_t seed) {
  if (spec.fraction < 0.0 || spec.fraction > 1.0)
    throw usage_error("InvalidArgument", "contamination fraction must be in [0,1]");
  if (spec.pixel_value < -1.0 || spec.pixel_value > 1.0)
    throw usage_error("InvalidArgument", "tag pixel value must be in [-1,1]");
  auto class_names = read_manifest_classes(src_manifest);
  const int C = static_cast<int>(class_names.size());
  if (spec.target_class < 0 || spec.target_class >= C)
    throw usage_error("IndexOutOfRange", "target class " + std::to_string(spec.target_class));
  fs::path src_root = src_manifest.parent_path();
  if (fs::exists(out_dir) && fs::equivalent(fs::absolute(src_root), fs::absolute(out_dir)))
    throw usage_error("InvalidArgument", "contaminate must write to a new directory");

  // Box checks need the image size; take it from the first image.
  auto first_records = load_manifest(src_manifest, class_names, 1 << 30);
  if (first_records.empty()) throw data_error("EmptyPositiveSet", "manifest has no rows");
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : src_root / p; };
  Raster probe = read_png_gray(resolve(first_records.front().image_path));
  auto records = load_manifest(src_manifest, class_names, probe.width);

  const Box& region = spec.tag_region;
  auto [tw, th] = font::text_extent(spec.tag_text);
  if (!box_inside(region, probe.width, probe.height) || tw > region.w || th > region.h)
    throw usage_error("TagOutOfBounds", "tag region must lie inside the image and fit the rendered text");

  std::vector<int64_t> pos;
  for (size_t i = 0; i < records.size(); ++i)
    if (records[i].labels[spec.target_class]) pos.push_back(static_cast<int64_t>(i));
  if (pos.empty()) throw data_error("EmptyPositiveSet", "class " + std::to_string(spec.target_class) + " has no positives");

  auto k = static_cast<size_t>(std::lround(spec.fraction * static_cast<double>(pos.size())));
  Rng rng(derive_seed(seed, {0xc0a7}));
  auto chosen = sample_without_replacement(pos, k, rng);
  std::sort(chosen.begin(), chosen.end());
  std::vector<bool> tagged(records.size(), false);
  for (auto i : chosen) tagged[i] = true;

  fs::create_directories(out_dir);
  std::vector<InjectionEntry> log;
  for (size_t i = 0; i < records.size(); ++i) {
    auto& rec = records[i];
    fs::path src = resolve(rec.image_path);
    fs::path rel = fs::path(rec.image_path).is_absolute() ? fs::path("images") / src.filename() : fs::path(rec.image_path);
    fs::create_directories((out_dir / rel).parent_path());
    if (tagged[i]) {
      Raster img = read_png_gray(src);
      std::uint8_t v = to_byte(spec.pixel_value);
      font::render(spec.tag_text, region.x, region.y, [&](int x, int y) { img.at(x, y) = v; });
      write_png(out_dir / rel, img);
      log.push_back({rec.id, spec.target_class, Box{spec.target_class, region.x, region.y, region.w, region.h}});
    } else {
      fs::copy_file(src, out_dir / rel, fs::copy_options::overwrite_existing);
    }
    rec.image_path = rel.generic_string();
    for (auto& m : rec.seg_masks) {
      fs::path msrc = resolve(m.path);
      fs::path mrel = fs::path(m.path).is_absolute() ? fs::path("masks") / msrc.filename() : fs::path(m.path);
      fs::create_directories((out_dir / mrel).parent_path());
      fs::copy_file(msrc, out_dir / mrel, fs::copy_options::overwrite_existing);
      m.path = mrel.generic_string();
    }
  }
  write_manifest(out_dir / "manifest.csv", class_names, records);
  std::ofstream out(out_dir / "injection_log.jsonl");
  for (const auto& e : log) out << to_json(e).dump() << "\n";
  return log;
}

}  // namespace attrinet
