#pragma once

// The full model: generator, critic, one logistic-regression head and one pair
// of class centers per class, plus checkpoint persistence and batched inference.

#include <torch/torch.h>

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "attrinet/checkpoint.hpp"
#include "attrinet/classifier.hpp"
#include "attrinet/critic.hpp"
#include "attrinet/generator.hpp"
#include "attrinet/losses.hpp"

namespace attrinet {

struct AttriNet {
  ArchConfig arch;
  Generator generator{nullptr};
  Critic critic{nullptr};
  std::vector<LogRegHead> heads;
  std::vector<ClassCenterPair> centers;
  std::vector<double> thresholds;  // empty until calibrated

  AttriNet(const ArchConfig& a, std::uint64_t seed) : arch(a) {
    arch.validate();
    torch::manual_seed(seed);
    generator = Generator(arch);
    critic = Critic(arch);
    const int grid = arch.image_size / arch.pool_factor;
    for (int c = 0; c < arch.num_classes; ++c) {
      heads.emplace_back(grid, grid, arch.pool_factor);
      centers.push_back(ClassCenterPair::zeros(arch.image_size, arch.image_size));
    }
  }

  int num_classes() const { return arch.num_classes; }

  void train_mode(bool on) {
    generator->train(on);
    critic->train(on);
    for (auto& h : heads) h->train(on);
  }

  /// Attribution maps of class c for `images` (N,1,H,W), without gradients, in chunks.
  torch::Tensor attributions(const torch::Tensor& images, int c, int64_t chunk = 32) {
    torch::NoGradGuard no_grad;
    auto t = make_task_code(c, arch.num_classes);
    std::vector<torch::Tensor> parts;
    for (int64_t i = 0; i < images.size(0); i += chunk)
      parts.push_back(generator->forward(images.slice(0, i, std::min(i + chunk, images.size(0))), t));
    return torch::cat(parts, 0);
  }

  /// Logits (N,) of class c.
  torch::Tensor logits(const torch::Tensor& attribution_maps, int c) {
    torch::NoGradGuard no_grad;
    return heads[c]->logit(attribution_maps);
  }

  /// Probabilities (N,C) for every class.
  torch::Tensor predict_all(const torch::Tensor& images) {
    std::vector<torch::Tensor> cols;
    for (int c = 0; c < arch.num_classes; ++c) cols.push_back(torch::sigmoid(logits(attributions(images, c), c)));
    return torch::stack(cols, 1);
  }

  void put(Archive& ar) const {
    put_module(ar, "generator", *generator);
    put_module(ar, "critic", *critic);
    for (int c = 0; c < arch.num_classes; ++c) {
      ar.tensors["heads/class_" + std::to_string(c)] = heads[c]->weight.detach().clone();
      ar.tensors["centers/class_" + std::to_string(c) + "_pos"] = centers[c].v_pos.clone();
      ar.tensors["centers/class_" + std::to_string(c) + "_neg"] = centers[c].v_neg.clone();
    }
    ar.meta["arch"] = to_json(arch);
    if (!thresholds.empty()) ar.meta["thresholds"] = thresholds;
  }

  void get(const Archive& ar) {
    get_module(ar, "generator", *generator);
    get_module(ar, "critic", *critic);
    torch::NoGradGuard no_grad;
    for (int c = 0; c < arch.num_classes; ++c) {
      const auto& w = ar.tensor("heads/class_" + std::to_string(c));
      if (w.sizes() != heads[c]->weight.sizes()) throw data_error("ShapeMismatch", "head weight grid shape");
      heads[c]->weight.copy_(w);
      centers[c].v_pos = ar.tensor("centers/class_" + std::to_string(c) + "_pos").clone();
      centers[c].v_neg = ar.tensor("centers/class_" + std::to_string(c) + "_neg").clone();
    }
    thresholds.clear();
    if (ar.meta.contains("thresholds")) thresholds = ar.meta["thresholds"].get<std::vector<double>>();
  }

  static AttriNet from_archive(const Archive& ar) {
    if (!ar.meta.contains("arch")) throw data_error("BadCheckpoint", "checkpoint header has no architecture");
    AttriNet m(arch_from_json(ar.meta["arch"]), 0);
    m.get(ar);
    return m;
  }

  static AttriNet load(const std::filesystem::path& path) { return from_archive(load_archive(path)); }

  void save(const std::filesystem::path& path, const nlohmann::json& extra_meta = nlohmann::json::object()) const {
    Archive ar;
    put(ar);
    for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it) ar.meta[it.key()] = it.value();
    save_archive(path, ar);
  }
};

}  // namespace attrinet
