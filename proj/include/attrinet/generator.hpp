#pragma once

// Class attribution generator M(x, t_c): an AdaIN-switched encoder /
// bottleneck / decoder whose output is a residual map M with x + M in [-1,1].

#include <torch/torch.h>

#include "attrinet/error.hpp"
#include "attrinet/task_switch.hpp"

namespace attrinet {

struct GeneratorImpl : torch::nn::Module {
  ArchConfig arch;
  TaskEmbedding embedding{nullptr};
  torch::nn::ModuleList down, bottleneck, up;
  torch::nn::Conv2d out_conv{nullptr};

  explicit GeneratorImpl(const ArchConfig& a) : arch(a) {
    arch.validate();
    const int E = arch.embed_dim();
    const int w = arch.gen_channels;
    embedding = register_module("embedding", TaskEmbedding(E, arch.embed_layers));
    down->push_back(AdaConv2d(1, w, 7, 1, 3, E));
    down->push_back(AdaConv2d(w, 2 * w, 4, 2, 1, E));
    down->push_back(AdaConv2d(2 * w, 4 * w, 4, 2, 1, E));
    for (int i = 0; i < arch.res_blocks; ++i) bottleneck->push_back(AdaResBlock(4 * w, E));
    up->push_back(AdaDeconv2d(4 * w, 2 * w, 4, 2, 1, E));
    up->push_back(AdaDeconv2d(2 * w, w, 4, 2, 1, E));
    register_module("down", down);
    register_module("bottleneck", bottleneck);
    register_module("up", up);
    out_conv = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(w, 1, 7).padding(3)));
    init_conv_weights(*out_conv);
  }

  /// Pre-tanh decoder output out_up for a batch x (B,1,H,W).
  torch::Tensor decode(const torch::Tensor& x, const TaskCode& t) {
    check_input(x, t);
    auto e = embedding->forward(t.vector.to(x.dtype()));
    auto h = x;
    for (auto& m : *down) h = m->as<AdaConv2dImpl>()->forward(h, e);
    for (auto& m : *bottleneck) h = m->as<AdaResBlockImpl>()->forward(h, e);
    for (auto& m : *up) h = m->as<AdaDeconv2dImpl>()->forward(h, e);
    return out_conv->forward(h);
  }

  /// Attribution map M = tanh(x + out_up) - x, same shape as x.
  torch::Tensor forward(const torch::Tensor& x, const TaskCode& t) { return attribution_from(x, decode(x, t)); }

  torch::Tensor forward(const torch::Tensor& x, int class_index) {
    return forward(x, make_task_code(class_index, arch.num_classes));
  }

  /// Output layer on its own, exposed so the saturation behaviour can be checked directly.
  static torch::Tensor attribution_from(const torch::Tensor& x, const torch::Tensor& out_up) {
    return torch::tanh(x + out_up) - x;
  }

  /// AdaIN (scale, shift) of every site for task t, in module order.
  std::vector<std::pair<torch::Tensor, torch::Tensor>> adain_parameters(const TaskCode& t) {
    auto e = embedding->forward(t.vector);
    std::vector<std::pair<torch::Tensor, torch::Tensor>> out;
    for (auto& m : modules())
      if (auto* ada = m->as<AdaINImpl>()) out.push_back(ada->affine(e));
    return out;
  }

 private:
  void check_input(const torch::Tensor& x, const TaskCode& t) const {
    if (x.dim() != 4 || x.size(1) != 1)
      throw data_error("ShapeMismatch", "generator input must be (B,1,H,W)");
    if (x.size(2) % 4 != 0 || x.size(3) % 4 != 0)
      throw data_error("ShapeMismatch", "generator input spatial size must be divisible by 4");
    if (t.num_classes != arch.num_classes)
      throw data_error("ShapeMismatch", "task code built for " + std::to_string(t.num_classes) + " classes, model has " +
                                            std::to_string(arch.num_classes));
  }
};
TORCH_MODULE(Generator);

/// x_hat = x + M.
inline torch::Tensor counterfactual(const torch::Tensor& x, const torch::Tensor& attribution) {
  if (x.sizes() != attribution.sizes()) throw data_error("ShapeMismatch", "image and attribution map differ in shape");
  return x + attribution;
}

}  // namespace attrinet
