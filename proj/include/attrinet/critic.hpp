#pragma once

// Task-switched Wasserstein critic D(x, t_c) and its gradient penalty.

#include <torch/torch.h>

#include <functional>

#include "attrinet/error.hpp"
#include "attrinet/random.hpp"
#include "attrinet/task_switch.hpp"

namespace attrinet {

inline constexpr double kGradientPenaltyWeight = 10.0;

struct CriticImpl : torch::nn::Module {
  ArchConfig arch;
  TaskEmbedding embedding{nullptr};
  torch::nn::ModuleList stages;
  torch::nn::Conv2d out_conv{nullptr};

  explicit CriticImpl(const ArchConfig& a) : arch(a) {
    arch.validate();
    const int E = arch.embed_dim();
    embedding = register_module("embedding", TaskEmbedding(E, arch.embed_layers));
    int in = 1;
    int out = arch.critic_channels;
    for (int i = 0; i < arch.critic_layers; ++i) {
      stages->push_back(AdaConv2d(in, out, 4, 2, 1, E));
      in = out;
      out *= 2;
    }
    register_module("stages", stages);
    out_conv = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, 1, 3).padding(1)));
    init_conv_weights(*out_conv);
  }

  /// One score per image: mean of the output score map. x: (B,1,H,W) -> (B,)
  torch::Tensor forward(const torch::Tensor& x, const TaskCode& t) {
    if (x.dim() != 4 || x.size(1) != 1 || x.size(2) != arch.image_size || x.size(3) != arch.image_size)
      throw data_error("ShapeMismatch", "critic input must be (B,1," + std::to_string(arch.image_size) + "," +
                                            std::to_string(arch.image_size) + ")");
    if (t.num_classes != arch.num_classes) throw data_error("ShapeMismatch", "task code class count mismatch");
    auto e = embedding->forward(t.vector.to(x.dtype()));
    auto h = x;
    for (auto& m : *stages) h = m->as<AdaConv2dImpl>()->forward(h, e);
    return out_conv->forward(h).mean({1, 2, 3});
  }

  torch::Tensor forward(const torch::Tensor& x, int class_index) {
    return forward(x, make_task_code(class_index, arch.num_classes));
  }
};
TORCH_MODULE(Critic);

/// Scalar-per-image critic function, used so analytic critics can be plugged in.
using CriticFn = std::function<torch::Tensor(const torch::Tensor&)>;

/// Per-item interpolation weights eps ~ U(0,1), drawn from a seeded stream.
inline torch::Tensor interpolation_weights(int64_t batch, Rng& rng, torch::Dtype dtype = torch::kFloat32) {
  auto eps = torch::empty({batch}, torch::kFloat64);
  for (int64_t i = 0; i < batch; ++i) eps[i] = uniform01(rng);
  return eps.to(dtype);
}

/// mean_b (||grad_x D(x_b)||_2 - 1)^2 at x = eps*real + (1-eps)*fake. The graph
/// is kept (create_graph) so the result can be differentiated again, with
/// respect to critic parameters and to real/fake if they carry gradients.
inline torch::Tensor gradient_penalty(const CriticFn& critic, const torch::Tensor& real, const torch::Tensor& fake,
                                      const torch::Tensor& eps) {
  if (real.sizes() != fake.sizes()) throw data_error("ShapeMismatch", "real and fake batches differ in shape");
  if (eps.dim() != 1 || eps.size(0) != real.size(0)) throw data_error("ShapeMismatch", "one eps per batch item");
  auto e = eps.to(real.dtype()).view({-1, 1, 1, 1});
  auto interp = e * real + (1 - e) * fake;
  if (!interp.requires_grad()) interp.requires_grad_(true);
  auto scores = critic(interp);
  torch::Tensor grad;
  if (scores.requires_grad())
    grad = torch::autograd::grad({scores.sum()}, {interp}, {}, /*retain_graph=*/true, /*create_graph=*/true,
                                 /*allow_unused=*/true)[0];
  if (!grad.defined()) grad = torch::zeros_like(interp);
  auto norms = grad.flatten(1).norm(2, 1);
  return (norms - 1).pow(2).mean();
}

inline torch::Tensor gradient_penalty(Critic& critic, const torch::Tensor& real, const torch::Tensor& fake,
                                      const TaskCode& t, const torch::Tensor& eps) {
  return gradient_penalty([&](const torch::Tensor& x) { return critic->forward(x, t); }, real, fake, eps);
}

}  // namespace attrinet
