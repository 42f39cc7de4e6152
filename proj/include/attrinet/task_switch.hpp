#pragma once

// Task codes, the task-embedding MLP, and AdaIN: the pieces that let one
// generator/critic pair switch between classes.

#include <torch/torch.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <string>

#include "attrinet/error.hpp"

namespace attrinet {

/// One-hot class selector repeated `kTaskRepeat` times per entry.
inline constexpr int kTaskRepeat = 20;

struct TaskCode {
  int class_index = 0;
  int num_classes = 1;
  torch::Tensor vector;  // (kTaskRepeat * num_classes,) float
};

inline TaskCode make_task_code(int class_index, int num_classes) {
  if (num_classes < 1) throw usage_error("InvalidArgument", "num_classes must be >= 1");
  if (class_index < 0 || class_index >= num_classes)
    throw data_error("IndexOutOfRange",
                     "class " + std::to_string(class_index) + " not in [0," + std::to_string(num_classes) + ")");
  TaskCode t;
  t.class_index = class_index;
  t.num_classes = num_classes;
  auto one_hot = torch::zeros({num_classes});
  one_hot[class_index] = 1.0;
  t.vector = one_hot.repeat_interleave(kTaskRepeat);
  return t;
}

/// Network shape shared by generator, critic and classifier heads.
struct ArchConfig {
  int num_classes = 3;
  int image_size = 64;
  std::string scale = "desk";
  int gen_channels = 16;    // width of the first generator conv; doubled twice on the way down
  int res_blocks = 3;
  int critic_channels = 16; // width of the first critic conv; doubled per stage
  int critic_layers = 4;
  int embed_layers = 8;
  int pool_factor = 8;

  int embed_dim() const { return kTaskRepeat * num_classes; }

  /// Architecture table as published (320x320 inputs).
  static ArchConfig full(int num_classes, int image_size = 320) {
    ArchConfig a;
    a.num_classes = num_classes;
    a.image_size = image_size;
    a.scale = "full";
    a.gen_channels = 64;
    a.res_blocks = 6;
    a.critic_channels = 64;
    a.critic_layers = 6;
    a.pool_factor = 32;
    return a;
  }

  /// CPU-sized variant: widths / 4, three bottleneck blocks, critic depth chosen
  /// so the final score map is at least 4x4.
  static ArchConfig desk(int num_classes, int image_size = 64) {
    ArchConfig a;
    a.num_classes = num_classes;
    a.image_size = image_size;
    a.scale = "desk";
    a.gen_channels = 16;
    a.res_blocks = 3;
    a.critic_channels = 16;
    int layers = static_cast<int>(std::log2(image_size)) - 2;
    a.critic_layers = std::clamp(layers, 1, 6);
    a.pool_factor = image_size >= 64 ? 8 : std::max(1, image_size / 8);
    return a;
  }

  void validate() const {
    if (num_classes < 1) throw usage_error("InvalidConfig", "num_classes must be >= 1");
    if (image_size % 4 != 0) throw usage_error("InvalidConfig", "image_size must be divisible by 4");
    if (pool_factor < 1 || image_size % pool_factor != 0)
      throw usage_error("InvalidConfig", "pool_factor must divide image_size");
    if (critic_layers < 1 || image_size % (1 << critic_layers) != 0 || image_size / (1 << critic_layers) < 2)
      throw usage_error("InvalidConfig", "critic_layers too deep for image_size");
    if (gen_channels < 1 || critic_channels < 1 || res_blocks < 0 || embed_layers < 1)
      throw usage_error("InvalidConfig", "channel and layer counts must be positive");
  }
};

inline nlohmann::json to_json(const ArchConfig& a) {
  return {{"C", a.num_classes},
          {"H", a.image_size},
          {"W", a.image_size},
          {"scale", a.scale},
          {"channels", {{"generator", a.gen_channels}, {"critic", a.critic_channels}}},
          {"res_blocks", a.res_blocks},
          {"critic_layers", a.critic_layers},
          {"embed_layers", a.embed_layers},
          {"pool_factor", a.pool_factor}};
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.num_classes = j.at("C").get<int>();
  a.image_size = j.at("H").get<int>();
  a.scale = j.at("scale").get<std::string>();
  a.gen_channels = j.at("channels").at("generator").get<int>();
  a.critic_channels = j.at("channels").at("critic").get<int>();
  a.res_blocks = j.at("res_blocks").get<int>();
  a.critic_layers = j.at("critic_layers").get<int>();
  a.embed_layers = j.at("embed_layers").get<int>();
  a.pool_factor = j.at("pool_factor").get<int>();
  return a;
}

/// Stack of fully connected layers (ReLU between layers) mapping a task code to
/// the embedding consumed by every AdaIN site.
struct TaskEmbeddingImpl : torch::nn::Module {
  torch::nn::ModuleList layers;

  TaskEmbeddingImpl(int dim, int depth) {
    for (int i = 0; i < depth; ++i) {
      auto fc = torch::nn::Linear(dim, dim);
      torch::nn::init::kaiming_normal_(fc->weight, 0.0, torch::kFanIn, torch::kReLU);
      torch::nn::init::zeros_(fc->bias);
      layers->push_back(fc);
    }
    register_module("layers", layers);
  }

  /// code: (E,) or (1,E) -> (1,E)
  torch::Tensor forward(torch::Tensor code) {
    auto h = code.dim() == 1 ? code.unsqueeze(0) : code;
    for (size_t i = 0; i < layers->size(); ++i) {
      h = layers[i]->as<torch::nn::Linear>()->forward(h);
      if (i + 1 < layers->size()) h = torch::relu(h);
    }
    return h;
  }
};
TORCH_MODULE(TaskEmbedding);

/// Per-channel mean/variance normalisation over H,W (no running stats). Written
/// out explicitly so double backward works for the gradient penalty.
inline torch::Tensor instance_normalize(const torch::Tensor& x, double eps = 1e-5) {
  auto mean = x.mean({2, 3}, true);
  auto centered = x - mean;
  auto var = centered.pow(2).mean({2, 3}, true);
  return centered * torch::rsqrt(var + eps);
}

/// Instance normalisation followed by a scale and shift predicted from the task embedding.
struct AdaINImpl : torch::nn::Module {
  torch::nn::Linear to_scale{nullptr}, to_shift{nullptr};
  int channels;

  AdaINImpl(int channels_, int embed_dim) : channels(channels_) {
    to_scale = register_module("scale", torch::nn::Linear(embed_dim, channels));
    to_shift = register_module("shift", torch::nn::Linear(embed_dim, channels));
    torch::nn::init::normal_(to_scale->weight, 0.0, 0.02);
    torch::nn::init::ones_(to_scale->bias);
    torch::nn::init::normal_(to_shift->weight, 0.0, 0.02);
    torch::nn::init::zeros_(to_shift->bias);
  }

  /// (scale, shift), each (1,C,1,1).
  std::pair<torch::Tensor, torch::Tensor> affine(const torch::Tensor& embedding) {
    return {to_scale->forward(embedding).view({-1, channels, 1, 1}),
            to_shift->forward(embedding).view({-1, channels, 1, 1})};
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& embedding) {
    auto [scale, shift] = affine(embedding);
    return instance_normalize(x) * scale + shift;
  }
};
TORCH_MODULE(AdaIN);

inline void init_conv_weights(torch::nn::Module& m) {
  for (auto& p : m.named_parameters(false)) {
    if (p.key() == "weight") torch::nn::init::normal_(p.value(), 0.0, 0.02);
    if (p.key() == "bias") torch::nn::init::zeros_(p.value());
  }
}

/// Conv (or transposed conv) -> AdaIN -> ReLU.
template <typename ConvT>
struct AdaConvImpl : torch::nn::Module {
  ConvT conv{nullptr};
  AdaIN norm{nullptr};

  AdaConvImpl(ConvT c, int out_channels, int embed_dim) {
    conv = register_module("conv", c);
    norm = register_module("adain", AdaIN(out_channels, embed_dim));
    init_conv_weights(*conv);
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& e) {
    return torch::relu(norm->forward(conv->forward(x), e));
  }
};

struct AdaConv2dImpl : AdaConvImpl<torch::nn::Conv2d> {
  AdaConv2dImpl(int in, int out, int kernel, int stride, int padding, int embed_dim)
      : AdaConvImpl(torch::nn::Conv2d(
                        torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding).bias(false)),
                    out, embed_dim) {}
};
TORCH_MODULE(AdaConv2d);

struct AdaDeconv2dImpl : AdaConvImpl<torch::nn::ConvTranspose2d> {
  AdaDeconv2dImpl(int in, int out, int kernel, int stride, int padding, int embed_dim)
      : AdaConvImpl(torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, out, kernel)
                                                   .stride(stride)
                                                   .padding(padding)
                                                   .bias(false)),
                    out, embed_dim) {}
};
TORCH_MODULE(AdaDeconv2d);

/// Residual bottleneck block: x + ReLU(AdaIN(conv3x3(x))).
struct AdaResBlockImpl : torch::nn::Module {
  AdaConv2d body{nullptr};

  AdaResBlockImpl(int channels, int embed_dim) {
    body = register_module("body", AdaConv2d(channels, channels, 3, 1, 1, embed_dim));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& e) { return x + body->forward(x, e); }
};
TORCH_MODULE(AdaResBlock);

}  // namespace attrinet
