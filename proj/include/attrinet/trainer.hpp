#pragma once

// Alternating critic / generator / classifier training with class-center
// updates, periodic checkpoints and validation-AUC model selection.

#include <torch/torch.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "attrinet/checkpoint.hpp"
#include "attrinet/classifier.hpp"
#include "attrinet/critic.hpp"
#include "attrinet/dataset.hpp"
#include "attrinet/error.hpp"
#include "attrinet/generator.hpp"
#include "attrinet/guidance.hpp"
#include "attrinet/losses.hpp"
#include "attrinet/metrics.hpp"
#include "attrinet/model.hpp"
#include "attrinet/random.hpp"

namespace attrinet {

struct TrainConfig {
  int generator_steps = 2000;
  int batch_size = 4;
  double lr_adam = 1e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double lr_centers = 0.1;
  int critic_steps_per_gen = 5;
  int critic_boost_every = 100;
  int critic_boost_steps = 100;
  int critic_boost_initial = 25;
  bool critic_boost_additive = true;  // boost steps add to the base steps instead of replacing them
  int classifier_steps_per_gen = 5;
  int checkpoint_every = 250;
  PixelReduction reg_pixels = PixelReduction::mean;  // L1 term: per-pixel mean of each map, or the plain sum
  std::string class_order = "cyclic";  // or "random" (fresh permutation of classes per round)
  GuidancePolicy guidance;
  LossWeights loss_weights;
  std::uint64_t seed = 0;

  void validate() const {
    for (int v : {generator_steps, batch_size, critic_steps_per_gen, critic_boost_every, classifier_steps_per_gen,
                  checkpoint_every})
      if (v < 1) throw usage_error("InvalidConfig", "training counts must be positive");
    if (critic_boost_steps < 0 || critic_boost_initial < 0)
      throw usage_error("InvalidConfig", "critic boost counts must be nonnegative");
    if (!(lr_adam > 0.0) || !(lr_centers >= 0.0)) throw usage_error("InvalidConfig", "learning rates must be positive");
    if (class_order != "cyclic" && class_order != "random")
      throw usage_error("InvalidConfig", "class_order must be cyclic or random");
    guidance.validate();
    loss_weights.validate();
  }
};

struct StepSchedule {
  int critic_updates = 0;
  int classifier_updates = 0;

  bool operator==(const StepSchedule&) const = default;
};

/// Updates to run at generator step `gen_step` (1-based).
inline StepSchedule schedule(int gen_step, const TrainConfig& cfg) {
  if (gen_step < 1) throw usage_error("InvalidArgument", "generator steps are counted from 1");
  bool boost = gen_step <= cfg.critic_boost_initial || gen_step % cfg.critic_boost_every == 0;
  int critic = cfg.critic_steps_per_gen;
  if (boost) critic = cfg.critic_boost_additive ? critic + cfg.critic_boost_steps : cfg.critic_boost_steps;
  return {critic, cfg.classifier_steps_per_gen};
}

struct LossRecord {
  int step = 0;
  int class_index = 0;
  std::string term;
  double value = 0.0;

  bool operator==(const LossRecord&) const = default;
};

struct CheckpointInfo {
  int step = 0;
  std::filesystem::path path;
  double mean_val_auc = std::numeric_limits<double>::quiet_NaN();
};

/// Highest mean validation AUC; ties (and missing AUCs) resolved by the earliest step.
inline CheckpointInfo select_best(const std::vector<CheckpointInfo>& checkpoints) {
  if (checkpoints.empty()) throw data_error("NoCheckpoints", "nothing to select from");
  const CheckpointInfo* best = &checkpoints.front();
  for (const auto& c : checkpoints) {
    bool better = false;
    if (std::isnan(best->mean_val_auc) && !std::isnan(c.mean_val_auc)) better = true;
    else if (!std::isnan(c.mean_val_auc) && c.mean_val_auc > best->mean_val_auc) better = true;
    else if (!std::isnan(c.mean_val_auc) && c.mean_val_auc == best->mean_val_auc && c.step < best->step) better = true;
    if (better) best = &c;
  }
  return *best;
}

/// Mean over classes of the AUC of `model` on `ds` (classes with a single label value are skipped).
inline double mean_auc(AttriNet& model, const Dataset& ds, std::vector<double>* per_class = nullptr) {
  auto probs = model.predict_all(ds.images()).to(torch::kFloat64).contiguous();
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < model.num_classes(); ++c) {
    std::vector<double> s(static_cast<size_t>(ds.size()));
    std::vector<int> l(static_cast<size_t>(ds.size()));
    for (int64_t i = 0; i < ds.size(); ++i) {
      s[i] = probs[i][c].item<double>();
      l[i] = ds.records()[i].labels[c];
    }
    double a = std::numeric_limits<double>::quiet_NaN();
    try {
      a = auc(s, l);
      sum += a;
      ++n;
    } catch (const Error&) {
    }
    if (per_class) per_class->push_back(a);
  }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

/// Youden thresholds of every class, from `model` scores on `ds`.
inline std::vector<double> calibrate_on(AttriNet& model, const Dataset& ds) {
  auto probs = model.predict_all(ds.images()).to(torch::kFloat64).contiguous();
  std::vector<double> tau;
  for (int c = 0; c < model.num_classes(); ++c) {
    std::vector<double> s;
    std::vector<int> l;
    for (int64_t i = 0; i < ds.size(); ++i) {
      s.push_back(probs[i][c].item<double>());
      l.push_back(ds.records()[i].labels[c]);
    }
    tau.push_back(calibrate_threshold(s, l, c));
  }
  return tau;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  const auto& w = c.loss_weights;
  return {{"generator_steps", c.generator_steps},
          {"batch_size", c.batch_size},
          {"lr_adam", c.lr_adam},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"lr_centers", c.lr_centers},
          {"critic_steps_per_gen", c.critic_steps_per_gen},
          {"critic_boost_every", c.critic_boost_every},
          {"critic_boost_steps", c.critic_boost_steps},
          {"critic_boost_initial", c.critic_boost_initial},
          {"critic_boost_additive", c.critic_boost_additive},
          {"classifier_steps_per_gen", c.classifier_steps_per_gen},
          {"checkpoint_every", c.checkpoint_every},
          {"class_order", c.class_order},
          {"reg_pixel_reduction", to_string(c.reg_pixels)},
          {"guidance",
           {{"mode", to_string(c.guidance.mode)}, {"oversample_annotated_freq", c.guidance.oversample_annotated_freq}}},
          {"loss_weights",
           {{"adv", w.adv},
            {"cls", w.cls},
            {"reg", w.reg},
            {"ctr", w.ctr},
            {"gd", w.gd},
            {"alpha_neg", w.alpha_neg},
            {"alpha_pos", w.alpha_pos},
            {"gp", w.gp}}},
          {"seed", c.seed}};
}

class Trainer {
 public:
  using Adam = torch::optim::Adam;

  /// `pseudo_masks` are the class-level masks used by mixed guidance for records without ground truth.
  Trainer(const Dataset& train, TrainConfig cfg, const ArchConfig& arch, std::filesystem::path out_dir,
          const Dataset* validation = nullptr, ClassMasks pseudo_masks = {})
      : train_(train),
        val_(validation),
        cfg_(std::move(cfg)),
        out_(std::move(out_dir)),
        pseudo_(std::move(pseudo_masks)),
        model_(arch, cfg_.seed) {
    cfg_.validate();
    if (arch.num_classes != train.num_classes())
      throw usage_error("InvalidConfig", "architecture class count differs from the dataset");
    if (arch.image_size != train.image_size())
      throw usage_error("InvalidConfig", "architecture image size differs from the dataset");
    auto opts = torch::optim::AdamOptions(cfg_.lr_adam).betas({cfg_.adam_beta1, cfg_.adam_beta2});
    gen_opt_ = std::make_unique<Adam>(model_.generator->parameters(), opts);
    critic_opt_ = std::make_unique<Adam>(model_.critic->parameters(), opts);
    for (auto& h : model_.heads) head_opts_.push_back(std::make_unique<Adam>(h->parameters(), opts));
    for (int c = 0; c < train.num_classes(); ++c) {
      std::vector<int64_t> ann, plain;
      for (auto i : train.positives(c)) (train.gt_mask(i, c) ? ann : plain).push_back(i);
      annotated_pos_.push_back(std::move(ann));
      unannotated_pos_.push_back(std::move(plain));
    }
  }

  AttriNet& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  int completed_steps() const { return step_; }
  const std::vector<LossRecord>& log() const { return log_; }
  const std::vector<CheckpointInfo>& checkpoints() const { return checkpoints_; }

  /// Class visited at generator step `gen_step`.
  int class_for_step(int gen_step) const {
    const int C = model_.num_classes();
    int round = (gen_step - 1) / C, pos = (gen_step - 1) % C;
    if (cfg_.class_order == "cyclic") return pos;
    std::vector<int> perm(static_cast<size_t>(C));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(cfg_.seed, {static_cast<std::uint64_t>(round), 0x9e7}));
    perm = sample_without_replacement(perm, perm.size(), rng);
    return perm[pos];
  }

  /// Batch indices for a step: positives and negatives of class c.
  std::pair<std::vector<int64_t>, std::vector<int64_t>> batch_indices(int gen_step, int c) const {
    auto seed = derive_seed(cfg_.seed, {static_cast<std::uint64_t>(gen_step), static_cast<std::uint64_t>(c), 1});
    auto [pos, neg] = sample_pair_indices(train_, c, cfg_.batch_size, seed);
    if (cfg_.guidance.mode != GuidanceMode::none && !annotated_pos_[c].empty()) {
      OversampleStream stream(annotated_pos_[c], unannotated_pos_[c], cfg_.guidance.oversample_annotated_freq,
                              derive_seed(seed, {3}));
      for (auto& p : pos) p = stream.next();
    }
    return {pos, neg};
  }

  /// Runs one generator step (with its critic, classifier and center updates).
  void train_step(int gen_step) {
    const auto t0 = std::chrono::steady_clock::now();
    const int c = class_for_step(gen_step);
    const auto task = make_task_code(c, model_.num_classes());
    const auto& w = cfg_.loss_weights;
    auto [pos_idx, neg_idx] = batch_indices(gen_step, c);
    auto pos = train_.batch(pos_idx);
    auto neg = train_.batch(neg_idx);
    auto plan = schedule(gen_step, cfg_);
    model_.train_mode(true);

    // Critic updates on the step's batches; the generator is frozen here.
    torch::Tensor fake;
    {
      torch::NoGradGuard no_grad;
      fake = counterfactual(pos.pixels, model_.generator->forward(pos.pixels, task));
    }
    double critic_value = 0.0, gp_value = 0.0;
    for (int k = 0; k < plan.critic_updates; ++k) {
      critic_opt_->zero_grad();
      auto real_scores = model_.critic->forward(neg.pixels, task);
      auto fake_scores = model_.critic->forward(fake, task);
      Rng eps_rng(derive_seed(cfg_.seed, {static_cast<std::uint64_t>(gen_step), static_cast<std::uint64_t>(k), 2}));
      auto eps = interpolation_weights(pos.size(), eps_rng);
      auto gp = gradient_penalty(model_.critic, neg.pixels, fake, task, eps);
      auto loss = critic_loss(real_scores, fake_scores, gp, w.gp);
      check_finite(gen_step, c, "critic", loss);
      loss.backward();
      critic_opt_->step();
      critic_value = loss.item<double>();
      gp_value = gp.item<double>();
    }

    // Generator update; the critic only passes gradients through.
    set_requires_grad(*model_.critic, false);
    gen_opt_->zero_grad();
    auto m_pos = model_.generator->forward(pos.pixels, task);
    auto m_neg = model_.generator->forward(neg.pixels, task);
    ClassLossTerms terms;
    terms.adv = adversarial_loss(model_.critic->forward(counterfactual(pos.pixels, m_pos), task));
    auto logits = torch::cat({model_.heads[c]->logit(m_pos), model_.heads[c]->logit(m_neg)});
    auto targets = torch::cat({torch::ones({pos.size()}), torch::zeros({neg.size()})});
    terms.cls = classification_loss_from_logits(logits, targets);
    terms.reg = reg_loss(m_neg, m_pos, w.alpha_neg, w.alpha_pos, cfg_.reg_pixels);
    terms.ctr = center_loss(m_neg, 0, model_.centers[c]) + center_loss(m_pos, 1, model_.centers[c]);
    terms.gd = guidance_term(c, pos, neg, m_pos, m_neg);
    auto total = total_generator_loss({terms}, w);
    check_finite(gen_step, c, "adv", terms.adv);
    check_finite(gen_step, c, "cls", terms.cls);
    check_finite(gen_step, c, "reg", terms.reg);
    check_finite(gen_step, c, "ctr", terms.ctr);
    if (terms.gd) check_finite(gen_step, c, "gd", *terms.gd);
    check_finite(gen_step, c, "total", total);
    total.backward();
    gen_opt_->step();
    set_requires_grad(*model_.critic, true);

    // Classifier updates: only the head of class c moves.
    auto feats_pos = m_pos.detach(), feats_neg = m_neg.detach();
    double head_value = 0.0;
    for (int k = 0; k < plan.classifier_updates; ++k) {
      head_opts_[c]->zero_grad();
      auto z = torch::cat({model_.heads[c]->logit(feats_pos), model_.heads[c]->logit(feats_neg)});
      auto loss = classification_loss_from_logits(z, targets);
      check_finite(gen_step, c, "head", loss);
      loss.backward();
      head_opts_[c]->step();
      head_value = loss.item<double>();
    }
    for (auto& h : model_.heads) h->weight.mutable_grad() = torch::Tensor();

    std::vector<int> bits(static_cast<size_t>(pos.size()), 1);
    bits.insert(bits.end(), static_cast<size_t>(neg.size()), 0);
    update_centers(model_.centers[c], torch::cat({feats_pos, feats_neg}), bits, cfg_.lr_centers);

    step_ = gen_step;
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::vector<std::pair<std::string, double>> row{{"critic", critic_value},
                                                    {"gp", gp_value},
                                                    {"adv", terms.adv.item<double>()},
                                                    {"cls", terms.cls.item<double>()},
                                                    {"reg", terms.reg.item<double>()},
                                                    {"ctr", terms.ctr.item<double>()},
                                                    {"gd", terms.gd ? terms.gd->item<double>() : 0.0},
                                                    {"total", total.item<double>()},
                                                    {"head", head_value}};
    for (const auto& [name, value] : row) log_.push_back({gen_step, c, name, value});
    write_logs(gen_step, c, row, wall);
  }

  /// Trains until cfg.generator_steps, checkpointing every cfg.checkpoint_every
  /// steps and at the end. Returns the selected (best) checkpoint.
  CheckpointInfo run() {
    std::filesystem::create_directories(out_ / "checkpoints");
    for (int s = step_ + 1; s <= cfg_.generator_steps; ++s) {
      train_step(s);
      if (s % cfg_.checkpoint_every == 0 || s == cfg_.generator_steps) checkpoint();
    }
    return finalize();
  }

  /// Writes a checkpoint for the current step and scores it on the validation set.
  CheckpointInfo checkpoint() {
    std::filesystem::create_directories(out_ / "checkpoints");
    std::ostringstream name;
    name << "step_" << std::setw(6) << std::setfill('0') << step_ << ".ckpt";
    CheckpointInfo info{step_, out_ / "checkpoints" / name.str()};
    save_state(info.path);
    if (val_) {
      model_.train_mode(false);
      info.mean_val_auc = mean_auc(model_, *val_);
    }
    checkpoints_.erase(std::remove_if(checkpoints_.begin(), checkpoints_.end(),
                                      [&](const CheckpointInfo& c) { return c.step == step_; }),
                       checkpoints_.end());
    checkpoints_.push_back(info);
    write_checkpoint_index();
    return info;
  }

  /// Picks the best checkpoint, calibrates thresholds on the validation set when
  /// available, and writes it to out/best.ckpt (+ thresholds.json).
  CheckpointInfo finalize() {
    auto best = select_best(checkpoints_);
    auto ar = load_archive(best.path);
    AttriNet chosen = AttriNet::from_archive(ar);
    if (val_) {
      chosen.thresholds = calibrate_on(chosen, *val_);
      nlohmann::json th;
      for (int c = 0; c < chosen.num_classes(); ++c) th[train_.class_names()[c]] = chosen.thresholds[c];
      std::ofstream(out_ / "thresholds.json") << th.dump(2) << "\n";
    }
    chosen.put(ar);
    save_archive(out_ / "best.ckpt", ar);
    return {best.step, out_ / "best.ckpt", best.mean_val_auc};
  }

  /// Full training state: model, optimizer moments, step, configuration.
  void save_state(const std::filesystem::path& path) const {
    Archive ar;
    model_.put(ar);
    ar.meta["step"] = step_;
    ar.meta["train_config"] = to_json(cfg_);
    ar.meta["class_names"] = train_.class_names();
    ar.blobs["optim/generator"] = serialize_optimizer(*gen_opt_);
    ar.blobs["optim/critic"] = serialize_optimizer(*critic_opt_);
    for (size_t c = 0; c < head_opts_.size(); ++c)
      ar.blobs["optim/head_" + std::to_string(c)] = serialize_optimizer(*head_opts_[c]);
    save_archive(path, ar);
  }

  /// Restores everything written by save_state; training continues at the next step.
  void resume(const std::filesystem::path& path) {
    auto ar = load_archive(path);
    model_.get(ar);
    step_ = ar.meta.at("step").get<int>();
    deserialize_optimizer(*gen_opt_, ar.blobs.at("optim/generator"));
    deserialize_optimizer(*critic_opt_, ar.blobs.at("optim/critic"));
    for (size_t c = 0; c < head_opts_.size(); ++c)
      deserialize_optimizer(*head_opts_[c], ar.blobs.at("optim/head_" + std::to_string(c)));
    resumed_ = true;
    // Earlier checkpoints of the same run stay candidates for best.ckpt.
    checkpoints_.clear();
    auto index = out_ / "checkpoints.json";
    if (std::filesystem::exists(index)) {
      std::ifstream in(index);
      for (const auto& e : nlohmann::json::parse(in)) {
        CheckpointInfo c{e.at("step").get<int>(), e.at("path").get<std::string>()};
        if (!e.at("mean_val_auc").is_null()) c.mean_val_auc = e.at("mean_val_auc").get<double>();
        if (c.step <= step_ && std::filesystem::exists(c.path)) checkpoints_.push_back(c);
      }
    }
  }

 private:
  static void set_requires_grad(torch::nn::Module& m, bool on) {
    for (auto& p : m.parameters()) p.requires_grad_(on);
  }

  static std::string serialize_optimizer(torch::optim::Optimizer& opt) {
    torch::serialize::OutputArchive oa;
    opt.save(oa);
    std::ostringstream os;
    oa.save_to(os);
    return os.str();
  }

  static void deserialize_optimizer(torch::optim::Optimizer& opt, const std::string& bytes) {
    torch::serialize::InputArchive ia;
    std::istringstream is(bytes);
    ia.load_from(is);
    opt.load(ia);
  }

  std::optional<torch::Tensor> guidance_term(int c, const ImageBatch& pos, const ImageBatch& neg,
                                             const torch::Tensor& m_pos, const torch::Tensor& m_neg) const {
    if (cfg_.guidance.mode == GuidanceMode::none || cfg_.loss_weights.gd == 0.0) return std::nullopt;
    const auto B = pos.size() + neg.size();
    const int S = train_.image_size();
    auto masks = torch::zeros({B, 1, S, S});
    auto active = torch::zeros({B});
    std::vector<int64_t> idx = pos.indices;
    idx.insert(idx.end(), neg.indices.begin(), neg.indices.end());
    bool any = false;
    for (int64_t i = 0; i < B; ++i) {
      if (auto g = select_mask(train_, idx[i], c, cfg_.guidance, pseudo_)) {
        masks[i][0].copy_(g->values);
        active[i] = 1.0;
        any = true;
      }
    }
    if (!any) return std::nullopt;
    auto per_item = guidance_loss_per_item(torch::cat({m_pos, m_neg}), masks);
    return (per_item * active).sum() / static_cast<double>(B);
  }

  void check_finite(int step, int c, const std::string& term, const torch::Tensor& v) {
    if (std::isfinite(v.item<double>())) return;
    std::filesystem::create_directories(out_);
    try {
      save_state(out_ / "nan_dump.ckpt");
    } catch (const std::exception&) {
    }
    throw numerical_error("NaNLoss", "step " + std::to_string(step) + " class " + std::to_string(c) + " term " + term +
                                         " is not finite (state dumped to nan_dump.ckpt)");
  }

  void write_logs(int step, int c, const std::vector<std::pair<std::string, double>>& row, double wall) {
    std::filesystem::create_directories(out_);
    bool fresh = !logs_open_ && !resumed_;
    auto mode = fresh ? std::ios::trunc : std::ios::app;
    std::ofstream loss(out_ / "loss_log.csv", std::ios::out | mode);
    std::ofstream train(out_ / "train_log.csv", std::ios::out | mode);
    if (fresh) {
      loss << "step,class,term,value\n";
      train << "step,class";
      for (const auto& [name, v] : row) train << "," << name;
      train << ",wall_time\n";
    }
    logs_open_ = true;
    loss << std::setprecision(17);
    train << std::setprecision(17);
    for (const auto& [name, v] : row) loss << step << "," << c << "," << name << "," << v << "\n";
    train << step << "," << c;
    for (const auto& [name, v] : row) train << "," << v;
    train << "," << wall << "\n";
  }

  void write_checkpoint_index() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& c : checkpoints_)
      j.push_back({{"step", c.step},
                   {"path", c.path.string()},
                   {"mean_val_auc", std::isnan(c.mean_val_auc) ? nlohmann::json(nullptr) : nlohmann::json(c.mean_val_auc)}});
    std::ofstream(out_ / "checkpoints.json") << j.dump(2) << "\n";
  }

  const Dataset& train_;
  const Dataset* val_;
  TrainConfig cfg_;
  std::filesystem::path out_;
  ClassMasks pseudo_;
  AttriNet model_;
  std::unique_ptr<Adam> gen_opt_, critic_opt_;
  std::vector<std::unique_ptr<Adam>> head_opts_;
  std::vector<std::vector<int64_t>> annotated_pos_, unannotated_pos_;
  int step_ = 0;
  bool logs_open_ = false;
  bool resumed_ = false;
  std::vector<LossRecord> log_;
  std::vector<CheckpointInfo> checkpoints_;
};

}  // namespace attrinet
