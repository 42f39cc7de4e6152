#include "../support/helpers.hpp"

using namespace attrinet;
using testing_support::error_code_of;
using testing_support::read_file;
using testing_support::TempDir;
using testing_support::tiny_arch;

namespace {

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("trainer_data");
    make_synthetic(dir_->path() / "train", 24, 3, 32, 1);
    make_synthetic(dir_->path() / "val", 24, 3, 32, 2);
    train_ = new Dataset(Dataset::load(dir_->path() / "train" / "manifest.csv", 32));
    val_ = new Dataset(Dataset::load(dir_->path() / "val" / "manifest.csv", 32));
  }
  static void TearDownTestSuite() {
    delete train_;
    delete val_;
    delete dir_;
  }

  static TrainConfig quick_config() {
    TrainConfig cfg;
    cfg.generator_steps = 6;
    cfg.batch_size = 2;
    cfg.critic_steps_per_gen = 1;
    cfg.critic_boost_initial = 0;
    cfg.critic_boost_every = 1000;
    cfg.classifier_steps_per_gen = 2;
    cfg.checkpoint_every = 3;
    cfg.seed = 5;
    return cfg;
  }

  static TempDir* dir_;
  static Dataset* train_;
  static Dataset* val_;
};

TempDir* TrainerTest::dir_ = nullptr;
Dataset* TrainerTest::train_ = nullptr;
Dataset* TrainerTest::val_ = nullptr;

void expect_same_parameters(torch::nn::Module& a, torch::nn::Module& b) {
  auto pa = a.named_parameters(), pb = b.named_parameters();
  for (const auto& kv : pa) EXPECT_TRUE(torch::equal(kv.value(), pb[kv.key()])) << kv.key();
}

}  // namespace

TEST(Schedule, MatchesRuleOverLongRange) {
  TrainConfig cfg;
  for (int s = 1; s <= 10000; ++s) {
    int critic = 5 + ((s <= 25 || s % 100 == 0) ? 100 : 0);
    EXPECT_EQ(schedule(s, cfg), (StepSchedule{critic, 5})) << s;
  }
  EXPECT_EQ(schedule(26, cfg).critic_updates, 5);
  cfg.critic_boost_additive = false;
  EXPECT_EQ(schedule(1, cfg).critic_updates, 100);
  EXPECT_EQ(error_code_of([&] { schedule(0, cfg); }), "InvalidArgument");
}

TEST(SelectBest, HighestAucEarliestOnTies) {
  double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(select_best({{1, "a", 0.7}, {2, "b", 0.9}, {3, "c", 0.8}}).step, 2);
  EXPECT_EQ(select_best({{1, "a", 0.9}, {2, "b", 0.9}}).step, 1);
  EXPECT_EQ(select_best({{4, "a", nan}, {2, "b", 0.6}}).step, 2);
  EXPECT_EQ(select_best({{4, "a", nan}, {5, "b", nan}}).step, 4);
  EXPECT_EQ(error_code_of([] { select_best({}); }), "NoCheckpoints");
}

TEST(TrainConfigTest, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.batch_size = 0;
  EXPECT_EQ(error_code_of([&] { cfg.validate(); }), "InvalidConfig");
  cfg = TrainConfig{};
  cfg.class_order = "sorted";
  EXPECT_EQ(error_code_of([&] { cfg.validate(); }), "InvalidConfig");
  cfg = TrainConfig{};
  cfg.loss_weights.cls = -1;
  EXPECT_EQ(error_code_of([&] { cfg.validate(); }), "InvalidConfig");
}

TEST_F(TrainerTest, ClassOrder) {
  TempDir out("order");
  Trainer t(*train_, quick_config(), tiny_arch(3, 32), out.path());
  std::vector<int> seen;
  for (int s = 1; s <= 7; ++s) seen.push_back(t.class_for_step(s));
  EXPECT_EQ(seen, (std::vector<int>{0, 1, 2, 0, 1, 2, 0}));

  auto cfg = quick_config();
  cfg.class_order = "random";
  Trainer r(*train_, cfg, tiny_arch(3, 32), out.path());
  for (int round = 0; round < 5; ++round) {
    std::set<int> classes;
    for (int k = 1; k <= 3; ++k) classes.insert(r.class_for_step(3 * round + k));
    EXPECT_EQ(classes.size(), 3u);
  }
}

TEST_F(TrainerTest, OnlyTheVisitedHeadAndCentersMove) {
  TempDir out("isolation");
  Trainer t(*train_, quick_config(), tiny_arch(3, 32), out.path());
  auto& m = t.model();
  std::vector<torch::Tensor> heads, vpos;
  for (int c = 0; c < 3; ++c) {
    heads.push_back(m.heads[c]->weight.detach().clone());
    vpos.push_back(m.centers[c].v_pos.clone());
  }
  t.train_step(1);  // class 0
  EXPECT_FALSE(torch::equal(m.heads[0]->weight, heads[0]));
  EXPECT_FALSE(torch::equal(m.centers[0].v_pos, vpos[0]));
  for (int c = 1; c < 3; ++c) {
    EXPECT_TRUE(torch::equal(m.heads[c]->weight, heads[c])) << c;
    EXPECT_TRUE(torch::equal(m.centers[c].v_pos, vpos[c])) << c;
    EXPECT_FALSE(m.heads[c]->weight.grad().defined());
  }
  for (const auto& p : m.critic->parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST_F(TrainerTest, LogsEveryTermPerStep) {
  TempDir out("logs");
  auto cfg = quick_config();
  cfg.generator_steps = 2;
  Trainer t(*train_, cfg, tiny_arch(3, 32), out.path());
  t.train_step(1);
  t.train_step(2);
  EXPECT_EQ(t.log().size(), 2u * 9u);
  EXPECT_EQ(t.completed_steps(), 2);
  auto csv = read_file(out / "loss_log.csv");
  EXPECT_EQ(csv.rfind("step,class,term,value\n", 0), 0u);
  EXPECT_NE(csv.find("\n2,1,reg,"), std::string::npos);
  auto train_csv = read_file(out / "train_log.csv");
  EXPECT_EQ(train_csv.rfind("step,class,critic,gp,adv,cls,reg,ctr,gd,total,head,wall_time\n", 0), 0u);
  for (const auto& r : t.log()) EXPECT_TRUE(std::isfinite(r.value));
}

TEST_F(TrainerTest, SameSeedSameRun) {
  TempDir a("det_a"), b("det_b");
  auto cfg = quick_config();
  cfg.generator_steps = 4;
  Trainer ta(*train_, cfg, tiny_arch(3, 32), a.path()), tb(*train_, cfg, tiny_arch(3, 32), b.path());
  for (int s = 1; s <= 4; ++s) {
    ta.train_step(s);
    tb.train_step(s);
  }
  EXPECT_EQ(ta.log(), tb.log());
  expect_same_parameters(*ta.model().generator, *tb.model().generator);
  expect_same_parameters(*ta.model().critic, *tb.model().critic);
}

TEST_F(TrainerTest, ResumeReproducesUninterruptedRun) {
  TempDir a("resume_a"), b("resume_b");
  auto cfg = quick_config();
  cfg.generator_steps = 6;
  cfg.checkpoint_every = 3;
  Trainer full(*train_, cfg, tiny_arch(3, 32), a.path());
  full.run();

  {
    auto half = cfg;
    half.generator_steps = 3;
    Trainer first(*train_, half, tiny_arch(3, 32), b.path());
    first.run();
  }
  Trainer second(*train_, cfg, tiny_arch(3, 32), b.path());
  second.resume(b / "checkpoints/step_000003.ckpt");
  EXPECT_EQ(second.completed_steps(), 3);
  second.run();

  expect_same_parameters(*full.model().generator, *second.model().generator);
  expect_same_parameters(*full.model().critic, *second.model().critic);
  for (int c = 0; c < 3; ++c) {
    EXPECT_TRUE(torch::equal(full.model().heads[c]->weight, second.model().heads[c]->weight));
    EXPECT_TRUE(torch::equal(full.model().centers[c].v_neg, second.model().centers[c].v_neg));
  }
  EXPECT_EQ(read_file(a / "loss_log.csv"), read_file(b / "loss_log.csv"));
}

TEST_F(TrainerTest, RunWritesCheckpointsAndSelectsBest) {
  TempDir out("run");
  Trainer t(*train_, quick_config(), tiny_arch(3, 32), out.path(), val_);
  auto best = t.run();
  ASSERT_EQ(t.checkpoints().size(), 2u);
  for (const auto& c : t.checkpoints()) {
    EXPECT_TRUE(std::filesystem::exists(c.path));
    EXPECT_GE(c.mean_val_auc, 0.0);
    EXPECT_LE(c.mean_val_auc, 1.0);
  }
  EXPECT_EQ(best.step, select_best(t.checkpoints()).step);
  EXPECT_TRUE(std::filesystem::exists(out / "best.ckpt"));
  auto index = nlohmann::json::parse(read_file(out / "checkpoints.json"));
  EXPECT_EQ(index.size(), 2u);
  auto th = nlohmann::json::parse(read_file(out / "thresholds.json"));
  EXPECT_EQ(th.size(), 3u);
  auto model = AttriNet::load(out / "best.ckpt");
  EXPECT_EQ(model.thresholds.size(), 3u);
  auto ar = load_archive(t.checkpoints().front().path);
  EXPECT_EQ(ar.meta.at("step"), 3);
  EXPECT_TRUE(ar.blobs.count("optim/head_2"));
  EXPECT_EQ(ar.meta.at("train_config").at("seed"), 5);
}

TEST_F(TrainerTest, NonFiniteLossAbortsWithDump) {
  TempDir out("nan");
  Trainer t(*train_, quick_config(), tiny_arch(3, 32), out.path());
  {
    torch::NoGradGuard no_grad;
    t.model().generator->out_conv->bias.fill_(std::numeric_limits<float>::quiet_NaN());
  }
  EXPECT_EQ(error_code_of([&] { t.train_step(1); }), "NaNLoss");
  EXPECT_TRUE(std::filesystem::exists(out / "nan_dump.ckpt"));
}

TEST_F(TrainerTest, MismatchedArchitectureRejected) {
  TempDir out("mismatch");
  EXPECT_EQ(error_code_of([&] { Trainer(*train_, quick_config(), tiny_arch(2, 32), out.path()); }), "InvalidConfig");
  EXPECT_EQ(error_code_of([&] { Trainer(*train_, quick_config(), tiny_arch(3, 64), out.path()); }), "InvalidConfig");
}

TEST_F(TrainerTest, GuidedBatchesFavourAnnotatedPositives) {
  TempDir out("guided");
  auto cfg = quick_config();
  cfg.guidance.mode = GuidanceMode::mixed;
  cfg.guidance.oversample_annotated_freq = 1.0;
  auto pos = train_->positives(0);
  auto partial = train_->with_annotations_only_for({pos[0]});
  Trainer t(partial, cfg, tiny_arch(3, 32), out.path());
  for (int s = 1; s <= 12; s += 3) {
    auto [p, n] = t.batch_indices(s, 0);
    for (auto i : p) EXPECT_EQ(i, pos[0]);
  }
  t.train_step(1);
  bool gd_logged = false;
  for (const auto& r : t.log())
    if (r.term == "gd") gd_logged = r.value > 0.0;
  EXPECT_TRUE(gd_logged);
}
