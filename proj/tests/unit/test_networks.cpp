#include "../support/helpers.hpp"

using namespace attrinet;
using testing_support::error_code_of;
using testing_support::tiny_arch;

TEST(TaskCode, BlockStructureMatchesIndependentConstruction) {
  auto t = make_task_code(2, 5);
  ASSERT_EQ(t.vector.numel(), 100);
  for (int i = 0; i < 100; ++i) {
    double expect = (i / 20 == 2) ? 1.0 : 0.0;
    EXPECT_EQ(t.vector[i].item<double>(), expect) << i;
  }
  EXPECT_EQ(t.vector.sum().item<double>(), 20.0);
}

TEST(TaskCode, SingleClassAndRange) {
  auto t = make_task_code(0, 1);
  EXPECT_EQ(t.vector.numel(), 20);
  EXPECT_TRUE(torch::equal(t.vector, torch::ones({20})));
  EXPECT_EQ(error_code_of([] { make_task_code(5, 5); }), "IndexOutOfRange");
  EXPECT_EQ(error_code_of([] { make_task_code(-1, 5); }), "IndexOutOfRange");
}

TEST(ArchConfig, DeskAndFullShapes) {
  auto d = ArchConfig::desk(3, 64);
  EXPECT_EQ(d.gen_channels, 16);
  EXPECT_EQ(d.res_blocks, 3);
  EXPECT_EQ(d.pool_factor, 8);
  EXPECT_EQ(d.embed_dim(), 60);
  auto f = ArchConfig::full(5);
  EXPECT_EQ(f.image_size, 320);
  EXPECT_EQ(f.gen_channels, 64);
  EXPECT_EQ(f.res_blocks, 6);
  EXPECT_EQ(f.pool_factor, 32);
  EXPECT_EQ(f.embed_dim(), 100);
  EXPECT_EQ(320 / f.pool_factor, 10);
  auto back = arch_from_json(to_json(d));
  EXPECT_EQ(to_json(back), to_json(d));
  EXPECT_EQ(to_json(d).at("C"), 3);
  EXPECT_EQ(to_json(d).at("H"), 64);
  EXPECT_EQ(to_json(d).at("W"), 64);
}

TEST(Generator, OutputShapeAndRange) {
  torch::manual_seed(0);
  Generator g(ArchConfig::desk(3, 64));
  auto x = torch::rand({4, 1, 64, 64}) * 2 - 1;
  for (int c = 0; c < 3; ++c) {
    auto m = g->forward(x, c);
    EXPECT_EQ(m.sizes(), x.sizes());
    auto xh = counterfactual(x, m);
    EXPECT_GE(xh.min().item<double>(), -1 - 1e-6);
    EXPECT_LE(xh.max().item<double>(), 1 + 1e-6);
  }
}

TEST(Generator, OutputLayerClosedForms) {
  auto x = torch::full({1, 1, 1, 1}, 0.3);
  auto m = GeneratorImpl::attribution_from(x, torch::full({1, 1, 1, 1}, 1e6));
  EXPECT_NEAR(m.item<double>(), 0.7, 1e-6);

  torch::manual_seed(1);
  Generator g(tiny_arch());
  {
    torch::NoGradGuard no_grad;
    g->out_conv->weight.zero_();
    g->out_conv->bias.zero_();
  }
  auto xs = torch::rand({2, 1, 16, 16}) * 2 - 1;
  EXPECT_TRUE(torch::allclose(g->forward(xs, 0), torch::tanh(xs) - xs, 1e-6, 1e-7));
}

TEST(Generator, TaskSwitchChangesOutputAndAdaIN) {
  torch::manual_seed(2);
  Generator g(tiny_arch());
  auto x = torch::rand({1, 1, 16, 16}) * 2 - 1;
  EXPECT_GT((g->forward(x, 0) - g->forward(x, 1)).abs().sum().item<double>(), 0.0);
  auto a0 = g->adain_parameters(make_task_code(0, 3));
  auto a1 = g->adain_parameters(make_task_code(1, 3));
  ASSERT_EQ(a0.size(), a1.size());
  // three down sites, one residual block, two up sites
  EXPECT_EQ(a0.size(), 6u);
  for (size_t i = 0; i < a0.size(); ++i) EXPECT_FALSE(torch::equal(a0[i].first, a1[i].first)) << i;
}

TEST(Generator, DeterministicInEvalMode) {
  torch::manual_seed(3);
  Generator g(tiny_arch());
  g->eval();
  auto x = torch::rand({2, 1, 16, 16}) * 2 - 1;
  EXPECT_TRUE(torch::equal(g->forward(x, 2), g->forward(x, 2)));
}

TEST(Generator, ShapeErrors) {
  Generator g(tiny_arch());
  EXPECT_EQ(error_code_of([&] { g->forward(torch::zeros({1, 2, 16, 16}), 0); }), "ShapeMismatch");
  EXPECT_EQ(error_code_of([&] { g->forward(torch::zeros({1, 1, 18, 18}), 0); }), "ShapeMismatch");
  EXPECT_EQ(error_code_of([&] { g->forward(torch::zeros({1, 1, 16, 16}), make_task_code(0, 4)); }),
            "ShapeMismatch");
  EXPECT_EQ(error_code_of([] { counterfactual(torch::zeros({1, 1, 4, 4}), torch::zeros({1, 1, 4, 5})); }),
            "ShapeMismatch");
}

TEST(Counterfactual, Additivity) {
  auto x = torch::rand({2, 1, 8, 8});
  EXPECT_TRUE(torch::equal(counterfactual(x, torch::zeros_like(x)), x));
  auto m = torch::rand({2, 1, 8, 8}) * 0.1;
  EXPECT_TRUE(torch::equal(counterfactual(x, m), x + m));
}

TEST(Critic, ScoresShapeDeterminismAndTaskSwitch) {
  torch::manual_seed(4);
  Critic d(ArchConfig::desk(3, 64));
  auto x = torch::rand({4, 1, 64, 64}) * 2 - 1;
  auto s0 = d->forward(x, 0);
  EXPECT_EQ(s0.sizes(), torch::IntArrayRef({4}));
  EXPECT_TRUE(torch::isfinite(s0).all().item<bool>());
  EXPECT_TRUE(torch::equal(s0, d->forward(x, 0)));
  EXPECT_FALSE(torch::equal(s0, d->forward(x, 1)));
  EXPECT_EQ(error_code_of([&] { d->forward(torch::zeros({1, 1, 32, 32}), 0); }), "ShapeMismatch");
}

TEST(GradientPenalty, AnalyticCritics) {
  const int N = 64;
  auto real = torch::rand({3, 1, 8, 8}, torch::kFloat64), fake = torch::rand({3, 1, 8, 8}, torch::kFloat64);
  auto eps = torch::rand({3}, torch::kFloat64);
  CriticFn unit = [&](const torch::Tensor& x) { return x.flatten(1).sum(1) / std::sqrt(double(N)); };
  CriticFn constant = [&](const torch::Tensor& x) { return torch::full({x.size(0)}, 3.0, torch::kFloat64); };
  CriticFn twice = [&](const torch::Tensor& x) { return 2 * x.flatten(1).sum(1) / std::sqrt(double(N)); };
  EXPECT_NEAR(gradient_penalty(unit, real, fake, eps).item<double>(), 0.0, 1e-12);
  EXPECT_NEAR(gradient_penalty(constant, real, fake, eps).item<double>(), 1.0, 1e-12);
  EXPECT_NEAR(gradient_penalty(twice, real, fake, eps).item<double>(), 1.0, 1e-12);
  EXPECT_EQ(error_code_of([&] { gradient_penalty(unit, real, fake.slice(0, 0, 2), eps); }), "ShapeMismatch");
}

TEST(GradientPenalty, NonNegativeOnNetworkCritic) {
  torch::manual_seed(5);
  Critic d(tiny_arch());
  Rng rng(1);
  for (int i = 0; i < 5; ++i) {
    auto real = torch::rand({2, 1, 16, 16}) * 2 - 1, fake = torch::rand({2, 1, 16, 16}) * 2 - 1;
    auto gp = gradient_penalty(d, real, fake, make_task_code(i % 3, 3), interpolation_weights(2, rng));
    EXPECT_GE(gp.item<double>(), 0.0);
  }
}

TEST(InterpolationWeights, SeededAndInUnitInterval) {
  Rng a(9), b(9);
  auto ea = interpolation_weights(100, a), eb = interpolation_weights(100, b);
  EXPECT_TRUE(torch::equal(ea, eb));
  EXPECT_GE(ea.min().item<double>(), 0.0);
  EXPECT_LT(ea.max().item<double>(), 1.0);
}

TEST(Checkpoint, ModelRoundTripIsBitwise) {
  testing_support::TempDir dir("ckpt");
  AttriNet m(tiny_arch(), 7);
  {
    torch::NoGradGuard no_grad;
    m.heads[1]->weight.normal_();
  }
  m.centers[2].v_pos = torch::randn({16, 16});
  m.thresholds = {0.1, 0.2, 0.3};
  m.save(dir / "m.ckpt", {{"note", "x"}});
  auto back = AttriNet::load(dir / "m.ckpt");
  EXPECT_EQ(to_json(back.arch), to_json(m.arch));
  auto p0 = m.generator->named_parameters(), p1 = back.generator->named_parameters();
  for (const auto& kv : p0) EXPECT_TRUE(torch::equal(kv.value(), p1[kv.key()])) << kv.key();
  auto c0 = m.critic->named_parameters(), c1 = back.critic->named_parameters();
  for (const auto& kv : c0) EXPECT_TRUE(torch::equal(kv.value(), c1[kv.key()])) << kv.key();
  EXPECT_TRUE(torch::equal(back.heads[1]->weight, m.heads[1]->weight));
  EXPECT_TRUE(torch::equal(back.centers[2].v_pos, m.centers[2].v_pos));
  EXPECT_EQ(back.thresholds, m.thresholds);
  auto ar = load_archive(dir / "m.ckpt");
  EXPECT_EQ(ar.meta.at("note"), "x");
  EXPECT_TRUE(ar.tensors.count("heads/class_0"));
  EXPECT_TRUE(ar.tensors.count("centers/class_0_pos"));
  EXPECT_TRUE(ar.tensors.count("centers/class_0_neg"));
}

TEST(Checkpoint, RejectsGarbage) {
  testing_support::TempDir dir("ckpt_bad");
  testing_support::write_file(dir / "bad.ckpt", "not a checkpoint");
  EXPECT_EQ(error_code_of([&] { load_archive(dir / "bad.ckpt"); }), "BadCheckpoint");
  EXPECT_EQ(error_code_of([&] { load_archive(dir / "missing.ckpt"); }), "IOError");
}

TEST(Checkpoint, BlobsSurvive) {
  testing_support::TempDir dir("ckpt_blob");
  Archive ar;
  ar.blobs["b"] = std::string("\x00\x01\xff", 3);
  ar.tensors["t"] = torch::arange(6, torch::kFloat32).view({2, 3});
  save_archive(dir / "a.ckpt", ar);
  auto back = load_archive(dir / "a.ckpt");
  EXPECT_EQ(back.blobs.at("b"), ar.blobs.at("b"));
  EXPECT_TRUE(torch::equal(back.tensor("t"), ar.tensors.at("t")));
}
