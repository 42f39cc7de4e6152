#include "../support/helpers.hpp"

using namespace attrinet;
using testing_support::error_code_of;

namespace {

double val(const torch::Tensor& t) { return t.item<double>(); }

torch::Tensor scores(std::vector<double> v) { return torch::tensor(v, torch::kFloat64); }

}  // namespace

TEST(CriticLoss, ClosedForms) {
  EXPECT_NEAR(val(critic_loss(scores({1, 1}), scores({0, 0}))), -1.0, 1e-12);
  EXPECT_NEAR(val(critic_loss(scores({0.5}), scores({0.5}))), 0.0, 1e-12);
  EXPECT_NEAR(val(critic_loss(scores({1}), scores({0}), torch::tensor(0.25, torch::kFloat64), 10.0)), 1.5, 1e-12);
}

TEST(CriticLoss, MatchesDirectMeanFormula) {
  torch::manual_seed(3);
  auto r = torch::randn({7}, torch::kFloat64), f = torch::randn({5}, torch::kFloat64);
  double expect = 0.0;
  for (int i = 0; i < 7; ++i) expect -= r[i].item<double>() / 7.0;
  for (int i = 0; i < 5; ++i) expect += f[i].item<double>() / 5.0;
  EXPECT_NEAR(val(critic_loss(r, f)), expect, 1e-7);
}

TEST(CriticLoss, EmptyBatch) {
  EXPECT_EQ(error_code_of([] { critic_loss(torch::zeros({0}), scores({1})); }), "EmptyBatch");
  EXPECT_EQ(error_code_of([] { adversarial_loss(torch::zeros({0})); }), "EmptyBatch");
}

TEST(AdversarialLoss, ClosedForms) {
  EXPECT_NEAR(val(adversarial_loss(scores({2, -2}))), 0.0, 1e-12);
  EXPECT_NEAR(val(adversarial_loss(scores({1, 1, 1}))), -1.0, 1e-12);
}

TEST(AdversarialLoss, NegatesCriticFakeTerm) {
  auto f = scores({0.3, -1.2, 2.5});
  auto zero_real = torch::zeros({1}, torch::kFloat64);
  EXPECT_NEAR(val(adversarial_loss(f)), -val(critic_loss(zero_real, f)), 1e-12);
}

TEST(RegLoss, ClosedForms) {
  auto z = torch::zeros({2, 1, 4, 4});
  EXPECT_EQ(val(reg_loss(z, z, 2, 1)), 0.0);
  auto half = torch::full({1, 1, 4, 4}, 0.5);
  EXPECT_NEAR(val(reg_loss(half, torch::Tensor(), 2, 1)), 16.0, 1e-9);
  EXPECT_NEAR(val(reg_loss(half, torch::Tensor(), 4, 1)), 32.0, 1e-9);
  EXPECT_NEAR(val(reg_loss(half, half, 2, 1)), 24.0, 1e-9);
}

TEST(RegLoss, PerImageSumThenBatchMean) {
  torch::manual_seed(1);
  auto mn = torch::randn({3, 1, 5, 5}, torch::kFloat64), mp = torch::randn({2, 1, 5, 5}, torch::kFloat64);
  auto l1 = [](const torch::Tensor& m) {
    double s = 0;
    for (int64_t b = 0; b < m.size(0); ++b)
      for (int64_t i = 0; i < 25; ++i) s += std::fabs(m[b][0].flatten()[i].item<double>());
    return s / m.size(0);
  };
  EXPECT_NEAR(val(reg_loss(mn, mp, 2, 1)), 2 * l1(mn) + l1(mp), 1e-9);
  EXPECT_NEAR(val(reg_loss(mn, mp, 2, 1, PixelReduction::mean)), (2 * l1(mn) + l1(mp)) / 25, 1e-9);
}

TEST(RegLoss, PixelMeanOfHalfMap) {
  auto half = torch::full({1, 1, 4, 4}, 0.5);
  EXPECT_NEAR(val(reg_loss(half, torch::Tensor(), 2, 1, PixelReduction::mean)), 1.0, 1e-9);
  EXPECT_EQ(parse_pixel_reduction("sum"), PixelReduction::sum);
  EXPECT_EQ(testing_support::error_code_of([] { parse_pixel_reduction("max"); }), "InvalidConfig");
}

TEST(ClassificationLoss, ClosedForms) {
  auto half = torch::full({3}, 0.5, torch::kFloat64);
  EXPECT_NEAR(val(classification_loss(half, torch::tensor({1.0, 0.0, 1.0}, torch::kFloat64))), std::log(2.0), 1e-9);
  EXPECT_NEAR(val(classification_loss(torch::tensor({1.0, 1e-15}, torch::kFloat64), torch::tensor({1.0, 0.0}, torch::kFloat64))),
              0.0, 1e-9);
  EXPECT_NEAR(val(classification_loss_from_logits(torch::zeros({4}, torch::kFloat64), torch::ones({4}))), std::log(2.0), 1e-9);
}

TEST(ClassificationLoss, BatchMeanOfPerItemBce) {
  torch::manual_seed(5);
  auto z = torch::randn({9}, torch::kFloat64);
  auto y = (torch::rand({9}) > 0.5).to(torch::kFloat64);
  double expect = 0;
  for (int i = 0; i < 9; ++i) {
    double p = 1.0 / (1.0 + std::exp(-z[i].item<double>()));
    double l = y[i].item<double>();
    expect += -(l * std::log(p) + (1 - l) * std::log(1 - p)) / 9.0;
  }
  EXPECT_NEAR(val(classification_loss(torch::sigmoid(z), y)), expect, 1e-9);
  EXPECT_NEAR(val(classification_loss_from_logits(z, y)), expect, 1e-9);
}

TEST(CenterLoss, ClosedForms) {
  auto centers = ClassCenterPair::zeros(4, 4);
  centers.v_pos = torch::randn({4, 4});
  auto m = centers.v_pos.clone().view({1, 1, 4, 4});
  EXPECT_NEAR(val(center_loss(m, 1, centers)), 0.0, 1e-12);
  EXPECT_NEAR(val(center_loss(m + 1, 1, centers)), 8.0, 1e-5);
  // Two maps symmetric about the center at distance d per pixel: loss 1/2 * 16 d^2.
  const double d = 0.3;
  auto pair = torch::cat({m + d, m - d});
  EXPECT_NEAR(val(center_loss(pair, 1, centers)), 0.5 * 16 * d * d, 1e-5);
  EXPECT_NEAR(val(center_loss(torch::ones({1, 1, 4, 4}), 0, centers)), 8.0, 1e-6);
}

TEST(CenterLoss, ShapeMismatch) {
  auto centers = ClassCenterPair::zeros(4, 4);
  EXPECT_EQ(error_code_of([&] { center_loss(torch::zeros({1, 1, 5, 5}), 0, centers); }), "ShapeMismatch");
}

TEST(UpdateCenters, Rules) {
  auto c = ClassCenterPair::zeros(3, 3);
  update_centers(c, torch::ones({1, 1, 3, 3}), {1}, 0.1);
  EXPECT_TRUE(torch::allclose(c.v_pos, torch::full({3, 3}, 0.1)));
  EXPECT_TRUE(torch::equal(c.v_neg, torch::zeros({3, 3})));  // no negative items: unchanged

  auto d = ClassCenterPair::zeros(3, 3);
  auto m = torch::randn({1, 1, 3, 3});
  update_centers(d, m, {0}, 1.0);
  EXPECT_TRUE(torch::allclose(d.v_neg, m[0][0]));
}

TEST(UpdateCenters, MatchesAnalyticGradientStep) {
  torch::manual_seed(2);
  auto c = ClassCenterPair::zeros(4, 4);
  c.v_pos = torch::randn({4, 4}, torch::kFloat64);
  c.v_neg = torch::randn({4, 4}, torch::kFloat64);
  auto maps = torch::randn({5, 1, 4, 4}, torch::kFloat64);
  std::vector<int> bits{1, 0, 1, 1, 0};
  // Gradient of the center loss of the matching items w.r.t. each center.
  auto expected = c;
  for (int bit : {0, 1}) {
    auto v = c.center(bit).clone().requires_grad_(true);
    std::vector<int64_t> idx;
    for (int i = 0; i < 5; ++i)
      if (bits[i] == bit) idx.push_back(i);
    auto sel = maps.index_select(0, torch::tensor(idx));
    auto loss = 0.5 * (sel.squeeze(1) - v).pow(2).flatten(1).sum(1).mean();
    auto g = torch::autograd::grad({loss}, {v})[0];
    expected.center(bit) = c.center(bit) - 0.1 * g;
  }
  update_centers(c, maps, bits, 0.1);
  EXPECT_LT((c.v_pos - expected.v_pos).abs().max().item<double>(), 1e-12);
  EXPECT_LT((c.v_neg - expected.v_neg).abs().max().item<double>(), 1e-12);
}

TEST(UpdateCenters, DriftBounded) {
  torch::manual_seed(8);
  auto c = ClassCenterPair::zeros(6, 6);
  c.v_pos = torch::randn({6, 6});
  auto old = c.v_pos.clone();
  auto maps = torch::randn({4, 1, 6, 6});
  const double lr = 0.1;
  update_centers(c, maps, {1, 1, 1, 1}, lr);
  double drift = (c.v_pos - old).abs().max().item<double>();
  double bound = lr * (old.unsqueeze(0) - maps.squeeze(1)).abs().max().item<double>();
  EXPECT_LE(drift, bound + 1e-6);
}

TEST(GuidanceLoss, ClosedForms) {
  auto m = torch::full({1, 1, 4, 4}, 0.3);
  EXPECT_NEAR(val(guidance_loss(m, torch::ones({4, 4}))), 0.0, 1e-7);
  auto g = torch::zeros({4, 4});
  g.slice(0, 0, 2).slice(1, 0, 2).fill_(1);
  EXPECT_NEAR(val(guidance_loss(m, g)), 0.75, 1e-7);
  auto outside = torch::zeros({1, 1, 4, 4});
  outside[0][0][3][3] = -2.0;
  EXPECT_NEAR(val(guidance_loss(outside, g)), 1.0, 1e-7);
  EXPECT_EQ(val(guidance_loss(torch::zeros({1, 1, 4, 4}), g)), 0.0);
}

TEST(GuidanceLoss, ScaleInvariantAndBounded) {
  torch::manual_seed(4);
  auto m = torch::randn({3, 1, 8, 8}, torch::kFloat64);
  auto g = (torch::rand({8, 8}) > 0.6).to(torch::kFloat64);
  auto base = guidance_loss_per_item(m, g);
  EXPECT_TRUE(torch::allclose(guidance_loss_per_item(3.7 * m, g), base, 1e-12, 1e-12));
  EXPECT_GE(base.min().item<double>(), 0.0);
  EXPECT_LE(base.max().item<double>(), 1.0);
}

TEST(GuidanceLoss, MovingMassInsideNeverIncreases) {
  torch::manual_seed(6);
  auto g = torch::zeros({6, 6}, torch::kFloat64);
  g.slice(0, 1, 4).slice(1, 1, 4).fill_(1);
  auto m = torch::rand({1, 1, 6, 6}, torch::kFloat64);
  double prev = val(guidance_loss(m, g));
  for (int step = 0; step < 10; ++step) {
    // Move 0.05 of mass from an outside pixel to an inside pixel.
    auto a = m.accessor<double, 4>();
    double take = std::min(0.05, a[0][0][5][5]);
    a[0][0][5][5] -= take;
    a[0][0][2][2] += take;
    double now = val(guidance_loss(m, g));
    EXPECT_LE(now, prev + 1e-12);
    prev = now;
  }
}

TEST(GuidanceLoss, ShapeMismatch) {
  EXPECT_EQ(error_code_of([] { guidance_loss(torch::ones({1, 1, 4, 4}), torch::ones({3, 3})); }), "ShapeMismatch");
}

TEST(TotalLoss, DefaultWeights) {
  LossWeights w;
  EXPECT_EQ(w.adv, 1.0);
  EXPECT_EQ(w.cls, 100.0);
  EXPECT_EQ(w.reg, 100.0);
  EXPECT_EQ(w.ctr, 0.01);
  EXPECT_EQ(w.gd, 30.0);
  EXPECT_EQ(w.alpha_neg, 2.0);
  EXPECT_EQ(w.alpha_pos, 1.0);
  auto one = torch::ones({}, torch::kFloat64);
  ClassLossTerms t{one, one, one, one, one};
  EXPECT_NEAR(val(total_generator_loss({t}, w)), 231.01, 1e-6);
  auto zero = torch::zeros({}, torch::kFloat64);
  EXPECT_EQ(val(total_generator_loss({{zero, zero, zero, zero, zero}}, w)), 0.0);
  ClassLossTerms no_gd{one, one, one, one, std::nullopt};
  EXPECT_NEAR(val(total_generator_loss({no_gd}, w)), 201.01, 1e-6);
  EXPECT_NEAR(val(total_generator_loss({t, t}, w)), 462.02, 1e-6);
}

TEST(TotalLoss, AblationDropsTermsExactly) {
  auto one = torch::ones({}, torch::kFloat64);
  auto nan = torch::full({}, std::nan(""), torch::kFloat64);
  ClassLossTerms t{one, one, one, nan, one};
  auto w = ablate(LossWeights{}, {"adv", "cls", "reg", "gd"});
  EXPECT_EQ(w.ctr, 0.0);
  EXPECT_NEAR(val(total_generator_loss({t}, w)), 231.0, 1e-9);
  EXPECT_NEAR(val(total_generator_loss({{one, one, one, one, one}}, ablate(LossWeights{}, {"adv"}))), 1.0, 1e-12);
  EXPECT_EQ(error_code_of([] { ablate(LossWeights{}, {"bogus"}); }), "InvalidConfig");
}
