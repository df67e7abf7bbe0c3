#include <gtest/gtest.h>

#include <algorithm>

#include "support/gradcheck.hpp"
#include "vangogh/losses.hpp"
#include "vangogh/synth.hpp"

using namespace vangogh;
using vangogh::testing::gradcheck;
using vangogh::testing::randn;
using vangogh::testing::randu;
using VarD = Var<double>;
using Inputs = std::vector<VarD>;

namespace {

double median(std::vector<double> v) {
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  return v[v.size() / 2];
}

std::vector<double> interior(const std::vector<float>& f, int64_t h, int64_t w, int64_t margin) {
  std::vector<double> out;
  for (int64_t y = margin; y < h - margin; ++y)
    for (int64_t x = margin; x < w - margin; ++x) out.push_back(f[y * w + x]);
  return out;
}

}  // namespace

TEST(LdmLoss, ZeroOffsetAndBruteForce) {
  auto e = randn({2, 3, 4}, 1);
  EXPECT_EQ(ldm_loss(VarD(e), VarD(e)).item(), 0.0);
  auto shifted = e;
  for (auto& v : shifted.span()) v += 0.7;
  EXPECT_NEAR(ldm_loss(VarD(shifted), VarD(e)).item(), 0.49, 1e-12);
  auto o = randn({2, 3, 4}, 2);
  double acc = 0;
  for (int64_t i = 0; i < e.numel(); ++i) acc += (e[i] - o[i]) * (e[i] - o[i]);
  EXPECT_NEAR(ldm_loss(VarD(o), VarD(e)).item(), acc / e.numel(), 1e-12);
}

TEST(LdmLoss, ShapeMismatch) {
  EXPECT_THROW(ldm_loss(VarD(randn({2, 3}, 3)), VarD(randn({3, 2}, 4))), Error);
}

TEST(Features, DeterministicShapesAndDistinct) {
  FeaturePyramid<double> a, b;
  auto x = randu({1, 3, 64, 64}, 5, 0, 1);
  auto fa = a(VarD(x));
  auto fb = b(VarD(x));
  const int64_t sides[3] = {32, 16, 8};
  for (int l = 0; l < 3; ++l) {
    EXPECT_EQ(fa[l].value(), fb[l].value());
    EXPECT_EQ(fa[l].size(2), sides[l]);
    EXPECT_EQ(fa[l].size(3), sides[l]);
  }
  auto y = randu({1, 3, 64, 64}, 6, 0, 1);
  auto fy = a(VarD(y));
  double diff = 0;
  for (int64_t i = 0; i < fy[2].numel(); ++i) diff += std::abs(fy[2].value()[i] - fa[2].value()[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(Contextual, AffinityRowsSumToOne) {
  auto A = contextual_affinity(VarD(randn({8, 5, 5}, 7)), VarD(randn({8, 5, 5}, 8)), 0.1).value();
  const int64_t N = A.size(0);
  for (int64_t i = 0; i < N; ++i) {
    double s = 0;
    for (int64_t j = 0; j < N; ++j) s += A[i * N + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Contextual, SelfSimilarityDominates) {
  auto f = randn({8, 4, 4}, 9);
  auto A = contextual_affinity(VarD(f), VarD(f), 0.1).value();
  const int64_t N = A.size(0);
  for (int64_t i = 0; i < N; ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < N; ++j)
      if (A[i * N + j] > A[i * N + best]) best = j;
    EXPECT_EQ(best, i);
  }
}

TEST(Contextual, IdenticalInputIsMinimumOverPerturbations) {
  FeaturePyramid<double> fp;
  auto x = randu({1, 3, 32, 32}, 10, 0, 1);
  const double base = contextual_loss(VarD(x), VarD(x), fp).item();
  EXPECT_GE(base, 0.0);
  EXPECT_LT(base, 1e-6);
  for (int k = 0; k < 10; ++k) {
    auto p = x;
    auto noise = randn({1, 3, 32, 32}, 100 + k, 0.05);
    for (int64_t i = 0; i < p.numel(); ++i) p[i] = std::clamp(p[i] + noise[i], 0.0, 1.0);
    EXPECT_GT(contextual_loss(VarD(p), VarD(x), fp).item(), base);
  }
}

TEST(Contextual, GradcheckFourByFour) {
  FeaturePyramid<double> fp;
  auto target = randu({1, 3, 4, 4}, 11, 0, 1);
  auto r = gradcheck([&](const Inputs& v) { return contextual_loss(v[0], constant(target), fp); },
                     {randu({1, 3, 4, 4}, 12, 0, 1)});
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(Contextual, GradcheckSixteenBySixteen) {
  FeaturePyramid<double> fp;
  auto target = randu({1, 3, 16, 16}, 13, 0, 1);
  auto r = gradcheck([&](const Inputs& v) { return contextual_loss(v[0], constant(target), fp); },
                     {randu({1, 3, 16, 16}, 14, 0, 1)});
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(Flow, IdenticalFramesGiveZero) {
  Video v = translating_clip(1, 64, 64, 0, 0, 15);
  FlowField f = flow_estimate(v[0], v[0]);
  for (size_t i = 0; i < f.u.size(); ++i) ASSERT_LE(std::hypot(f.u[i], f.v[i]), 1e-3);
}

TEST(Flow, RecoversThreePixelTranslation) {
  Video v = translating_clip(2, 64, 64, 3, 0, 16);
  FlowField f = flow_estimate(v[0], v[1]);
  const double mu = median(interior(f.u, 64, 64, 8));
  const double mv = median(interior(f.v, 64, 64, 8));
  EXPECT_GE(mu, 2.0);
  EXPECT_LE(mu, 4.0);
  EXPECT_NEAR(mv, 0.0, 1.0);
}

TEST(Flow, ForwardBackwardConsistency) {
  Video v = translating_clip(2, 64, 64, 2, -1, 17);
  FlowField fw = flow_estimate(v[0], v[1]);
  FlowField bw = flow_estimate(v[1], v[0]);
  std::vector<float> su(fw.u.size()), sv(fw.v.size());
  for (size_t i = 0; i < su.size(); ++i) {
    su[i] = fw.u[i] + bw.u[i];
    sv[i] = fw.v[i] + bw.v[i];
  }
  std::vector<double> mag;
  auto iu = interior(su, 64, 64, 8), iv = interior(sv, 64, 64, 8);
  for (size_t i = 0; i < iu.size(); ++i) mag.push_back(std::hypot(iu[i], iv[i]));
  EXPECT_LE(median(mag), 1.0);
}

TEST(Flow, BrightnessShiftInvariant) {
  auto a = randu({3, 16, 16}, 18, 0.1, 0.8);
  auto b = randu({3, 16, 16}, 19, 0.1, 0.8);
  auto a2 = a, b2 = b;
  for (auto& x : a2.span()) x += 0.1;
  for (auto& x : b2.span()) x += 0.1;
  auto f1 = estimate_flow(VarD(a), VarD(b));
  auto f2 = estimate_flow(VarD(a2), VarD(b2));
  for (int64_t i = 0; i < f1.u.numel(); ++i) {
    EXPECT_NEAR(f1.u.value()[i], f2.u.value()[i], 1e-8);
    EXPECT_NEAR(f1.v.value()[i], f2.v.value()[i], 1e-8);
  }
}

TEST(Flow, ShapeMismatch) {
  EXPECT_THROW(flow_estimate(Frame(8, 8), Frame(8, 9)), Error);
}

TEST(FlowLoss, ZeroOnIdenticalAndLinearInGamma) {
  auto p1 = randu({3, 8, 8}, 20, 0, 1), p2 = randu({3, 8, 8}, 21, 0, 1);
  auto g1 = randu({3, 8, 8}, 22, 0, 1), g2 = randu({3, 8, 8}, 23, 0, 1);
  EXPECT_EQ(optical_flow_loss(VarD(p1), VarD(p2), VarD(p1), VarD(p2), 1.0).item(), 0.0);
  const double l1 = optical_flow_loss(VarD(p1), VarD(p2), VarD(g1), VarD(g2), 1.0).item();
  const double l2 = optical_flow_loss(VarD(p1), VarD(p2), VarD(g1), VarD(g2), 2.0).item();
  EXPECT_GT(l1, 0.0);
  EXPECT_NEAR(l2, 2.0 * l1, 1e-12);
}

TEST(FlowLoss, GradcheckFourByFour) {
  auto g1 = randu({3, 4, 4}, 24, 0, 1), g2 = randu({3, 4, 4}, 25, 0, 1);
  auto r = gradcheck(
      [&](const Inputs& v) { return optical_flow_loss(v[0], v[1], constant(g1), constant(g2), 1.0); },
      {randu({3, 4, 4}, 26, 0, 1), randu({3, 4, 4}, 27, 0, 1)});
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(FlowLoss, GradcheckWithWarpingLevels) {
  // 16x16 runs two pyramid levels, so warps of the finer level are exercised.
  Video clip = translating_clip(2, 16, 16, 1, 0, 28);
  auto g1 = frame_var<double>(clip[0]).value(), g2 = frame_var<double>(clip[1]).value();
  auto p1 = g1, p2 = g2;
  auto n = randn({3, 16, 16}, 29, 0.02);
  for (int64_t i = 0; i < p2.numel(); ++i) p2[i] += n[i];
  auto r = gradcheck(
      [&](const Inputs& v) { return optical_flow_loss(v[0], v[1], constant(g1), constant(g2), 1.0); }, {p1, p2});
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(LdmLoss, Gradcheck) {
  auto eps = randn({2, 4, 4, 4}, 30);
  auto r = gradcheck([&](const Inputs& v) { return ldm_loss(v[0], constant(eps)); }, {randn({2, 4, 4, 4}, 31)});
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(TotalLoss, StageTerms) {
  VarD ldm(Tensor<double>::scalar(0.5)), ctx(Tensor<double>::scalar(0.25)), flow(Tensor<double>::scalar(2.0));
  LossWeights w;
  auto img = total_loss(Stage::image, ldm, ctx, flow, w);
  EXPECT_DOUBLE_EQ(img.total.item(), 0.75);
  EXPECT_TRUE(img.contextual.has_value());
  EXPECT_FALSE(img.flow.has_value());
  auto vid = total_loss(Stage::video, ldm, ctx, flow, w);
  EXPECT_DOUBLE_EQ(vid.total.item(), 2.5);
  EXPECT_FALSE(vid.contextual.has_value());
  auto zero = total_loss(Stage::image, VarD(Tensor<double>::scalar(0)), VarD(Tensor<double>::scalar(0)), VarD{}, w);
  EXPECT_EQ(zero.total.item(), 0.0);
}

TEST(TotalLoss, FlowPairUniform) {
  Rng rng(32);
  const int64_t T = 9, draws = 10000;
  std::vector<int> counts(T - 1);
  for (int i = 0; i < draws; ++i) ++counts[sample_flow_pair(rng, T)];
  double chi2 = 0;
  const double e = static_cast<double>(draws) / (T - 1);
  for (int c : counts) chi2 += (c - e) * (c - e) / e;
  EXPECT_LT(chi2, 18.475);  // df = 7, alpha = 0.01
}
