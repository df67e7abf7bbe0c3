#include <gtest/gtest.h>

#include <algorithm>

#include "support/gradcheck.hpp"
#include "vangogh/conditioning.hpp"
#include "vangogh/synth.hpp"

using namespace vangogh;

namespace {

CondConfig small_config() {
  CondConfig c;
  c.dim = 32;
  c.queries = 4;
  c.heads = 2;
  return c;
}

template <class T>
struct Fixture {
  ParameterStore<T> store;
  Rng rng{42};
  Conditioner<T> cond;
  explicit Fixture(const CondConfig& cfg = small_config())
      : cond(Scope<T>{&store, "", ParamGroup::spatial, &rng}, cfg) {}
};

Frame solid(Rgb c, int64_t side = 64) {
  Frame f(side, side);
  for (size_t i = 0; i < f.pixels().size(); ++i) f.pixels()[i] = c[i % 3];
  return f;
}

template <class T>
double l2(const Var<T>& a, const Var<T>& b) {
  double s = 0;
  for (int64_t i = 0; i < a.numel(); ++i) s += std::pow(double(a.value()[i]) - double(b.value()[i]), 2);
  return std::sqrt(s);
}

}  // namespace

TEST(Tokenize, LowercaseHashedAndTruncated) {
  CondConfig cfg;
  EXPECT_EQ(tokenize("Red  CAR", cfg), tokenize("red car", cfg));
  EXPECT_TRUE(tokenize("   ", cfg).empty());
  std::string many;
  for (int i = 0; i < 40; ++i) many += "w" + std::to_string(i) + " ";
  EXPECT_EQ(static_cast<int64_t>(tokenize(many, cfg).size()), cfg.text_len);
  for (auto id : tokenize(many, cfg)) {
    EXPECT_GE(id, 2);
    EXPECT_LT(id, cfg.vocab);
  }
}

TEST(Tokenize, PromptTooLong) {
  CondConfig cfg;
  try {
    tokenize(std::string(257, 'a'), cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::prompt_too_long);
  }
  EXPECT_NO_THROW(tokenize(std::string(256, 'a'), cfg));
}

TEST(TextEncoder, NullDeterministicAndDistinct) {
  Fixture<float> f;
  const auto& te = f.cond.text_encoder();
  auto e = te("");
  EXPECT_TRUE(e.is_null);
  EXPECT_EQ(e.tokens.value(), te.null_embedding().tokens.value());
  EXPECT_EQ(te("red car").tokens.value(), te("red car").tokens.value());
  EXPECT_GT(l2(te("red car").tokens, te("blue car").tokens), 0.0);
}

TEST(ColorProjector, TokenCountAndOrder) {
  Fixture<float> f(CondConfig{});
  const auto& cp = f.cond.color_projector();
  auto p = cp.patch_embeddings(solid({0.5f, 0.2f, 0.1f}));
  EXPECT_EQ(p[0].size(1), 16);
  EXPECT_EQ(p[1].size(1), 64);
  EXPECT_EQ(p[2].size(1), 256);
  EXPECT_EQ(cp(solid({0.5f, 0.2f, 0.1f})).tokens.shape(), (Shape{1, 336, 128}));
}

TEST(ColorProjector, FinePatchPermutationPermutesEmbeddings) {
  Fixture<float> f;
  const auto& cp = f.cond.color_projector();
  Frame a = translating_clip(1, 64, 64, 0, 0, 3)[0];
  // swap two 4x4 patches (fine scale) and check the fine embedding multiset
  Frame b = a;
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) std::swap(b.at(y, x, c), b.at(40 + y, 20 + x, c));
  auto ea = cp.patch_embeddings(a)[2].value(), eb = cp.patch_embeddings(b)[2].value();
  const int64_t D = ea.size(2);
  auto rows = [D](const Tensor<float>& t) {
    std::vector<std::vector<float>> r;
    for (int64_t i = 0; i < t.size(1); ++i) r.emplace_back(t.data() + i * D, t.data() + (i + 1) * D);
    std::sort(r.begin(), r.end());
    return r;
  };
  EXPECT_EQ(rows(ea), rows(eb));
  EXPECT_NE(ea, eb);
}

TEST(ColorProjector, GrayAndRedDifferAndDeterministic) {
  Fixture<float> f;
  const auto& cp = f.cond.color_projector();
  auto g = cp(solid({0.5f, 0.5f, 0.5f})), r = cp(solid({1.0f, 0.0f, 0.0f}));
  EXPECT_GT(l2(g.tokens, r.tokens), 0.0);
  EXPECT_EQ(cp(solid({1.0f, 0.0f, 0.0f})).tokens.value(), r.tokens.value());
  // non-square exemplars are resized to the model resolution
  EXPECT_EQ(cp(Frame(40, 80, 0.3f)).tokens.size(1), small_config().color_tokens());
}

TEST(DualQFormer, FusionFormulaAndEndpoints) {
  Fixture<float> f;
  const auto& c = f.cond;
  auto te = c.text_encoder()("a red car");
  auto cf = c.color_projector()(solid({0.9f, 0.1f, 0.1f}));
  auto only_text = c.qformer()(te, cf, 1.0, 0.0);
  EXPECT_EQ(only_text.l_fuse.value(), only_text.l_text.value());
  auto none = c.qformer()(te, cf, 0.0, 0.0);
  for (float v : none.l_fuse.value().span()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(only_text.l_fuse.shape(), (Shape{1, 4, 32}));
}

TEST(DualQFormer, LinearityOverRandomTriples) {
  Fixture<double> f;
  const auto& c = f.cond;
  auto te = c.text_encoder()("sunset over water");
  auto cf = c.color_projector()(translating_clip(1, 64, 64, 0, 0, 5)[0]);
  auto t10 = c.qformer()(te, cf, 1, 0).l_fuse.value();
  auto t01 = c.qformer()(te, cf, 0, 1).l_fuse.value();
  Rng rng(6);
  for (int k = 0; k < 50; ++k) {
    const double l1 = rng.uniform(-2, 2), l2v = rng.uniform(-2, 2);
    auto got = c.qformer()(te, cf, l1, l2v).l_fuse.value();
    for (int64_t i = 0; i < got.numel(); ++i) ASSERT_NEAR(got[i], l1 * t10[i] + l2v * t01[i], 1e-6);
  }
}

TEST(DualQFormer, ColorScaleSweepIsLinear) {
  Fixture<double> f;
  const auto& c = f.cond;
  auto te = c.text_encoder()("grass");
  auto cf = c.color_projector()(solid({0.2f, 0.8f, 0.2f}));
  auto base = c.qformer()(te, cf, 1, 0);
  for (double l2v : {0.25, 0.5, 1.0, 2.0}) {
    auto r = c.qformer()(te, cf, 1, l2v);
    for (int64_t i = 0; i < r.l_fuse.numel(); ++i)
      ASSERT_NEAR(r.l_fuse.value()[i] - base.l_fuse.value()[i], l2v * r.l_color.value()[i], 1e-9);
  }
}

TEST(DualQFormer, PaddingBeyondMaskIsIgnored) {
  Fixture<double> f;
  const auto& c = f.cond;
  auto te = c.text_encoder()("old film footage");
  auto cf = c.color_projector().null_features();
  auto a = c.qformer()(te, cf, 1, 1).l_fuse.value();
  auto b = c.qformer()(pad_text(te, 7, 3.0), cf, 1, 1).l_fuse.value();
  for (int64_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(DualQFormer, LambdaGradientEqualsTextQueries) {
  Fixture<double> f;
  const auto& c = f.cond;
  auto q = c.qformer()(c.text_encoder()("blue sky"), c.color_projector()(solid({0.1f, 0.3f, 0.9f})), 1, 1);
  const Tensor<double> lt = q.l_text.value(), lc = q.l_color.value();
  // d/dλ1 of sum(l_fuse * w) = sum(l_text * w); compare autodiff and finite differences
  const Tensor<double> w = vangogh::testing::randn(lt.shape(), 7);
  auto fn = [&](const std::vector<Var<double>>& v) {
    return sum(fuse_queries(constant(lt), constant(lc), v[0], v[1]) * constant(w));
  };
  auto r = vangogh::testing::gradcheck(fn, {Tensor<double>::scalar(1.0), Tensor<double>::scalar(1.0)});
  EXPECT_LT(r.rel_error, 1e-5);
  Var<double> l1(Tensor<double>::scalar(0.7), true), l2v(Tensor<double>::scalar(0.3), true);
  fn({l1, l2v}).backward();
  double expect = 0;
  for (int64_t i = 0; i < lt.numel(); ++i) expect += lt[i] * w[i];
  EXPECT_NEAR(l1.grad()[0], expect, 1e-9);
}

TEST(Conditioner, ParametersInConditioningGroup) {
  Fixture<float> f;
  EXPECT_GT(f.store.parameter_count(), 0);
  for (const auto& e : f.store.entries()) EXPECT_EQ(e.group, ParamGroup::conditioning) << e.name;
}

TEST(ConditionBundle, FlagsAndDefaults) {
  Fixture<float> f;
  Video clip = translating_clip(5, 32, 32, 1, 0, 8);
  Video gray = to_grayscale(clip);
  auto none = build_condition_bundle<float>(f.cond, gray, std::nullopt, std::nullopt, std::nullopt, std::nullopt, 1, 1);
  EXPECT_EQ(none.flags, (ConditionFlags{false, false, false}));
  EXPECT_EQ(none.hints.canvas, gray);
  EXPECT_TRUE(std::all_of(none.hints.mask.begin(), none.hints.mask.end(), [](uint8_t m) { return m == 0; }));
  EXPECT_FALSE(none.depth.has_value());

  HintSet h;
  h.cell_side = 4;
  h.anchors = {{0, 10, 10, {1, 0, 0}}};
  auto hints_only = build_condition_bundle<float>(f.cond, gray, std::string(""), std::nullopt, h, std::nullopt, 1, 1);
  EXPECT_EQ(hints_only.flags, (ConditionFlags{false, false, true}));
  EXPECT_EQ(hints_only.fused.l_fuse.value(), none.fused.l_fuse.value());
  EXPECT_EQ(hints_only.hints.at(0, 10, 10), 1);
  EXPECT_EQ(hints_only.hints.canvas[0].at(10, 10, 0), 1.0f);

  auto all = build_condition_bundle<float>(f.cond, gray, std::string("a red ball"), clip[0], h, gray, 1, 1);
  EXPECT_EQ(all.flags, (ConditionFlags{true, true, true}));
  EXPECT_TRUE(all.depth.has_value());
  EXPECT_GT(l2(all.fused.l_fuse, none.fused.l_fuse), 0.0);
}

TEST(ConditionBundle, RejectsBadHintsAndDepth) {
  Fixture<float> f;
  Video gray = to_grayscale(translating_clip(3, 16, 16, 0, 0, 9));
  HintSet h;
  h.anchors = {{5, 1, 1, {1, 0, 0}}};
  EXPECT_THROW(build_condition_bundle<float>(f.cond, gray, std::nullopt, std::nullopt, h, std::nullopt, 1, 1), Error);
  Video small_depth = to_grayscale(translating_clip(2, 16, 16, 0, 0, 9));
  EXPECT_THROW(
      build_condition_bundle<float>(f.cond, gray, std::nullopt, std::nullopt, std::nullopt, small_depth, 1, 1),
      Error);
}
