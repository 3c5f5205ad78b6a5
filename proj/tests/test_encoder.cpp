#include <gtest/gtest.h>

#include <numeric>

#include "hico/encoder.hpp"
#include "hico/losses.hpp"
#include "test_util.hpp"

namespace hico {
namespace {

using test::random_tensor;

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.stem_channels = 4;
  cfg.stage_channels = {4, 4, 4, 4};
  cfg.fpn_channels = 4;
  cfg.embed_dim = 4;
  cfg.input_hw = 8;
  cfg.stem_stride = 1;
  return cfg;
}

Tensor frames(std::size_t n, std::size_t hw, std::uint64_t seed) { return random_tensor(Shape{n, 1, hw, hw}, seed, 0, 1); }

/// Nudges BN running stats away from their fresh values so eval mode is not an identity.
void warm_up(Model& m, std::size_t n) {
  Tape t;
  ForwardContext ctx(t, m, Mode::Train);
  view_forward(ctx, t.constant(frames(n, m.config.input_hw, 99)));
}

TEST(BackboneConfig, Validation) {
  BackboneConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.input_hw = 48;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.input_hw = 64;
  cfg.stage_channels[2] = 0;
  EXPECT_THROW(cfg.validate(), Error);
  BackboneConfig small = tiny_config();
  EXPECT_NO_THROW(small.validate());
  small.stem_stride = 3;
  EXPECT_THROW(small.validate(), Error);
}

TEST(Backbone, StrideChainAt64) {
  Model m = make_model(BackboneConfig{}, 1);
  Tape t;
  ForwardContext ctx(t, m, Mode::Train);
  PyramidFeatures p = fpn_forward(ctx, backbone_forward(ctx, t.constant(frames(2, 64, 1))));
  EXPECT_EQ(p.c2.shape(), (Shape{2, 8, 16, 16}));
  EXPECT_EQ(p.c3.shape(), (Shape{2, 16, 8, 8}));
  EXPECT_EQ(p.c4.shape(), (Shape{2, 32, 4, 4}));
  EXPECT_EQ(p.c5.shape(), (Shape{2, 64, 2, 2}));
  EXPECT_EQ(p.p2.shape(), (Shape{2, 32, 16, 16}));
  EXPECT_EQ(p.p3.shape(), (Shape{2, 32, 8, 8}));
  EXPECT_EQ(p.p4.shape(), (Shape{2, 32, 4, 4}));
  EXPECT_EQ(p.p5.shape(), (Shape{2, 32, 2, 2}));
}

TEST(Backbone, SmallestInputGivesUnitC5) {
  BackboneConfig cfg;
  cfg.input_hw = 32;
  Model m = make_model(cfg, 1);
  Tape t;
  ForwardContext ctx(t, m, Mode::Train);
  BackboneFeatures c = backbone_forward(ctx, t.constant(frames(2, 32, 2)));
  EXPECT_EQ(c.c5.shape(), (Shape{2, 64, 1, 1}));
}

TEST(Backbone, WrongSpatialSizeIsRejected) {
  Model m = make_model(BackboneConfig{}, 1);
  Tape t;
  ForwardContext ctx(t, m, Mode::Train);
  try {
    backbone_forward(ctx, t.constant(frames(2, 32, 1)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeError);
  }
}

TEST(Backbone, IdenticalFramesGiveIdenticalRowsInEval) {
  Model m = make_model(BackboneConfig{}, 3);
  warm_up(m, 4);
  Tensor one = frames(1, 64, 5);
  Tensor two = concat_rows(std::vector<Tensor>{one, one});
  Tape t;
  ForwardContext ctx(t, m, Mode::Eval);
  ViewOutput out = view_forward(ctx, t.constant(two));
  for (Var v : {out.embeddings.local, out.embeddings.medium, out.embeddings.global, out.logits})
    EXPECT_EQ(v.value().rows(0, 1), v.value().rows(1, 2));
}

TEST(Fpn, ZeroMapsGiveZeroPyramid) {
  BackboneConfig cfg;
  Model m = make_model(cfg, 4);
  Tape t;
  ForwardContext ctx(t, m, Mode::Eval);
  BackboneFeatures c{t.constant(Tensor(Shape{1, 8, 16, 16})), t.constant(Tensor(Shape{1, 16, 8, 8})),
                     t.constant(Tensor(Shape{1, 32, 4, 4})), t.constant(Tensor(Shape{1, 64, 2, 2}))};
  PyramidFeatures p = fpn_forward(ctx, c);
  for (Var v : {p.p2, p.p3, p.p4, p.p5})
    for (double x : v.value().vec()) EXPECT_EQ(x, 0.0);
}

TEST(Fpn, TopDownPathReachesP2) {
  Model m = make_model(BackboneConfig{}, 5);
  warm_up(m, 4);
  Tensor c2 = random_tensor(Shape{1, 8, 16, 16}, 1, 0, 1), c3 = random_tensor(Shape{1, 16, 8, 8}, 2, 0, 1);
  Tensor c4 = random_tensor(Shape{1, 32, 4, 4}, 3, 0, 1), c5 = random_tensor(Shape{1, 64, 2, 2}, 4, 0, 1);
  auto p2_sum = [&](const Tensor& top) {
    Tape t;
    ForwardContext ctx(t, m, Mode::Eval);
    return fpn_forward(ctx, {t.constant(c2), t.constant(c3), t.constant(c4), t.constant(top)}).p2.value().sum();
  };
  double largest = 0.0;
  for (std::size_t i = 0; i < c5.numel(); ++i) {
    Tensor up = c5, down = c5;
    up[i] += 1e-4;
    down[i] -= 1e-4;
    largest = std::max(largest, std::abs(p2_sum(up) - p2_sum(down)) / 2e-4);
  }
  EXPECT_GT(largest, 1e-6);
}

TEST(Heads, EmbeddingWidthAndZeroPropagation) {
  Model m = make_model(BackboneConfig{}, 6);
  for (const char* h : {kHeadLocal, kHeadMedium, kHeadGlobal}) m.store.get(std::string(h) + ".bias").value.fill(0.0);
  Tape t;
  ForwardContext ctx(t, m, Mode::Eval);
  Var zero2 = t.constant(Tensor(Shape{3, 32, 16, 16}));
  Var zero4 = t.constant(Tensor(Shape{3, 32, 4, 4}));
  Var zero5 = t.constant(Tensor(Shape{3, 32, 2, 2}));
  EmbeddingTriple e = heads_forward(ctx, zero2, zero4, zero5);
  for (Var v : {e.local, e.medium, e.global}) {
    EXPECT_EQ(v.shape(), (Shape{3, 32}));
    for (double x : v.value().vec()) EXPECT_EQ(x, 0.0);
  }
}

TEST(Heads, OptionalRelu) {
  BackboneConfig cfg;
  cfg.head_relu = true;
  Model m = make_model(cfg, 6);
  Tape t;
  ForwardContext ctx(t, m, Mode::Train);
  ViewOutput out = view_forward(ctx, t.constant(frames(2, 64, 8)));
  for (double x : out.embeddings.local.value().vec()) EXPECT_GE(x, 0.0);
}

TEST(Classify, ZeroWeightsGiveUniformSoftmax) {
  Model m = make_model(BackboneConfig{}, 7);
  m.store.get("classifier.weight").value.fill(0.0);
  Tape t;
  ForwardContext ctx(t, m, Mode::Eval);
  Var logits = classify(ctx, t.constant(random_tensor(Shape{5, 32}, 1)));
  EXPECT_EQ(logits.shape(), (Shape{5, 3}));
  for (double x : logits.value().vec()) EXPECT_EQ(x, 0.0);
  Tensor y(Shape{5, 3});
  for (std::size_t i = 0; i < 5; ++i) y.at(i, i % 3) = 1;
  EXPECT_NEAR(softened_ce(logits, logits, y).value()[0], std::log(3.0), 1e-12);
}

TEST(ModelForward, IdenticalViewsInEval) {
  Model m = make_model(BackboneConfig{}, 8);
  warm_up(m, 4);
  Tensor x = frames(3, 64, 9);
  Tape t;
  ForwardContext ctx(t, m, Mode::Eval);
  auto [a, b] = model_forward(ctx, t.constant(x), t.constant(x));
  EXPECT_EQ(a.embeddings.local.value(), b.embeddings.local.value());
  EXPECT_EQ(a.embeddings.medium.value(), b.embeddings.medium.value());
  EXPECT_EQ(a.embeddings.global.value(), b.embeddings.global.value());
  EXPECT_EQ(a.logits.value(), b.logits.value());
}

TEST(ModelForward, SingleVideoPairInTrainMode) {
  Model m = make_model(BackboneConfig{}, 9);
  Tape t;
  ForwardContext ctx(t, m, Mode::Train);
  auto [a, b] = model_forward(ctx, t.constant(frames(1, 64, 1)), t.constant(frames(1, 64, 2)));
  EXPECT_EQ(a.embeddings.global.shape(), (Shape{1, 32}));
  EXPECT_TRUE(b.logits.value().all_finite());
}

TEST(ModelForward, EvalIsPureAndBitIdentical) {
  Model m = make_model(BackboneConfig{}, 10);
  warm_up(m, 4);
  Tensor x = frames(2, 64, 11);
  auto run = [&] {
    Tape t;
    ForwardContext ctx(t, m, Mode::Eval);
    return view_forward(ctx, t.constant(x)).logits.value();
  };
  const Tensor first = run();
  EXPECT_EQ(first, run());
}

TEST(ModelForward, BatchPermutationPermutesRows) {
  Model m = make_model(BackboneConfig{}, 12);
  warm_up(m, 4);
  Tensor x = frames(4, 64, 13);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Tensor xp = x;
  const std::size_t per = 64 * 64;
  for (std::size_t r = 0; r < 4; ++r)
    std::copy_n(x.data().begin() + perm[r] * per, per, xp.data().begin() + r * per);
  Tape t;
  ForwardContext ctx(t, m, Mode::Eval);
  const Tensor base = view_forward(ctx, t.constant(x)).embeddings.medium.value();
  const Tensor moved = view_forward(ctx, t.constant(xp)).embeddings.medium.value();
  for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(moved.rows(r, r + 1), base.rows(perm[r], perm[r] + 1));
}

TEST(ModelForward, FrozenLayersAreConstantsWithFrozenStats) {
  Model m = make_model(BackboneConfig{}, 14);
  const BatchNormStats before = m.store.bn().at("stem.conv1");
  Tape t;
  ForwardContext ctx(t, m, Mode::Train, [](const std::string& name) { return name.rfind("stage5.", 0) == 0; });
  Var out = view_forward(ctx, t.constant(frames(2, 64, 15))).logits;
  t.backward(sum(out));
  EXPECT_EQ(m.store.bn().at("stem.conv1").running_mean, before.running_mean);
  EXPECT_NE(m.store.bn().at("stage5.conv1").running_mean, BatchNormStats::fresh(64).running_mean);
  EXPECT_EQ(m.store.get("stem.conv1.weight").grad.sum(), 0.0);
}

TEST(ModelParams, NamesAndReset) {
  Model m = make_model(BackboneConfig{}, 1);
  EXPECT_TRUE(m.store.contains("stage3.conv2.bn.beta"));
  EXPECT_TRUE(m.store.contains("lateral5.weight"));
  EXPECT_FALSE(m.store.contains("smooth3.weight"));
  const std::size_t before = m.store.params().size();
  reset_downstream_head(m, 4, 2);
  EXPECT_EQ(m.store.get("downstream.weight").value.shape(), (Shape{96, 4}));
  reset_downstream_head(m, 5, 2);
  EXPECT_EQ(m.store.params().size(), before + 2);
  EXPECT_EQ(m.store.erase_prefix("head."), 6u);
  EXPECT_FALSE(m.store.contains("head.global.weight"));
}

double embedding_grad_error(std::size_t hw, Mode mode) {
  BackboneConfig cfg = tiny_config();
  cfg.input_hw = hw;
  Model m = make_model(cfg, 21);
  warm_up(m, 4);
  Tensor x = frames(2, hw, 22);
  Tensor probe_l = random_tensor(Shape{2, 4}, 23), probe_m = random_tensor(Shape{2, 4}, 24);
  Tensor probe_g = random_tensor(Shape{2, 4}, 25);
  std::vector<Parameter*> params;
  for (Parameter& p : m.store.params())
    if (p.name.rfind("head.", 0) != 0 && p.name.rfind("classifier", 0) != 0) params.push_back(&p);
  auto f = [&](Tape& t) {
    ForwardContext ctx(t, m, mode);
    EmbeddingTriple e = view_forward(ctx, t.constant(x)).embeddings;
    return weighted_sum({sum(relu(add(e.local, t.constant(probe_l)))), sum(relu(add(e.medium, t.constant(probe_m)))),
                         sum(relu(add(e.global, t.constant(probe_g))))},
                        {1.0, 0.5, 0.25});
  };
  return grad_check(f, params, 1e-5).max_rel_error;
}

TEST(ModelGradient, EmbeddingsMatchFiniteDifferencesWithRunningStats) {
  EXPECT_LE(embedding_grad_error(8, Mode::Eval), 1e-4);
}

TEST(ModelGradient, EmbeddingsMatchFiniteDifferencesWithBatchStats) {
  EXPECT_LE(embedding_grad_error(16, Mode::Train), 1e-4);
}

}  // namespace
}  // namespace hico
