#pragma once

// Finite-difference verification suites for the autodiff primitives, the
// loss terms and the full training objective.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hico/autodiff.hpp"
#include "hico/encoder.hpp"
#include "hico/losses.hpp"
#include "hico/ops.hpp"
#include "hico/trainer.hpp"

namespace hico {

struct GradcheckItem {
  std::string name;
  GradCheckResult result;
  double threshold = 0.0;

  bool passed() const { return result.max_rel_error <= threshold; }
};

using GradcheckReport = std::vector<GradcheckItem>;

inline bool all_passed(const GradcheckReport& r) {
  for (const auto& item : r)
    if (!item.passed()) return false;
  return true;
}

inline constexpr double kPrimitiveTolerance = 1e-5;
inline constexpr double kModelTolerance = 1e-4;
inline constexpr double kCheckEps = 1e-6;
// Small enough that perturbations rarely cross a relu kink in the full model.
inline constexpr double kModelCheckEps = 1e-6;
// Entries below this fraction of the largest gradient entry sit under the
// central-difference roundoff of an O(10) objective.
inline constexpr double kModelScaleFloor = 1e-3;

namespace detail {

inline Parameter random_parameter(const std::string& name, const Shape& shape, std::uint64_t seed, double lo = -1.0,
                                  double hi = 1.0) {
  return Parameter(name, Tensor::create(shape, init::Uniform{lo, hi, seed}));
}

/// Entries with magnitude in [0.1, 1] and random sign, keeping relu inputs
/// away from the kink.
inline Parameter signed_parameter(const std::string& name, const Shape& shape, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor t(shape);
  for (double& v : t.vec()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return Parameter(name, std::move(t));
}

/// Fixed random projection to a scalar so every output entry matters.
inline Var project(Tape& t, Var y, std::uint64_t seed) {
  const Tensor w = Tensor::create(y.shape(), init::Uniform{-1.0, 1.0, seed});
  Var prod = t.record(
      [&] {
        Tensor out(Shape{1});
        for (std::size_t i = 0; i < w.numel(); ++i) out[0] += w[i] * y.value()[i];
        return out;
      }(),
      {y}, [w, y](Tape& tape, const Tensor& g) {
        if (Tensor* dy = tape.grad_target(y))
          for (std::size_t i = 0; i < w.numel(); ++i) (*dy)[i] += g[0] * w[i];
      });
  return prod;
}

}  // namespace detail

/// Every differentiable op on small random inputs.
inline GradcheckReport check_primitives(std::uint64_t seed = 1) {
  using detail::project;
  using detail::random_parameter;
  GradcheckReport out;
  auto run = [&](const std::string& name, const std::function<Var(Tape&)>& f, std::vector<Parameter*> params) {
    out.push_back({name, grad_check(f, params, kCheckEps), kPrimitiveTolerance});
  };

  Parameter x = random_parameter("x", Shape{3, 4}, seed);
  Parameter w = random_parameter("w", Shape{4, 5}, seed + 1);
  Parameter b = random_parameter("b", Shape{5}, seed + 2);
  run("linear", [&](Tape& t) { return project(t, linear(t.leaf(x), t.leaf(w), t.leaf(b)), seed); }, {&x, &w, &b});

  Parameter img = random_parameter("x", Shape{2, 2, 5, 5}, seed + 3);
  Parameter k3 = random_parameter("k", Shape{3, 2, 3, 3}, seed + 4);
  Parameter k1 = random_parameter("k", Shape{3, 2, 1, 1}, seed + 5);
  run("conv2d 3x3 stride 1", [&](Tape& t) { return project(t, conv2d(t.leaf(img), t.leaf(k3), 1, 1), seed); },
      {&img, &k3});
  run("conv2d 3x3 stride 2", [&](Tape& t) { return project(t, conv2d(t.leaf(img), t.leaf(k3), 2, 1), seed); },
      {&img, &k3});
  run("conv2d 1x1", [&](Tape& t) { return project(t, conv2d(t.leaf(img), t.leaf(k1), 1, 0), seed); }, {&img, &k1});

  Parameter gamma = random_parameter("gamma", Shape{2}, seed + 6, 0.5, 1.5);
  Parameter beta = random_parameter("beta", Shape{2}, seed + 7);
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    BatchNormStats stats = BatchNormStats::fresh(2);
    stats.running_mean = Tensor(Shape{2}, {0.1, -0.2});
    stats.running_var = Tensor(Shape{2}, {0.8, 1.3});
    run(mode == Mode::Train ? "batchnorm2d train" : "batchnorm2d eval",
        [&](Tape& t) {
          BatchNormStats s = stats;
          return project(t, batchnorm2d(t.leaf(img), t.leaf(gamma), t.leaf(beta), s, mode), seed);
        },
        {&img, &gamma, &beta});
  }

  Parameter away = detail::signed_parameter("x", Shape{3, 4}, seed + 8);
  run("relu", [&](Tape& t) { return project(t, relu(t.leaf(away)), seed); }, {&away});
  Parameter other = random_parameter("y", Shape{3, 4}, seed + 9);
  run("add", [&](Tape& t) { return project(t, add(t.leaf(x), t.leaf(other)), seed); }, {&x, &other});
  run("scale", [&](Tape& t) { return project(t, scale(t.leaf(x), -1.7), seed); }, {&x});
  run("sum", [&](Tape& t) { return sum(t.leaf(x)); }, {&x});
  run("weighted_sum",
      [&](Tape& t) { return weighted_sum({sum(t.leaf(x)), project(t, t.leaf(other), seed)}, {0.3, -2.0}); },
      {&x, &other});
  run("upsample2x_nearest", [&](Tape& t) { return project(t, upsample2x_nearest(t.leaf(img)), seed); }, {&img});
  run("global_avg_pool", [&](Tape& t) { return project(t, global_avg_pool(t.leaf(img)), seed); }, {&img});
  run("concat_rows", [&](Tape& t) { return project(t, concat_rows(t.leaf(x), t.leaf(other)), seed); }, {&x, &other});
  Parameter narrow = random_parameter("z", Shape{3, 2}, seed + 10);
  run("concat_cols", [&](Tape& t) { return project(t, concat_cols({t.leaf(x), t.leaf(narrow)}), seed); }, {&x, &narrow});
  return out;
}

/// Contrastive, cross-level and softened cross-entropy terms on random
/// embeddings and logits (N=3, dim 4, C=3).
inline GradcheckReport check_losses(std::uint64_t seed = 1, double tau = 0.5) {
  using detail::random_parameter;
  GradcheckReport out;
  auto run = [&](const std::string& name, const std::function<Var(Tape&)>& f, std::vector<Parameter*> params) {
    out.push_back({name, grad_check(f, params, kCheckEps), kPrimitiveTolerance});
  };
  const std::size_t n = 3, d = 4, c = 3;
  Parameter a = random_parameter("view1", Shape{n, d}, seed);
  Parameter b = random_parameter("view2", Shape{n, d}, seed + 1);
  Parameter g = random_parameter("global", Shape{2 * n, d}, seed + 2);
  Parameter l = random_parameter("level", Shape{2 * n, d}, seed + 3);
  Parameter o1 = random_parameter("logits1", Shape{n, c}, seed + 4, -2.0, 2.0);
  Parameter o2 = random_parameter("logits2", Shape{n, c}, seed + 5, -2.0, 2.0);
  Tensor soft(Shape{n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor row = soften_labels(one_hot(i % c, c), 0.2, 32.0);
    for (std::size_t k = 0; k < c; ++k) soft.at(i, k) = row[k];
  }

  run("info_nce pair", [&](Tape& t) { return symmetric_pair_loss(t.leaf(a), t.leaf(b), tau); }, {&a, &b});
  run("peer level", [&](Tape& t) { return stacked_pair_loss(concat_rows(t.leaf(a), t.leaf(b)), tau); }, {&a, &b});
  run("cross level", [&](Tape& t) { return cross_level_loss(t.leaf(g), t.leaf(l), tau); }, {&g, &l});
  run("cross level all rows",
      [&](Tape& t) { return cross_level_loss(t.leaf(g), t.leaf(l), tau, CrossCandidates::AllRows); }, {&g, &l});
  run("softened cross-entropy", [&](Tape& t) { return softened_ce(t.leaf(o1), t.leaf(o2), soft); }, {&o1, &o2});
  run("softened cross-entropy labeled subset",
      [&](Tape& t) {
        Tensor partial = soft;
        for (std::size_t k = 0; k < c; ++k) partial.at(0, k) = 0.0;
        return softened_ce(t.leaf(o1), t.leaf(o2), partial, n - 1);
      },
      {&o1, &o2});
  return out;
}

struct FullCheckOptions {
  std::size_t size = 8;      // input height and width
  std::size_t channels = 4;  // every conv width, FPN and embedding
  std::size_t batch = 2;
  std::uint64_t seed = 1;
  /// Batch-norm mode used inside the objective. Eval keeps 1x1 maps well
  /// conditioned; Train needs at least 16x16 inputs to do the same.
  Mode mode = Mode::Eval;
};

/// The complete training objective (all contrastive terms plus the weighted
/// softened cross-entropy) through the whole model.
inline GradcheckItem check_full(const FullCheckOptions& o) {
  BackboneConfig cfg;
  cfg.stem_channels = o.channels;
  cfg.stage_channels = {o.channels, o.channels, o.channels, o.channels};
  cfg.fpn_channels = o.channels;
  cfg.embed_dim = o.channels;
  cfg.num_classes = 3;
  cfg.input_hw = o.size;
  cfg.stem_stride = 1;
  cfg.validate();
  Model m = make_model(cfg, derive_seed(o.seed, "gradcheck-model"));

  const Shape view_shape{o.batch, 1, o.size, o.size};
  StepBatch batch{Tensor::create(view_shape, init::Uniform{0.0, 1.0, derive_seed(o.seed, "view1")}),
                  Tensor::create(view_shape, init::Uniform{0.0, 1.0, derive_seed(o.seed, "view2")}),
                  Tensor(Shape{o.batch, cfg.num_classes}), o.batch};
  for (std::size_t i = 0; i < o.batch; ++i) {
    const Tensor row = soften_labels(one_hot(i % cfg.num_classes, cfg.num_classes), 0.2, 32.0);
    for (std::size_t k = 0; k < cfg.num_classes; ++k) batch.targets.at(i, k) = row[k];
  }
  {
    // Seed running statistics with one batch-statistics pass.
    Tape warm;
    ForwardContext ctx(warm, m, Mode::Train);
    view_forward(ctx, warm.constant(concat_rows(std::vector<Tensor>{batch.view1, batch.view2})));
  }
  const auto frozen_stats = m.store.bn();

  std::vector<Parameter*> params;
  for (Parameter& p : m.store.params()) params.push_back(&p);
  const TermToggles all;
  const LossWeights weights;
  auto f = [&](Tape& t) {
    m.store.bn() = frozen_stats;
    ForwardContext ctx(t, m, o.mode);
    return step_loss(ctx, batch, all, weights).total;
  };
  const std::string name = "full objective " + std::to_string(o.size) + "x" + std::to_string(o.size) + " " +
                           (o.mode == Mode::Eval ? "running stats" : "batch stats");
  return {name, grad_check(f, params, kModelCheckEps, 0, kModelScaleFloor), kModelTolerance};
}

inline GradcheckReport check_full_suite(std::size_t size = 8, std::size_t channels = 4, std::uint64_t seed = 1) {
  GradcheckReport out;
  out.push_back(check_full({size, channels, 2, seed, Mode::Eval}));
  out.push_back(check_full({std::max<std::size_t>(size, 16), channels, 2, seed, Mode::Train}));
  return out;
}

}  // namespace hico
