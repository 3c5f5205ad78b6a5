#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "hico/experiments.hpp"
#include "test_util.hpp"

using namespace hico;

namespace {

BackboneConfig small_model() {
  BackboneConfig cfg;
  cfg.stem_channels = 4;
  cfg.stage_channels = {4, 8, 8, 8};
  cfg.fpn_channels = 8;
  cfg.embed_dim = 8;
  cfg.input_hw = 16;
  cfg.stem_stride = 1;
  return cfg;
}

VideoDataset small_data(std::size_t videos, std::uint64_t seed, std::size_t classes = 2) {
  DatasetManifest m;
  m.seed = seed;
  m.num_videos = videos;
  m.num_classes = classes;
  m.frames_per_video = 4;
  m.image_size = 16;
  return generate_dataset(m);
}

FinetuneConfig small_finetune() {
  FinetuneConfig c;
  c.epochs = 3;
  c.batch_size = 8;
  c.folds = 3;
  return c;
}

PretrainConfig small_pretrain() {
  PretrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.model = small_model();
  return c;
}

Model trained_model(std::size_t classes = 2) {
  auto [state, log] = pretrain(small_data(8, 5, classes), small_pretrain());
  return state.model;
}

bool same_tensors(const Model& a, const Model& b, const std::function<bool(const std::string&)>& pick) {
  for (const Parameter& p : a.store.params()) {
    if (!pick(p.name) || !b.store.contains(p.name)) continue;
    if (!(p.value == b.store.get(p.name).value)) return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics.

TEST(Metrics, PerfectPredictions) {
  const std::vector<std::size_t> y{0, 1, 2, 2, 1, 0};
  const MetricsReport r = compute_metrics(y, y, 3);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.macro_f1, 1.0);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(r.precision[c], 1.0);
    EXPECT_EQ(r.recall[c], 1.0);
  }
}

TEST(Metrics, HandConfusion) {
  // Confusion [[2,0],[1,1]]: rows are true classes.
  const std::vector<std::size_t> labels{0, 0, 1, 1};
  const std::vector<std::size_t> preds{0, 0, 0, 1};
  const MetricsReport r = compute_metrics(preds, labels, 2);
  EXPECT_EQ(r.confusion[0][0], 2u);
  EXPECT_EQ(r.confusion[0][1], 0u);
  EXPECT_EQ(r.confusion[1][0], 1u);
  EXPECT_EQ(r.confusion[1][1], 1u);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.75);
  EXPECT_DOUBLE_EQ(r.precision[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.recall[0], 1.0);
  EXPECT_DOUBLE_EQ(r.precision[1], 1.0);
  EXPECT_DOUBLE_EQ(r.recall[1], 0.5);
  EXPECT_DOUBLE_EQ(r.macro_f1, 0.5 * (0.8 + 2.0 / 3.0));
}

TEST(Metrics, ZeroDenominatorsAreFlagged) {
  const std::vector<std::size_t> labels{0, 0, 1};
  const std::vector<std::size_t> preds{0, 0, 0};
  const MetricsReport r = compute_metrics(preds, labels, 3);
  EXPECT_TRUE(r.precision_undefined[1]);
  EXPECT_EQ(r.precision[1], 0.0);
  EXPECT_TRUE(r.recall_undefined[2]);
  EXPECT_FALSE(r.recall_undefined[1]);
  EXPECT_EQ(r.recall[1], 0.0);
}

TEST(Metrics, MatchesCountingOracle) {
  SplitMix64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 2 + rng.below(4), n = 1 + rng.below(60);
    std::vector<std::size_t> y(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.below(c);
      p[i] = rng.below(c);
    }
    const MetricsReport r = compute_metrics(p, y, c);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) correct += p[i] == y[i];
    EXPECT_EQ(r.accuracy, static_cast<double>(correct) / static_cast<double>(n));
    std::size_t total = 0;
    for (std::size_t k = 0; k < c; ++k) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        tp += p[i] == k && y[i] == k;
        fp += p[i] == k && y[i] != k;
        fn += p[i] != k && y[i] == k;
      }
      EXPECT_EQ(r.precision[k], tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp));
      EXPECT_EQ(r.recall[k], tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn));
      for (std::size_t j = 0; j < c; ++j) total += r.confusion[k][j];
    }
    EXPECT_EQ(total, n);
  }
}

TEST(Metrics, PermutationInvariant) {
  std::vector<std::size_t> y{0, 1, 2, 1, 0, 2, 2}, p{0, 2, 2, 1, 1, 2, 0};
  const MetricsReport a = compute_metrics(p, y, 3);
  std::reverse(y.begin(), y.end());
  std::reverse(p.begin(), p.end());
  const MetricsReport b = compute_metrics(p, y, 3);
  EXPECT_EQ(a.confusion, b.confusion);
  EXPECT_EQ(a.macro_f1, b.macro_f1);
}

TEST(Metrics, EmptyInputRejected) {
  const std::vector<std::size_t> none;
  try {
    compute_metrics(none, none, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyEvaluation);
  }
}

// ---------------------------------------------------------------------------
// Folds.

TEST(Folds, PartitionByVideo) {
  const VideoDataset ds = small_data(23, 1, 3);
  const auto folds = make_folds(ds, 5, 4);
  std::multiset<std::size_t> tested;
  std::size_t smallest = ds.size(), largest = 0;
  for (const FoldSplit& f : folds) {
    tested.insert(f.test.begin(), f.test.end());
    EXPECT_EQ(f.train.size() + f.test.size(), ds.size());
    for (std::size_t v : f.test) EXPECT_EQ(std::count(f.train.begin(), f.train.end(), v), 0);
    smallest = std::min(smallest, f.test.size());
    largest = std::max(largest, f.test.size());
  }
  EXPECT_EQ(tested.size(), ds.size());
  for (std::size_t v = 0; v < ds.size(); ++v) EXPECT_EQ(tested.count(v), 1u);
  EXPECT_LE(largest - smallest, 1u);
}

TEST(Folds, StratifiedAndDeterministic) {
  const VideoDataset ds = small_data(30, 1, 3);
  const auto a = make_folds(ds, 5, 4);
  const auto b = make_folds(ds, 5, 4);
  for (std::size_t f = 0; f < a.size(); ++f) {
    EXPECT_EQ(a[f].test, b[f].test);
    std::vector<std::size_t> per_class(3, 0);
    for (std::size_t v : a[f].test) ++per_class[ds.videos[v].class_id];
    EXPECT_EQ(per_class, (std::vector<std::size_t>{2, 2, 2}));
  }
  EXPECT_NE(make_folds(ds, 5, 5)[0].test, a[0].test);
}

TEST(Folds, TooFewVideos) {
  const VideoDataset ds = small_data(4, 1);
  EXPECT_THROW(make_folds(ds, 5, 1), Error);
  EXPECT_THROW(make_folds(ds, 1, 1), Error);
}

// ---------------------------------------------------------------------------
// Fine-tuning.

TEST(Finetune, ScopeMembership) {
  EXPECT_TRUE(scope_trains(FinetuneScope::Last3Layers, "stage5.conv1.weight"));
  EXPECT_TRUE(scope_trains(FinetuneScope::Last3Layers, "smooth2.bn.gamma"));
  EXPECT_TRUE(scope_trains(FinetuneScope::Last3Layers, "downstream.bias"));
  EXPECT_FALSE(scope_trains(FinetuneScope::Last3Layers, "stage4.conv2.weight"));
  EXPECT_FALSE(scope_trains(FinetuneScope::Last3Layers, "lateral5.weight"));
  EXPECT_FALSE(scope_trains(FinetuneScope::Full, "head.global.weight"));
  EXPECT_TRUE(scope_trains(FinetuneScope::Full, "stem.conv1.weight"));
  EXPECT_FALSE(scope_trains(FinetuneScope::LinearProbe, "smooth5.weight"));
}

TEST(Finetune, CachedInputsMatchFullForward) {
  Model m = trained_model();
  reset_downstream_head(m, 2, 3);
  const Tensor frames = hico::test::random_tensor(Shape{5, 1, 16, 16}, 8, 0.0, 1.0);
  Tape tape;
  ForwardContext ctx = detail::frozen_context(tape, m);
  const Tensor reference = detail::head_logits(ctx, FinetuneScope::Full, {tape.constant(frames)}).value();
  for (FinetuneScope scope : {FinetuneScope::Last3Layers, FinetuneScope::LinearProbe}) {
    const auto cached = detail::cached_inputs(m, scope, frames);
    Tape t2;
    ForwardContext c2 = detail::frozen_context(t2, m);
    std::vector<Var> in;
    for (const Tensor& x : cached) in.push_back(t2.constant(x));
    const Tensor logits = detail::head_logits(c2, scope, in).value();
    for (std::size_t i = 0; i < logits.numel(); ++i) EXPECT_NEAR(logits[i], reference[i], 1e-12);
  }
}

TEST(Finetune, FrozenLayersUntouched) {
  const Model init = trained_model();
  const VideoDataset ds = small_data(9, 11);
  const auto split = make_folds(ds, 3, 1).front();
  FinetuneConfig cfg = small_finetune();
  const FinetuneResult r = finetune(init, ds, split, cfg);
  ASSERT_EQ(r.history.size(), cfg.epochs + 1);
  auto frozen = [](const std::string& n) { return !scope_trains(FinetuneScope::Last3Layers, n); };
  EXPECT_TRUE(same_tensors(init, r.model, frozen));
  EXPECT_FALSE(same_tensors(init, r.model, [](const std::string& n) { return n.rfind("stage5.", 0) == 0; }));
  for (const auto& [layer, stats] : init.store.bn()) {
    if (!frozen(layer + ".bn.gamma")) continue;
    EXPECT_EQ(r.model.store.bn().at(layer).running_mean, stats.running_mean) << layer;
    EXPECT_EQ(r.model.store.bn().at(layer).running_var, stats.running_var) << layer;
  }
}

TEST(Finetune, LinearProbeTrainsOnlyClassifier) {
  const Model init = trained_model();
  const VideoDataset ds = small_data(9, 11);
  FinetuneConfig cfg = small_finetune();
  cfg.scope = FinetuneScope::LinearProbe;
  const FinetuneResult r = finetune(init, ds, make_folds(ds, 3, 1).front(), cfg);
  auto not_head = [](const std::string& n) { return n.rfind("downstream.", 0) != 0; };
  EXPECT_TRUE(same_tensors(init, r.model, not_head));
  EXPECT_EQ(r.model.store.bn().at("stage5.conv1").running_mean, init.store.bn().at("stage5.conv1").running_mean);
}

TEST(Finetune, Deterministic) {
  const Model init = trained_model();
  const VideoDataset ds = small_data(9, 11);
  const auto split = make_folds(ds, 3, 1).front();
  const FinetuneResult a = finetune(init, ds, split, small_finetune());
  const FinetuneResult b = finetune(init, ds, split, small_finetune());
  EXPECT_EQ(a.accuracy_curve(), b.accuracy_curve());
  EXPECT_TRUE(same_tensors(a.model, b.model, [](const std::string&) { return true; }));
}

TEST(Finetune, ClassMismatchWithoutReinit) {
  Model init = trained_model();
  const VideoDataset ds = small_data(9, 11, 3);
  FinetuneConfig cfg = small_finetune();
  cfg.reinit_head = false;
  const auto split = make_folds(ds, 3, 1).front();
  try {
    finetune(init, ds, split, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConfigError);
  }
  reset_downstream_head(init, 2, 1);
  EXPECT_THROW(finetune(init, ds, split, cfg), Error);
  reset_downstream_head(init, 3, 1);
  EXPECT_NO_THROW(finetune(init, ds, split, cfg));
}

TEST(Finetune, ScratchStartsNearChance) {
  const VideoDataset ds = small_data(30, 3, 3);
  FinetuneConfig cfg = small_finetune();
  cfg.epochs = 0;
  std::vector<double> acc;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    cfg.seed = seed;
    const Model m = make_model(small_model(), seed);
    acc.push_back(finetune(m, ds, make_folds(ds, 3, seed).front(), cfg).final_metrics().accuracy);
  }
  EXPECT_LE(std::abs(median(acc) - 1.0 / 3.0), 0.15);
}

TEST(CrossValidation, AggregatesFolds) {
  const Model init = trained_model();
  const VideoDataset ds = small_data(9, 11);
  const CrossValidation cv = cross_validate(init, ds, small_finetune());
  ASSERT_EQ(cv.folds.size(), 3u);
  std::vector<double> acc;
  for (const auto& f : cv.folds) acc.push_back(f.accuracy);
  EXPECT_DOUBLE_EQ(cv.accuracy.mean, (acc[0] + acc[1] + acc[2]) / 3.0);
  const CrossValidation again = cross_validate(init, ds, small_finetune(), 2);
  EXPECT_EQ(again.accuracy.mean, cv.accuracy.mean);
  EXPECT_EQ(again.accuracy.std, cv.accuracy.std);
}

TEST(Stats, MedianAndSpread) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  const std::vector<double> xs{1.0, 3.0};
  EXPECT_DOUBLE_EQ(mean_std(xs).mean, 2.0);
  EXPECT_DOUBLE_EQ(mean_std(xs).std, std::sqrt(2.0));
  EXPECT_EQ(epochs_to_reach({0.2, 0.5, 0.9}, 0.5), 1u);
  EXPECT_FALSE(epochs_to_reach({0.2, 0.5}, 0.9).has_value());
}

// ---------------------------------------------------------------------------
// Comparison runners.

class RunnerTest : public ::testing::Test {
 protected:
  RunnerTest() : pre_(small_data(8, 5)), down_(small_data(9, 11)), runner_(pre_, down_, base(), small_finetune()) {}

  static PretrainConfig base() { return small_pretrain(); }

  VideoDataset pre_;
  VideoDataset down_;
  ExperimentRunner runner_;
};

TEST_F(RunnerTest, GlobalOnlyRowEqualsVanilla) {
  const auto vanilla = runner_.convergence_compare({"vanilla_cl"}, {1});
  const auto ablated = runner_.run_ablation({TermToggles::parse("gg")}, {1});
  ASSERT_EQ(vanilla.size(), 1u);
  EXPECT_EQ(vanilla[0].accuracy_curve(), ablated[0].accuracy_curve());
  EXPECT_EQ(vanilla[0].toggles, ablated[0].toggles);
}

TEST_F(RunnerTest, AblationRejectsEmptyRow) {
  EXPECT_THROW(runner_.run_ablation({TermToggles::none()}, {1}), Error);
}

TEST_F(RunnerTest, LabelRateSweepRows) {
  const auto rows = runner_.sweep("label_rate", {0.0, 0.5, 1.0}, {1});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].label, "label_rate=0");
  EXPECT_EQ(rows[2].label, "label_rate=1");
  EXPECT_EQ(summarize(rows).size(), 3u);
}

TEST_F(RunnerTest, BatchSizeSweepRuns) {
  const auto rows = runner_.sweep("batch_size", {2, 4, 8}, {1});
  EXPECT_EQ(rows.size(), 3u);
  EXPECT_THROW(runner_.sweep("batch_size", {1}, {1}), Error);
  EXPECT_THROW(runner_.sweep("depth", {1}, {1}), Error);
}

TEST_F(RunnerTest, ScratchAndMetricsCsv) {
  const auto rows = runner_.convergence_compare({"scratch", "hico"}, {1, 2});
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].toggles, "none");
  const std::string csv = metrics_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "run_id,mode,toggles,fold,seed,epoch,accuracy,macro_f1,precision_c0,precision_c1,recall_c0,recall_c1");
  const auto lines = std::count(csv.begin(), csv.end(), '\n');
  EXPECT_EQ(lines, 1 + 4 * static_cast<long>(small_finetune().epochs + 1));
  const auto summary = summarize(rows);
  ASSERT_EQ(summary.size(), 2u);
  EXPECT_EQ(summary[0].label, "scratch");
  EXPECT_EQ(summary[0].runs, 2u);
  EXPECT_EQ(summary[0].median_curve.size(), small_finetune().epochs + 1);
  const auto json = summary_json(summary);
  EXPECT_TRUE(json.contains("hico"));
}

TEST_F(RunnerTest, DiskCacheReusesCheckpoints) {
  const auto dir = std::filesystem::temp_directory_path() / "hico_eval_cache";
  std::filesystem::remove_all(dir);
  runner_.set_cache_dir(dir);
  const auto a = runner_.convergence_compare({"hico"}, {3});
  ExperimentRunner second(pre_, down_, base(), small_finetune());
  second.set_cache_dir(dir);
  const auto b = second.convergence_compare({"hico"}, {3});
  EXPECT_EQ(a[0].accuracy_curve(), b[0].accuracy_curve());
  EXPECT_EQ(std::distance(std::filesystem::directory_iterator(dir), std::filesystem::directory_iterator{}), 1);
  std::filesystem::remove_all(dir);
}
