#pragma once

// Downstream protocol: metrics, by-video folds and fine-tuning.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "hico/autodiff.hpp"
#include "hico/encoder.hpp"
#include "hico/error.hpp"
#include "hico/losses.hpp"
#include "hico/ops.hpp"
#include "hico/synth_data.hpp"
#include "hico/trainer.hpp"

namespace hico {

// ---------------------------------------------------------------------------
// Metrics.

struct MetricsReport {
  std::size_t num_classes = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<double> precision, recall, f1;
  /// Set where the denominator was zero and the value defaulted to 0.
  std::vector<bool> precision_undefined, recall_undefined;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::size_t total = 0;
  int fold = -1;
  std::uint64_t seed = 0;
};

inline MetricsReport compute_metrics(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                                     std::size_t num_classes) {
  require(!labels.empty(), ErrorKind::EmptyEvaluation, "no predictions to evaluate");
  require(predictions.size() == labels.size(), ErrorKind::ShapeError, "predictions and labels differ in length");
  require(num_classes >= 1, ErrorKind::ConfigError, "num_classes must be >= 1");
  MetricsReport r;
  r.num_classes = num_classes;
  r.total = labels.size();
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] < num_classes && predictions[i] < num_classes, ErrorKind::ConfigError,
            "class index out of range");
    ++r.confusion[labels[i]][predictions[i]];
  }
  std::size_t correct = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t tp = r.confusion[c][c];
    correct += tp;
    std::size_t predicted = 0, actual = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
      predicted += r.confusion[k][c];
      actual += r.confusion[c][k];
    }
    const double p = predicted == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(predicted);
    const double q = actual == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(actual);
    r.precision.push_back(p);
    r.recall.push_back(q);
    r.precision_undefined.push_back(predicted == 0);
    r.recall_undefined.push_back(actual == 0);
    r.f1.push_back(p + q == 0.0 ? 0.0 : 2.0 * p * q / (p + q));
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.total);
  r.macro_f1 = std::accumulate(r.f1.begin(), r.f1.end(), 0.0) / static_cast<double>(num_classes);
  return r;
}

// ---------------------------------------------------------------------------
// Folds.

struct FoldSplit {
  std::vector<std::size_t> train;  // dataset indices of videos
  std::vector<std::size_t> test;
};

/// Class-stratified assignment of whole videos to k folds. Videos of each
/// class are shuffled and dealt round-robin with one running counter, so fold
/// sizes differ by at most one.
inline std::vector<FoldSplit> make_folds(const VideoDataset& ds, std::size_t k, std::uint64_t seed) {
  require(k >= 2, ErrorKind::ConfigError, "need at least 2 folds");
  require(ds.size() >= k, ErrorKind::ConfigError,
          "too few videos (" + std::to_string(ds.size()) + ") for " + std::to_string(k) + " folds");
  SplitMix64 rng(derive_seed(seed, "folds"));
  std::vector<std::size_t> fold_of(ds.size());
  std::size_t next = 0;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t v = 0; v < ds.size(); ++v)
      if (ds.videos[v].class_id == c) members.push_back(v);
    shuffle(members.begin(), members.end(), rng);
    for (std::size_t v : members) fold_of[v] = next++ % k;
  }
  std::vector<FoldSplit> folds(k);
  for (std::size_t v = 0; v < ds.size(); ++v)
    for (std::size_t f = 0; f < k; ++f) (fold_of[v] == f ? folds[f].test : folds[f].train).push_back(v);
  return folds;
}

// ---------------------------------------------------------------------------
// Fine-tuning.

enum class FinetuneScope { Last3Layers, Full, LinearProbe };

inline std::string to_string(FinetuneScope s) {
  switch (s) {
    case FinetuneScope::Last3Layers: return "last_3_layers";
    case FinetuneScope::Full: return "full";
    case FinetuneScope::LinearProbe: return "linear_probe";
  }
  return "last_3_layers";
}

inline FinetuneScope parse_scope(const std::string& s) {
  if (s == "last_3_layers") return FinetuneScope::Last3Layers;
  if (s == "full") return FinetuneScope::Full;
  if (s == "linear_probe") return FinetuneScope::LinearProbe;
  fail(ErrorKind::ConfigError, "unknown fine-tune scope '" + s + "'");
}

struct FinetuneConfig {
  double lr = 1e-2;
  double weight_decay = 1e-4;
  std::size_t epochs = 30;
  FinetuneScope scope = FinetuneScope::Last3Layers;
  std::size_t folds = 5;
  std::uint64_t seed = 1;
  std::size_t batch_size = 32;  // frames per step
  /// Replace the downstream classifier; when false an existing head of the
  /// right width is kept and any mismatch is a ConfigError.
  bool reinit_head = true;

  void validate() const {
    require(lr > 0.0 && weight_decay >= 0.0, ErrorKind::ConfigError, "fine-tune lr must be > 0, weight_decay >= 0");
    require(batch_size >= 2, ErrorKind::ConfigError, "fine-tune batch size must be >= 2");
    require(folds >= 2, ErrorKind::ConfigError, "need at least 2 folds");
  }
};

/// Whether a parameter is updated under the given scope. Pretraining heads
/// are never part of the downstream model.
inline bool scope_trains(FinetuneScope scope, const std::string& name) {
  auto starts = [&name](const std::string& prefix) { return name.rfind(prefix, 0) == 0; };
  if (starts(std::string(kDownstream) + ".")) return true;
  if (starts("head.") || starts(std::string(kClassifier) + ".")) return false;
  switch (scope) {
    case FinetuneScope::Full: return true;
    case FinetuneScope::LinearProbe: return false;
    case FinetuneScope::Last3Layers: return starts("stage5.") || starts("smooth");
  }
  return false;
}

struct FinetuneResult {
  std::vector<MetricsReport> history;  // index e: after e fine-tune epochs
  Model model;

  const MetricsReport& final_metrics() const { return history.back(); }
  std::vector<double> accuracy_curve() const {
    std::vector<double> out;
    for (const auto& m : history) out.push_back(m.accuracy);
    return out;
  }
};

namespace detail {

inline Tensor take_rows(const Tensor& t, std::span<const std::size_t> idx) {
  std::vector<std::size_t> dims = t.shape().dims();
  const std::size_t row = t.numel() / dims[0];
  dims[0] = idx.size();
  Tensor out{Shape(dims)};
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(t.vec().begin() + static_cast<std::ptrdiff_t>(idx[i] * row), row,
                out.vec().begin() + static_cast<std::ptrdiff_t>(i * row));
  return out;
}

/// Frozen inputs of the trainable part. Full: frames. Last 3 layers: C4 and
/// the three lower laterals. Linear probe: pooled pyramid features.
inline std::vector<Var> trunk_inputs(ForwardContext& ctx, FinetuneScope scope, Var frames) {
  switch (scope) {
    case FinetuneScope::Full: return {frames};
    case FinetuneScope::LinearProbe: return {pooled_pyramid(fpn_forward(ctx, backbone_forward(ctx, frames)))};
    case FinetuneScope::Last3Layers: {
      Var c2 = stage_forward(ctx, 2, stem_forward(ctx, frames));
      Var c3 = stage_forward(ctx, 3, c2);
      Var c4 = stage_forward(ctx, 4, c3);
      return {c4, lateral_forward(ctx, 2, c2), lateral_forward(ctx, 3, c3), lateral_forward(ctx, 4, c4)};
    }
  }
  return {};
}

inline Var head_logits(ForwardContext& ctx, FinetuneScope scope, const std::vector<Var>& in) {
  switch (scope) {
    case FinetuneScope::Full: return downstream_logits(ctx, pooled_pyramid(fpn_forward(ctx, backbone_forward(ctx, in[0]))));
    case FinetuneScope::LinearProbe: return downstream_logits(ctx, in[0]);
    case FinetuneScope::Last3Layers: {
      Var c5 = stage_forward(ctx, 5, in[0]);
      PyramidFeatures p = top_down(ctx, {in[1], in[2], in[3], lateral_forward(ctx, 5, c5)});
      return downstream_logits(ctx, pooled_pyramid(p));
    }
  }
  return {};
}

inline ForwardContext frozen_context(Tape& tape, Model& m) {
  return ForwardContext(tape, m, Mode::Eval, [](const std::string&) { return false; });
}

/// Eval-mode frozen inputs for all frames, computed in chunks.
inline std::vector<Tensor> cached_inputs(Model& m, FinetuneScope scope, const Tensor& frames) {
  constexpr std::size_t kChunk = 64;
  std::vector<std::vector<Tensor>> parts;
  for (std::size_t b = 0; b < frames.dim(0); b += kChunk) {
    Tape tape;
    ForwardContext ctx = frozen_context(tape, m);
    const auto vars = trunk_inputs(ctx, scope, tape.constant(frames.rows(b, std::min(frames.dim(0), b + kChunk))));
    if (parts.empty()) parts.resize(vars.size());
    for (std::size_t i = 0; i < vars.size(); ++i) parts[i].push_back(vars[i].value());
  }
  std::vector<Tensor> out;
  for (const auto& p : parts) out.push_back(concat_rows(std::span<const Tensor>(p)));
  return out;
}

inline std::vector<std::size_t> predict(Model& m, FinetuneScope scope, const std::vector<Tensor>& inputs) {
  constexpr std::size_t kChunk = 64;
  std::vector<std::size_t> out;
  const std::size_t n = inputs[0].dim(0);
  for (std::size_t b = 0; b < n; b += kChunk) {
    const std::size_t e = std::min(n, b + kChunk);
    Tape tape;
    ForwardContext ctx = frozen_context(tape, m);
    std::vector<Var> in;
    for (const Tensor& t : inputs) in.push_back(tape.constant(t.rows(b, e)));
    const Tensor& logits = head_logits(ctx, scope, in).value();
    for (std::size_t r = 0; r < e - b; ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.dim(1); ++c)
        if (logits.at(r, c) > logits.at(r, best)) best = c;
      out.push_back(best);
    }
  }
  return out;
}

}  // namespace detail

/// Every frame of the listed videos as [F,1,H,W] with per-frame labels.
inline std::pair<Tensor, std::vector<std::size_t>> frames_of(const VideoDataset& ds,
                                                             std::span<const std::size_t> videos) {
  std::vector<Tensor> parts;
  std::vector<std::size_t> labels;
  for (std::size_t v : videos) {
    const VideoRecord& rec = ds.videos[v];
    parts.push_back(rec.frames);
    labels.insert(labels.end(), rec.frames.dim(0), rec.class_id);
  }
  require(!parts.empty(), ErrorKind::EmptyEvaluation, "no videos selected");
  return {concat_rows(std::span<const Tensor>(parts)), std::move(labels)};
}

/// Fine-tunes a copy of `init` on the fold's training videos with plain
/// cross-entropy and records held-out metrics after every epoch.
inline FinetuneResult finetune(const Model& init, const VideoDataset& ds, const FoldSplit& split,
                               const FinetuneConfig& cfg, int fold = 0) {
  cfg.validate();
  require(ds.image_size == init.config.input_hw, ErrorKind::ConfigError,
          "dataset image size does not match the model input size");
  FinetuneResult res{{}, init};
  Model& m = res.model;
  const std::string head_weight = std::string(kDownstream) + ".weight";
  if (cfg.reinit_head) {
    reset_downstream_head(m, ds.num_classes, derive_seed(cfg.seed, "downstream-head", static_cast<std::uint64_t>(fold)));
  } else {
    require(m.store.contains(head_weight), ErrorKind::ConfigError, "model has no downstream classifier to reuse");
    require(m.store.get(head_weight).value.dim(1) == ds.num_classes, ErrorKind::ConfigError,
            "downstream classifier has " + std::to_string(m.store.get(head_weight).value.dim(1)) +
                " classes, dataset has " + std::to_string(ds.num_classes));
  }

  auto [train_frames, train_labels] = frames_of(ds, split.train);
  auto [test_frames, test_labels] = frames_of(ds, split.test);
  const std::vector<Tensor> train_in = detail::cached_inputs(m, cfg.scope, train_frames);
  const std::vector<Tensor> test_in = detail::cached_inputs(m, cfg.scope, test_frames);

  auto evaluate = [&] {
    MetricsReport r = compute_metrics(detail::predict(m, cfg.scope, test_in), test_labels, ds.num_classes);
    r.fold = fold;
    r.seed = cfg.seed;
    res.history.push_back(std::move(r));
  };

  std::vector<Parameter*> trainable;
  for (Parameter& p : m.store.params())
    if (scope_trains(cfg.scope, p.name)) trainable.push_back(&p);
  AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  AdamState opt;
  auto is_trainable = [&cfg](const std::string& name) { return scope_trains(cfg.scope, name); };

  evaluate();
  std::vector<std::size_t> order(train_labels.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    SplitMix64 rng(derive_seed(cfg.seed, "finetune-epoch", epoch * 1000 + static_cast<std::uint64_t>(fold)));
    shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      if (e - b < 2) break;  // batch statistics need two rows
      const std::span<const std::size_t> idx(order.data() + b, e - b);
      Tensor targets(Shape{idx.size(), ds.num_classes});
      for (std::size_t i = 0; i < idx.size(); ++i) targets.at(i, train_labels[idx[i]]) = 1.0;

      for (Parameter* p : trainable) p->zero_grad();
      Tape tape;
      ForwardContext ctx(tape, m, Mode::Train, is_trainable);
      std::vector<Var> in;
      for (const Tensor& t : train_in) in.push_back(tape.constant(detail::take_rows(t, idx)));
      Var loss = scale(soft_cross_entropy_sum(detail::head_logits(ctx, cfg.scope, in), targets),
                       1.0 / static_cast<double>(idx.size()));
      tape.backward(loss);
      adam_step(trainable, opt, adam);
    }
    evaluate();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Cross-validation.

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
/// failure after all workers stop.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Worker count from HICO_THREADS (default 1).
inline std::size_t threads_from_env() {
  const char* v = std::getenv("HICO_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  char* end = nullptr;
  const unsigned long n = std::strtoul(v, &end, 10);
  require(end != v && *end == '\0' && n >= 1, ErrorKind::ConfigError, "HICO_THREADS must be a positive integer");
  return n;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  if (xs.empty()) return r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

inline double median(std::vector<double> xs) {
  require(!xs.empty(), ErrorKind::EmptyEvaluation, "median of no values");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

struct CrossValidation {
  std::vector<MetricsReport> folds;  // final metrics per fold
  std::vector<std::vector<MetricsReport>> histories;
  MeanStd accuracy;
  MeanStd macro_f1;
};

inline CrossValidation cross_validate(const Model& init, const VideoDataset& ds, const FinetuneConfig& cfg,
                                      std::size_t threads = 1) {
  cfg.validate();
  const auto splits = make_folds(ds, cfg.folds, cfg.seed);
  std::vector<FinetuneResult> runs(splits.size());
  parallel_for(splits.size(), threads, [&](std::size_t f) {
    FinetuneResult r = finetune(init, ds, splits[f], cfg, static_cast<int>(f));
    runs[f].history = std::move(r.history);
  });
  CrossValidation cv;
  std::vector<double> acc, f1;
  for (auto& r : runs) {
    cv.folds.push_back(r.final_metrics());
    acc.push_back(r.final_metrics().accuracy);
    f1.push_back(r.final_metrics().macro_f1);
    cv.histories.push_back(std::move(r.history));
  }
  cv.accuracy = mean_std(acc);
  cv.macro_f1 = mean_std(f1);
  return cv;
}

}  // namespace hico
