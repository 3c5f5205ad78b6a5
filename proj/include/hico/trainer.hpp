#pragma once

// Pretraining: loss assembly, Adam, the epoch loop, checkpoints and logs.

#include <zlib.h>

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hico/autodiff.hpp"
#include "hico/encoder.hpp"
#include "hico/error.hpp"
#include "hico/io.hpp"
#include "hico/losses.hpp"
#include "hico/synth_data.hpp"

namespace hico {

enum class PretrainMode { Hico, VanillaCl, ScratchSupervised };

inline std::string to_string(PretrainMode m) {
  switch (m) {
    case PretrainMode::Hico: return "hico";
    case PretrainMode::VanillaCl: return "vanilla_cl";
    case PretrainMode::ScratchSupervised: return "scratch_supervised";
  }
  return "hico";
}

inline PretrainMode parse_pretrain_mode(const std::string& s) {
  if (s == "hico") return PretrainMode::Hico;
  if (s == "vanilla_cl") return PretrainMode::VanillaCl;
  if (s == "scratch_supervised") return PretrainMode::ScratchSupervised;
  fail(ErrorKind::ConfigError, "unknown pretrain mode '" + s + "'");
}

/// Which loss terms are computed. Disabled terms are skipped entirely.
struct TermToggles {
  bool ll = true, mm = true, gg = true, gl = true, gm = true, soften = true;

  static TermToggles none() { return {false, false, false, false, false, false}; }

  bool any_peer() const { return ll || mm || gg; }
  bool any_cross() const { return gl || gm; }
  bool any() const { return any_peer() || any_cross() || soften; }

  /// Comma list over {ll, mm, gg, gl, gm, soften}; "all" enables everything.
  static TermToggles parse(const std::string& text) {
    if (text == "all") return {};
    TermToggles t = none();
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
      if (item == "ll") t.ll = true;
      else if (item == "mm") t.mm = true;
      else if (item == "gg") t.gg = true;
      else if (item == "gl") t.gl = true;
      else if (item == "gm") t.gm = true;
      else if (item == "soften") t.soften = true;
      else if (!item.empty()) fail(ErrorKind::ConfigError, "unknown loss term '" + item + "'");
    }
    return t;
  }

  std::string str() const {
    std::string s;
    auto add = [&s](bool on, const char* name) {
      if (!on) return;
      if (!s.empty()) s += ',';
      s += name;
    };
    add(ll, "ll");
    add(mm, "mm");
    add(gg, "gg");
    add(gl, "gl");
    add(gm, "gm");
    add(soften, "soften");
    return s.empty() ? "none" : s;
  }

  friend bool operator==(const TermToggles&, const TermToggles&) = default;
};

inline TermToggles toggles_for(PretrainMode mode) {
  TermToggles t = TermToggles::none();
  switch (mode) {
    case PretrainMode::Hico: return {};
    case PretrainMode::VanillaCl: t.gg = true; return t;
    case PretrainMode::ScratchSupervised: t.soften = true; return t;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Adam.

struct AdamConfig {
  double lr = 3e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// false: grad += wd * p before the moments; true: p -= lr * wd * p after.
  bool decoupled = false;
};

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::uint64_t step = 0;
};

inline void adam_step(const std::vector<Parameter*>& params, AdamState& state, const AdamConfig& cfg) {
  for (const Parameter* p : params) {
    require(p->grad.shape() == p->value.shape(), ErrorKind::ShapeError, "gradient shape mismatch for " + p->name);
    require(p->grad.all_finite(), ErrorKind::NumericalFailure, "non-finite gradient for " + p->name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (Parameter* p : params) {
    Tensor& m = state.m.try_emplace(p->name, p->value.shape()).first->second;
    Tensor& v = state.v.try_emplace(p->name, p->value.shape()).first->second;
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      double g = p->grad[i];
      if (!cfg.decoupled) g += cfg.weight_decay * p->value[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double update = cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
      if (cfg.decoupled) p->value[i] -= cfg.lr * cfg.weight_decay * p->value[i];
      p->value[i] -= update;
    }
  }
}

// ---------------------------------------------------------------------------
// Configuration.

struct PretrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 3e-4;
  double weight_decay = 1e-4;
  bool decoupled_weight_decay = false;
  LossWeights weights;
  PretrainMode mode = PretrainMode::Hico;
  /// Overrides the mode's term set when present (ablation rows).
  std::optional<TermToggles> toggles;
  double label_rate = 1.0;
  std::uint64_t seed = 1;
  BackboneConfig model;
  AugmentConfig augment;

  /// 300 epochs, batch 32.
  static PretrainConfig full_scale() {
    PretrainConfig c;
    c.epochs = 300;
    c.batch_size = 32;
    return c;
  }

  TermToggles terms() const { return toggles ? *toggles : toggles_for(mode); }

  AdamConfig adam() const {
    AdamConfig a;
    a.lr = lr;
    a.weight_decay = weight_decay;
    a.decoupled = decoupled_weight_decay;
    return a;
  }

  void validate() const {
    weights.validate();
    model.validate();
    const TermToggles t = terms();
    require(t.any(), ErrorKind::ConfigError, "at least one loss term must be enabled");
    require(batch_size >= 1, ErrorKind::ConfigError, "batch size must be >= 1");
    require(!(t.any_peer() || t.any_cross()) || batch_size >= 2, ErrorKind::ConfigError,
            "contrastive terms need batch size >= 2");
    require(label_rate >= 0.0 && label_rate <= 1.0, ErrorKind::ConfigError, "label_rate must be in [0,1]");
    require(lr > 0.0 && weight_decay >= 0.0, ErrorKind::ConfigError, "lr must be > 0 and weight_decay >= 0");
  }

  /// Flat key/value echo, stored in checkpoints and used as a cache key.
  std::vector<std::pair<std::string, std::string>> echo() const {
    return {{"epochs", std::to_string(epochs)},
            {"batch_size", std::to_string(batch_size)},
            {"lr", format_double(lr)},
            {"weight_decay", format_double(weight_decay)},
            {"decoupled_weight_decay", decoupled_weight_decay ? "1" : "0"},
            {"tau", format_double(weights.tau)},
            {"lambda", format_double(weights.lambda)},
            {"alpha", format_double(weights.alpha)},
            {"beta", format_double(weights.beta)},
            {"smooth_denominator",
             weights.smooth_denominator == SmoothDenominator::BatchMinusOne ? "batch" : "classes"},
            {"cross_candidates", weights.cross_candidates == CrossCandidates::ExcludeAligned ? "exclude_aligned" : "all"},
            {"mode", to_string(mode)},
            {"toggles", terms().str()},
            {"label_rate", format_double(label_rate)},
            {"seed", std::to_string(seed)},
            {"crop_min", format_double(augment.crop_min)},
            {"crop_max", format_double(augment.crop_max)},
            {"flip_prob", format_double(augment.flip_prob)},
            {"brightness", format_double(augment.brightness)},
            {"contrast_min", format_double(augment.contrast_min)},
            {"contrast_max", format_double(augment.contrast_max)}};
  }

  /// Identity of the training trajectory. The mode is left out because the
  /// term set fully determines the run.
  std::string key() const {
    std::string s;
    for (const auto& [k, v] : echo())
      if (k != "mode") s += k + "=" + v + ";";
    return s + model_key(model);
  }

  static std::string model_key(const BackboneConfig& m) {
    std::string s = "in=" + std::to_string(m.in_channels) + ";stem=" + std::to_string(m.stem_channels) + ";stages=";
    for (std::size_t c : m.stage_channels) s += std::to_string(c) + ",";
    return s + ";fpn=" + std::to_string(m.fpn_channels) + ";embed=" + std::to_string(m.embed_dim) +
           ";classes=" + std::to_string(m.num_classes) + ";hw=" + std::to_string(m.input_hw) +
           ";stem_stride=" + std::to_string(m.stem_stride) + ";head_relu=" + (m.head_relu ? "1" : "0");
  }
};

// ---------------------------------------------------------------------------
// Loss assembly.

struct LossBreakdown {
  double total = 0, con = 0, soften = 0;
  double ll = 0, mm = 0, gg = 0, gl = 0, gm = 0;
  std::size_t labeled = 0;
};

/// Inputs of one step: stacked views and per-row softened targets (zero rows
/// for unlabelled videos).
struct StepBatch {
  Tensor view1;
  Tensor view2;
  Tensor targets;
  std::size_t labeled = 0;
};

inline StepBatch make_step_batch(const std::vector<FramePair>& pairs, std::size_t num_classes,
                                 const PretrainConfig& cfg) {
  StepBatch b{stack_views(pairs, false), stack_views(pairs, true), Tensor(Shape{pairs.size(), num_classes}), 0};
  const double denom = smoothing_denominator(cfg.weights.smooth_denominator, cfg.batch_size, num_classes);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!pairs[i].labeled) continue;
    const Tensor soft = soften_labels(one_hot(pairs[i].class_id, num_classes), cfg.weights.alpha, denom);
    for (std::size_t c = 0; c < num_classes; ++c) b.targets.at(i, c) = soft[c];
    ++b.labeled;
  }
  return b;
}

/// Peer weight after dropping disabled groups: lambda when both peer and
/// cross terms are on, 1 for peer-only, 0 for cross-only.
inline double effective_lambda(const TermToggles& t, double lambda) {
  if (t.any_peer() && t.any_cross()) return lambda;
  return t.any_peer() ? 1.0 : 0.0;
}

struct StepLoss {
  Var total;
  bool differentiable = false;
  LossBreakdown parts;
};

/// Forward both views and combine the enabled terms into the total loss.
inline StepLoss step_loss(ForwardContext& ctx, const StepBatch& batch, const TermToggles& on, const LossWeights& w) {
  Tape& tape = ctx.tape();
  auto [a, b] = model_forward(ctx, tape.constant(batch.view1), tape.constant(batch.view2));
  const double lam = effective_lambda(on, w.lambda);

  StepLoss out;
  std::vector<Var> con_terms;
  std::vector<double> con_weights;
  auto peer = [&](bool enabled, Var x, Var y, double& slot) {
    if (!enabled) return;
    Var l = stacked_pair_loss(concat_rows(x, y), w.tau);
    slot = l.value()[0];
    con_terms.push_back(l);
    con_weights.push_back(lam);
  };
  peer(on.ll, a.embeddings.local, b.embeddings.local, out.parts.ll);
  peer(on.mm, a.embeddings.medium, b.embeddings.medium, out.parts.mm);
  peer(on.gg, a.embeddings.global, b.embeddings.global, out.parts.gg);

  Var global_rows{};
  if (on.any_cross()) global_rows = concat_rows(a.embeddings.global, b.embeddings.global);
  auto cross = [&](bool enabled, Var x, Var y, double& slot) {
    if (!enabled) return;
    Var l = cross_level_loss(global_rows, concat_rows(x, y), w.tau, w.cross_candidates);
    slot = l.value()[0];
    con_terms.push_back(l);
    con_weights.push_back(1.0 - lam);
  };
  cross(on.gl, a.embeddings.local, b.embeddings.local, out.parts.gl);
  cross(on.gm, a.embeddings.medium, b.embeddings.medium, out.parts.gm);

  std::vector<Var> total_terms;
  std::vector<double> total_weights;
  if (!con_terms.empty()) {
    Var con = weighted_sum(con_terms, con_weights);
    out.parts.con = con.value()[0];
    total_terms.push_back(con);
    total_weights.push_back(1.0);
  }
  out.parts.labeled = batch.labeled;
  if (on.soften && batch.labeled > 0) {
    Var soft = softened_ce(a.logits, b.logits, batch.targets, batch.labeled);
    out.parts.soften = soft.value()[0];
    total_terms.push_back(soft);
    total_weights.push_back(w.beta);
  }
  if (total_terms.empty()) {
    out.total = tape.constant(Tensor::scalar(0.0));
    return out;
  }
  out.total = weighted_sum(total_terms, total_weights);
  out.parts.total = out.total.value()[0];
  out.differentiable = true;
  return out;
}

inline std::vector<Parameter*> all_params(Model& m) {
  std::vector<Parameter*> out;
  for (Parameter& p : m.store.params()) out.push_back(&p);
  return out;
}

/// One optimisation step on one batch of pairs.
inline LossBreakdown train_step(Model& model, AdamState& opt, const StepBatch& batch, const PretrainConfig& cfg) {
  model.store.zero_grad();
  Tape tape;
  ForwardContext ctx(tape, model, Mode::Train);
  StepLoss loss = step_loss(ctx, batch, cfg.terms(), cfg.weights);
  if (loss.differentiable) tape.backward(loss.total);
  adam_step(all_params(model), opt, cfg.adam());
  return loss.parts;
}

/// Loss of a batch under the current parameters, without updating anything
/// (BN uses batch statistics; running stats are restored afterwards).
inline LossBreakdown evaluate_step_loss(Model& model, const StepBatch& batch, const PretrainConfig& cfg) {
  const auto saved = model.store.bn();
  Tape tape;
  ForwardContext ctx(tape, model, Mode::Train);
  LossBreakdown parts = step_loss(ctx, batch, cfg.terms(), cfg.weights).parts;
  model.store.bn() = saved;
  return parts;
}

// ---------------------------------------------------------------------------
// Logs.

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  LossBreakdown loss;
  double seconds = 0.0;
};

struct TrainLog {
  std::string mode;
  std::uint64_t seed = 0;
  std::vector<StepRecord> steps;

  static constexpr const char* kHeader =
      "step,epoch,mode,loss_total,loss_con,loss_soften,l_ll,l_mm,l_gg,l_gl,l_gm,seconds";

  std::string to_csv() const {
    std::string s = std::string(kHeader) + "\n";
    for (const StepRecord& r : steps) {
      const LossBreakdown& l = r.loss;
      s += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + mode;
      for (double v : {l.total, l.con, l.soften, l.ll, l.mm, l.gg, l.gl, l.gm, r.seconds}) s += "," + format_double(v);
      s += "\n";
    }
    return s;
  }

  /// Mean total loss of each epoch, in epoch order.
  std::vector<double> epoch_means() const {
    std::map<std::size_t, std::pair<double, std::size_t>> acc;
    for (const StepRecord& r : steps) {
      acc[r.epoch].first += r.loss.total;
      acc[r.epoch].second += 1;
    }
    std::vector<double> out;
    for (const auto& [e, sum_count] : acc) out.push_back(sum_count.first / static_cast<double>(sum_count.second));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Pretraining loop.

struct TrainState {
  Model model;
  AdamState optimizer;
  std::size_t epochs_done = 0;
};

inline TrainState initial_state(const PretrainConfig& cfg, std::size_t num_classes) {
  BackboneConfig mc = cfg.model;
  mc.num_classes = num_classes;
  return {make_model(mc, derive_seed(cfg.seed, "init")), {}, 0};
}

struct PretrainOptions {
  /// Called after every completed epoch with the state so far.
  std::function<void(const TrainState&, const TrainLog&)> on_epoch;
  /// Record wall-clock seconds per step (otherwise the column stays 0).
  bool timing = false;
};

/// Runs epochs [state.epochs_done, cfg.epochs). Per-epoch and per-video
/// seeds derive from cfg.seed, so a resumed run replays the same stream.
inline TrainLog pretrain(const VideoDataset& ds, const PretrainConfig& cfg, TrainState& state,
                         const PretrainOptions& opts = {}) {
  cfg.validate();
  require(ds.size() > 0, ErrorKind::EmptyBatch, "empty pretraining dataset");
  require(ds.image_size == cfg.model.input_hw, ErrorKind::ConfigError,
          "dataset image size " + std::to_string(ds.image_size) + " does not match model input " +
              std::to_string(cfg.model.input_hw));
  require(state.model.config.num_classes == ds.num_classes, ErrorKind::ConfigError,
          "model classifier width does not match dataset classes");
  const auto labeled = labeled_mask(ds.size(), cfg.label_rate, derive_seed(cfg.seed, "labels"));
  const std::size_t per_epoch = ds.size() / cfg.batch_size;

  TrainLog log{to_string(cfg.mode), cfg.seed, {}};
  for (std::size_t epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, "epoch", epoch);
    const auto batches = epoch_batches(ds.size(), cfg.batch_size, epoch_seed);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto start = std::chrono::steady_clock::now();
      StepBatch batch =
          make_step_batch(make_pairs(ds, batches[b], epoch_seed, labeled, cfg.augment), ds.num_classes, cfg);
      StepRecord rec{epoch * per_epoch + b, epoch, train_step(state.model, state.optimizer, batch, cfg), 0.0};
      if (opts.timing)
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      log.steps.push_back(rec);
    }
    state.epochs_done = epoch + 1;
    if (opts.on_epoch) opts.on_epoch(state, log);
  }
  return log;
}

inline std::pair<TrainState, TrainLog> pretrain(const VideoDataset& ds, const PretrainConfig& cfg,
                                                const PretrainOptions& opts = {}) {
  TrainState state = initial_state(cfg, ds.num_classes);
  TrainLog log = pretrain(ds, cfg, state, opts);
  return {std::move(state), std::move(log)};
}

// ---------------------------------------------------------------------------
// Checkpoints.

struct NamedTensor {
  std::string name;
  Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> bn_stats;
  std::vector<NamedTensor> optimizer;
  std::map<std::string, std::string> meta;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;

  /// Parameter-name prefixes that fine-tuning discards.
  std::vector<std::string> discardable() const {
    std::vector<std::string> out;
    auto it = meta.find("discardable");
    if (it == meta.end()) return out;
    std::stringstream in(it->second);
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(item);
    return out;
  }

  /// Removes discardable parameters and any optimizer state.
  void strip_discardable() {
    const auto prefixes = discardable();
    auto dropped = [&](const std::string& name) {
      for (const auto& p : prefixes)
        if (name.rfind(p, 0) == 0) return true;
      return false;
    };
    std::erase_if(params, [&](const NamedTensor& t) { return dropped(t.name); });
    optimizer.clear();
    meta.erase("adam.step");
  }
};

inline constexpr char kCheckpointMagic[4] = {'H', 'I', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string kDiscardablePrefixes() {
  return std::string(kHeadLocal) + ".," + kHeadMedium + ".," + kHeadGlobal + ".," + kClassifier + ".";
}

inline void put_model_config(std::map<std::string, std::string>& meta, const BackboneConfig& m) {
  meta["model.in_channels"] = std::to_string(m.in_channels);
  meta["model.stem_channels"] = std::to_string(m.stem_channels);
  for (std::size_t i = 0; i < 4; ++i) meta["model.stage" + std::to_string(i + 2)] = std::to_string(m.stage_channels[i]);
  meta["model.fpn_channels"] = std::to_string(m.fpn_channels);
  meta["model.embed_dim"] = std::to_string(m.embed_dim);
  meta["model.num_classes"] = std::to_string(m.num_classes);
  meta["model.input_hw"] = std::to_string(m.input_hw);
  meta["model.stem_stride"] = std::to_string(m.stem_stride);
  meta["model.head_relu"] = m.head_relu ? "1" : "0";
}

inline BackboneConfig get_model_config(const std::map<std::string, std::string>& meta) {
  auto num = [&meta](const std::string& key) -> std::size_t {
    auto it = meta.find(key);
    require(it != meta.end(), ErrorKind::FormatError, "checkpoint metadata lacks " + key);
    try {
      return static_cast<std::size_t>(std::stoull(it->second));
    } catch (const std::exception&) {
      fail(ErrorKind::FormatError, "checkpoint metadata " + key + " is not a number");
    }
  };
  BackboneConfig m;
  m.in_channels = num("model.in_channels");
  m.stem_channels = num("model.stem_channels");
  for (std::size_t i = 0; i < 4; ++i) m.stage_channels[i] = num("model.stage" + std::to_string(i + 2));
  m.fpn_channels = num("model.fpn_channels");
  m.embed_dim = num("model.embed_dim");
  m.num_classes = num("model.num_classes");
  m.input_hw = num("model.input_hw");
  m.stem_stride = num("model.stem_stride");
  m.head_relu = num("model.head_relu") != 0;
  return m;
}

inline Checkpoint make_checkpoint(const Model& model, const AdamState* opt,
                                  const std::vector<std::pair<std::string, std::string>>& echo, std::size_t epoch) {
  Checkpoint c;
  for (const Parameter& p : model.store.params()) c.params.push_back({p.name, p.value});
  for (const auto& [layer, stats] : model.store.bn()) {
    c.bn_stats.push_back({layer + ".running_mean", stats.running_mean});
    c.bn_stats.push_back({layer + ".running_var", stats.running_var});
  }
  if (opt != nullptr) {
    for (const auto& [name, t] : opt->m) c.optimizer.push_back({"adam.m." + name, t});
    for (const auto& [name, t] : opt->v) c.optimizer.push_back({"adam.v." + name, t});
    c.meta["adam.step"] = std::to_string(opt->step);
  }
  for (const auto& [k, v] : echo) c.meta["config." + k] = v;
  put_model_config(c.meta, model.config);
  c.meta["epoch"] = std::to_string(epoch);
  c.meta["discardable"] = kDiscardablePrefixes();
  return c;
}

inline Checkpoint make_checkpoint(const TrainState& s, const PretrainConfig& cfg) {
  return make_checkpoint(s.model, &s.optimizer, cfg.echo(), s.epochs_done);
}

namespace detail {

inline void put_tensors(ByteWriter& w, const std::vector<NamedTensor>& ts) {
  w.u32(static_cast<std::uint32_t>(ts.size()));
  for (const NamedTensor& t : ts) {
    require(t.name.size() <= 0xFFFF, ErrorKind::FormatError, "tensor name too long");
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.raw(t.name);
    w.u8(static_cast<std::uint8_t>(t.value.shape().rank()));
    for (std::size_t d : t.value.shape().dims()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.value.vec()) w.f64(v);
  }
}

inline std::vector<NamedTensor> get_tensors(ByteReader& r) {
  const std::uint32_t n = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedTensor t;
    t.name = r.str(r.u16());
    const std::uint8_t rank = r.u8();
    require(rank >= 1 && rank <= 4, ErrorKind::CorruptFile, "tensor " + t.name + " has bad rank");
    std::vector<std::size_t> dims;
    std::size_t count = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      dims.push_back(r.u32());
      require(dims.back() >= 1, ErrorKind::CorruptFile, "tensor " + t.name + " has a zero dimension");
      count *= dims.back();
    }
    r.need(count * 8);
    std::vector<double> data(count);
    for (double& v : data) v = r.f64();
    t.value = Tensor(Shape(dims), std::move(data));
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  ByteWriter payload;
  detail::put_tensors(payload, c.params);
  detail::put_tensors(payload, c.bn_stats);
  detail::put_tensors(payload, c.optimizer);
  payload.u32(static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    payload.u16(static_cast<std::uint16_t>(k.size()));
    payload.raw(k);
    payload.u32(static_cast<std::uint32_t>(v.size()));
    payload.raw(v);
  }
  const auto& body = payload.bytes();
  ByteWriter file;
  file.raw(std::string_view(kCheckpointMagic, 4));
  file.u32(kCheckpointVersion);
  file.u64(body.size());
  file.raw(body);
  file.u32(static_cast<std::uint32_t>(::crc32(0L, body.data(), static_cast<uInt>(body.size()))));
  return std::move(file.bytes());
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  require(bytes.size() >= 4 && std::equal(kCheckpointMagic, kCheckpointMagic + 4, bytes.begin()),
          ErrorKind::FormatError, "not a checkpoint file (bad magic)");
  ByteReader head(bytes.data(), bytes.size(), "checkpoint");
  head.str(4);
  const std::uint32_t version = head.u32();
  require(version == kCheckpointVersion, ErrorKind::FormatError,
          "unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t length = head.u64();
  require(length + 4 == head.remaining(), ErrorKind::CorruptFile, "checkpoint length field disagrees with file size");
  const std::uint8_t* body = bytes.data() + head.pos();
  ByteReader tail(body + length, 4, "checkpoint checksum");
  const std::uint32_t stored = tail.u32();
  const auto actual = static_cast<std::uint32_t>(::crc32(0L, body, static_cast<uInt>(length)));
  require(stored == actual, ErrorKind::CorruptFile, "checkpoint checksum mismatch");

  ByteReader r(body, static_cast<std::size_t>(length), "checkpoint payload");
  Checkpoint c;
  c.params = detail::get_tensors(r);
  c.bn_stats = detail::get_tensors(r);
  c.optimizer = detail::get_tensors(r);
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string k = r.str(r.u16());
    c.meta[k] = r.str(r.u32());
  }
  require(r.remaining() == 0, ErrorKind::CorruptFile, "trailing bytes in checkpoint payload");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

struct LoadReport {
  std::vector<std::string> missing;  // expected by the model, absent from the file
};

/// Rebuilds the model described by the checkpoint. Discardable parameters
/// may be absent (they keep their fresh initialisation and are reported);
/// anything else missing, unknown or misshapen is a FormatError.
inline Model model_from_checkpoint(const Checkpoint& c, LoadReport* report = nullptr) {
  Model m = make_model(get_model_config(c.meta), 0);
  std::map<std::string, const Tensor*> given;
  for (const NamedTensor& t : c.params) given[t.name] = &t.value;
  const auto prefixes = c.discardable();
  LoadReport rep;
  for (Parameter& p : m.store.params()) {
    auto it = given.find(p.name);
    if (it == given.end()) {
      bool discardable = false;
      for (const auto& pre : prefixes) discardable = discardable || p.name.rfind(pre, 0) == 0;
      require(discardable, ErrorKind::FormatError, "checkpoint lacks parameter " + p.name);
      rep.missing.push_back(p.name);
      continue;
    }
    require(it->second->shape() == p.value.shape(), ErrorKind::FormatError,
            "parameter " + p.name + " has shape " + it->second->shape().str() + ", expected " + p.value.shape().str());
    p.value = *it->second;
    p.zero_grad();
    given.erase(it);
  }
  for (const auto& [name, t] : given) {
    require(name.rfind(std::string(kDownstream) + ".", 0) == 0, ErrorKind::FormatError,
            "checkpoint has unknown parameter " + name);
    m.store.add(name, *t);
  }
  for (const NamedTensor& t : c.bn_stats) {
    const auto dot = t.name.rfind('.');
    require(dot != std::string::npos, ErrorKind::FormatError, "bad batch-norm buffer name " + t.name);
    const std::string layer = t.name.substr(0, dot), field = t.name.substr(dot + 1);
    auto it = m.store.bn().find(layer);
    require(it != m.store.bn().end(), ErrorKind::FormatError, "unknown batch-norm layer " + layer);
    Tensor& dst = field == "running_mean" ? it->second.running_mean : it->second.running_var;
    require(field == "running_mean" || field == "running_var", ErrorKind::FormatError, "bad buffer " + t.name);
    require(dst.shape() == t.value.shape(), ErrorKind::FormatError, "buffer " + t.name + " has wrong shape");
    dst = t.value;
  }
  if (report) *report = rep;
  return m;
}

/// Model, optimizer and epoch counter for resuming a pretraining run.
inline TrainState state_from_checkpoint(const Checkpoint& c) {
  TrainState s{model_from_checkpoint(c), {}, 0};
  for (const NamedTensor& t : c.optimizer) {
    if (t.name.rfind("adam.m.", 0) == 0) s.optimizer.m[t.name.substr(7)] = t.value;
    else if (t.name.rfind("adam.v.", 0) == 0) s.optimizer.v[t.name.substr(7)] = t.value;
  }
  auto num = [&c](const char* key) -> std::uint64_t {
    auto it = c.meta.find(key);
    return it == c.meta.end() ? 0 : std::stoull(it->second);
  };
  s.optimizer.step = num("adam.step");
  s.epochs_done = static_cast<std::size_t>(num("epoch"));
  return s;
}

}  // namespace hico
