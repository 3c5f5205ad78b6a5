#pragma once

// TinyFPN: a small convolutional backbone with a top-down feature pyramid,
// three projection heads (local/medium/global) and a linear classifier.
//
// Parameters live in a ParamStore keyed by dotted names. A forward pass binds
// them onto a tape through a ForwardContext, which also decides which layers
// are trainable; frozen layers enter the tape as constants and their batch
// norms run on running statistics.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hico/autodiff.hpp"
#include "hico/error.hpp"
#include "hico/ops.hpp"
#include "hico/rng.hpp"
#include "hico/tensor.hpp"

namespace hico {

struct BackboneConfig {
  std::size_t in_channels = 1;
  std::size_t stem_channels = 8;
  std::array<std::size_t, 4> stage_channels{8, 16, 32, 64};
  std::size_t fpn_channels = 32;
  std::size_t embed_dim = 32;
  std::size_t num_classes = 3;
  std::size_t input_hw = 64;
  /// Stride of each stem conv. 1 shrinks the total stride from 32 to 8.
  std::size_t stem_stride = 2;
  bool head_relu = false;

  std::size_t total_stride() const { return stem_stride * stem_stride * 8; }

  void validate() const {
    require(in_channels >= 1 && stem_channels >= 1 && fpn_channels >= 1 && embed_dim >= 1 && num_classes >= 1,
            ErrorKind::ConfigError, "channel counts must be >= 1");
    for (std::size_t c : stage_channels) require(c >= 1, ErrorKind::ConfigError, "stage channels must be >= 1");
    require(stem_stride == 1 || stem_stride == 2, ErrorKind::ConfigError, "stem_stride must be 1 or 2");
    require(input_hw >= total_stride() && input_hw % total_stride() == 0, ErrorKind::ConfigError,
            "input_hw must be a positive multiple of " + std::to_string(total_stride()));
  }
};

/// Named parameters plus batch-norm running statistics.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Tensor value) {
    require(!contains(name), ErrorKind::ConfigError, "duplicate parameter " + name);
    index_[name] = params_.size();
    params_.emplace_back(name, std::move(value));
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::ConfigError, "unknown parameter " + name);
    return params_[it->second];
  }
  const Parameter& get(const std::string& name) const { return const_cast<ParamStore*>(this)->get(name); }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  std::map<std::string, BatchNormStats>& bn() { return bn_; }
  const std::map<std::string, BatchNormStats>& bn() const { return bn_; }

  /// Drops every parameter and batch-norm buffer whose name starts with `prefix`.
  std::size_t erase_prefix(const std::string& prefix) {
    std::vector<Parameter> kept;
    std::size_t removed = 0;
    for (Parameter& p : params_) {
      if (p.name.rfind(prefix, 0) == 0) {
        ++removed;
        continue;
      }
      kept.push_back(std::move(p));
    }
    params_ = std::move(kept);
    index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
    for (auto it = bn_.begin(); it != bn_.end();) it = it->first.rfind(prefix, 0) == 0 ? bn_.erase(it) : std::next(it);
    return removed;
  }

  void zero_grad() {
    for (Parameter& p : params_) p.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const Parameter& p : params_) n += p.value.numel();
    return n;
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, BatchNormStats> bn_;
};

struct Model {
  BackboneConfig config;
  ParamStore store;
};

// Layer names, in forward order.
inline const std::array<const char*, 2> kStemLayers{"stem.conv1", "stem.conv2"};
inline std::string stage_layer(int level, int k) { return "stage" + std::to_string(level) + ".conv" + std::to_string(k); }
inline std::string lateral_layer(int level) { return "lateral" + std::to_string(level); }
inline std::string smooth_layer(int level) { return "smooth" + std::to_string(level); }
inline constexpr std::array<int, 3> kSmoothLevels{2, 4, 5};
inline constexpr const char* kHeadLocal = "head.local";
inline constexpr const char* kHeadMedium = "head.medium";
inline constexpr const char* kHeadGlobal = "head.global";
inline constexpr const char* kClassifier = "classifier";
inline constexpr const char* kDownstream = "downstream";

namespace detail {

inline void add_conv_bn(ParamStore& s, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                        std::uint64_t seed) {
  s.add(name + ".weight", Tensor::create(Shape{cout, cin, k, k}, init::Kaiming{derive_seed(seed, name), cin * k * k}));
  s.add(name + ".bn.gamma", Tensor::create(Shape{cout}, init::Ones{}));
  s.add(name + ".bn.beta", Tensor(Shape{cout}));
  s.bn()[name] = BatchNormStats::fresh(cout);
}

inline void add_linear(ParamStore& s, const std::string& name, std::size_t din, std::size_t dout, std::uint64_t seed) {
  s.add(name + ".weight", Tensor::create(Shape{din, dout}, init::Kaiming{derive_seed(seed, name), din}));
  s.add(name + ".bias", Tensor(Shape{dout}));
}

}  // namespace detail

/// Builds a freshly initialised model: Kaiming-uniform weights, zero biases,
/// unit BN scale, zero BN shift.
inline Model make_model(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m{cfg, {}};
  ParamStore& s = m.store;
  detail::add_conv_bn(s, kStemLayers[0], cfg.in_channels, cfg.stem_channels, 3, seed);
  detail::add_conv_bn(s, kStemLayers[1], cfg.stem_channels, cfg.stem_channels, 3, seed);
  std::size_t cin = cfg.stem_channels;
  for (int level = 2; level <= 5; ++level) {
    const std::size_t cout = cfg.stage_channels[static_cast<std::size_t>(level - 2)];
    detail::add_conv_bn(s, stage_layer(level, 1), cin, cout, 3, seed);
    detail::add_conv_bn(s, stage_layer(level, 2), cout, cout, 3, seed);
    cin = cout;
  }
  for (int level = 2; level <= 5; ++level)
    detail::add_conv_bn(s, lateral_layer(level), cfg.stage_channels[static_cast<std::size_t>(level - 2)],
                        cfg.fpn_channels, 1, seed);
  for (int level : kSmoothLevels) detail::add_conv_bn(s, smooth_layer(level), cfg.fpn_channels, cfg.fpn_channels, 3, seed);
  detail::add_linear(s, kHeadLocal, cfg.fpn_channels, cfg.embed_dim, seed);
  detail::add_linear(s, kHeadMedium, cfg.fpn_channels, cfg.embed_dim, seed);
  detail::add_linear(s, kHeadGlobal, cfg.fpn_channels, cfg.embed_dim, seed);
  detail::add_linear(s, kClassifier, cfg.embed_dim, cfg.num_classes, seed);
  return m;
}

/// Width of the pooled pyramid feature used by the downstream classifier.
inline std::size_t downstream_width(const BackboneConfig& cfg) { return 3 * cfg.fpn_channels; }

/// Replaces (or adds) the downstream classifier on pooled [P2, P4, P5].
inline void reset_downstream_head(Model& m, std::size_t num_classes, std::uint64_t seed) {
  require(num_classes >= 2, ErrorKind::ConfigError, "downstream classifier needs >= 2 classes");
  m.store.erase_prefix(std::string(kDownstream) + ".");
  detail::add_linear(m.store, kDownstream, downstream_width(m.config), num_classes, seed);
}

/// Binds model parameters onto one tape.
class ForwardContext {
 public:
  using Trainable = std::function<bool(const std::string& param_name)>;

  ForwardContext(Tape& tape, Model& model, Mode mode, Trainable trainable = {})
      : tape_(tape), model_(model), mode_(mode), trainable_(std::move(trainable)) {}

  Tape& tape() { return tape_; }
  Model& model() { return model_; }
  const BackboneConfig& config() const { return model_.config; }

  bool is_trainable(const std::string& name) const { return !trainable_ || trainable_(name); }

  /// Leaf for trainable parameters, constant otherwise; one node per tape.
  Var param(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Parameter& p = model_.store.get(name);
    Var v = is_trainable(name) ? tape_.leaf(p) : tape_.constant(p.value);
    bound_.emplace(name, v);
    return v;
  }

  /// Batch-norm mode for a layer: frozen layers always use running stats.
  Mode bn_mode(const std::string& layer) const { return is_trainable(layer + ".bn.gamma") ? mode_ : Mode::Eval; }

  Var conv_bn_relu(const std::string& layer, Var x, std::size_t stride) {
    const Tensor& w = model_.store.get(layer + ".weight").value;
    Var y = conv2d(x, param(layer + ".weight"), stride, w.dim(2) / 2);
    y = batchnorm2d(y, param(layer + ".bn.gamma"), param(layer + ".bn.beta"), model_.store.bn().at(layer),
                    bn_mode(layer));
    return relu(y);
  }

  Var dense(const std::string& layer, Var x) { return linear(x, param(layer + ".weight"), param(layer + ".bias")); }

 private:
  Tape& tape_;
  Model& model_;
  Mode mode_;
  Trainable trainable_;
  std::map<std::string, Var> bound_;
};

struct BackboneFeatures {
  Var c2, c3, c4, c5;
};

struct Laterals {
  Var lat2, lat3, lat4, lat5;
};

struct PyramidFeatures {
  Var c2, c3, c4, c5;
  Var p2, p3, p4, p5;
};

struct EmbeddingTriple {
  Var local;
  Var medium;
  Var global;
};

struct ViewOutput {
  EmbeddingTriple embeddings;
  Var logits;
};

inline Var stem_forward(ForwardContext& ctx, Var frames) {
  const BackboneConfig& cfg = ctx.config();
  const Shape& s = frames.shape();
  require(s.rank() == 4 && s[1] == cfg.in_channels && s[2] == cfg.input_hw && s[3] == cfg.input_hw,
          ErrorKind::ShapeError,
          "frames must be [N," + std::to_string(cfg.in_channels) + "," + std::to_string(cfg.input_hw) + "," +
              std::to_string(cfg.input_hw) + "], got " + s.str());
  Var x = ctx.conv_bn_relu(kStemLayers[0], frames, cfg.stem_stride);
  return ctx.conv_bn_relu(kStemLayers[1], x, cfg.stem_stride);
}

inline Var stage_forward(ForwardContext& ctx, int level, Var x) {
  x = ctx.conv_bn_relu(stage_layer(level, 1), x, level == 2 ? 1 : 2);
  return ctx.conv_bn_relu(stage_layer(level, 2), x, 1);
}

inline BackboneFeatures backbone_forward(ForwardContext& ctx, Var frames) {
  BackboneFeatures f;
  f.c2 = stage_forward(ctx, 2, stem_forward(ctx, frames));
  f.c3 = stage_forward(ctx, 3, f.c2);
  f.c4 = stage_forward(ctx, 4, f.c3);
  f.c5 = stage_forward(ctx, 5, f.c4);
  return f;
}

inline Var lateral_forward(ForwardContext& ctx, int level, Var c) { return ctx.conv_bn_relu(lateral_layer(level), c, 1); }

/// Top-down pass: fused5 = lat5, fused_i = lat_i + up(fused_{i+1}); P3 is the
/// fused map itself, the other levels go through a 3x3 smoothing conv.
inline PyramidFeatures top_down(ForwardContext& ctx, const Laterals& lat) {
  Var fused5 = lat.lat5;
  Var fused4 = add(lat.lat4, upsample2x_nearest(fused5));
  Var fused3 = add(lat.lat3, upsample2x_nearest(fused4));
  Var fused2 = add(lat.lat2, upsample2x_nearest(fused3));
  PyramidFeatures p;
  p.p2 = ctx.conv_bn_relu(smooth_layer(2), fused2, 1);
  p.p3 = fused3;
  p.p4 = ctx.conv_bn_relu(smooth_layer(4), fused4, 1);
  p.p5 = ctx.conv_bn_relu(smooth_layer(5), fused5, 1);
  return p;
}

inline PyramidFeatures fpn_forward(ForwardContext& ctx, const BackboneFeatures& c) {
  Laterals lat{lateral_forward(ctx, 2, c.c2), lateral_forward(ctx, 3, c.c3), lateral_forward(ctx, 4, c.c4),
               lateral_forward(ctx, 5, c.c5)};
  PyramidFeatures p = top_down(ctx, lat);
  p.c2 = c.c2;
  p.c3 = c.c3;
  p.c4 = c.c4;
  p.c5 = c.c5;
  return p;
}

inline EmbeddingTriple heads_forward(ForwardContext& ctx, Var p2, Var p4, Var p5) {
  auto head = [&](const char* name, Var p) {
    Var e = ctx.dense(name, global_avg_pool(p));
    return ctx.config().head_relu ? relu(e) : e;
  };
  return {head(kHeadLocal, p2), head(kHeadMedium, p4), head(kHeadGlobal, p5)};
}

inline Var classify(ForwardContext& ctx, Var global) { return ctx.dense(kClassifier, global); }

/// Backbone, pyramid, heads and classifier for one view.
inline ViewOutput view_forward(ForwardContext& ctx, Var frames) {
  PyramidFeatures p = fpn_forward(ctx, backbone_forward(ctx, frames));
  EmbeddingTriple e = heads_forward(ctx, p.p2, p.p4, p.p5);
  return {e, classify(ctx, e.global)};
}

/// Both views on one tape, view 1 first; in train mode each view's batch
/// norms see that view's batch only.
inline std::pair<ViewOutput, ViewOutput> model_forward(ForwardContext& ctx, Var view1, Var view2) {
  require(view1.shape() == view2.shape(), ErrorKind::ShapeError, "views differ in shape");
  ViewOutput a = view_forward(ctx, view1);
  ViewOutput b = view_forward(ctx, view2);
  return {a, b};
}

/// Concatenated pooled P2, P4 and P5: the input of the downstream classifier.
inline Var pooled_pyramid(const PyramidFeatures& p) {
  return concat_cols({global_avg_pool(p.p2), global_avg_pool(p.p4), global_avg_pool(p.p5)});
}

inline Var downstream_logits(ForwardContext& ctx, Var pooled) { return ctx.dense(kDownstream, pooled); }

}  // namespace hico
