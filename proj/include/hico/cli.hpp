#pragma once

// Command-line front end. Each subcommand reads defaults, then an optional
// key=value file (--config), then explicit flags, and writes the resolved
// settings next to its outputs.

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hico/error.hpp"
#include "hico/eval.hpp"
#include "hico/experiments.hpp"
#include "hico/gradcheck.hpp"
#include "hico/io.hpp"
#include "hico/synth_data.hpp"
#include "hico/trainer.hpp"

namespace hico {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitVerification = 1, kExitConfig = 2, kExitIo = 3 };

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::IoError:
    case ErrorKind::FormatError:
    case ErrorKind::CorruptFile: return kExitIo;
    case ErrorKind::ShapeError:
    case ErrorKind::NotScalar:
    case ErrorKind::TapeConsumed:
    case ErrorKind::NumericalFailure: return kExitVerification;
    default: return kExitConfig;
  }
}

// ---------------------------------------------------------------------------
// Settings.

struct SettingKey {
  std::string name;
  std::string fallback;
  std::string help;
};

/// Resolved key/value settings for one subcommand.
class Settings {
 public:
  explicit Settings(std::vector<SettingKey> keys) : keys_(std::move(keys)) {
    for (const auto& k : keys_) values_[k.name] = k.fallback;
  }

  void bind(CLI::App& app) {
    app.add_option("--config", config_path_, "key=value file; flags given on the command line win");
    for (const auto& k : keys_) {
      CLI::Option* opt = app.add_option("--" + k.name, flags_[k.name], k.help);
      opt->default_str(k.fallback.empty() ? "\"\"" : k.fallback);
      options_[k.name] = opt;
    }
  }

  /// Applies the config file, then the flags that were actually given.
  void resolve() {
    if (!config_path_.empty()) {
      require(fs::exists(config_path_), ErrorKind::ConfigError, "config file not found: " + config_path_);
      const auto bytes = read_file(config_path_);
      for (const auto& [k, v] : parse_key_values(std::string(bytes.begin(), bytes.end()), config_path_)) {
        require(values_.count(k) > 0, ErrorKind::ConfigError, "unknown config key '" + k + "'");
        values_[k] = v;
      }
    }
    for (const auto& [name, opt] : options_)
      if (opt->count() > 0) values_[name] = flags_[name];
  }

  void set(const std::string& key, const std::string& value) {
    require(values_.count(key) > 0, ErrorKind::ConfigError, "unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    require(it != values_.end(), ErrorKind::ConfigError, "unknown setting '" + key + "'");
    return it->second;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  bool given(const std::string& key) const { return !str(key).empty(); }

  double real(const std::string& key) const {
    const std::string& v = str(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::ConfigError, key + " must be a number, got '" + v + "'");
  }

  std::uint64_t whole(const std::string& key) const {
    const std::string& v = str(key);
    const bool digits = !v.empty() && std::all_of(v.begin(), v.end(), [](char c) { return c >= '0' && c <= '9'; });
    require(digits, ErrorKind::ConfigError, key + " must be a non-negative integer, got '" + v + "'");
    try {
      return std::stoull(v);
    } catch (const std::exception&) {
      fail(ErrorKind::ConfigError, key + " is out of range");
    }
  }

  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(whole(key)); }

  bool flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    fail(ErrorKind::ConfigError, key + " must be 0 or 1, got '" + v + "'");
  }

  std::vector<std::string> list(const std::string& key, char sep = ',') const {
    std::vector<std::string> out;
    std::stringstream in(str(key));
    std::string item;
    while (std::getline(in, item, sep))
      if (!item.empty()) out.push_back(item);
    return out;
  }

  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : list(key)) {
      Settings one({{key, item, ""}});
      out.push_back(one.real(key));
    }
    require(!out.empty(), ErrorKind::ConfigError, key + " needs at least one value");
    return out;
  }

  std::vector<std::uint64_t> seeds(const std::string& key) const {
    std::vector<std::uint64_t> out;
    for (const auto& item : list(key)) {
      Settings one({{key, item, ""}});
      out.push_back(one.whole(key));
    }
    require(!out.empty(), ErrorKind::ConfigError, key + " needs at least one value");
    return out;
  }

  std::string to_text() const {
    std::string s;
    for (const auto& k : keys_) s += k.name + "=" + values_.at(k.name) + "\n";
    return s;
  }

 private:
  std::vector<SettingKey> keys_;
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> flags_;
  std::map<std::string, CLI::Option*> options_;
  std::string config_path_;
};

namespace cli_detail {

inline std::vector<SettingKey> operator+(std::vector<SettingKey> a, const std::vector<SettingKey>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline std::vector<SettingKey> without(std::vector<SettingKey> keys, const std::string& name) {
  std::erase_if(keys, [&name](const SettingKey& k) { return k.name == name; });
  return keys;
}

inline std::vector<SettingKey> pretrain_keys() {
  const PretrainConfig d;
  return {
      {"mode", "hico", "hico, vanilla_cl or scratch_supervised"},
      {"toggles", "", "loss terms (ll,mm,gg,gl,gm,soften or all); empty uses the mode's set"},
      {"epochs", std::to_string(d.epochs), "pretraining epochs"},
      {"batch", std::to_string(d.batch_size), "videos per step"},
      {"lr", format_double(d.lr), "Adam learning rate"},
      {"weight-decay", format_double(d.weight_decay), "weight decay"},
      {"decoupled-wd", "0", "1 applies weight decay outside the Adam moments"},
      {"lambda", format_double(d.weights.lambda), "peer/cross mixing weight"},
      {"alpha", format_double(d.weights.alpha), "label softening strength"},
      {"beta", format_double(d.weights.beta), "softened cross-entropy weight"},
      {"tau", format_double(d.weights.tau), "InfoNCE temperature"},
      {"smooth-denominator", "batch", "softening denominator: batch (N-1) or classes (C-1)"},
      {"cross-candidates", "exclude_aligned", "cross-level negatives: exclude_aligned or all"},
      {"label-rate", format_double(d.label_rate), "fraction of videos whose labels feed the softened term"},
      {"stem-stride", "auto", "1, 2 or auto (2 when the frame size is a multiple of 32)"},
  };
}

inline std::vector<SettingKey> finetune_keys() {
  const FinetuneConfig d;
  return {
      {"scope", to_string(d.scope), "last_3_layers, full or linear_probe"},
      {"folds", std::to_string(d.folds), "cross-validation folds"},
      {"ft-epochs", std::to_string(d.epochs), "fine-tune epochs"},
      {"ft-lr", format_double(d.lr), "fine-tune learning rate"},
      {"ft-weight-decay", format_double(d.weight_decay), "fine-tune weight decay"},
      {"ft-batch", std::to_string(d.batch_size), "frames per fine-tune step"},
  };
}

inline std::vector<SettingKey> experiment_keys() {
  return {
      {"pretrain-data", "default", "pretraining dataset file, or 'default' for the built-in corpus"},
      {"data", "default", "downstream dataset file, or 'default' for the built-in corpus"},
      {"seeds", "1,2,3,4,5", "comma-separated seeds"},
      {"out", "", "output directory"},
      {"cache", "", "directory for pretrained checkpoints reused across runs"},
  };
}

inline std::size_t stem_stride_for(const Settings& s, std::size_t image_size) {
  const std::string& v = s.str("stem-stride");
  if (v == "auto") return image_size % 32 == 0 ? 2 : 1;
  const std::size_t stride = s.size("stem-stride");
  require(stride == 1 || stride == 2, ErrorKind::ConfigError, "stem-stride must be 1, 2 or auto");
  return stride;
}

/// `single_terms` is false when "toggles" holds ablation rows instead.
inline PretrainConfig pretrain_config(const Settings& s, const VideoDataset& ds, bool single_terms = true) {
  PretrainConfig c;
  c.mode = parse_pretrain_mode(s.str("mode"));
  if (single_terms && s.given("toggles")) c.toggles = TermToggles::parse(s.str("toggles"));
  c.epochs = s.size("epochs");
  c.batch_size = s.size("batch");
  c.lr = s.real("lr");
  c.weight_decay = s.real("weight-decay");
  c.decoupled_weight_decay = s.flag("decoupled-wd");
  c.weights.lambda = s.real("lambda");
  c.weights.alpha = s.real("alpha");
  c.weights.beta = s.real("beta");
  c.weights.tau = s.real("tau");
  const std::string& denom = s.str("smooth-denominator");
  require(denom == "batch" || denom == "classes", ErrorKind::ConfigError, "smooth-denominator must be batch or classes");
  c.weights.smooth_denominator = denom == "batch" ? SmoothDenominator::BatchMinusOne : SmoothDenominator::ClassesMinusOne;
  const std::string& cand = s.str("cross-candidates");
  require(cand == "exclude_aligned" || cand == "all", ErrorKind::ConfigError,
          "cross-candidates must be exclude_aligned or all");
  c.weights.cross_candidates = cand == "all" ? CrossCandidates::AllRows : CrossCandidates::ExcludeAligned;
  c.label_rate = s.real("label-rate");
  if (s.has("seed")) c.seed = s.whole("seed");
  c.model.input_hw = ds.image_size;
  c.model.num_classes = ds.num_classes;
  c.model.stem_stride = stem_stride_for(s, ds.image_size);
  c.validate();
  return c;
}

inline FinetuneConfig finetune_config(const Settings& s) {
  FinetuneConfig c;
  c.scope = parse_scope(s.str("scope"));
  c.folds = s.size("folds");
  c.epochs = s.size("ft-epochs");
  c.lr = s.real("ft-lr");
  c.weight_decay = s.real("ft-weight-decay");
  c.batch_size = s.size("ft-batch");
  if (s.has("seed")) c.seed = s.whole("seed");
  c.validate();
  return c;
}

inline void require_file(const std::string& path, const std::string& what) {
  require(!path.empty(), ErrorKind::ConfigError, what + " path is required");
  require(fs::exists(path), ErrorKind::ConfigError, what + " not found: " + path);
}

inline fs::path require_out(const Settings& s) {
  require(s.given("out"), ErrorKind::ConfigError, "--out is required");
  fs::path out = s.str("out");
  fs::create_directories(out);
  return out;
}

inline VideoDataset load_data(const std::string& path, bool pretraining) {
  if (path == "default") return generate_dataset(pretraining ? pretrain_manifest() : downstream_manifest());
  require_file(path, "dataset");
  return read_dataset(path);
}

inline std::string meta_or(const Checkpoint& c, const std::string& key, const std::string& fallback) {
  auto it = c.meta.find(key);
  return it == c.meta.end() ? fallback : it->second;
}

/// One CSV row group and summary per evaluated model.
inline nlohmann::json metrics_json(const MetricsReport& m) {
  return {{"accuracy", m.accuracy}, {"macro_f1", m.macro_f1}, {"precision", m.precision}, {"recall", m.recall},
          {"f1", m.f1},             {"confusion", m.confusion}, {"total", m.total}};
}

// ---------------------------------------------------------------------------
// Commands.

inline int cmd_gen_data(const Settings& s, std::ostream& out) {
  const std::string& preset = s.str("preset");
  require(preset == "pretrain" || preset == "downstream", ErrorKind::ConfigError,
          "preset must be pretrain or downstream");
  DatasetManifest m = preset == "pretrain" ? pretrain_manifest(s.whole("seed")) : downstream_manifest(s.whole("seed"));
  auto maybe_size = [&s](const char* key, std::size_t& field) {
    if (s.given(key)) field = s.size(key);
  };
  auto maybe_real = [&s](const char* key, double& field) {
    if (s.given(key)) field = s.real(key);
  };
  maybe_size("videos", m.num_videos);
  maybe_size("classes", m.num_classes);
  maybe_size("frames", m.frames_per_video);
  maybe_size("size", m.image_size);
  maybe_real("freq-min", m.gen.freq_min);
  maybe_real("freq-max", m.gen.freq_max);
  maybe_real("orientation-offset", m.gen.orientation_offset);
  maybe_real("texture", m.gen.texture_amplitude);
  maybe_real("noise", m.gen.noise_sigma);
  maybe_real("drift", m.gen.drift);
  m.validate();

  const fs::path dir = require_out(s);
  const std::string name = s.str("name");
  require(!name.empty(), ErrorKind::ConfigError, "name must not be empty");
  const VideoDataset ds = generate_dataset(m);
  write_dataset(ds, dir / (name + ".hico"));
  write_manifest(m, dir / (name + ".manifest"));
  write_text_atomic(dir / (name + ".config"), s.to_text());
  out << "wrote " << (dir / (name + ".hico")).string() << ": " << ds.size() << " videos, " << ds.num_classes
      << " classes, " << m.frames_per_video << " frames of " << m.image_size << "x" << m.image_size << "\n";
  return kExitOk;
}

inline int cmd_pretrain(const Settings& s, std::ostream& out) {
  require_file(s.str("data"), "dataset");
  const VideoDataset ds = read_dataset(s.str("data"));
  const PretrainConfig cfg = pretrain_config(s, ds);
  const fs::path dir = require_out(s);

  TrainState state = initial_state(cfg, ds.num_classes);
  if (s.given("resume")) {
    require_file(s.str("resume"), "checkpoint");
    state = state_from_checkpoint(load_checkpoint(s.str("resume")));
    require(PretrainConfig::model_key(state.model.config) == PretrainConfig::model_key(cfg.model),
            ErrorKind::ConfigError, "checkpoint model does not match the requested configuration");
  }
  PretrainOptions opts;
  opts.timing = s.flag("timing");
  const TrainLog log = pretrain(ds, cfg, state, opts);

  save_checkpoint(dir / "model.hick", make_checkpoint(state, cfg));
  write_text_atomic(dir / "train.csv", log.to_csv());
  write_text_atomic(dir / "config.txt", s.to_text());
  const auto means = log.epoch_means();
  out << "pretrained " << to_string(cfg.mode) << " [" << cfg.terms().str() << "] for " << state.epochs_done
      << " epochs";
  if (!means.empty()) out << ", last epoch mean loss " << format_double(means.back());
  out << "\n";
  return kExitOk;
}

/// Initial model for fine-tuning: a checkpoint, or the untouched pretraining
/// initialisation when ckpt is "scratch".
inline Model initial_model(const Settings& s, const VideoDataset& ds, std::string& source, std::string& toggles) {
  toggles = "none";
  if (s.str("ckpt") == kScratch) {
    source = kScratch;
    BackboneConfig mc;
    mc.input_hw = ds.image_size;
    mc.num_classes = ds.num_classes;
    mc.stem_stride = ds.image_size % 32 == 0 ? 2 : 1;
    return make_model(mc, derive_seed(s.whole("seed"), "init"));
  }
  require_file(s.str("ckpt"), "checkpoint");
  const Checkpoint c = load_checkpoint(s.str("ckpt"));
  source = meta_or(c, "config.mode", "checkpoint");
  toggles = meta_or(c, "config.toggles", "none");
  return model_from_checkpoint(c);
}

inline int cmd_finetune(const Settings& s, std::ostream& out) {
  require_file(s.str("data"), "dataset");
  const VideoDataset ds = read_dataset(s.str("data"));
  std::string source, toggles;
  const Model init = initial_model(s, ds, source, toggles);
  const FinetuneConfig cfg = finetune_config(s);
  const fs::path dir = require_out(s);

  const auto splits = make_folds(ds, cfg.folds, cfg.seed);
  std::vector<std::size_t> which;
  if (s.str("fold") == "all") {
    for (std::size_t f = 0; f < splits.size(); ++f) which.push_back(f);
  } else {
    const std::size_t f = s.size("fold");
    require(f < splits.size(), ErrorKind::ConfigError, "fold must be below folds");
    which.push_back(f);
  }

  std::vector<FinetuneResult> fits(which.size());
  parallel_for(which.size(), threads_from_env(), [&](std::size_t i) {
    fits[i] = finetune(init, ds, splits[which[i]], cfg, static_cast<int>(which[i]));
  });

  std::vector<RunResult> rows;
  std::vector<double> acc, f1;
  nlohmann::json folds = nlohmann::json::array();
  for (std::size_t i = 0; i < which.size(); ++i) {
    const int fold = static_cast<int>(which[i]);
    rows.push_back({"fold" + std::to_string(fold), source, source, toggles, fold, cfg.seed,
                    fits[i].history});
    acc.push_back(fits[i].final_metrics().accuracy);
    f1.push_back(fits[i].final_metrics().macro_f1);
    nlohmann::json j = metrics_json(fits[i].final_metrics());
    j["fold"] = fold;
    folds.push_back(j);
    if (s.flag("save-models")) {
      const Checkpoint c = make_checkpoint(
          fits[i].model, nullptr, {{"mode", source}, {"toggles", toggles}, {"scope", to_string(cfg.scope)}}, cfg.epochs);
      save_checkpoint(dir / ("fold" + std::to_string(fold) + ".hick"), c);
    }
  }
  const MeanStd a = mean_std(acc), m = mean_std(f1);
  const nlohmann::json summary = {{"source", source},      {"scope", to_string(cfg.scope)},
                                  {"accuracy_mean", a.mean}, {"accuracy_std", a.std},
                                  {"macro_f1_mean", m.mean}, {"macro_f1_std", m.std},
                                  {"folds", folds}};
  write_text_atomic(dir / "metrics.csv", metrics_csv(rows));
  write_text_atomic(dir / "summary.json", summary.dump(2) + "\n");
  write_text_atomic(dir / "config.txt", s.to_text());
  out << "fine-tuned " << source << " (" << to_string(cfg.scope) << ") on " << which.size()
      << " fold(s): accuracy " << format_double(a.mean) << " +- " << format_double(a.std) << ", macro-F1 "
      << format_double(m.mean) << "\n";
  return kExitOk;
}

inline int cmd_eval(const Settings& s, std::ostream& out) {
  require_file(s.str("ckpt"), "checkpoint");
  require_file(s.str("data"), "dataset");
  const VideoDataset ds = read_dataset(s.str("data"));
  const Checkpoint c = load_checkpoint(s.str("ckpt"));
  Model m = model_from_checkpoint(c);
  const std::string head = std::string(kDownstream) + ".weight";
  require(m.store.contains(head), ErrorKind::ConfigError, "checkpoint has no downstream classifier; fine-tune first");
  require(m.store.get(head).value.dim(1) == ds.num_classes, ErrorKind::ConfigError,
          "classifier width does not match the dataset's class count");
  require(m.config.input_hw == ds.image_size, ErrorKind::ConfigError, "frame size does not match the model");

  std::vector<std::size_t> videos;
  int fold = -1;
  if (s.str("fold") == "all") {
    for (std::size_t v = 0; v < ds.size(); ++v) videos.push_back(v);
  } else {
    const auto splits = make_folds(ds, s.size("folds"), s.whole("seed"));
    const std::size_t f = s.size("fold");
    require(f < splits.size(), ErrorKind::ConfigError, "fold must be below folds");
    videos = splits[f].test;
    fold = static_cast<int>(f);
  }
  auto [frames, labels] = frames_of(ds, videos);
  const auto inputs = detail::cached_inputs(m, FinetuneScope::LinearProbe, frames);
  MetricsReport r = compute_metrics(detail::predict(m, FinetuneScope::LinearProbe, inputs), labels, ds.num_classes);
  r.fold = fold;
  r.seed = s.whole("seed");

  const fs::path dir = require_out(s);
  const std::string source = meta_or(c, "config.mode", "checkpoint");
  write_text_atomic(dir / "metrics.csv", metrics_csv({{"eval", source, source, meta_or(c, "config.toggles", "none"), fold,
                                                       r.seed, {r}}}));
  nlohmann::json j = metrics_json(r);
  j["fold"] = fold;
  write_text_atomic(dir / "summary.json", j.dump(2) + "\n");
  write_text_atomic(dir / "config.txt", s.to_text());
  out << "evaluated " << labels.size() << " frames: accuracy " << format_double(r.accuracy) << ", macro-F1 "
      << format_double(r.macro_f1) << "\n";
  return kExitOk;
}

/// Shared driver for compare, ablate and sweep.
template <typename Body>
int run_experiment(const Settings& s, std::ostream& out, std::ostream& err, Body body, bool single_terms = true) {
  const VideoDataset pre = load_data(s.str("pretrain-data"), true);
  const VideoDataset down = load_data(s.str("data"), false);
  require(pre.image_size == down.image_size, ErrorKind::ConfigError,
          "pretraining and downstream frames differ in size");
  const PretrainConfig base = pretrain_config(s, pre, single_terms);
  const FinetuneConfig ft = finetune_config(s);
  const fs::path dir = require_out(s);

  ExperimentRunner runner(pre, down, base, ft);
  runner.set_threads(threads_from_env());
  if (s.given("cache")) runner.set_cache_dir(s.str("cache"));
  runner.set_progress([&err](const std::string& msg) { err << msg << "\n"; });
  const std::vector<RunResult> results = body(runner, s.seeds("seeds"));

  const auto summaries = summarize(results);
  write_text_atomic(dir / "curves.csv", metrics_csv(results));
  write_text_atomic(dir / "summary.json", summary_json(summaries).dump(2) + "\n");
  write_text_atomic(dir / "config.txt", s.to_text());
  for (const LabelSummary& l : summaries)
    out << l.label << ": median accuracy " << format_double(l.median_accuracy) << ", mean "
        << format_double(l.accuracy.mean) << " +- " << format_double(l.accuracy.std) << " over " << l.runs
        << " run(s)\n";
  return kExitOk;
}

inline int cmd_gradcheck(const Settings& s, std::ostream& out) {
  const std::string& target = s.str("target");
  require(target == "all" || target == "primitives" || target == "losses" || target == "full", ErrorKind::ConfigError,
          "target must be primitives, losses, full or all");
  const std::uint64_t seed = s.whole("seed");
  GradcheckReport report;
  auto append = [&report](GradcheckReport more) { report.insert(report.end(), more.begin(), more.end()); };
  if (target == "all" || target == "primitives") append(check_primitives(seed));
  if (target == "all" || target == "losses") append(check_losses(seed));
  if (target == "all" || target == "full") append(check_full_suite(s.size("size"), s.size("channels"), seed));

  std::string csv = "target,max_rel_error,threshold,coordinates,worst_param,passed\n";
  for (const GradcheckItem& item : report) {
    out << (item.passed() ? "PASS " : "FAIL ") << item.name << ": max rel err "
        << format_double(item.result.max_rel_error) << " (threshold " << format_double(item.threshold) << ", "
        << item.result.coordinates << " coords)\n";
    csv += "\"" + item.name + "\"," + format_double(item.result.max_rel_error) + "," + format_double(item.threshold) +
           "," + std::to_string(item.result.coordinates) + "," + item.result.worst_param + "," +
           (item.passed() ? "1" : "0") + "\n";
  }
  if (s.given("out")) {
    const fs::path dir = require_out(s);
    write_text_atomic(dir / "gradcheck.csv", csv);
    write_text_atomic(dir / "config.txt", s.to_text());
  }
  return all_passed(report) ? kExitOk : kExitVerification;
}

}  // namespace cli_detail

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Hierarchical contrastive pretraining on synthetic videos"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  struct Command {
    CLI::App* app;
    std::unique_ptr<Settings> settings;
    std::function<int(const Settings&)> run;
  };
  std::vector<Command> commands;
  auto add = [&](const char* name, const char* about, std::vector<SettingKey> keys,
                 std::function<int(const Settings&)> run) {
    CLI::App* sub = app.add_subcommand(name, about);
    auto settings = std::make_unique<Settings>(std::move(keys));
    settings->bind(*sub);
    commands.push_back({sub, std::move(settings), std::move(run)});
  };

  add("gen-data", "Generate a synthetic video dataset",
      {{"seed", "2024", "generator seed"},
       {"preset", "pretrain", "generator preset: pretrain or downstream"},
       {"videos", "", "number of videos (preset default if empty)"},
       {"classes", "", "number of classes"},
       {"frames", "", "frames per video"},
       {"size", "", "frame height and width"},
       {"freq-min", "", "lowest grating frequency, cycles per frame"},
       {"freq-max", "", "highest grating frequency"},
       {"orientation-offset", "", "orientation shift in radians"},
       {"texture", "", "shared texture amplitude"},
       {"noise", "", "pixel noise sigma"},
       {"drift", "", "maximum phase drift per frame"},
       {"name", "train", "output file stem"},
       {"out", "", "output directory"}},
      [&](const Settings& s) { return cmd_gen_data(s, out); });

  add("pretrain", "Pretrain an encoder",
      std::vector<SettingKey>{{"data", "", "dataset file"},
                              {"seed", "1", "run seed"},
                              {"out", "", "output directory"},
                              {"resume", "", "checkpoint to continue from"},
                              {"timing", "0", "1 records seconds per step in train.csv"}} +
          pretrain_keys(),
      [&](const Settings& s) { return cmd_pretrain(s, out); });

  add("finetune", "Fine-tune a checkpoint with k-fold cross-validation",
      std::vector<SettingKey>{{"ckpt", "", "pretrained checkpoint, or 'scratch'"},
                              {"data", "", "downstream dataset file"},
                              {"seed", "1", "fold and head seed"},
                              {"fold", "all", "fold index or 'all'"},
                              {"out", "", "output directory"},
                              {"save-models", "1", "1 writes fold<k>.hick"}} +
          finetune_keys(),
      [&](const Settings& s) { return cmd_finetune(s, out); });

  add("eval", "Evaluate a fine-tuned checkpoint",
      {{"ckpt", "", "fine-tuned checkpoint"},
       {"data", "", "dataset file"},
       {"seed", "1", "fold seed"},
       {"folds", "5", "folds used to pick the held-out videos"},
       {"fold", "all", "fold index, or 'all' for every video"},
       {"out", "", "output directory"}},
      [&](const Settings& s) { return cmd_eval(s, out); });

  const auto experiment = experiment_keys() + pretrain_keys() + finetune_keys();
  add("compare", "Convergence comparison across initialisations",
      std::vector<SettingKey>{{"modes", "scratch,vanilla_cl,hico", "initialisations to compare"}} +
          experiment,
      [&](const Settings& s) {
        return run_experiment(s, out, err, [&s](ExperimentRunner& r, const std::vector<std::uint64_t>& seeds) {
          return r.convergence_compare(s.list("modes"), seeds);
        });
      });

  add("ablate", "Loss-term ablation",
      std::vector<SettingKey>{{"toggles", "gg;gg,mm;gg,mm,ll;gg,mm,ll,gl,gm;all", "';'-separated term sets"}} +
          without(experiment, "toggles"),
      [&](const Settings& s) {
        return run_experiment(s, out, err, [&s](ExperimentRunner& r, const std::vector<std::uint64_t>& seeds) {
          std::vector<TermToggles> rows;
          for (const auto& row : s.list("toggles", ';')) rows.push_back(TermToggles::parse(row));
          require(!rows.empty(), ErrorKind::ConfigError, "toggles needs at least one row");
          return r.run_ablation(rows, seeds);
        }, false);
      });

  add("sweep", "Sweep batch size or label rate",
      std::vector<SettingKey>{{"axis", "label_rate", "batch_size or label_rate"},
                              {"values", "0,0.2,0.4,0.6,0.8,1", "comma-separated values"}} +
          experiment,
      [&](const Settings& s) {
        return run_experiment(s, out, err, [&s](ExperimentRunner& r, const std::vector<std::uint64_t>& seeds) {
          return r.sweep(s.str("axis"), s.reals("values"), seeds);
        });
      });

  add("gradcheck", "Finite-difference gradient verification",
      {{"target", "all", "primitives, losses, full or all"},
       {"size", "8", "input size for the full objective"},
       {"channels", "4", "channel width for the full objective"},
       {"seed", "1", "seed for random inputs"},
       {"out", "", "optional output directory for gradcheck.csv"}},
      [&](const Settings& s) { return cmd_gradcheck(s, out); });

  try {
    std::vector<std::string> args;
    for (int i = argc - 1; i >= 1; --i) args.emplace_back(argv[i]);
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    for (Command& c : commands) {
      if (!c.app->parsed()) continue;
      c.settings->resolve();
      return c.run(*c.settings);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitVerification;
  }
  return kExitConfig;
}

}  // namespace hico
