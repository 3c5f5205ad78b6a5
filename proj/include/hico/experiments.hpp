#pragma once

// Comparison runners: convergence race, loss-term ablation and parameter
// sweeps. Each run pretrains (unless scratch), fine-tunes on fold 0 and keeps
// the per-epoch held-out metrics.

#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hico/eval.hpp"
#include "hico/trainer.hpp"

namespace hico {

/// Initialisation label for runs without pretraining.
inline constexpr const char* kScratch = "scratch";

struct RunSpec {
  std::string label;    // configuration name shared across seeds
  std::string mode;     // "scratch" or a pretrain mode
  std::optional<PretrainConfig> pretrain;  // empty for scratch
  std::uint64_t seed = 1;
};

struct RunResult {
  std::string run_id;
  std::string label;
  std::string mode;
  std::string toggles;
  int fold = 0;
  std::uint64_t seed = 0;
  std::vector<MetricsReport> history;

  double final_accuracy() const { return history.back().accuracy; }
  std::vector<double> accuracy_curve() const {
    std::vector<double> out;
    for (const auto& m : history) out.push_back(m.accuracy);
    return out;
  }
};

/// First epoch whose accuracy reaches `target`, if any.
inline std::optional<std::size_t> epochs_to_reach(const std::vector<double>& curve, double target) {
  for (std::size_t e = 0; e < curve.size(); ++e)
    if (curve[e] >= target) return e;
  return std::nullopt;
}

class ExperimentRunner {
 public:
  ExperimentRunner(const VideoDataset& pretrain_data, const VideoDataset& downstream, PretrainConfig base,
                   FinetuneConfig finetune)
      : pretrain_data_(pretrain_data), downstream_(downstream), base_(std::move(base)), finetune_(finetune) {
    const auto bytes = encode_dataset(pretrain_data_);
    data_tag_ = "data=" + std::to_string(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size()))) + ";";
  }

  /// Worker threads for independent runs (1 = sequential).
  void set_threads(std::size_t n) { threads_ = std::max<std::size_t>(1, n); }
  /// Directory for pretrained checkpoints keyed by configuration.
  void set_cache_dir(std::filesystem::path dir) { cache_dir_ = std::move(dir); }
  /// Called after each pretrain and each fine-tune with a short description.
  void set_progress(std::function<void(const std::string&)> fn) { progress_ = std::move(fn); }

  const PretrainConfig& base() const { return base_; }
  const FinetuneConfig& finetune_config() const { return finetune_; }

  RunSpec spec_for_mode(const std::string& mode, std::uint64_t seed) const {
    if (mode == kScratch) return {mode, mode, std::nullopt, seed};
    PretrainConfig c = base_;
    c.mode = parse_pretrain_mode(mode);
    c.toggles.reset();
    c.seed = seed;
    return {mode, mode, c, seed};
  }

  /// Scratch initialisation: the untouched starting point of pretraining.
  Model scratch_model(std::uint64_t seed) const { return initial_state(with_seed(seed), pretrain_data_.num_classes).model; }

  /// Pretrained backbone for a configuration, memoised in memory and on disk.
  std::shared_ptr<const Model> pretrained(const PretrainConfig& cfg) {
    const std::string key = data_tag_ + cfg.key();
    {
      std::lock_guard lock(mutex_);
      auto it = models_.find(key);
      if (it != models_.end()) return it->second;
    }
    std::shared_ptr<const Model> model;
    const auto file = cache_file(key);
    if (file && std::filesystem::exists(*file)) {
      const Checkpoint c = load_checkpoint(*file);
      auto it = c.meta.find("cache_key");
      if (it != c.meta.end() && it->second == key) model = std::make_shared<Model>(model_from_checkpoint(c));
    }
    if (!model) {
      auto [state, log] = pretrain(pretrain_data_, cfg);
      if (file) {
        Checkpoint c = make_checkpoint(state.model, nullptr, cfg.echo(), state.epochs_done);
        c.meta["cache_key"] = key;
        save_checkpoint(*file, c);
      }
      model = std::make_shared<Model>(std::move(state.model));
      report("pretrained " + to_string(cfg.mode) + " [" + cfg.terms().str() + "] seed " + std::to_string(cfg.seed));
    }
    std::lock_guard lock(mutex_);
    return models_.emplace(key, model).first->second;
  }

  /// Pretrains every distinct configuration, then fine-tunes each spec on
  /// fold 0 of its seed's split.
  std::vector<RunResult> run(const std::vector<RunSpec>& specs) {
    std::vector<const PretrainConfig*> unique;
    std::set<std::string> seen;
    for (const RunSpec& s : specs)
      if (s.pretrain && seen.insert(s.pretrain->key()).second) unique.push_back(&*s.pretrain);
    parallel_for(unique.size(), threads_, [&](std::size_t i) { pretrained(*unique[i]); });

    std::vector<RunResult> out(specs.size());
    parallel_for(specs.size(), threads_, [&](std::size_t i) {
      const RunSpec& s = specs[i];
      FinetuneConfig fc = finetune_;
      fc.seed = s.seed;
      const auto split = make_folds(downstream_, fc.folds, fc.seed).front();
      const Model init = s.pretrain ? *pretrained(*s.pretrain) : scratch_model(s.seed);
      FinetuneResult r = finetune(init, downstream_, split, fc, 0);
      out[i] = {s.label + "/seed" + std::to_string(s.seed),
                s.label,
                s.mode,
                s.pretrain ? s.pretrain->terms().str() : "none",
                0,
                s.seed,
                std::move(r.history)};
      report("fine-tuned " + out[i].run_id + " acc " + format_double(out[i].final_accuracy()));
    });
    return out;
  }

  std::vector<RunResult> convergence_compare(const std::vector<std::string>& modes,
                                             const std::vector<std::uint64_t>& seeds) {
    std::vector<RunSpec> specs;
    for (const auto& m : modes)
      for (auto seed : seeds) specs.push_back(spec_for_mode(m, seed));
    return run(specs);
  }

  std::vector<RunResult> run_ablation(const std::vector<TermToggles>& rows, const std::vector<std::uint64_t>& seeds) {
    std::vector<RunSpec> specs;
    for (const TermToggles& t : rows) {
      require(t.any(), ErrorKind::ConfigError, "an ablation row must enable at least one loss term");
      for (auto seed : seeds) {
        PretrainConfig c = with_seed(seed);
        c.mode = PretrainMode::Hico;
        c.toggles = t;
        specs.push_back({t.str(), "hico", c, seed});
      }
    }
    return run(specs);
  }

  /// axis: "batch_size" or "label_rate".
  std::vector<RunResult> sweep(const std::string& axis, const std::vector<double>& values,
                               const std::vector<std::uint64_t>& seeds) {
    require(!values.empty(), ErrorKind::ConfigError, "sweep needs at least one value");
    require(axis == "batch_size" || axis == "label_rate", ErrorKind::ConfigError,
            "sweep axis must be batch_size or label_rate");
    std::vector<RunSpec> specs;
    for (double v : values) {
      for (auto seed : seeds) {
        PretrainConfig c = with_seed(seed);
        if (axis == "batch_size") {
          require(v >= 1 && v == std::floor(v), ErrorKind::ConfigError, "batch sizes must be positive integers");
          c.batch_size = static_cast<std::size_t>(v);
        } else {
          c.label_rate = v;
        }
        c.validate();
        specs.push_back({axis + "=" + format_double(v), to_string(c.mode), c, seed});
      }
    }
    return run(specs);
  }

 private:
  PretrainConfig with_seed(std::uint64_t seed) const {
    PretrainConfig c = base_;
    c.seed = seed;
    return c;
  }

  std::optional<std::filesystem::path> cache_file(const std::string& key) const {
    if (!cache_dir_) return std::nullopt;
    char name[32];
    std::snprintf(name, sizeof name, "%016llx.hick", static_cast<unsigned long long>(fnv1a(key)));
    return *cache_dir_ / name;
  }

  void report(const std::string& msg) {
    if (!progress_) return;
    std::lock_guard lock(mutex_);
    progress_(msg);
  }

  const VideoDataset& pretrain_data_;
  const VideoDataset& downstream_;
  PretrainConfig base_;
  FinetuneConfig finetune_;
  std::size_t threads_ = 1;
  std::optional<std::filesystem::path> cache_dir_;
  std::function<void(const std::string&)> progress_;
  std::string data_tag_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const Model>> models_;
};

// ---------------------------------------------------------------------------
// Aggregation and output.

struct LabelSummary {
  std::string label;
  std::size_t runs = 0;
  MeanStd accuracy;
  double median_accuracy = 0.0;
  MeanStd macro_f1;
  std::vector<double> median_curve;  // per-epoch median accuracy
};

/// One summary per label, in first-appearance order.
inline std::vector<LabelSummary> summarize(const std::vector<RunResult>& results) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunResult*>> groups;
  for (const RunResult& r : results) {
    if (!groups.count(r.label)) order.push_back(r.label);
    groups[r.label].push_back(&r);
  }
  std::vector<LabelSummary> out;
  for (const auto& label : order) {
    const auto& runs = groups[label];
    LabelSummary s;
    s.label = label;
    s.runs = runs.size();
    std::vector<double> acc, f1;
    for (const RunResult* r : runs) {
      acc.push_back(r->final_accuracy());
      f1.push_back(r->history.back().macro_f1);
    }
    s.accuracy = mean_std(acc);
    s.macro_f1 = mean_std(f1);
    s.median_accuracy = median(acc);
    for (std::size_t e = 0; e < runs.front()->history.size(); ++e) {
      std::vector<double> at;
      for (const RunResult* r : runs)
        if (e < r->history.size()) at.push_back(r->history[e].accuracy);
      s.median_curve.push_back(median(at));
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline const LabelSummary& find_summary(const std::vector<LabelSummary>& s, const std::string& label) {
  for (const auto& x : s)
    if (x.label == label) return x;
  fail(ErrorKind::ConfigError, "no results for '" + label + "'");
}

/// One row per run and epoch.
inline std::string metrics_csv(const std::vector<RunResult>& results) {
  std::size_t classes = 0;
  for (const auto& r : results)
    if (!r.history.empty()) classes = std::max(classes, r.history.front().num_classes);
  std::string s = "run_id,mode,toggles,fold,seed,epoch,accuracy,macro_f1";
  for (std::size_t c = 0; c < classes; ++c) s += ",precision_c" + std::to_string(c);
  for (std::size_t c = 0; c < classes; ++c) s += ",recall_c" + std::to_string(c);
  s += "\n";
  auto quoted = [](const std::string& v) { return v.find(',') == std::string::npos ? v : "\"" + v + "\""; };
  for (const RunResult& r : results) {
    for (std::size_t e = 0; e < r.history.size(); ++e) {
      const MetricsReport& m = r.history[e];
      s += quoted(r.run_id) + "," + r.mode + "," + quoted(r.toggles) + "," + std::to_string(r.fold) + "," +
           std::to_string(r.seed) + "," + std::to_string(e) + "," + format_double(m.accuracy) + "," +
           format_double(m.macro_f1);
      for (double p : m.precision) s += "," + format_double(p);
      for (double q : m.recall) s += "," + format_double(q);
      s += "\n";
    }
  }
  return s;
}

inline nlohmann::json summary_json(const std::vector<LabelSummary>& summaries) {
  nlohmann::json out = nlohmann::json::object();
  for (const LabelSummary& s : summaries) {
    out[s.label] = {{"runs", s.runs},
                    {"accuracy_mean", s.accuracy.mean},
                    {"accuracy_std", s.accuracy.std},
                    {"accuracy_median", s.median_accuracy},
                    {"macro_f1_mean", s.macro_f1.mean},
                    {"macro_f1_std", s.macro_f1.std},
                    {"median_curve", s.median_curve}};
  }
  return out;
}

}  // namespace hico
