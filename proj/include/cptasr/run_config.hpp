#pragma once

// JSON run configuration for the command-line tool. One top-level seed fans
// out to every stage by fixed offsets.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "cptasr/corpus.hpp"
#include "cptasr/errors.hpp"
#include "cptasr/net.hpp"
#include "cptasr/optim.hpp"
#include "cptasr/pipeline.hpp"

namespace cptasr {

struct SeedPlan {
  std::uint64_t init, split, stage1, stage2, stage3, baseline;
};

inline SeedPlan fan_out_seed(std::uint64_t seed) {
  return {seed, seed + 1, seed + 10, seed + 20, seed + 30, seed + 10};
}

struct RunPaths {
  std::optional<std::filesystem::path> labeled;
  std::optional<std::filesystem::path> unlabeled;
  std::optional<std::filesystem::path> eval;
  /// Optional larger labeled set for a second baseline.
  std::optional<std::filesystem::path> baseline_labeled;
};

struct RunConfig {
  std::uint64_t seed = 1;
  double threshold = kDefaultConfidenceThreshold;
  std::filesystem::path output_dir = "runs/default";
  SynthConfig synth;
  /// Speaker-disjoint eval utterances carved off by gen-data (0 keeps none).
  int eval_count = 0;
  NetConfig net;
  std::map<std::string, StageConfig> stages{{"stage1", stage_preset("stage1")},
                                            {"stage2-cpt", stage_preset("stage2-cpt")},
                                            {"stage3-finetune", stage_preset("stage3-finetune")},
                                            {"baseline", stage_preset("baseline")}};
  double val_fraction = 0.1;
  CptInit cpt_init = CptInit::fresh;
  bool mix_labeled_in_cpt = false;
  RunPaths paths;

  /// Stage with its seed filled in from the fan-out.
  StageConfig stage(const std::string& name) const {
    StageConfig s = stages.at(name);
    const auto plan = fan_out_seed(seed);
    s.seed = name == "stage1" ? plan.stage1 : name == "stage2-cpt" ? plan.stage2 : name == "stage3-finetune" ? plan.stage3 : plan.baseline;
    return s;
  }

  StageConfigs pipeline_stages() const { return {stage("stage1"), stage("stage2-cpt"), stage("stage3-finetune")}; }

  PipelineOptions pipeline_options() const {
    PipelineOptions o;
    o.threshold = threshold;
    o.init_seed = fan_out_seed(seed).init;
    o.split_seed = fan_out_seed(seed).split;
    o.val_fraction = val_fraction;
    o.cpt_init = cpt_init;
    o.mix_labeled_in_cpt = mix_labeled_in_cpt;
    return o;
  }

  void validate() const {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("config: threshold must lie in [0, 1]");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("config: val_fraction must lie in (0, 1)");
    if (eval_count < 0) throw ConfigError("config: eval_count must be >= 0");
    synth.validate();
    NetConfig n = net;
    n.validate();
    for (const auto& [name, s] : stages) s.validate();
  }
};

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, std::set<std::string>& seen) {
  seen.insert(key);
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: field '") + key + "': " + e.what());
  }
}

inline void read_range(const nlohmann::json& j, const char* key, IntRange& out, std::set<std::string>& seen) {
  seen.insert(key);
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer())
    throw ConfigError(std::string("config: field '") + key + "' must be [min, max]");
  out = {v[0].get<int>(), v[1].get<int>()};
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& seen, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, _] : j.items())
    if (!seen.contains(key)) throw ConfigError("config: unknown field '" + key + "' in " + where);
}

template <typename T>
void read_optional(const nlohmann::json& j, const char* key, std::optional<T>& out, std::set<std::string>& seen) {
  seen.insert(key);
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read_field(j, key, v, seen);
  out = v;
}

}  // namespace detail

inline SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig c = {}) {
  std::set<std::string> seen;
  detail::read_field(j, "n_speakers", c.n_speakers, seen);
  detail::read_field(j, "n_utterances", c.n_utterances, seen);
  detail::read_field(j, "labeled_fraction", c.labeled_fraction, seen);
  detail::read_range(j, "chars_per_utterance", c.chars_per_utterance, seen);
  detail::read_range(j, "frames_per_char", c.frames_per_char, seen);
  detail::read_field(j, "feature_dim", c.feature_dim, seen);
  detail::read_field(j, "noise_sigma", c.noise_sigma, seen);
  detail::read_field(j, "speaker_shift_sigma", c.speaker_shift_sigma, seen);
  detail::read_field(j, "seed", c.seed, seen);
  detail::read_field(j, "alphabet", c.alphabet, seen);
  detail::read_range(j, "word_length", c.word_length, seen);
  detail::reject_unknown(j, seen, "synth");
  return c;
}

inline NetConfig net_config_from_json(const nlohmann::json& j, NetConfig c = {}) {
  std::set<std::string> seen;
  detail::read_field(j, "feature_dim", c.feature_dim, seen);
  detail::read_field(j, "downsample_factor", c.downsample_factor, seen);
  detail::read_field(j, "conv_layers", c.conv_layers, seen);
  detail::read_field(j, "conv_channels", c.conv_channels, seen);
  detail::read_field(j, "context_layers", c.context_layers, seen);
  detail::read_field(j, "hidden_dim", c.hidden_dim, seen);
  detail::read_field(j, "context_window", c.context_window, seen);
  detail::read_field(j, "dropout_rate", c.dropout_rate, seen);
  detail::reject_unknown(j, seen, "net");
  return c;
}

inline nlohmann::json to_json(const NetConfig& c) {
  return {{"feature_dim", c.feature_dim},       {"downsample_factor", c.downsample_factor},
          {"conv_layers", c.conv_layers},       {"conv_channels", c.conv_channels},
          {"context_layers", c.context_layers}, {"hidden_dim", c.hidden_dim},
          {"context_window", c.context_window}, {"vocab_size", c.vocab_size},
          {"dropout_rate", c.dropout_rate}};
}

/// A stage is a preset name, or an object {"preset": name, ...overrides}.
/// "lr_scale" multiplies the resulting learning rate.
inline StageConfig stage_config_from_json(const nlohmann::json& j, const std::string& default_preset) {
  if (j.is_string()) return stage_preset(j.get<std::string>());
  std::set<std::string> seen{"preset", "lr_scale"};
  if (!j.is_object()) throw ConfigError("config: stage must be a preset name or an object");
  StageConfig s = stage_preset(j.value("preset", default_preset));
  detail::read_field(j, "learning_rate", s.learning_rate, seen);
  detail::read_field(j, "epochs", s.epochs, seen);
  detail::read_field(j, "batch_size", s.batch_size, seen);
  detail::read_field(j, "warmup_ratio", s.warmup_ratio, seen);
  detail::read_field(j, "weight_decay", s.weight_decay, seen);
  detail::read_field(j, "label_smoothing", s.label_smoothing, seen);
  detail::read_optional(j, "grad_clip_norm", s.grad_clip_norm, seen);
  detail::read_optional(j, "patience", s.patience, seen);
  detail::read_field(j, "dropout_rate", s.dropout_rate, seen);
  detail::reject_unknown(j, seen, "stage");
  if (j.contains("lr_scale")) s.learning_rate *= j.at("lr_scale").get<double>();
  return s;
}

/// Relative paths resolve against the working directory.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  std::set<std::string> seen{"synth", "net", "stages", "paths", "pipeline"};
  detail::read_field(j, "seed", c.seed, seen);
  detail::read_field(j, "threshold", c.threshold, seen);
  std::string out = c.output_dir.string();
  detail::read_field(j, "output_dir", out, seen);
  c.output_dir = out;
  detail::read_field(j, "eval_count", c.eval_count, seen);
  detail::reject_unknown(j, seen, "run config");

  c.synth.seed = c.seed;
  if (j.contains("synth")) c.synth = synth_config_from_json(j.at("synth"), c.synth);
  if (j.contains("net")) c.net = net_config_from_json(j.at("net"));
  if (j.contains("stages")) {
    const auto& st = j.at("stages");
    if (!st.is_object()) throw ConfigError("config: 'stages' must be an object");
    for (const auto& [name, v] : st.items()) {
      if (!c.stages.contains(name))
        throw ConfigError("config: unknown stage '" + name + "' (expected stage1, stage2-cpt, stage3-finetune, baseline)");
      c.stages[name] = stage_config_from_json(v, name);
    }
  }
  if (j.contains("pipeline")) {
    const auto& p = j.at("pipeline");
    std::set<std::string> ps;
    detail::read_field(p, "val_fraction", c.val_fraction, ps);
    std::string init = "fresh";
    detail::read_field(p, "cpt_init", init, ps);
    if (init == "fresh") c.cpt_init = CptInit::fresh;
    else if (init == "labeler") c.cpt_init = CptInit::labeler;
    else throw ConfigError("config: cpt_init must be 'fresh' or 'labeler'");
    detail::read_field(p, "mix_labeled_in_cpt", c.mix_labeled_in_cpt, ps);
    detail::reject_unknown(p, ps, "pipeline");
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    std::set<std::string> ps;
    auto path = [&](const char* key, std::optional<std::filesystem::path>& dst) {
      std::optional<std::string> s;
      detail::read_optional(p, key, s, ps);
      if (s) dst = *s;
    };
    path("labeled", c.paths.labeled);
    path("unlabeled", c.paths.unlabeled);
    path("eval", c.paths.eval);
    path("baseline_labeled", c.paths.baseline_labeled);
    detail::reject_unknown(p, ps, "paths");
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open run config: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("run config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace cptasr
