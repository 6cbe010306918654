#pragma once

// Continued pretraining on confidence-filtered pseudo-labels:
//   A. train a labeling model on labeled data
//   B. greedy-decode the unlabeled pool, keep confident non-empty hypotheses
//   C. continue pretraining on those pseudo-labels
//   D. finetune the CPT checkpoint on the labeled data
// and the direct-finetuning baseline it is compared against.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptasr/checkpoint.hpp"
#include "cptasr/corpus.hpp"
#include "cptasr/errors.hpp"
#include "cptasr/eval.hpp"
#include "cptasr/net.hpp"
#include "cptasr/optim.hpp"
#include "cptasr/train.hpp"

namespace cptasr {

/// Labeling-model WER at or above this draws a warning: pseudo-labels from a
/// weaker model are likely too noisy to help.
inline constexpr double kLabelerWerGate = 0.25;
inline constexpr double kDefaultConfidenceThreshold = 0.75;

struct PseudoLabel {
  std::string utterance_id;
  std::string hypothesis;
  double confidence = 0.0;
};

struct PseudoLabelStats {
  std::size_t total = 0;
  std::size_t kept = 0;
  std::size_t empty_dropped = 0;
  std::size_t below_threshold = 0;
};

struct PseudoLabelResult {
  Dataset dataset{{}, DatasetKind::pseudo_labeled};
  PseudoLabelStats stats;
  /// Every decode, kept or not, ordered by utterance id.
  std::vector<PseudoLabel> labels;
};

/// Keeps utterances whose hypothesis is non-empty and whose confidence is
/// strictly above `threshold`. Output is ordered by utterance id.
inline PseudoLabelResult generate_pseudo_labels(const Parameters& params, const NetConfig& cfg,
                                                const Vocabulary& vocab, const Dataset& pool, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("pseudo-label threshold must lie in [0, 1]");
  const auto decoded = decode_dataset(params, cfg, vocab, pool);

  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return pool.utterances[a].id < pool.utterances[b].id; });

  PseudoLabelResult r;
  r.stats.total = pool.size();
  for (std::size_t i : order) {
    const auto& d = decoded[i];
    const auto& u = pool.utterances[i];
    r.labels.push_back({u.id, d.hypothesis, d.confidence});
    if (d.hypothesis.empty()) {
      ++r.stats.empty_dropped;
    } else if (!(d.confidence > threshold)) {
      ++r.stats.below_threshold;
    } else {
      Utterance kept{u.id, u.speaker_id, u.features, d.hypothesis};
      r.dataset.utterances.push_back(std::move(kept));
      ++r.stats.kept;
    }
  }
  return r;
}

enum class CptInit { fresh, labeler };

struct PipelineOptions {
  double threshold = kDefaultConfidenceThreshold;
  std::uint64_t init_seed = 0;
  std::uint64_t split_seed = 1;
  /// Share of the labeled data carved off (speaker-disjoint) for validation.
  double val_fraction = 0.1;
  CptInit cpt_init = CptInit::fresh;
  /// Train CPT on pseudo-labels plus the labeled training data.
  bool mix_labeled_in_cpt = false;
  /// When set, "labeler", "cpt" and "final" checkpoints are written here.
  std::optional<std::filesystem::path> output_dir;
  std::ostream* log = nullptr;
};

struct StageConfigs {
  StageConfig stage1 = stage_preset("stage1");
  StageConfig stage2 = stage_preset("stage2-cpt");
  StageConfig stage3 = stage_preset("stage3-finetune");
};

/// Labeled data split into training and speaker-disjoint validation parts.
struct LabeledSplit {
  Dataset train;
  Dataset val;
};

inline LabeledSplit split_for_validation(const Dataset& labeled, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  const auto count = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(labeled.size())));
  auto [train, val] = speaker_disjoint_split(labeled, std::max<std::size_t>(count, 1), seed);
  return {std::move(train), std::move(val)};
}

inline Vocabulary labeled_vocabulary(const Dataset& labeled) {
  if (labeled.kind != DatasetKind::labeled) throw DataError("expected a labeled dataset");
  if (labeled.empty()) throw DataError("labeled dataset is empty");
  return build_vocabulary(labeled.transcripts());
}

inline NetConfig with_vocab(NetConfig net, const Vocabulary& vocab) {
  net.vocab_size = vocab.size();
  return net;
}

struct BaselineResult {
  Parameters params;
  TrainHistory history;
  WerReport eval;
  Vocabulary vocab;
  NetConfig net;
};

/// Fresh init, one training stage on the labeled data, evaluation on eval_ds.
/// Uses the same validation carve-out and seeds as stage A of the pipeline.
inline BaselineResult run_baseline(const Dataset& labeled, const Dataset& eval_ds, const StageConfig& stage,
                                   const NetConfig& net_in, const PipelineOptions& opts = {}) {
  const Vocabulary vocab = labeled_vocabulary(labeled);
  const NetConfig net = with_vocab(net_in, vocab);
  const auto split = split_for_validation(labeled, opts.val_fraction, opts.split_seed);
  TrainOptions topts;
  topts.log = opts.log;
  auto trained = train_stage(init_parameters(net, opts.init_seed), net, vocab, split.train, split.val, stage, topts);
  BaselineResult r{std::move(trained.params), std::move(trained.history), {}, vocab, net};
  r.eval = evaluate_wer(r.params, net, vocab, eval_ds);
  return r;
}

struct PipelineReport {
  double threshold = kDefaultConfidenceThreshold;
  double labeler_val_wer = 0.0;
  double labeler_eval_wer = 0.0;
  bool labeler_below_gate = true;
  PseudoLabelStats pool;
  double retained_fraction = 0.0;
  TrainHistory labeler_history;
  TrainHistory cpt_history;
  TrainHistory finetune_history;
  WerReport final_eval;
  std::optional<WerReport> baseline_eval;

  std::optional<double> relative_improvement_vs_baseline() const {
    if (!baseline_eval) return std::nullopt;
    return relative_improvement(baseline_eval->wer, final_eval.wer);
  }
};

inline nlohmann::json to_json(const PipelineReport& r) {
  nlohmann::json j{{"threshold", r.threshold},
                   {"labeler_val_wer", r.labeler_val_wer},
                   {"labeler_eval_wer", r.labeler_eval_wer},
                   {"labeler_below_gate", r.labeler_below_gate},
                   {"pool_total", r.pool.total},
                   {"pool_kept", r.pool.kept},
                   {"pool_empty_dropped", r.pool.empty_dropped},
                   {"pool_below_threshold", r.pool.below_threshold},
                   {"retained_fraction", r.retained_fraction},
                   {"labeler_history", to_json(r.labeler_history)},
                   {"cpt_history", to_json(r.cpt_history)},
                   {"finetune_history", to_json(r.finetune_history)},
                   {"final_eval", to_json(r.final_eval)},
                   {"final_eval_wer", r.final_eval.wer}};
  if (r.baseline_eval) {
    j["baseline_eval"] = to_json(*r.baseline_eval);
    j["relative_improvement"] = *r.relative_improvement_vs_baseline();
  }
  return j;
}

struct PipelineResult {
  Parameters params;
  /// Exactly the parameters stage D started from (equal to the saved CPT checkpoint).
  Parameters cpt_params;
  Parameters labeler_params;
  PseudoLabelResult pseudo;
  PipelineReport report;
  Vocabulary vocab;
  NetConfig net;
};

/// Runs stages A-D. Throws EmptyPseudoPoolError when no pseudo-label survives
/// the filter. `baseline`, when given, is attached to the report.
inline PipelineResult run_cpt_pipeline(const Dataset& labeled, const Dataset& pool, const Dataset& eval_ds,
                                       const StageConfigs& stages, const NetConfig& net_in,
                                       const PipelineOptions& opts = {},
                                       const std::optional<WerReport>& baseline = std::nullopt) {
  if (pool.kind != DatasetKind::unlabeled) throw DataError("pipeline: pool must be unlabeled");
  const Vocabulary vocab = labeled_vocabulary(labeled);
  const NetConfig net = with_vocab(net_in, vocab);
  const auto split = split_for_validation(labeled, opts.val_fraction, opts.split_seed);
  TrainOptions topts;
  topts.log = opts.log;
  auto say = [&](const std::string& msg) {
    if (opts.log) *opts.log << msg << '\n';
  };
  // Checkpoints go through float32; later stages start from what was saved.
  auto checkpoint = [&](const Parameters& p, const char* name) {
    Parameters stored = round_to_float(p);
    if (opts.output_dir) {
      const auto path = *opts.output_dir / (std::string(name) + ".ckpt");
      save_checkpoint(stored, net, vocab, path);
      stored = load_checkpoint(path, net).params;
    }
    return stored;
  };

  PipelineResult out;
  out.vocab = vocab;
  out.net = net;
  auto& rep = out.report;
  rep.threshold = opts.threshold;

  say("stage A: labeling model");
  auto labeler = train_stage(init_parameters(net, opts.init_seed), net, vocab, split.train, split.val, stages.stage1, topts);
  out.labeler_params = checkpoint(labeler.params, "labeler");
  rep.labeler_history = labeler.history;
  rep.labeler_val_wer = labeler.history.best_wer();
  rep.labeler_eval_wer = evaluate_wer(out.labeler_params, net, vocab, eval_ds).wer;
  rep.labeler_below_gate = rep.labeler_val_wer < kLabelerWerGate;
  if (!rep.labeler_below_gate && opts.log)
    *opts.log << "warning: labeling model validation WER " << rep.labeler_val_wer << " is not below "
              << kLabelerWerGate << "; pseudo-labels may be too noisy\n";

  say("stage B: pseudo-labeling");
  out.pseudo = generate_pseudo_labels(out.labeler_params, net, vocab, pool, opts.threshold);
  rep.pool = out.pseudo.stats;
  rep.retained_fraction =
      rep.pool.total == 0 ? 0.0 : static_cast<double>(rep.pool.kept) / static_cast<double>(rep.pool.total);
  if (rep.pool.kept == 0) throw EmptyPseudoPoolError("no pseudo-labels survived threshold");

  say("stage C: continued pretraining");
  Dataset cpt_data = out.pseudo.dataset;
  if (opts.mix_labeled_in_cpt)
    for (const auto& u : split.train.utterances) cpt_data.utterances.push_back(u);
  const Parameters cpt_start =
      opts.cpt_init == CptInit::fresh ? init_parameters(net, opts.init_seed) : out.labeler_params;
  auto cpt = train_stage(cpt_start, net, vocab, cpt_data, split.val, stages.stage2, topts);
  rep.cpt_history = cpt.history;
  out.cpt_params = checkpoint(cpt.params, "cpt");

  say("stage D: finetuning");
  auto finetuned = train_stage(out.cpt_params, net, vocab, split.train, split.val, stages.stage3, topts);
  rep.finetune_history = finetuned.history;
  out.params = checkpoint(finetuned.params, "final");
  rep.final_eval = evaluate_wer(out.params, net, vocab, eval_ds);
  rep.baseline_eval = baseline;
  return out;
}

}  // namespace cptasr
