#pragma once

// Supervised training loop shared by every stage, plus corpus WER evaluation.

#include <chrono>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptasr/corpus.hpp"
#include "cptasr/ctc.hpp"
#include "cptasr/errors.hpp"
#include "cptasr/eval.hpp"
#include "cptasr/net.hpp"
#include "cptasr/optim.hpp"
#include "cptasr/parallel.hpp"
#include "cptasr/random.hpp"

namespace cptasr {

/// Greedy decode in eval mode. Utterances shorter than the downsample factor
/// decode to an empty hypothesis with zero confidence.
inline DecodeResult decode_utterance(const Parameters& params, const NetConfig& cfg, const Vocabulary& vocab,
                                     const Utterance& utt) {
  if (utt.duration_frames() < cfg.downsample_factor) return {};
  return greedy_decode(forward(params, cfg, utt.features, false).logits, vocab);
}

inline std::vector<DecodeResult> decode_dataset(const Parameters& params, const NetConfig& cfg,
                                                const Vocabulary& vocab, const Dataset& ds) {
  std::vector<DecodeResult> out(ds.size());
  parallel_for(ds.size(), [&](std::size_t i) { out[i] = decode_utterance(params, cfg, vocab, ds.utterances[i]); });
  return out;
}

/// Corpus-level word error rate of greedy decodes against the transcripts of `ds`.
inline WerReport evaluate_wer(const Parameters& params, const NetConfig& cfg, const Vocabulary& vocab,
                              const Dataset& ds) {
  if (ds.kind == DatasetKind::unlabeled) throw DataError("evaluate_wer: dataset has no transcripts");
  const auto decoded = decode_dataset(params, cfg, vocab, ds);
  std::vector<std::pair<std::string, std::string>> pairs;
  pairs.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) pairs.emplace_back(*ds.utterances[i].transcript, decoded[i].hypothesis);
  return wer(pairs);
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_wer = 0.0;
  double learning_rate = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool stopped_early = false;
  int skipped_utterances = 0;

  double best_wer() const { return epochs.at(static_cast<std::size_t>(best_epoch - 1)).val_wer; }
};

/// Wall-clock time is left out unless asked for, so serialized histories of
/// identical runs compare equal.
inline nlohmann::json to_json(const TrainHistory& h, bool with_timing = false) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& e : h.epochs) {
    nlohmann::json r{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_wer", e.val_wer},
                     {"learning_rate", e.learning_rate}};
    if (with_timing) r["seconds"] = e.seconds;
    records.push_back(std::move(r));
  }
  return {{"epochs", records},
          {"best_epoch", h.best_epoch},
          {"stopped_early", h.stopped_early},
          {"skipped_utterances", h.skipped_utterances}};
}

/// One record per line, then a summary line.
inline void write_history(const TrainHistory& h, std::ostream& os) {
  const auto j = to_json(h, true);
  for (const auto& r : j["epochs"]) os << r.dump() << '\n';
  os << nlohmann::json{{"best_epoch", h.best_epoch},
                       {"stopped_early", h.stopped_early},
                       {"skipped_utterances", h.skipped_utterances}}
            .dump()
     << '\n';
}

/// Patience counts consecutive epochs without a strictly lower WER than the
/// best so far. No patience, or zero, never stops.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::optional<int> patience) : patience_(patience) {}

  /// Returns true when `wer` is a new best.
  bool observe(int epoch, double wer) {
    if (wer < best_wer_) {
      best_wer_ = wer;
      best_epoch_ = epoch;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }

  bool should_stop() const { return patience_ && *patience_ > 0 && stale_ >= *patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_wer() const { return best_wer_; }

 private:
  std::optional<int> patience_;
  double best_wer_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
  int stale_ = 0;
};

struct TrainOptions {
  /// Replaces evaluate_wer on the validation set (used to script WER sequences).
  std::function<double(const Parameters&, int epoch)> validator;
  std::ostream* log = nullptr;
  /// Abort when more than this fraction of the data is CTC-infeasible.
  double max_skip_fraction = 0.10;
};

struct TrainResult {
  Parameters params;
  TrainHistory history;
};

/// Indices of utterances that can be trained on; throws if a transcript uses
/// characters outside the vocabulary or too many are infeasible.
inline std::vector<std::size_t> trainable_indices(const Dataset& data, const NetConfig& cfg, const Vocabulary& vocab,
                                                  double max_skip_fraction, std::ostream* log) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& u = data.utterances[i];
    if (!u.transcript) throw DataError("train: utterance '" + u.id + "' has no transcript");
    if (u.feature_dim() != cfg.feature_dim) throw ConfigError("train: utterance '" + u.id + "' has wrong feature dim");
    const auto labels = vocab.encode(*u.transcript);
    if (u.duration_frames() >= cfg.downsample_factor && ctc_feasible(cfg.output_frames(u.duration_frames()), labels)) {
      keep.push_back(i);
    } else if (log) {
      *log << "warning: skipping '" << u.id << "': " << u.transcript->size() << " characters do not fit in "
           << cfg.output_frames(u.duration_frames()) << " output frames\n";
    }
  }
  const auto skipped = data.size() - keep.size();
  if (static_cast<double>(skipped) > max_skip_fraction * static_cast<double>(data.size()))
    throw DataError("train: " + std::to_string(skipped) + " of " + std::to_string(data.size()) +
                    " utterances are CTC-infeasible after downsampling; check downsample_factor");
  return keep;
}

/// Runs one stage. Each epoch shuffles by (seed, epoch), trains on batches
/// (summed per-utterance objective, gradient divided by the batch size,
/// optional clipping, AdamW on the warmup/decay schedule), then measures
/// validation WER. Returns the parameters of the best validation epoch.
inline TrainResult train_stage(const Parameters& start, const NetConfig& net, const Vocabulary& vocab,
                               const Dataset& data, const Dataset& val, const StageConfig& stage,
                               const TrainOptions& opts = {}) {
  stage.validate();
  check_parameters(start, net);
  if (data.kind == DatasetKind::unlabeled) throw DataError("train: training data must carry transcripts");
  if (data.empty()) throw DataError("train: empty training set");
  if (!opts.validator && (val.empty() || val.kind == DatasetKind::unlabeled))
    throw DataError("train: validation set must be labeled and non-empty");
  if (vocab.size() != net.vocab_size) throw ConfigError("train: vocabulary size does not match network");

  NetConfig train_net = net;
  train_net.dropout_rate = stage.dropout_rate;

  const auto usable = trainable_indices(data, net, vocab, opts.max_skip_fraction, opts.log);
  const auto batch = static_cast<std::size_t>(stage.batch_size);
  const long batches_per_epoch = static_cast<long>((usable.size() + batch - 1) / batch);
  const long total_steps = batches_per_epoch * stage.epochs;

  TrainResult result{start, {}};
  result.history.skipped_utterances = static_cast<int>(data.size() - usable.size());
  Parameters params = start;
  OptState opt = OptState::for_params(params);
  EarlyStopping stopper(stage.patience);
  std::vector<Gradients> member_grads(batch);
  std::vector<double> member_loss(batch);

  for (int epoch = 1; epoch <= stage.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto order = usable;
    Rng rng(derive_seed(stage.seed, 0x5f1e, static_cast<std::uint64_t>(epoch)));
    shuffle(order, rng);

    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::size_t n = std::min(batch, order.size() - b0);
      parallel_for(n, [&](std::size_t k) {
        const auto& u = data.utterances[order[b0 + k]];
        const auto dropout_seed = derive_seed(stage.seed, static_cast<std::uint64_t>(epoch), b0 + k);
        const auto fwd = forward(params, train_net, u.features, true, dropout_seed);
        const auto obj = smoothed_ctc_objective(fwd.logits, *u.transcript, vocab, stage.label_smoothing);
        member_loss[k] = obj.loss;
        member_grads[k] = backward(params, train_net, fwd.cache, obj.grad);
      });
      Gradients grads = member_grads[0];
      loss_sum += member_loss[0];
      for (std::size_t k = 1; k < n; ++k) {
        grads += member_grads[k];
        loss_sum += member_loss[k];
      }
      grads *= 1.0 / static_cast<double>(n);
      if (stage.grad_clip_norm) {
        clip_gradients(grads, *stage.grad_clip_norm);
      } else if (!grads.all_finite()) {
        throw DivergenceError("train: non-finite gradient");
      }
      adamw_step(params, grads, opt, lr_at(opt.step, total_steps, stage), stage);
    }
    if (!params.all_finite()) throw DivergenceError("train: parameters became non-finite");

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.learning_rate = lr_at(opt.step, total_steps, stage);
    rec.val_wer = opts.validator ? opts.validator(params, epoch) : evaluate_wer(params, net, vocab, val).wer;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);
    if (opts.log)
      *opts.log << "epoch " << epoch << " loss " << rec.train_loss << " val_wer " << rec.val_wer << " lr "
                << rec.learning_rate << '\n';

    if (stopper.observe(epoch, rec.val_wer)) result.params = params;
    if (stopper.should_stop()) {
      result.history.stopped_early = epoch < stage.epochs;
      break;
    }
  }
  result.history.best_epoch = stopper.best_epoch();
  return result;
}

}  // namespace cptasr
