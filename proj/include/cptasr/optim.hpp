#pragma once

// Stage hyperparameters, AdamW, the warmup/decay schedule, global-norm
// clipping and the label-smoothed CTC objective.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cptasr/ctc.hpp"
#include "cptasr/errors.hpp"
#include "cptasr/net.hpp"

namespace cptasr {

struct StageConfig {
  double learning_rate = 1e-4;
  int epochs = 15;
  int batch_size = 8;
  double warmup_ratio = 0.1;
  double weight_decay = 0.01;
  double label_smoothing = 0.0;
  std::optional<double> grad_clip_norm;
  /// Early-stopping patience in epochs; none or 0 disables early stopping.
  std::optional<int> patience;
  double dropout_rate = 0.1;
  std::uint64_t seed = 0;

  bool operator==(const StageConfig&) const = default;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("stage: learning_rate must be >= 0");
    if (epochs < 1) throw ConfigError("stage: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("stage: batch_size must be >= 1");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ConfigError("stage: warmup_ratio must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("stage: weight_decay must be >= 0");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
      throw ConfigError("stage: label_smoothing must lie in [0, 1)");
    if (grad_clip_norm && !(*grad_clip_norm > 0.0)) throw ConfigError("stage: grad_clip_norm must be > 0");
    if (patience && *patience < 0) throw ConfigError("stage: patience must be >= 0");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("stage: dropout_rate must lie in [0, 1)");
  }

  bool early_stopping() const { return patience.has_value() && *patience > 0; }
};

/// Named presets: "stage1" (labeling model), "stage2-cpt" (continued
/// pretraining), "stage3-finetune", and "baseline" (direct finetuning, no CPT).
/// Stage 3 trains 15 epochs in the small-labeled-set setting (5K) and 10 in
/// the large one (20K); "stage3-finetune-20k" is the latter.
inline StageConfig stage_preset(std::string_view name) {
  StageConfig s;
  if (name == "stage1" || name == "baseline") {
    s.learning_rate = 1e-4;
    s.epochs = 15;
    s.batch_size = 8;
    s.patience = 3;
  } else if (name == "stage2-cpt") {
    s.learning_rate = 5e-5;
    s.epochs = 3;
    s.batch_size = 8;
    s.patience = std::nullopt;
  } else if (name == "stage3-finetune" || name == "stage3-finetune-20k") {
    s.learning_rate = 1e-4;
    s.epochs = name == "stage3-finetune" ? 15 : 10;
    s.batch_size = 8;
    s.label_smoothing = 0.1;
    s.grad_clip_norm = 1.0;
    s.patience = 3;
  } else {
    throw ConfigError("unknown stage preset '" + std::string(name) + "'");
  }
  s.warmup_ratio = 0.1;
  s.weight_decay = 0.01;
  s.dropout_rate = 0.1;
  return s;
}

inline int warmup_steps(long total_steps, const StageConfig& cfg) {
  return static_cast<int>(std::ceil(cfg.warmup_ratio * static_cast<double>(total_steps) - 1e-12));
}

/// Linear ramp from 0 to learning_rate over the first ceil(warmup_ratio * total)
/// steps, then linear decay to 0 at total_steps.
inline double lr_at(long step, long total_steps, const StageConfig& cfg) {
  if (total_steps < 1) throw ConfigError("lr_at: total_steps must be >= 1");
  if (step < 0 || step > total_steps) throw ConfigError("lr_at: step out of range");
  const long warm = warmup_steps(total_steps, cfg);
  if (step < warm) return cfg.learning_rate * (static_cast<double>(step) / static_cast<double>(warm));
  if (warm == total_steps) return cfg.learning_rate;
  return cfg.learning_rate * (static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warm));
}

inline double global_norm(const Gradients& g) {
  double sq = 0.0;
  for (const auto& [_, t] : g.tensors) sq += t.squaredNorm();
  return std::sqrt(sq);
}

/// Scales all gradients by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the applied scale (1 when unchanged).
inline double clip_gradients(Gradients& grads, double max_norm) {
  if (!grads.all_finite()) throw DivergenceError("clip_gradients: non-finite gradient");
  const double norm = global_norm(grads);
  if (norm <= max_norm) return 1.0;
  const double scale = max_norm / norm;
  grads *= scale;
  return scale;
}

struct AdamConstants {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptState {
  Parameters m;
  Parameters v;
  long step = 0;

  static OptState for_params(const Parameters& p) { return {p.zeros_like(), p.zeros_like(), 0}; }
};

/// Bias-corrected Adam with decoupled weight decay:
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * p
inline void adamw_step(Parameters& params, const Gradients& grads, OptState& state, double lr, double weight_decay,
                       const AdamConstants& k = {}) {
  if (!params.same_shape(grads) || !params.same_shape(state.m) || !params.same_shape(state.v))
    throw ConfigError("adamw_step: parameter, gradient and state shapes disagree");
  ++state.step;
  const double c1 = 1.0 - std::pow(k.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(k.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params.tensors) {
    const auto& g = grads.tensors.at(name);
    auto& m = state.m.tensors.at(name);
    auto& v = state.v.tensors.at(name);
    m = k.beta1 * m + (1.0 - k.beta1) * g;
    v = k.beta2 * v + (1.0 - k.beta2) * g.cwiseProduct(g);
    const Eigen::ArrayXXd update = (m.array() / c1) / ((v.array() / c2).sqrt() + k.eps);
    p.array() -= lr * update + lr * weight_decay * p.array();
  }
}

inline void adamw_step(Parameters& params, const Gradients& grads, OptState& state, double lr,
                       const StageConfig& cfg) {
  adamw_step(params, grads, state, lr, cfg.weight_decay);
}

/// (1 - s) * CTC + s * mean over frames of KL(uniform || softmax(frame)).
/// d KL / d logit_k = softmax_k - 1/K.
inline CtcResult smoothed_ctc_objective(const LogitSequence& logits, std::string_view target, const Vocabulary& vocab,
                                        double smoothing) {
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("label smoothing must lie in [0, 1)");
  CtcResult r = ctc_loss_and_grad(logits, target, vocab);
  if (smoothing == 0.0) return r;

  const auto frames = static_cast<double>(logits.rows());
  const auto K = static_cast<double>(logits.cols());
  const Eigen::MatrixXd logp = log_softmax_rows(logits);
  // KL(u || p) = -log K - (1/K) sum_k log p_k
  const double kl_sum = -frames * std::log(K) - logp.sum() / K;
  r.loss = (1.0 - smoothing) * r.loss + smoothing * kl_sum / frames;
  r.grad *= 1.0 - smoothing;
  r.grad.array() += (smoothing / frames) * (logp.array().exp() - 1.0 / K);
  return r;
}

}  // namespace cptasr
