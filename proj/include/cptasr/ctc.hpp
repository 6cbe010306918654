#pragma once

// CTC loss and gradient (log-space forward-backward), path collapse, greedy
// decoding and confidence scoring. Column 0 of every logit row is the blank.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "cptasr/corpus.hpp"
#include "cptasr/errors.hpp"

namespace cptasr {

/// U x (V + 1) pre-softmax scores.
using LogitSequence = Eigen::MatrixXd;

inline constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

inline double log_sum_exp(std::span<const double> values) {
  if (values.empty()) return kLogZero;
  const double m = *std::max_element(values.begin(), values.end());
  if (m == kLogZero) return kLogZero;
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - m);
  return m + std::log(sum);
}

inline std::vector<double> log_softmax(std::span<const double> row) {
  const double lse = log_sum_exp(row);
  std::vector<double> out(row.begin(), row.end());
  for (double& v : out) v -= lse;
  return out;
}

/// Row-wise log-softmax of a logit matrix.
inline Eigen::MatrixXd log_softmax_rows(const LogitSequence& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index u = 0; u < logits.rows(); ++u) {
    const double m = logits.row(u).maxCoeff();
    const double lse = m + std::log((logits.row(u).array() - m).exp().sum());
    out.row(u) = logits.row(u).array() - lse;
  }
  return out;
}

/// Minimum frame count that can carry `labels`: one frame per label plus one
/// blank between each pair of equal neighbours.
inline int ctc_min_frames(std::span<const int> labels) {
  int need = static_cast<int>(labels.size());
  for (std::size_t i = 1; i < labels.size(); ++i) need += labels[i] == labels[i - 1];
  return need;
}

inline bool ctc_feasible(int frames, std::span<const int> labels) { return frames >= ctc_min_frames(labels); }

namespace detail {

struct CtcLattice {
  std::vector<int> ext;    // blank-interleaved labels, length 2L + 1
  Eigen::MatrixXd logp;    // U x (V + 1) log-softmax
  Eigen::MatrixXd alpha;   // U x S
  double log_likelihood = kLogZero;
};

inline void check_logits(const LogitSequence& logits, const Vocabulary& vocab) {
  if (logits.rows() < 1) throw InfeasibleError("ctc: logit sequence has no frames");
  if (logits.cols() != vocab.size() + 1)
    throw ConfigError("ctc: logit width " + std::to_string(logits.cols()) + " does not match vocabulary size + 1 (" +
                      std::to_string(vocab.size() + 1) + ")");
  if (!logits.allFinite()) throw DataError("ctc: non-finite logits");
}

inline CtcLattice ctc_forward(const LogitSequence& logits, std::string_view target, const Vocabulary& vocab) {
  check_logits(logits, vocab);
  const auto labels = vocab.encode(target);
  const int frames = static_cast<int>(logits.rows());
  if (!ctc_feasible(frames, labels))
    throw InfeasibleError("ctc: target of length " + std::to_string(labels.size()) + " needs " +
                          std::to_string(ctc_min_frames(labels)) + " frames, have " + std::to_string(frames));

  CtcLattice lat;
  lat.ext.assign(2 * labels.size() + 1, Vocabulary::kBlank);
  for (std::size_t i = 0; i < labels.size(); ++i) lat.ext[2 * i + 1] = labels[i];
  const auto S = static_cast<Eigen::Index>(lat.ext.size());
  lat.logp = log_softmax_rows(logits);
  lat.alpha.setConstant(frames, S, kLogZero);

  lat.alpha(0, 0) = lat.logp(0, lat.ext[0]);
  if (S > 1) lat.alpha(0, 1) = lat.logp(0, lat.ext[1]);
  for (int u = 1; u < frames; ++u) {
    for (Eigen::Index s = 0; s < S; ++s) {
      double a = lat.alpha(u - 1, s);
      if (s >= 1) a = log_add(a, lat.alpha(u - 1, s - 1));
      if (s >= 2 && lat.ext[s] != Vocabulary::kBlank && lat.ext[s] != lat.ext[s - 2])
        a = log_add(a, lat.alpha(u - 1, s - 2));
      lat.alpha(u, s) = a == kLogZero ? kLogZero : a + lat.logp(u, lat.ext[s]);
    }
  }
  lat.log_likelihood = lat.alpha(frames - 1, S - 1);
  if (S > 1) lat.log_likelihood = log_add(lat.log_likelihood, lat.alpha(frames - 1, S - 2));
  return lat;
}

}  // namespace detail

/// Negative log-likelihood of `target` summed over all alignments.
/// Throws InfeasibleError when the target cannot fit in the frames.
inline double ctc_loss(const LogitSequence& logits, std::string_view target, const Vocabulary& vocab) {
  return -detail::ctc_forward(logits, target, vocab).log_likelihood;
}

struct CtcResult {
  double loss = 0.0;
  Eigen::MatrixXd grad;  // d loss / d logits, U x (V + 1)
};

/// Loss and its gradient with respect to the pre-softmax logits:
/// grad[u][k] = softmax[u][k] - posterior occupancy of label k at frame u.
inline CtcResult ctc_loss_and_grad(const LogitSequence& logits, std::string_view target, const Vocabulary& vocab) {
  auto lat = detail::ctc_forward(logits, target, vocab);
  const auto frames = lat.alpha.rows();
  const auto S = lat.alpha.cols();
  const auto& ext = lat.ext;

  Eigen::MatrixXd beta;
  beta.setConstant(frames, S, kLogZero);
  beta(frames - 1, S - 1) = lat.logp(frames - 1, ext[S - 1]);
  if (S > 1) beta(frames - 1, S - 2) = lat.logp(frames - 1, ext[S - 2]);
  for (Eigen::Index u = frames - 2; u >= 0; --u) {
    for (Eigen::Index s = 0; s < S; ++s) {
      double b = beta(u + 1, s);
      if (s + 1 < S) b = log_add(b, beta(u + 1, s + 1));
      if (s + 2 < S && ext[s] != Vocabulary::kBlank && ext[s] != ext[s + 2]) b = log_add(b, beta(u + 1, s + 2));
      beta(u, s) = b == kLogZero ? kLogZero : b + lat.logp(u, ext[s]);
    }
  }

  // Both alpha and beta include the emission at u, so occupancy divides it out once.
  CtcResult out;
  out.loss = -lat.log_likelihood;
  out.grad = lat.logp.array().exp();
  std::vector<double> occupancy(static_cast<std::size_t>(lat.logp.cols()));
  for (Eigen::Index u = 0; u < frames; ++u) {
    std::fill(occupancy.begin(), occupancy.end(), kLogZero);
    for (Eigen::Index s = 0; s < S; ++s) {
      const double a = lat.alpha(u, s), b = beta(u, s);
      if (a == kLogZero || b == kLogZero) continue;
      auto& slot = occupancy[static_cast<std::size_t>(ext[s])];
      slot = log_add(slot, a + b - lat.logp(u, ext[s]));
    }
    for (std::size_t k = 0; k < occupancy.size(); ++k)
      if (occupancy[k] != kLogZero) out.grad(u, Eigen::Index(k)) -= std::exp(occupancy[k] - lat.log_likelihood);
  }
  return out;
}

inline Eigen::MatrixXd ctc_grad(const LogitSequence& logits, std::string_view target, const Vocabulary& vocab) {
  return ctc_loss_and_grad(logits, target, vocab).grad;
}

/// Merge adjacent repeats, then drop blanks.
inline std::string collapse(std::span<const int> path, const Vocabulary& vocab) {
  std::string out;
  int prev = -1;
  for (int idx : path) {
    if (idx != prev && idx != Vocabulary::kBlank) out.push_back(vocab.symbol(idx));
    prev = idx;
  }
  return out;
}

struct DecodeResult {
  std::string hypothesis;
  /// exp(mean over frames of the max log-softmax), in (0, 1].
  double confidence = 0.0;
  std::vector<int> frame_argmax;
};

/// Per-frame argmax (lowest index wins ties, so blank wins ties), collapsed.
inline DecodeResult greedy_decode(const LogitSequence& logits, const Vocabulary& vocab) {
  detail::check_logits(logits, vocab);
  const Eigen::MatrixXd logp = log_softmax_rows(logits);
  DecodeResult out;
  out.frame_argmax.reserve(static_cast<std::size_t>(logp.rows()));
  double sum_max = 0.0;
  for (Eigen::Index u = 0; u < logp.rows(); ++u) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < logp.cols(); ++k)
      if (logp(u, k) > logp(u, best)) best = k;
    out.frame_argmax.push_back(static_cast<int>(best));
    sum_max += logp(u, best);
  }
  out.hypothesis = collapse(out.frame_argmax, vocab);
  out.confidence = std::exp(sum_max / static_cast<double>(logp.rows()));
  return out;
}

}  // namespace cptasr
