#pragma once

// Levenshtein alignment counts, corpus-pooled WER/CER and relative improvement.

#include <algorithm>
#include <cstddef>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptasr/errors.hpp"

namespace cptasr {

struct EditCounts {
  long substitutions = 0;
  long insertions = 0;
  long deletions = 0;

  long total() const { return substitutions + insertions + deletions; }
  bool operator==(const EditCounts&) const = default;
};

/// Unit-cost alignment of hyp against ref. When several alignments share the
/// minimal cost, the backtrace prefers substitution, then insertion, then deletion.
template <typename Token>
EditCounts edit_distance(const std::vector<Token>& ref, const std::vector<Token>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> dp((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return dp[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i, j - 1) + 1, at(i - 1, j) + 1});

  EditCounts c;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      if (at(i, j) == at(i - 1, j - 1) + (same ? 0 : 1)) {
        c.substitutions += same ? 0 : 1;
        --i, --j;
        continue;
      }
    }
    if (j > 0 && at(i, j) == at(i, j - 1) + 1) {
      ++c.insertions;
      --j;
    } else {
      ++c.deletions;
      --i;
    }
  }
  return c;
}

/// Trim, collapse runs of spaces. No case folding.
inline std::string normalize_text(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

enum class ErrorUnit { word, character };

inline std::vector<std::string> tokenize(std::string_view text, ErrorUnit unit) {
  const std::string norm = normalize_text(text);
  std::vector<std::string> tokens;
  if (unit == ErrorUnit::character) {
    for (char c : norm) tokens.emplace_back(1, c);
    return tokens;
  }
  std::size_t start = 0;
  while (start < norm.size()) {
    const auto end = norm.find(' ', start);
    tokens.push_back(norm.substr(start, end == std::string::npos ? std::string::npos : end - start));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return tokens;
}

struct UtteranceErrors {
  EditCounts edits;
  long ref_tokens = 0;
};

struct WerReport {
  EditCounts edits;
  long ref_words = 0;
  double wer = 0.0;
  std::vector<UtteranceErrors> per_utterance;

  long substitutions() const { return edits.substitutions; }
  long insertions() const { return edits.insertions; }
  long deletions() const { return edits.deletions; }
};

/// Corpus-level rate: edits summed over utterances divided by reference tokens
/// summed over utterances (not a mean of per-utterance rates).
inline WerReport wer(const std::vector<std::pair<std::string, std::string>>& pairs, ErrorUnit unit = ErrorUnit::word) {
  WerReport r;
  r.per_utterance.reserve(pairs.size());
  for (const auto& [ref, hyp] : pairs) {
    const auto rt = tokenize(ref, unit);
    const auto ht = tokenize(hyp, unit);
    UtteranceErrors ue{edit_distance(rt, ht), static_cast<long>(rt.size())};
    r.edits.substitutions += ue.edits.substitutions;
    r.edits.insertions += ue.edits.insertions;
    r.edits.deletions += ue.edits.deletions;
    r.ref_words += ue.ref_tokens;
    r.per_utterance.push_back(ue);
  }
  if (r.ref_words == 0) throw DataError("wer: all references are empty");
  r.wer = static_cast<double>(r.edits.total()) / static_cast<double>(r.ref_words);
  return r;
}

/// Signed fractional change (new - baseline) / baseline; negative is better.
inline double relative_improvement(double baseline_wer, double new_wer) {
  if (!(baseline_wer > 0.0)) throw ConfigError("relative_improvement: baseline WER must be > 0");
  return (new_wer - baseline_wer) / baseline_wer;
}

inline nlohmann::json to_json(const WerReport& r) {
  return {{"substitutions", r.edits.substitutions},
          {"insertions", r.edits.insertions},
          {"deletions", r.edits.deletions},
          {"ref_words", r.ref_words},
          {"wer", r.wer}};
}

/// Accepts a full report or any object with a numeric "wer".
inline WerReport wer_report_from_json(const nlohmann::json& j) {
  WerReport r;
  try {
    r.wer = j.at("wer").get<double>();
    r.edits.substitutions = j.value("substitutions", 0L);
    r.edits.insertions = j.value("insertions", 0L);
    r.edits.deletions = j.value("deletions", 0L);
    r.ref_words = j.value("ref_words", 0L);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("WER report: ") + e.what());
  }
  return r;
}

struct ComparisonRow {
  std::string config;
  double baseline_wer = 0.0;
  double final_wer = 0.0;
};

/// Config | Baseline | Final WER | Delta | Benefit, rates shown as percentages.
inline std::string render_comparison_table(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  os << "| Config | Baseline | Final WER | Delta | Benefit |\n";
  os << "|---|---|---|---|---|\n";
  os.setf(std::ios::fixed);
  for (const auto& row : rows) {
    const double delta = relative_improvement(row.baseline_wer, row.final_wer);
    os.precision(2);
    os << "| " << row.config << " | " << row.baseline_wer * 100.0 << "% | " << row.final_wer * 100.0 << "% | ";
    os.precision(1);
    os << (delta >= 0 ? "+" : "") << delta * 100.0 << "% | " << (delta < 0 ? "yes" : "no") << " |\n";
  }
  return os.str();
}

}  // namespace cptasr
