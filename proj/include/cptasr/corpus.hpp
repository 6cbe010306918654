#pragma once

// Vocabulary, utterances, datasets, speaker-disjoint splitting and the
// synthetic speech-like corpus generator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cptasr/errors.hpp"
#include "cptasr/random.hpp"

namespace cptasr {

/// Frames are rows. Row-major float32 matches the on-disk feature layout.
using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Ordered character set. Index 0 is the CTC blank; symbol i lives at index i + 1.
/// Characters are single bytes.
class Vocabulary {
 public:
  static constexpr int kBlank = 0;

  Vocabulary() = default;

  explicit Vocabulary(std::string symbols) : symbols_(std::move(symbols)) {
    if (symbols_.empty()) throw ConfigError("vocabulary: empty character set");
    lookup_.fill(-1);
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      auto& slot = lookup_[static_cast<unsigned char>(symbols_[i])];
      if (slot != -1) throw ConfigError("vocabulary: duplicate symbol '" + std::string(1, symbols_[i]) + "'");
      slot = static_cast<int>(i) + 1;
    }
  }

  const std::string& symbols() const { return symbols_; }
  /// Number of non-blank symbols.
  int size() const { return static_cast<int>(symbols_.size()); }
  bool empty() const { return symbols_.empty(); }

  bool contains(char c) const { return !empty() && lookup_[static_cast<unsigned char>(c)] != -1; }

  /// Index of `c` in [1, size()]; throws DataError if absent.
  int index(char c) const {
    const int idx = empty() ? -1 : lookup_[static_cast<unsigned char>(c)];
    if (idx < 0) throw DataError("character '" + std::string(1, c) + "' is not in the vocabulary");
    return idx;
  }

  char symbol(int index) const {
    if (index < 1 || index > size()) throw DataError("vocabulary index out of range");
    return symbols_[static_cast<std::size_t>(index - 1)];
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(index(c));
    return out;
  }

  bool operator==(const Vocabulary& other) const { return symbols_ == other.symbols_; }

 private:
  std::string symbols_;
  std::array<int, 256> lookup_{};
};

/// Sorted set of all characters appearing in `transcripts`.
inline Vocabulary build_vocabulary(const std::vector<std::string>& transcripts) {
  if (transcripts.empty()) throw ConfigError("build_vocabulary: no transcripts");
  std::set<unsigned char> chars;
  for (const auto& t : transcripts)
    for (char c : t) chars.insert(static_cast<unsigned char>(c));
  std::string symbols;
  for (unsigned char c : chars) symbols.push_back(static_cast<char>(c));
  if (symbols.empty()) throw ConfigError("build_vocabulary: empty character set");
  return Vocabulary(std::move(symbols));
}

struct Utterance {
  std::string id;
  std::string speaker_id;
  FeatureMatrix features;
  std::optional<std::string> transcript;

  int duration_frames() const { return static_cast<int>(features.rows()); }
  int feature_dim() const { return static_cast<int>(features.cols()); }

  bool operator==(const Utterance& o) const {
    return id == o.id && speaker_id == o.speaker_id && transcript == o.transcript &&
           features.rows() == o.features.rows() && features.cols() == o.features.cols() &&
           features == o.features;
  }
};

enum class DatasetKind { labeled, unlabeled, pseudo_labeled };

inline std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::labeled: return "labeled";
    case DatasetKind::unlabeled: return "unlabeled";
    case DatasetKind::pseudo_labeled: return "pseudo_labeled";
  }
  return "unknown";
}

inline DatasetKind dataset_kind_from_string(std::string_view s) {
  if (s == "labeled") return DatasetKind::labeled;
  if (s == "unlabeled") return DatasetKind::unlabeled;
  if (s == "pseudo_labeled") return DatasetKind::pseudo_labeled;
  throw DataError("unknown dataset kind '" + std::string(s) + "'");
}

struct Dataset {
  std::vector<Utterance> utterances;
  DatasetKind kind = DatasetKind::labeled;

  std::size_t size() const { return utterances.size(); }
  bool empty() const { return utterances.empty(); }

  bool operator==(const Dataset&) const = default;

  /// Throws DataError when an invariant does not hold.
  void validate() const {
    std::unordered_set<std::string> ids;
    for (const auto& u : utterances) {
      if (!ids.insert(u.id).second) throw DataError("duplicate utterance id '" + u.id + "'");
      if (u.features.rows() < 1 || u.features.cols() < 1)
        throw DataError("utterance '" + u.id + "' has an empty feature matrix");
      if (!u.features.allFinite()) throw DataError("utterance '" + u.id + "' has non-finite features");
      const bool needs_transcript = kind != DatasetKind::unlabeled;
      if (needs_transcript != u.transcript.has_value())
        throw DataError("utterance '" + u.id + "': transcript presence does not match dataset kind " +
                        std::string(to_string(kind)));
    }
  }

  std::vector<std::string> speakers() const {
    std::set<std::string> s;
    for (const auto& u : utterances) s.insert(u.speaker_id);
    return {s.begin(), s.end()};
  }

  std::vector<std::string> transcripts() const {
    std::vector<std::string> out;
    for (const auto& u : utterances)
      if (u.transcript) out.push_back(*u.transcript);
    return out;
  }
};

/// Partitions `ds` into (train, eval) with no shared speaker. Whole speakers,
/// in seed-shuffled order, move to eval until it holds at least `eval_count`
/// utterances. Utterance order within each side follows `ds`.
inline std::pair<Dataset, Dataset> speaker_disjoint_split(const Dataset& ds, std::size_t eval_count,
                                                          std::uint64_t seed) {
  if (ds.kind != DatasetKind::labeled) throw DataError("speaker_disjoint_split: dataset must be labeled");
  auto speakers = ds.speakers();
  if (speakers.size() < 2) throw DataError("speaker_disjoint_split: need at least two speakers");
  if (eval_count >= ds.size())
    throw DataError("speaker_disjoint_split: eval_count must be smaller than the dataset");

  std::map<std::string, std::size_t> per_speaker;
  for (const auto& u : ds.utterances) ++per_speaker[u.speaker_id];

  Rng rng(derive_seed(seed, 0x5b117));
  shuffle(speakers, rng);
  std::set<std::string> eval_speakers;
  std::size_t taken = 0;
  for (const auto& s : speakers) {
    if (taken >= eval_count) break;
    eval_speakers.insert(s);
    taken += per_speaker[s];
  }
  if (taken >= ds.size())
    throw DataError("speaker_disjoint_split: eval_count unreachable without emptying train");

  Dataset train{{}, ds.kind};
  Dataset eval{{}, ds.kind};
  for (const auto& u : ds.utterances)
    (eval_speakers.contains(u.speaker_id) ? eval : train).utterances.push_back(u);
  return {std::move(train), std::move(eval)};
}

struct IntRange {
  int min = 1;
  int max = 1;
  bool operator==(const IntRange&) const = default;
};

struct SynthConfig {
  int n_speakers = 20;
  int n_utterances = 1000;
  double labeled_fraction = 0.1;
  IntRange chars_per_utterance{12, 24};
  IntRange frames_per_char{5, 8};
  int feature_dim = 16;
  double noise_sigma = 1.0;
  double speaker_shift_sigma = 0.5;
  std::uint64_t seed = 1;
  /// Characters drawn for transcripts; a space in the alphabet separates words.
  std::string alphabet = "aeiklmnstuw ";
  /// Word lengths between spaces.
  IntRange word_length{2, 6};

  void validate() const {
    if (n_speakers < 1) throw ConfigError("synth: n_speakers must be >= 1");
    if (n_utterances < 1) throw ConfigError("synth: n_utterances must be >= 1");
    if (!(labeled_fraction >= 0.0 && labeled_fraction <= 1.0))
      throw ConfigError("synth: labeled_fraction must lie in [0, 1]");
    for (const auto* r : {&chars_per_utterance, &frames_per_char, &word_length})
      if (r->min < 1 || r->max < r->min) throw ConfigError("synth: ranges must be non-empty and >= 1");
    if (feature_dim < 1) throw ConfigError("synth: feature_dim must be >= 1");
    if (!(noise_sigma >= 0.0) || !(speaker_shift_sigma >= 0.0))
      throw ConfigError("synth: sigmas must be >= 0");
    std::set<char> letters(alphabet.begin(), alphabet.end());
    if (letters.size() != alphabet.size()) throw ConfigError("synth: alphabet has duplicates");
    letters.erase(' ');
    if (letters.empty()) throw ConfigError("synth: alphabet needs at least one non-space character");
  }
};

/// Per-character prototype: a unit-variance Gaussian vector fixed by (seed, c).
/// In moderate dimension these are close to orthogonal.
inline Eigen::VectorXf character_prototype(char c, std::uint64_t seed, int dim) {
  Rng rng(derive_seed(seed, 0x9407, static_cast<unsigned char>(c)));
  Eigen::VectorXf v(dim);
  for (int i = 0; i < dim; ++i) v[i] = static_cast<float>(normal(rng));
  return v;
}

/// Random word-structured text of exactly `length` characters: no leading,
/// trailing or doubled spaces and no adjacent repeated letters.
inline std::string synth_transcript(const SynthConfig& cfg, int length, Rng& rng) {
  std::string letters;
  for (char c : cfg.alphabet)
    if (c != ' ') letters.push_back(c);
  const bool has_space = cfg.alphabet.find(' ') != std::string::npos;

  std::string out;
  int word_left = uniform_int(rng, cfg.word_length.min, cfg.word_length.max);
  while (static_cast<int>(out.size()) < length) {
    const int remaining = length - static_cast<int>(out.size());
    if (has_space && word_left == 0 && remaining > 1 && out.back() != ' ') {
      out.push_back(' ');
      word_left = uniform_int(rng, cfg.word_length.min, cfg.word_length.max);
      continue;
    }
    char c;
    do {
      c = letters[static_cast<std::size_t>(uniform_index(rng, letters.size()))];
    } while (letters.size() > 1 && !out.empty() && out.back() == c);
    out.push_back(c);
    if (word_left > 0) --word_left;
  }
  return out;
}

/// Frames for `text`: each character's prototype repeated for a random number
/// of frames, plus the speaker shift and i.i.d. Gaussian noise.
inline FeatureMatrix synth_features(const SynthConfig& cfg, std::string_view text,
                                    const Eigen::VectorXf& speaker_shift, Rng& rng) {
  std::vector<int> durations;
  int total = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    durations.push_back(uniform_int(rng, cfg.frames_per_char.min, cfg.frames_per_char.max));
    total += durations.back();
  }
  FeatureMatrix f(total, cfg.feature_dim);
  int row = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const Eigen::VectorXf proto = character_prototype(text[i], cfg.seed, cfg.feature_dim);
    for (int k = 0; k < durations[i]; ++k, ++row) {
      for (int d = 0; d < cfg.feature_dim; ++d) {
        const double noise = cfg.noise_sigma > 0.0 ? cfg.noise_sigma * normal(rng) : 0.0;
        f(row, d) = static_cast<float>(proto[d] + speaker_shift[d] + noise);
      }
    }
  }
  return f;
}

struct SyntheticCorpus {
  Dataset labeled{{}, DatasetKind::labeled};
  Dataset unlabeled{{}, DatasetKind::unlabeled};
  /// Ground truth for every utterance, including the unlabeled ones (test use only).
  std::map<std::string, std::string> truth;
};

/// Deterministic in cfg.seed. The first round(labeled_fraction * n_utterances)
/// utterances are labeled; speakers are assigned uniformly at random.
inline SyntheticCorpus generate_synthetic_corpus(const SynthConfig& cfg) {
  cfg.validate();
  Rng speaker_rng(derive_seed(cfg.seed, 0x5bea));
  std::vector<Eigen::VectorXf> shifts;
  for (int s = 0; s < cfg.n_speakers; ++s) {
    Eigen::VectorXf v(cfg.feature_dim);
    for (int d = 0; d < cfg.feature_dim; ++d)
      v[d] = static_cast<float>(cfg.speaker_shift_sigma * normal(speaker_rng));
    shifts.push_back(std::move(v));
  }

  const auto n_labeled = static_cast<int>(std::llround(cfg.labeled_fraction * cfg.n_utterances));
  SyntheticCorpus corpus;
  Rng rng(derive_seed(cfg.seed, 0x0dda));
  for (int i = 0; i < cfg.n_utterances; ++i) {
    const int speaker = uniform_int(rng, 0, cfg.n_speakers - 1);
    const int length = uniform_int(rng, cfg.chars_per_utterance.min, cfg.chars_per_utterance.max);
    std::string text = synth_transcript(cfg, length, rng);

    char id[32], spk[32];
    std::snprintf(id, sizeof id, "utt%06d", i);
    std::snprintf(spk, sizeof spk, "spk%03d", speaker);
    Utterance u{id, spk, synth_features(cfg, text, shifts[static_cast<std::size_t>(speaker)], rng), {}};
    corpus.truth[u.id] = text;
    if (i < n_labeled) {
      u.transcript = std::move(text);
      corpus.labeled.utterances.push_back(std::move(u));
    } else {
      corpus.unlabeled.utterances.push_back(std::move(u));
    }
  }
  return corpus;
}

}  // namespace cptasr
