#pragma once

// Small synthetic tasks shared by the training and pipeline tests.

#include "cptasr/corpus.hpp"
#include "cptasr/net.hpp"
#include "cptasr/optim.hpp"

namespace cptasr::testing {

inline SynthConfig small_synth(std::uint64_t seed, int n_utterances, double labeled_fraction) {
  SynthConfig c;
  c.seed = seed;
  c.n_speakers = 12;
  c.n_utterances = n_utterances;
  c.labeled_fraction = labeled_fraction;
  c.chars_per_utterance = {3, 6};
  c.frames_per_char = {6, 8};
  c.feature_dim = 6;
  c.noise_sigma = 0.4;
  c.speaker_shift_sigma = 0.2;
  c.alphabet = "aks ";
  c.word_length = {1, 3};
  return c;
}

inline NetConfig small_net() {
  NetConfig n;
  n.feature_dim = 6;
  n.downsample_factor = 4;
  n.conv_layers = 2;
  n.conv_channels = 12;
  n.context_layers = 1;
  n.hidden_dim = 12;
  n.context_window = 1;
  return n;
}

inline StageConfig fast_stage(int epochs, std::uint64_t seed) {
  StageConfig s = stage_preset("stage1");
  s.learning_rate = 1e-2;
  s.epochs = epochs;
  s.seed = seed;
  return s;
}

}  // namespace cptasr::testing
