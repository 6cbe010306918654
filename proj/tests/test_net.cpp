#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "cptasr/checkpoint.hpp"
#include "cptasr/net.hpp"
#include "oracles.hpp"

namespace cptasr {
namespace {

NetConfig tiny() {
  NetConfig c;
  c.feature_dim = 3;
  c.downsample_factor = 4;
  c.conv_layers = 2;
  c.conv_channels = 4;
  c.context_layers = 1;
  c.hidden_dim = 5;
  c.context_window = 1;
  c.vocab_size = 2;
  c.dropout_rate = 0.0;
  return c;
}

FeatureMatrix random_features(int T, int D, Rng& rng) {
  FeatureMatrix f(T, D);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = static_cast<float>(normal(rng));
  return f;
}

TEST(NetConfig, StrideFactorization) {
  NetConfig c;
  c.downsample_factor = 320;
  c.conv_layers = 7;
  EXPECT_EQ(c.conv_strides(), (std::vector<int>{5, 2, 2, 2, 2, 2, 2}));
  c.downsample_factor = 4;
  c.conv_layers = 2;
  EXPECT_EQ(c.conv_strides(), (std::vector<int>{2, 2}));
  c.conv_layers = 3;
  EXPECT_EQ(c.conv_strides(), (std::vector<int>{2, 2, 1}));
}

TEST(NetConfig, OutputFramesIsFloorDivision) {
  NetConfig c;
  c.downsample_factor = 4;
  for (int T = 4; T < 40; ++T) EXPECT_EQ(c.output_frames(T), T / 4);
  c.downsample_factor = 6;
  c.conv_layers = 2;
  for (int T = 6; T < 60; ++T) EXPECT_EQ(c.output_frames(T), T / 6);
}

TEST(Init, DeterministicAndSeedDependent) {
  const auto cfg = tiny();
  EXPECT_EQ(init_parameters(cfg, 3), init_parameters(cfg, 3));
  EXPECT_FALSE(init_parameters(cfg, 3) == init_parameters(cfg, 4));
  const auto p = init_parameters(cfg, 3);
  EXPECT_EQ(p["head.weight"].rows(), cfg.vocab_size + 1);
  EXPECT_EQ(p["head.bias"].cols(), 1);
  EXPECT_TRUE(p["head.bias"].isZero());
}

TEST(Forward, OutputShape) {
  const auto cfg = tiny();
  const auto p = init_parameters(cfg, 1);
  Rng rng(1);
  for (int T : {4, 5, 7, 8, 13}) {
    const auto r = forward(p, cfg, random_features(T, 3, rng), false);
    EXPECT_EQ(r.logits.rows(), T / 4);
    EXPECT_EQ(r.logits.cols(), cfg.vocab_size + 1);
  }
}

TEST(Forward, TooShortAndWrongDimAreErrors) {
  const auto cfg = tiny();
  const auto p = init_parameters(cfg, 1);
  Rng rng(1);
  EXPECT_THROW(forward(p, cfg, random_features(3, 3, rng), false), InfeasibleError);
  EXPECT_THROW(forward(p, cfg, random_features(8, 2, rng), false), ConfigError);
}

TEST(Forward, EvalModeIsDeterministicAndIgnoresDropout) {
  auto cfg = tiny();
  cfg.dropout_rate = 0.5;
  const auto p = init_parameters(cfg, 2);
  Rng rng(2);
  const auto f = random_features(12, 3, rng);
  const auto a = forward(p, cfg, f, false, 1).logits;
  EXPECT_EQ(a, forward(p, cfg, f, false, 99).logits);
  EXPECT_FALSE(a == forward(p, cfg, f, true, 1).logits);
  EXPECT_EQ(forward(p, cfg, f, true, 1).logits, forward(p, cfg, f, true, 1).logits);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  const auto cfg = tiny();
  const auto p = init_parameters(cfg, 1);
  Rng rng(3);
  const auto r = forward(p, cfg, random_features(9, 3, rng), false);
  const auto g = backward(p, cfg, r.cache, Eigen::MatrixXd::Zero(r.logits.rows(), r.logits.cols()));
  EXPECT_TRUE(g.same_shape(p));
  for (const auto& [name, t] : g.tensors) EXPECT_TRUE(t.isZero()) << name;
}

TEST(Backward, LinearInUpstreamGradient) {
  const auto cfg = tiny();
  const auto p = init_parameters(cfg, 1);
  Rng rng(4);
  const auto r = forward(p, cfg, random_features(9, 3, rng), false);
  const auto d = oracle::random_matrix(r.logits.rows(), r.logits.cols(), rng);
  auto g1 = backward(p, cfg, r.cache, d);
  const auto g2 = backward(p, cfg, r.cache, 2.5 * d);
  g1 *= 2.5;
  for (const auto& [name, t] : g1.tensors) EXPECT_TRUE(t.isApprox(g2[name], 1e-12)) << name;
}

// Gradient of sum(W .* logits) against central differences, with and without dropout.
void check_backward(const NetConfig& cfg, std::uint64_t seed, bool train_mode) {
  Rng rng(seed);
  auto p = init_parameters(cfg, seed);
  const auto f = random_features(uniform_int(rng, 8, 14), cfg.feature_dim, rng);
  const auto r = forward(p, cfg, f, train_mode, seed);
  const auto W = oracle::random_matrix(r.logits.rows(), r.logits.cols(), rng);
  const auto g = backward(p, cfg, r.cache, W);
  for (auto& [name, t] : p.tensors) {
    const auto fd = oracle::finite_difference(
        [&](const Eigen::MatrixXd& x) {
          Parameters q = p;
          q[name] = x;
          return (forward(q, cfg, f, train_mode, seed).logits.array() * W.array()).sum();
        },
        t, 1e-5);
    for (Eigen::Index i = 0; i < fd.size(); ++i)
      EXPECT_TRUE(oracle::close_relative(g[name].data()[i], fd.data()[i], 1e-4, 1e-7))
          << name << "[" << i << "] " << g[name].data()[i] << " vs " << fd.data()[i];
  }
}

TEST(Backward, MatchesFiniteDifferences) {
  check_backward(tiny(), 5, false);
  auto cfg = tiny();
  cfg.context_layers = 2;
  cfg.context_window = 2;
  check_backward(cfg, 6, false);
}

TEST(Backward, MatchesFiniteDifferencesWithDropout) {
  auto cfg = tiny();
  cfg.dropout_rate = 0.3;
  check_backward(cfg, 7, true);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    path_ = std::filesystem::temp_directory_path() /
            ("cptasr_ckpt_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
  }
  void TearDown() override { std::filesystem::remove(path_); }
  std::filesystem::path path_;
};

TEST_F(CheckpointTest, RoundTripIsFloat32Exact) {
  const auto cfg = tiny();
  const auto p = init_parameters(cfg, 8);
  save_checkpoint(p, cfg, Vocabulary("ab"), path_);
  const auto ck = load_checkpoint(path_, cfg);
  EXPECT_EQ(ck.params, round_to_float(p));
  EXPECT_EQ(ck.config, cfg);
  EXPECT_EQ(ck.vocab.symbols(), "ab");
  // Saving what was loaded is a fixed point.
  save_checkpoint(ck.params, cfg, ck.vocab, path_);
  EXPECT_EQ(load_checkpoint(path_).params, ck.params);
}

TEST_F(CheckpointTest, MismatchedConfigIsAnError) {
  const auto cfg = tiny();
  save_checkpoint(init_parameters(cfg, 8), cfg, Vocabulary("ab"), path_);
  auto other = cfg;
  other.hidden_dim = 6;
  EXPECT_THROW(load_checkpoint(path_, other), ConfigError);
}

TEST_F(CheckpointTest, CorruptFilesAreErrors) {
  const auto cfg = tiny();
  save_checkpoint(init_parameters(cfg, 8), cfg, Vocabulary("ab"), path_);
  std::string bytes;
  {
    std::ifstream is(path_, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  auto write = [&](const std::string& b) { std::ofstream(path_, std::ios::binary | std::ios::trunc) << b; };
  write("XXXX" + bytes.substr(4));
  EXPECT_THROW(load_checkpoint(path_), DataError);
  write(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(path_), DataError);
  write(bytes + "z");
  EXPECT_THROW(load_checkpoint(path_), DataError);
  EXPECT_THROW(load_checkpoint(path_.string() + ".missing"), DataError);
}

TEST_F(CheckpointTest, VocabularySizeMustMatchHead) {
  const auto cfg = tiny();
  EXPECT_THROW(save_checkpoint(init_parameters(cfg, 8), cfg, Vocabulary("abc"), path_), ConfigError);
}

}  // namespace
}  // namespace cptasr
