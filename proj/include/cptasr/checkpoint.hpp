#pragma once

// Checkpoint file:
//   "CPTN", u32 version,
//   NetConfig: i32 feature_dim, downsample_factor, conv_layers, conv_channels,
//              context_layers, hidden_dim, context_window, vocab_size; f64 dropout_rate,
//   u32 vocabulary length + vocabulary bytes (non-blank symbols in index order),
//   u32 tensor count, then per tensor: u32 name length, name, u32 rank (2),
//   u32 rows, u32 cols, rows*cols little-endian float32 in row-major order.
//
// Tensors are stored as float32: saving rounds each value to the nearest float,
// and a loaded checkpoint saves back to identical bytes.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "cptasr/corpus.hpp"
#include "cptasr/errors.hpp"
#include "cptasr/manifest.hpp"
#include "cptasr/net.hpp"

namespace cptasr {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Parameters params;
  NetConfig config;
  Vocabulary vocab;
};

/// Rounds every parameter to float32, the precision kept on disk.
inline Parameters round_to_float(Parameters p) {
  for (auto& [_, t] : p.tensors) t = t.cast<float>().cast<double>();
  return p;
}

inline void save_checkpoint(const Parameters& params, const NetConfig& cfg, const Vocabulary& vocab,
                            const std::filesystem::path& path) {
  check_parameters(params, cfg);
  if (vocab.size() != cfg.vocab_size) throw ConfigError("save_checkpoint: vocabulary size does not match config");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
  using detail::write_pod;
  os.write("CPTN", 4);
  write_pod(os, kCheckpointVersion);
  for (int v : {cfg.feature_dim, cfg.downsample_factor, cfg.conv_layers, cfg.conv_channels, cfg.context_layers,
                cfg.hidden_dim, cfg.context_window, cfg.vocab_size})
    write_pod(os, static_cast<std::int32_t>(v));
  write_pod(os, cfg.dropout_rate);
  write_pod(os, static_cast<std::uint32_t>(vocab.symbols().size()));
  os.write(vocab.symbols().data(), static_cast<std::streamsize>(vocab.symbols().size()));
  write_pod(os, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& [name, t] : params.tensors) {
    write_pod(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(os, std::uint32_t{2});
    write_pod(os, static_cast<std::uint32_t>(t.rows()));
    write_pod(os, static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) write_pod(os, static_cast<float>(t(r, c)));
  }
  if (!os) throw DataError("failed writing checkpoint: " + path.string());
}

/// Loads a checkpoint; with `expected`, a differing stored NetConfig is an error.
inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<NetConfig>& expected = std::nullopt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  using detail::read_pod;
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "CPTN")
    throw DataError("not a checkpoint (bad magic): " + path.string());
  if (const auto version = read_pod<std::uint32_t>(is, "checkpoint"); version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());

  Checkpoint ck;
  auto& cfg = ck.config;
  for (int* field : {&cfg.feature_dim, &cfg.downsample_factor, &cfg.conv_layers, &cfg.conv_channels,
                     &cfg.context_layers, &cfg.hidden_dim, &cfg.context_window, &cfg.vocab_size})
    *field = read_pod<std::int32_t>(is, "checkpoint config");
  cfg.dropout_rate = read_pod<double>(is, "checkpoint config");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("corrupt checkpoint config: ") + e.what());
  }
  if (expected && !(*expected == cfg)) throw ConfigError("checkpoint config does not match expected config: " + path.string());

  const auto vocab_len = read_pod<std::uint32_t>(is, "checkpoint vocabulary");
  if (vocab_len > 256) throw DataError("corrupt checkpoint vocabulary");
  std::string symbols(vocab_len, '\0');
  if (!is.read(symbols.data(), vocab_len)) throw DataError("truncated checkpoint vocabulary");
  ck.vocab = Vocabulary(symbols);
  if (ck.vocab.size() != cfg.vocab_size) throw DataError("checkpoint vocabulary size does not match its config");

  const auto count = read_pod<std::uint32_t>(is, "checkpoint tensor table");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(is, "tensor header");
    if (name_len > 1024) throw DataError("corrupt tensor name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw DataError("truncated tensor name");
    if (read_pod<std::uint32_t>(is, "tensor header") != 2) throw DataError("tensor '" + name + "' is not rank 2");
    const auto rows = read_pod<std::uint32_t>(is, "tensor header");
    const auto cols = read_pod<std::uint32_t>(is, "tensor header");
    if (std::uint64_t(rows) * cols > (1ULL << 28)) throw DataError("tensor '" + name + "' is implausibly large");
    Eigen::MatrixXd t(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) t(r, c) = read_pod<float>(is, "tensor data");
    if (!ck.params.tensors.emplace(std::move(name), std::move(t)).second) throw DataError("duplicate tensor name");
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes after checkpoint tensors");
  try {
    check_parameters(ck.params, cfg);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint tensors: ") + e.what());
  }
  return ck;
}

}  // namespace cptasr
