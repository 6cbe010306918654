#pragma once

// Line-delimited JSON manifests and CPTF feature files.
//
// Manifest: an optional header line {"manifest": "cptasr", "kind": ...}
// followed by one record per line:
//   {"id": ..., "speaker_id": ..., "transcript": ... (optional),
//    "features": {"T": ..., "D": ..., "data": <base64 LE float32, row-major>}}
// or, instead of "features", "features_path": <CPTF file, relative to the manifest>.
//
// CPTF file: "CPTF", u32 version, u32 T, u32 D, then T*D little-endian float32.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptasr/corpus.hpp"
#include "cptasr/errors.hpp"

namespace cptasr {

namespace detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");
static_assert(sizeof(float) == 4);

inline constexpr std::string_view kBase64Alphabet =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const auto n = (std::uint32_t(std::uint8_t(bytes[i])) << 16) |
                   (std::uint32_t(std::uint8_t(bytes[i + 1])) << 8) | std::uint8_t(bytes[i + 2]);
    for (int s : {18, 12, 6, 0}) out.push_back(kBase64Alphabet[(n >> s) & 63]);
  }
  if (const auto rest = bytes.size() - i; rest > 0) {
    std::uint32_t n = std::uint32_t(std::uint8_t(bytes[i])) << 16;
    if (rest == 2) n |= std::uint32_t(std::uint8_t(bytes[i + 1])) << 8;
    out.push_back(kBase64Alphabet[(n >> 18) & 63]);
    out.push_back(kBase64Alphabet[(n >> 12) & 63]);
    out.push_back(rest == 2 ? kBase64Alphabet[(n >> 6) & 63] : '=');
    out.push_back('=');
  }
  return out;
}

inline std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw DataError("base64: length is not a multiple of 4");
  auto value = [](char c) -> int {
    const auto pos = kBase64Alphabet.find(c);
    return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
  };
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const bool last = i + 4 == text.size();
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + static_cast<std::size_t>(k)];
      if (c == '=' && last && k >= 2) {
        v[k] = 0;
        ++pad;
        continue;
      }
      if (pad > 0 || (v[k] = value(c)) < 0) throw DataError("base64: invalid character");
    }
    const std::uint32_t n = (std::uint32_t(v[0]) << 18) | (std::uint32_t(v[1]) << 12) |
                            (std::uint32_t(v[2]) << 6) | std::uint32_t(v[3]);
    out.push_back(static_cast<char>((n >> 16) & 0xff));
    if (pad < 2) out.push_back(static_cast<char>((n >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<char>(n & 0xff));
  }
  return out;
}

template <typename T>
void write_pod(std::ostream& os, const T& value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, std::string_view what) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) throw DataError("truncated " + std::string(what));
  return value;
}

inline std::string feature_bytes(const FeatureMatrix& f) {
  return {reinterpret_cast<const char*>(f.data()), static_cast<std::size_t>(f.size()) * sizeof(float)};
}

inline FeatureMatrix features_from_bytes(std::string_view bytes, std::uint32_t rows, std::uint32_t cols) {
  const std::size_t expected = std::size_t(rows) * cols * sizeof(float);
  if (bytes.size() != expected) throw DataError("feature payload size does not match declared T x D");
  FeatureMatrix f(rows, cols);
  std::memcpy(f.data(), bytes.data(), expected);
  return f;
}

}  // namespace detail

inline constexpr std::uint32_t kFeatureFileVersion = 1;

inline void write_feature_file(const FeatureMatrix& f, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open feature file for writing: " + path.string());
  os.write("CPTF", 4);
  detail::write_pod(os, kFeatureFileVersion);
  detail::write_pod(os, static_cast<std::uint32_t>(f.rows()));
  detail::write_pod(os, static_cast<std::uint32_t>(f.cols()));
  const auto bytes = detail::feature_bytes(f);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("failed writing feature file: " + path.string());
}

inline FeatureMatrix read_feature_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open feature file: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "CPTF")
    throw DataError("bad feature file magic: " + path.string());
  const auto version = detail::read_pod<std::uint32_t>(is, "feature header");
  if (version != kFeatureFileVersion) throw DataError("unsupported feature file version: " + path.string());
  const auto rows = detail::read_pod<std::uint32_t>(is, "feature header");
  const auto cols = detail::read_pod<std::uint32_t>(is, "feature header");
  std::string bytes(std::size_t(rows) * cols * sizeof(float), '\0');
  if (!is.read(bytes.data(), static_cast<std::streamsize>(bytes.size())))
    throw DataError("truncated feature file: " + path.string());
  return detail::features_from_bytes(bytes, rows, cols);
}

enum class FeatureStorage { inline_base64, external_files };

/// Writes `ds`. With external_files, feature matrices go to `<stem>_feats/<id>.cptf`
/// beside the manifest and records carry a relative features_path.
inline void save_manifest(const Dataset& ds, const std::filesystem::path& path,
                          FeatureStorage storage = FeatureStorage::inline_base64) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path feats_dir;
  if (storage == FeatureStorage::external_files) {
    feats_dir = path.stem().string() + "_feats";
    fs::create_directories(path.parent_path() / feats_dir);
  }
  std::ofstream os(path);
  if (!os) throw DataError("cannot open manifest for writing: " + path.string());
  os << nlohmann::json{{"manifest", "cptasr"}, {"kind", to_string(ds.kind)}}.dump() << '\n';
  for (const auto& u : ds.utterances) {
    nlohmann::json rec{{"id", u.id}, {"speaker_id", u.speaker_id}};
    if (u.transcript) rec["transcript"] = *u.transcript;
    if (storage == FeatureStorage::inline_base64) {
      rec["features"] = {{"T", u.features.rows()},
                         {"D", u.features.cols()},
                         {"data", detail::base64_encode(detail::feature_bytes(u.features))}};
    } else {
      const fs::path rel = feats_dir / (u.id + ".cptf");
      write_feature_file(u.features, path.parent_path() / rel);
      rec["features_path"] = rel.generic_string();
    }
    os << rec.dump() << '\n';
  }
  if (!os) throw DataError("failed writing manifest: " + path.string());
}

/// Reads a manifest. Without a header line the kind is inferred from transcript
/// presence. Vocabulary membership is not checked here.
inline Dataset load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest: " + path.string());

  Dataset ds;
  std::optional<DatasetKind> declared;
  std::unordered_set<std::string> ids;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& msg) -> DataError {
    return DataError(path.string() + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw fail("malformed JSON");
    }
    if (!rec.is_object()) throw fail("record is not an object");
    if (rec.contains("manifest")) {
      if (!ds.utterances.empty() || declared) throw fail("header must be the first record");
      try {
        declared = dataset_kind_from_string(rec.at("kind").get<std::string>());
      } catch (const nlohmann::json::exception&) {
        throw fail("header needs a string 'kind'");
      } catch (const DataError& e) {
        throw fail(e.what());
      }
      continue;
    }
    try {
      Utterance u;
      for (const char* field : {"id", "speaker_id"})
        if (!rec.contains(field)) throw fail(std::string("missing required field '") + field + "'");
      u.id = rec.at("id").get<std::string>();
      u.speaker_id = rec.at("speaker_id").get<std::string>();
      if (rec.contains("transcript") && !rec["transcript"].is_null())
        u.transcript = rec["transcript"].get<std::string>();
      if (rec.contains("features")) {
        const auto& f = rec.at("features");
        const auto rows = f.at("T").get<std::uint32_t>();
        const auto cols = f.at("D").get<std::uint32_t>();
        u.features = detail::features_from_bytes(detail::base64_decode(f.at("data").get<std::string>()), rows, cols);
      } else if (rec.contains("features_path")) {
        u.features = read_feature_file(path.parent_path() / rec.at("features_path").get<std::string>());
      } else {
        throw fail("missing required field 'features' or 'features_path'");
      }
      if (u.features.rows() < 1 || u.features.cols() < 1) throw fail("empty feature matrix");
      if (!u.features.allFinite()) throw fail("non-finite feature value");
      if (!ids.insert(u.id).second) throw fail("duplicate id '" + u.id + "'");
      ds.utterances.push_back(std::move(u));
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("bad field: ") + e.what());
    } catch (const DataError& e) {
      const std::string msg = e.what();
      if (msg.rfind(path.string() + ":", 0) == 0) throw;
      throw fail(msg);
    }
  }

  std::size_t with_transcript = 0;
  for (const auto& u : ds.utterances) with_transcript += u.transcript.has_value();
  if (declared) {
    ds.kind = *declared;
  } else if (with_transcript == ds.size()) {
    ds.kind = DatasetKind::labeled;
  } else if (with_transcript == 0) {
    ds.kind = DatasetKind::unlabeled;
  } else {
    throw DataError(path.string() + ": mixes labeled and unlabeled records");
  }
  ds.validate();
  return ds;
}

/// id -> transcript map as JSON lines ({"id":..., "transcript":...}).
inline void save_transcripts(const std::map<std::string, std::string>& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  for (const auto& [id, text] : m) os << nlohmann::json{{"id", id}, {"transcript", text}}.dump() << '\n';
}

inline std::map<std::string, std::string> load_transcripts(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open: " + path.string());
  std::map<std::string, std::string> m;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      m[rec.at("id").get<std::string>()] = rec.at("transcript").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed record");
    }
  }
  return m;
}

}  // namespace cptasr
