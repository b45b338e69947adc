#pragma once

// Embedding interchange: the DSEQ binary container and a CSV fallback.
//
// DSEQ layout (little-endian):
//   "DSEQ" | u16 version (=1) | u16 flags (=0) | u64 n_samples | u32 dim | u32 reserved (=0)
//   n_samples * dim float32, row-major
//   u64 manifest byte length | manifest, one JSON object per line: {"id": ..., "uri": ...}
//
// The payload starts at byte 24 so it can be mapped directly as float[].

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "equity/error.hpp"
#include "equity/matrix.hpp"

namespace equity {

inline constexpr std::array<char, 4> kDseqMagic = {'D', 'S', 'E', 'Q'};
inline constexpr std::uint16_t kDseqVersion = 1;
inline constexpr std::size_t kDseqHeaderBytes = 24;

enum class EmbeddingFormat { Binary, Csv };

struct ManifestEntry {
  std::string id;
  std::optional<std::string> uri;
  std::optional<std::string> split_tag;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

// N x D float32 embeddings with one manifest entry per row.
struct EmbeddingMatrix {
  std::size_t n_samples = 0;
  std::size_t dim = 0;
  std::vector<float> data;
  std::vector<ManifestEntry> manifest;

  float operator()(std::size_t i, std::size_t j) const { return data[i * dim + j]; }
  std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
  const std::string& sample_id(std::size_t i) const { return manifest[i].id; }

  std::vector<std::string> sample_ids() const {
    std::vector<std::string> ids;
    ids.reserve(manifest.size());
    for (const auto& e : manifest) ids.push_back(e.id);
    return ids;
  }

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;
};

inline EmbeddingMatrix make_embeddings(std::size_t n, std::size_t d, std::vector<float> data,
                                       const std::vector<std::string>& ids) {
  EmbeddingMatrix m;
  m.n_samples = n;
  m.dim = d;
  m.data = std::move(data);
  m.manifest.reserve(ids.size());
  for (const auto& id : ids) m.manifest.push_back({id, std::nullopt, std::nullopt});
  return m;
}

inline void validate(const EmbeddingMatrix& m) {
  if (m.n_samples < 1) throw Error(ErrorKind::Validation, "embedding matrix has no samples");
  if (m.dim < 1) throw Error(ErrorKind::Validation, "embedding dimension must be >= 1");
  if (m.data.size() != m.n_samples * m.dim) {
    throw Error(ErrorKind::DimensionMismatch,
                "payload holds " + std::to_string(m.data.size()) + " values, expected " +
                    std::to_string(m.n_samples * m.dim));
  }
  if (m.manifest.size() != m.n_samples) {
    throw Error(ErrorKind::DimensionMismatch,
                "manifest has " + std::to_string(m.manifest.size()) + " entries for " +
                    std::to_string(m.n_samples) + " rows");
  }
  for (std::size_t k = 0; k < m.data.size(); ++k) {
    if (!std::isfinite(m.data[k])) {
      throw Error(ErrorKind::NonFiniteValue, "row " + std::to_string(k / m.dim) + ", column " +
                                                 std::to_string(k % m.dim));
    }
  }
  std::unordered_set<std::string_view> seen;
  seen.reserve(m.n_samples);
  for (const auto& e : m.manifest) {
    if (!seen.insert(e.id).second) throw Error(ErrorKind::DuplicateSampleId, e.id);
  }
}

inline Matrix to_matrix(const EmbeddingMatrix& m) {
  Matrix out(m.n_samples, m.dim);
  for (std::size_t k = 0; k < m.data.size(); ++k) out.data[k] = static_cast<double>(m.data[k]);
  return out;
}

// Rounds to float32; used to persist projected coordinates.
inline EmbeddingMatrix from_matrix(const Matrix& x, std::vector<ManifestEntry> manifest) {
  EmbeddingMatrix m;
  m.n_samples = x.rows;
  m.dim = x.cols;
  m.data.resize(x.data.size());
  for (std::size_t k = 0; k < x.data.size(); ++k) m.data[k] = static_cast<float>(x.data[k]);
  m.manifest = std::move(manifest);
  return m;
}

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t b = 0; b < sizeof(U); ++b) {
    out.push_back(static_cast<char>(u & 0xFFu));
    u = static_cast<U>(u >> 8);
  }
}

template <typename T>
T get_le(const unsigned char* p) {
  std::make_unsigned_t<T> u = 0;
  for (std::size_t b = sizeof(T); b-- > 0;) u = static_cast<decltype(u)>((u << 8) | p[b]);
  return static_cast<T>(u);
}

inline std::string manifest_line(const ManifestEntry& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  if (e.uri && !e.uri->empty()) j["uri"] = *e.uri;
  if (e.split_tag && !e.split_tag->empty()) j["split"] = *e.split_tag;
  return j.dump();
}

inline ManifestEntry parse_manifest_line(std::string_view line, std::size_t row) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::MalformedHeader,
                "manifest line " + std::to_string(row) + " is not JSON: " + ex.what());
  }
  if (!j.is_object() || !j.contains("id") || !j["id"].is_string()) {
    throw Error(ErrorKind::MalformedHeader,
                "manifest line " + std::to_string(row) + " lacks a string \"id\"");
  }
  ManifestEntry e{j["id"].get<std::string>(), std::nullopt, std::nullopt};
  if (auto it = j.find("uri"); it != j.end() && it->is_string()) e.uri = it->get<std::string>();
  if (auto it = j.find("split"); it != j.end() && it->is_string()) e.split_tag = it->get<std::string>();
  return e;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  for (auto& f : fields) {
    while (!f.empty() && (f.back() == '\r' || f.back() == ' ')) f.remove_suffix(1);
    while (!f.empty() && f.front() == ' ') f.remove_prefix(1);
  }
  return fields;
}

inline float parse_float(std::string_view text, std::size_t row, std::size_t col) {
  float v = 0.0f;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (!text.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec == std::errc::result_out_of_range) {
    throw Error(ErrorKind::NonFiniteValue,
                "row " + std::to_string(row) + ", column " + std::to_string(col) + " overflows float32");
  }
  if (ec != std::errc{} || ptr != last) {
    throw Error(ErrorKind::MalformedHeader, "row " + std::to_string(row) + ", column " +
                                                std::to_string(col) + ": cannot parse '" +
                                                std::string(text) + "'");
  }
  return v;
}

}  // namespace detail

inline std::string encode_dseq(const EmbeddingMatrix& m) {
  validate(m);
  std::string out;
  out.reserve(kDseqHeaderBytes + m.data.size() * 4 + 64 * m.n_samples);
  out.append(kDseqMagic.data(), kDseqMagic.size());
  detail::put_le<std::uint16_t>(out, kDseqVersion);
  detail::put_le<std::uint16_t>(out, 0);
  detail::put_le<std::uint64_t>(out, m.n_samples);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.dim));
  detail::put_le<std::uint32_t>(out, 0);
  for (const float v : m.data) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  std::string manifest;
  for (const auto& e : m.manifest) {
    manifest += detail::manifest_line(e);
    manifest += '\n';
  }
  detail::put_le<std::uint64_t>(out, manifest.size());
  out += manifest;
  return out;
}

inline EmbeddingMatrix decode_dseq(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kDseqHeaderBytes) throw Error(ErrorKind::MalformedHeader, "file shorter than header");
  if (std::memcmp(p, kDseqMagic.data(), kDseqMagic.size()) != 0) {
    throw Error(ErrorKind::MalformedHeader, "bad magic, expected \"DSEQ\"");
  }
  const auto version = detail::get_le<std::uint16_t>(p + 4);
  const auto flags = detail::get_le<std::uint16_t>(p + 6);
  const auto n = detail::get_le<std::uint64_t>(p + 8);
  const auto dim = detail::get_le<std::uint32_t>(p + 16);
  const auto reserved = detail::get_le<std::uint32_t>(p + 20);
  if (version != kDseqVersion) throw Error(ErrorKind::MalformedHeader, "unsupported version " + std::to_string(version));
  if (flags != 0 || reserved != 0) throw Error(ErrorKind::MalformedHeader, "nonzero flags/reserved field");
  if (n == 0 || dim == 0) throw Error(ErrorKind::MalformedHeader, "declared n_samples and dim must be >= 1");

  const std::uint64_t available = bytes.size() - kDseqHeaderBytes;
  if (n > available / 4 / dim || available - n * dim * 4 < 8) {
    throw Error(ErrorKind::DimensionMismatch, "payload shorter than declared " + std::to_string(n) + "x" +
                                                  std::to_string(dim) + " matrix");
  }
  EmbeddingMatrix m;
  m.n_samples = static_cast<std::size_t>(n);
  m.dim = dim;
  m.data.resize(m.n_samples * m.dim);
  const unsigned char* payload = p + kDseqHeaderBytes;
  for (std::size_t k = 0; k < m.data.size(); ++k) {
    m.data[k] = std::bit_cast<float>(detail::get_le<std::uint32_t>(payload + 4 * k));
  }
  const std::size_t manifest_at = kDseqHeaderBytes + m.data.size() * 4;
  const auto manifest_len = detail::get_le<std::uint64_t>(p + manifest_at);
  const std::size_t body_at = manifest_at + 8;
  if (manifest_len != bytes.size() - body_at) {
    throw Error(ErrorKind::DimensionMismatch, "manifest length field disagrees with file size");
  }
  std::string_view manifest = bytes.substr(body_at);
  m.manifest.reserve(m.n_samples);
  std::size_t row = 0;
  while (!manifest.empty()) {
    const auto nl = manifest.find('\n');
    const auto line = manifest.substr(0, nl);
    if (!line.empty()) m.manifest.push_back(detail::parse_manifest_line(line, row++));
    if (nl == std::string_view::npos) break;
    manifest.remove_prefix(nl + 1);
  }
  validate(m);
  return m;
}

inline std::string encode_csv(const EmbeddingMatrix& m) {
  validate(m);
  std::string out = "id";
  for (std::size_t j = 0; j < m.dim; ++j) out += ",f" + std::to_string(j);
  out += '\n';
  std::array<char, 32> buf{};
  for (std::size_t i = 0; i < m.n_samples; ++i) {
    out += m.sample_id(i);
    for (const float v : m.row(i)) {
      const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
      out += ',';
      out.append(buf.data(), res.ptr);
    }
    out += '\n';
  }
  return out;
}

inline EmbeddingMatrix decode_csv(std::string_view text) {
  std::vector<std::string_view> lines;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) lines.push_back(line);
    if (nl == std::string_view::npos) break;
    text.remove_prefix(nl + 1);
  }
  if (lines.empty()) throw Error(ErrorKind::MalformedHeader, "empty CSV");
  const auto header = detail::split_csv_line(lines.front());
  if (header.size() < 2) throw Error(ErrorKind::MalformedHeader, "CSV header needs an id column and >= 1 feature");
  if (header.front() != "id") throw Error(ErrorKind::MalformedHeader, "first CSV column must be 'id'");

  EmbeddingMatrix m;
  m.dim = header.size() - 1;
  m.n_samples = lines.size() - 1;
  m.data.reserve(m.n_samples * m.dim);
  m.manifest.reserve(m.n_samples);
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto fields = detail::split_csv_line(lines[r]);
    if (fields.size() != header.size()) {
      throw Error(ErrorKind::DimensionMismatch, "row " + std::to_string(r - 1) + " has " +
                                                    std::to_string(fields.size() - 1) + " values, expected " +
                                                    std::to_string(m.dim));
    }
    m.manifest.push_back({std::string(fields[0]), std::nullopt, std::nullopt});
    for (std::size_t c = 1; c < fields.size(); ++c) m.data.push_back(detail::parse_float(fields[c], r - 1, c - 1));
  }
  validate(m);
  return m;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw Error(ErrorKind::IoFailure, "read failed for " + path.string());
  return std::move(ss).str();
}

// Writes through a sibling temp file and renames, so readers never observe
// a half-written artifact.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw Error(ErrorKind::IoFailure, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorKind::IoFailure, "rename to " + path.string() + " failed");
  }
}

inline EmbeddingFormat format_from_extension(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? EmbeddingFormat::Csv : EmbeddingFormat::Binary;
}

inline EmbeddingMatrix read_embeddings(const std::filesystem::path& path, EmbeddingFormat format) {
  const auto bytes = read_file(path);
  return format == EmbeddingFormat::Binary ? decode_dseq(bytes) : decode_csv(bytes);
}

inline void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path,
                             EmbeddingFormat format = EmbeddingFormat::Binary) {
  write_file_atomic(path, format == EmbeddingFormat::Binary ? encode_dseq(m) : encode_csv(m));
}

}  // namespace equity
