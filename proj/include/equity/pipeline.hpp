#pragma once

// End-to-end orchestration: embeddings -> 3-D projection -> clusters ->
// likelihood bank -> GFL weights -> report.
//
// Each stage writes its artifacts into the output directory and stamps them
// with a stage key, a SHA-256 chained over the upstream stage key and the
// parameters the stage consumes. A stage refuses to run when an upstream
// artifact is missing (MissingUpstreamArtifact) or was produced under
// different parameters (ConfigMismatch). Text artifacts carry the stamp in a
// leading metadata record; DSEQ artifacts carry it in a .meta.json sidecar.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "equity/clustering.hpp"
#include "equity/embedding_io.hpp"
#include "equity/error.hpp"
#include "equity/gfl.hpp"
#include "equity/hashing.hpp"
#include "equity/likelihood.hpp"
#include "equity/projection.hpp"

namespace equity {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kArtifactSchemaVersion = 1;

struct ReportConfig {
  std::size_t histogram_bins = 50;
  bool emit_svg = false;
};

using ClusterMethod = std::variant<DbscanParams, HdbscanParams>;

struct PipelineConfig {
  fs::path input_path;
  EmbeddingFormat input_format = EmbeddingFormat::Binary;
  TsneConfig tsne;
  ClusterMethod cluster = DbscanParams{};
  NoisePolicy noise_policy = NoisePolicy::Singleton;
  GflParams gfl;
  fs::path output_dir = "dataset-equity-out";
  std::uint64_t seed = 0;
  ReportConfig report;
};

enum class Stage { Ingest, Project, Cluster, Likelihoods, Weights, Report };

inline constexpr std::array<Stage, 6> kAllStages = {Stage::Ingest, Stage::Project, Stage::Cluster,
                                                    Stage::Likelihoods, Stage::Weights, Stage::Report};

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Ingest: return "ingest";
    case Stage::Project: return "project";
    case Stage::Cluster: return "cluster";
    case Stage::Likelihoods: return "likelihoods";
    case Stage::Weights: return "weights";
    case Stage::Report: return "report";
  }
  return "?";
}

inline Stage parse_stage(std::string_view s) {
  for (const auto st : kAllStages) {
    if (to_string(st) == s) return st;
  }
  throw Error(ErrorKind::InvalidConfig, "unknown stage '" + std::string(s) + "'");
}

// An Error annotated with the stage that raised it.
class StageError : public Error {
 public:
  StageError(Stage stage, const Error& inner)
      : Error(Verbatim{}, inner.kind(), "[" + std::string(to_string(stage)) + "] " + inner.what()), stage_(stage) {}
  Stage stage() const noexcept { return stage_; }

 private:
  Stage stage_;
};

// Artifact file names inside the output directory.
namespace artifact {
inline constexpr const char* kEmbeddings = "embeddings.dseq";
inline constexpr const char* kEmbeddingsMeta = "embeddings.meta.json";
inline constexpr const char* kProjection = "projection.dseq";
inline constexpr const char* kProjectionMeta = "projection.meta.json";
inline constexpr const char* kClusters = "clusters.jsonl";
inline constexpr const char* kCondensedTree = "condensed_tree.json";
inline constexpr const char* kLikelihoods = "likelihoods.jsonl";
inline constexpr const char* kWeights = "weights.jsonl";
inline constexpr const char* kWeightsCsv = "weights.csv";
inline constexpr const char* kHistogram = "histogram.csv";
inline constexpr const char* kHistogramSvg = "histogram.svg";
inline constexpr const char* kSummary = "summary.json";
inline constexpr const char* kLock = ".dataset-equity.lock";
}  // namespace artifact

// ---------------------------------------------------------------------------
// Config (de)serialisation

inline std::string_view to_string(EmbeddingFormat f) { return f == EmbeddingFormat::Binary ? "binary" : "csv"; }

inline EmbeddingFormat parse_format(std::string_view s) {
  if (s == "binary" || s == "dseq") return EmbeddingFormat::Binary;
  if (s == "csv") return EmbeddingFormat::Csv;
  throw Error(ErrorKind::InvalidConfig, "unknown input format '" + std::string(s) + "'");
}

inline ordered_json to_json(const TsneConfig& t) {
  ordered_json j;
  j["target_dim"] = t.target_dim;
  j["perplexity"] = t.perplexity;
  j["early_exaggeration_factor"] = t.early_exaggeration_factor;
  j["early_exaggeration_iters"] = t.early_exaggeration_iters;
  j["total_iters"] = t.total_iters;
  j["learning_rate"] = t.learning_rate ? ordered_json(*t.learning_rate) : ordered_json(nullptr);
  j["momentum_early"] = t.momentum_early;
  j["momentum_late"] = t.momentum_late;
  j["perplexity_tolerance"] = t.perplexity_tolerance;
  j["perplexity_max_bisect"] = t.perplexity_max_bisect;
  return j;
}

inline ordered_json to_json(const ClusterMethod& m) {
  if (const auto* d = std::get_if<DbscanParams>(&m)) return {{"dbscan", to_json(*d)}};
  return {{"hdbscan", to_json(std::get<HdbscanParams>(m))}};
}

inline ordered_json to_json(const GflParams& g) { return {{"eta", g.eta}, {"gamma", g.gamma}}; }

inline ordered_json to_json(const ReportConfig& r) {
  return {{"histogram_bins", r.histogram_bins}, {"emit_svg", r.emit_svg}};
}

inline ordered_json to_json(const PipelineConfig& c) {
  ordered_json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["input"] = {{"path", c.input_path.generic_string()}, {"format", to_string(c.input_format)}};
  j["tsne"] = to_json(c.tsne);
  j["cluster"] = to_json(c.cluster);
  j["noise_policy"] = to_string(c.noise_policy);
  j["gfl"] = to_json(c.gfl);
  j["output_dir"] = c.output_dir.generic_string();
  j["seed"] = c.seed;
  j["report"] = to_json(c.report);
  return j;
}

namespace detail {

template <typename Json>
void reject_unknown_keys(const Json& obj, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!obj.is_object()) throw Error(ErrorKind::InvalidConfig, std::string(where) + " must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw Error(ErrorKind::InvalidConfig, "unknown key '" + it.key() + "' in " + std::string(where));
    }
  }
}

template <typename T, typename Json>
void read_field(const Json& obj, std::string_view key, T& out, std::string_view where) {
  const auto it = obj.find(std::string(key));
  if (it == obj.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::InvalidConfig, "bad value for '" + std::string(key) + "' in " + std::string(where));
  }
}

}  // namespace detail

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  using detail::read_field;
  detail::reject_unknown_keys(
      j, {"schema_version", "input", "tsne", "cluster", "noise_policy", "gfl", "output_dir", "seed", "report"},
      "config");
  int version = kConfigSchemaVersion;
  read_field(j, "schema_version", version, "config");
  if (version != kConfigSchemaVersion) {
    throw Error(ErrorKind::InvalidConfig, "unsupported config schema_version " + std::to_string(version));
  }
  PipelineConfig c;
  if (const auto it = j.find("input"); it != j.end()) {
    detail::reject_unknown_keys(*it, {"path", "format"}, "input");
    std::string path;
    std::string format = "binary";
    read_field(*it, "path", path, "input");
    read_field(*it, "format", format, "input");
    c.input_path = path;
    c.input_format = parse_format(format);
  }
  if (const auto it = j.find("tsne"); it != j.end()) {
    const auto& t = *it;
    detail::reject_unknown_keys(t,
                                {"target_dim", "perplexity", "early_exaggeration_factor", "early_exaggeration_iters",
                                 "total_iters", "learning_rate", "momentum_early", "momentum_late",
                                 "perplexity_tolerance", "perplexity_max_bisect"},
                                "tsne");
    read_field(t, "target_dim", c.tsne.target_dim, "tsne");
    read_field(t, "perplexity", c.tsne.perplexity, "tsne");
    read_field(t, "early_exaggeration_factor", c.tsne.early_exaggeration_factor, "tsne");
    read_field(t, "early_exaggeration_iters", c.tsne.early_exaggeration_iters, "tsne");
    read_field(t, "total_iters", c.tsne.total_iters, "tsne");
    if (const auto lr = t.find("learning_rate"); lr != t.end() && !lr->is_null()) {
      double v = 0.0;
      read_field(t, "learning_rate", v, "tsne");
      c.tsne.learning_rate = v;
    }
    read_field(t, "momentum_early", c.tsne.momentum_early, "tsne");
    read_field(t, "momentum_late", c.tsne.momentum_late, "tsne");
    read_field(t, "perplexity_tolerance", c.tsne.perplexity_tolerance, "tsne");
    read_field(t, "perplexity_max_bisect", c.tsne.perplexity_max_bisect, "tsne");
  }
  if (const auto it = j.find("cluster"); it != j.end()) {
    detail::reject_unknown_keys(*it, {"dbscan", "hdbscan"}, "cluster");
    const bool has_db = it->contains("dbscan");
    const bool has_hdb = it->contains("hdbscan");
    if (has_db == has_hdb) throw Error(ErrorKind::InvalidConfig, "cluster must select exactly one of dbscan, hdbscan");
    if (has_db) {
      const auto& d = (*it)["dbscan"];
      detail::reject_unknown_keys(d, {"eps", "min_samples"}, "cluster.dbscan");
      DbscanParams p;
      read_field(d, "eps", p.eps, "cluster.dbscan");
      read_field(d, "min_samples", p.min_samples, "cluster.dbscan");
      c.cluster = p;
    } else {
      const auto& h = (*it)["hdbscan"];
      detail::reject_unknown_keys(h, {"min_cluster_size", "min_samples", "selection"}, "cluster.hdbscan");
      HdbscanParams p;
      read_field(h, "min_cluster_size", p.min_cluster_size, "cluster.hdbscan");
      read_field(h, "min_samples", p.min_samples, "cluster.hdbscan");
      read_field(h, "selection", p.selection, "cluster.hdbscan");
      c.cluster = p;
    }
  }
  if (const auto it = j.find("noise_policy"); it != j.end()) {
    std::string s;
    read_field(j, "noise_policy", s, "config");
    c.noise_policy = parse_noise_policy(s);
  }
  if (const auto it = j.find("gfl"); it != j.end()) {
    detail::reject_unknown_keys(*it, {"eta", "gamma"}, "gfl");
    read_field(*it, "eta", c.gfl.eta, "gfl");
    read_field(*it, "gamma", c.gfl.gamma, "gfl");
  }
  if (const auto it = j.find("output_dir"); it != j.end()) {
    std::string s;
    read_field(j, "output_dir", s, "config");
    c.output_dir = s;
  }
  read_field(j, "seed", c.seed, "config");
  if (const auto it = j.find("report"); it != j.end()) {
    detail::reject_unknown_keys(*it, {"histogram_bins", "emit_svg"}, "report");
    read_field(*it, "histogram_bins", c.report.histogram_bins, "report");
    read_field(*it, "emit_svg", c.report.emit_svg, "report");
  }
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::InvalidConfig, "config " + path.string() + " is not valid JSON: " + ex.what());
  }
  return config_from_json(j);
}

// Checks everything that does not depend on the data size.
inline void validate(const PipelineConfig& c) {
  if (c.input_path.empty()) throw Error(ErrorKind::InvalidConfig, "input path is required");
  if (c.output_dir.empty()) throw Error(ErrorKind::InvalidConfig, "output_dir is required");
  if (c.tsne.target_dim != 2 && c.tsne.target_dim != 3) throw Error(ErrorKind::InvalidConfig, "tsne.target_dim must be 2 or 3");
  if (c.tsne.early_exaggeration_iters >= c.tsne.total_iters) {
    throw Error(ErrorKind::InvalidConfig, "tsne.early_exaggeration_iters must be < total_iters");
  }
  std::visit([](const auto& p) { validate(p); }, c.cluster);
  validate(c.gfl);
  if (c.report.histogram_bins < 1) throw Error(ErrorKind::InvalidConfig, "report.histogram_bins must be >= 1");
}

// Hash of the canonical config. The output directory is excluded so that the
// same experiment written to two places yields identical bytes.
inline std::string config_hash(const PipelineConfig& c) {
  auto j = to_json(c);
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

// ---------------------------------------------------------------------------
// Stage keys

struct StageKeys {
  std::string input_sha256;
  std::map<Stage, std::string> key;
  std::map<Stage, ordered_json> params;
};

inline StageKeys compute_stage_keys(const PipelineConfig& c) {
  StageKeys k;
  try {
    k.input_sha256 = sha256_hex(read_file(c.input_path));
  } catch (const Error& e) {
    throw StageError(Stage::Ingest, e);
  }
  auto tsne = to_json(c.tsne);
  tsne["seed"] = c.seed;
  k.params[Stage::Ingest] = {{"path", c.input_path.generic_string()},
                             {"format", to_string(c.input_format)},
                             {"input_sha256", k.input_sha256}};
  k.params[Stage::Project] = tsne;
  k.params[Stage::Cluster] = to_json(c.cluster);
  k.params[Stage::Likelihoods] = {{"noise_policy", to_string(c.noise_policy)}};
  k.params[Stage::Weights] = to_json(c.gfl);
  k.params[Stage::Report] = to_json(c.report);
  std::string upstream;
  for (const auto s : kAllStages) {
    k.key[s] = sha256_hex(upstream + "\n" + std::string(to_string(s)) + "\n" + k.params[s].dump());
    upstream = k.key[s];
  }
  return k;
}

// ---------------------------------------------------------------------------
// Artifact helpers

namespace detail {

inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return {buf.data(), res.ptr};
}

struct JsonLines {
  nlohmann::json meta;
  std::vector<nlohmann::json> rows;
};

inline JsonLines read_jsonl(const fs::path& path) {
  JsonLines out;
  const auto text = read_file(path);
  std::string_view rest = text;
  while (!rest.empty()) {
    const auto nl = rest.find('\n');
    const auto line = rest.substr(0, nl);
    if (!line.empty()) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::MalformedHeader, path.filename().string() + ": bad JSON line: " + ex.what());
      }
      if (j.contains("_meta")) {
        out.meta = j["_meta"];
      } else {
        out.rows.push_back(std::move(j));
      }
    }
    if (nl == std::string_view::npos) break;
    rest.remove_prefix(nl + 1);
  }
  if (out.meta.is_null()) throw Error(ErrorKind::MalformedHeader, path.filename().string() + " lacks a _meta record");
  return out;
}

template <typename Row>
std::string to_jsonl(const ordered_json& meta, const std::vector<Row>& rows) {
  std::string out = ordered_json{{"_meta", meta}}.dump();
  out += '\n';
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

}  // namespace detail

struct RunArtifacts {
  fs::path output_dir;
  std::vector<fs::path> files;  // written or refreshed by this invocation
  nlohmann::json summary;       // set once the report stage has run
};

// Exclusive ownership of an output directory for one process.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / artifact::kLock) {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw Error(ErrorKind::Locked, "output directory " + dir.string() + " is locked (" + path_.string() + ")");
    std::fclose(f);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

namespace detail {

class StageContext {
 public:
  StageContext(const PipelineConfig& cfg, StageKeys keys)
      : cfg_(cfg), keys_(std::move(keys)), config_hash_(config_hash(cfg)) {}

  const PipelineConfig& cfg() const { return cfg_; }
  const StageKeys& keys() const { return keys_; }
  fs::path path(const char* name) const { return cfg_.output_dir / name; }
  std::vector<fs::path>& written() { return written_; }

  ordered_json meta(Stage s, const char* artifact_name) const {
    ordered_json m;
    m["artifact"] = artifact_name;
    m["schema_version"] = kArtifactSchemaVersion;
    m["stage"] = to_string(s);
    m["config_hash"] = config_hash_;
    m["stage_key"] = keys_.key.at(s);
    m["params"] = keys_.params.at(s);
    return m;
  }

  void write(const char* name, std::string_view bytes) {
    write_file_atomic(path(name), bytes);
    written_.push_back(path(name));
  }

  // Confirms the upstream artifact exists and was built for this config.
  nlohmann::json require(Stage upstream, const char* file, const char* meta_file) const {
    const auto p = path(file);
    if (!fs::exists(p)) {
      throw Error(ErrorKind::MissingUpstreamArtifact,
                  std::string(file) + " not found; run the '" + std::string(to_string(upstream)) + "' stage first");
    }
    nlohmann::json meta;
    if (meta_file) {
      const auto mp = path(meta_file);
      if (!fs::exists(mp)) throw Error(ErrorKind::MissingUpstreamArtifact, std::string(meta_file) + " not found");
      meta = nlohmann::json::parse(read_file(mp));
    } else {
      meta = read_jsonl(p).meta;
    }
    const auto expected = keys_.key.at(upstream);
    if (meta.value("stage_key", std::string{}) != expected) {
      throw Error(ErrorKind::ConfigMismatch, std::string(file) + " was produced with different '" +
                                                 std::string(to_string(upstream)) +
                                                 "' parameters or inputs than the current config");
    }
    return meta;
  }

  bool cached(Stage s, const char* file, const char* meta_file) const {
    if (!fs::exists(path(file)) || !fs::exists(path(meta_file))) return false;
    try {
      const auto meta = nlohmann::json::parse(read_file(path(meta_file)));
      return meta.value("stage_key", std::string{}) == keys_.key.at(s);
    } catch (const nlohmann::json::exception&) {
      return false;
    }
  }

 private:
  PipelineConfig cfg_;
  StageKeys keys_;
  std::string config_hash_;
  std::vector<fs::path> written_;
};

inline void stage_ingest(StageContext& ctx) {
  auto m = read_embeddings(ctx.cfg().input_path, ctx.cfg().input_format);
  auto meta = ctx.meta(Stage::Ingest, artifact::kEmbeddings);
  meta["n_samples"] = m.n_samples;
  meta["dim"] = m.dim;
  ctx.write(artifact::kEmbeddings, encode_dseq(m));
  ctx.write(artifact::kEmbeddingsMeta, meta.dump(2) + "\n");
}

inline void stage_project(StageContext& ctx) {
  ctx.require(Stage::Ingest, artifact::kEmbeddings, artifact::kEmbeddingsMeta);
  const auto emb = read_embeddings(ctx.path(artifact::kEmbeddings), EmbeddingFormat::Binary);
  auto tcfg = ctx.cfg().tsne;
  tcfg.seed = ctx.cfg().seed;
  const auto result = tsne_embed(emb, tcfg);

  std::vector<ManifestEntry> ids;
  ids.reserve(emb.n_samples);
  for (const auto& e : emb.manifest) ids.push_back({e.id, std::nullopt, std::nullopt});
  auto meta = ctx.meta(Stage::Project, artifact::kProjection);
  meta["n_samples"] = emb.n_samples;
  meta["target_dim"] = tcfg.target_dim;
  meta["learning_rate"] = tcfg.effective_learning_rate(emb.n_samples);
  std::size_t unconverged = 0;
  for (const auto s : result.bandwidth_status) unconverged += s != BandwidthStatus::Converged;
  meta["bandwidth_unconverged_rows"] = unconverged;
  meta["initial_kl"] = result.kl_trace.front();
  meta["final_kl"] = result.kl_trace.back();
  meta["pca_explained_variance"] = result.pca_explained_variance;
  meta["kl_trace"] = result.kl_trace;
  ctx.write(artifact::kProjection, encode_dseq(from_matrix(result.coords, std::move(ids))));
  ctx.write(artifact::kProjectionMeta, meta.dump(2) + "\n");
}

inline void stage_cluster(StageContext& ctx) {
  ctx.require(Stage::Project, artifact::kProjection, artifact::kProjectionMeta);
  const auto proj = read_embeddings(ctx.path(artifact::kProjection), EmbeddingFormat::Binary);
  const Matrix points = to_matrix(proj);
  ClusterAssignment assignment;
  std::optional<CondensedTree> tree;
  if (const auto* d = std::get_if<DbscanParams>(&ctx.cfg().cluster)) {
    assignment = dbscan(points, *d);
  } else {
    auto res = hdbscan(points, std::get<HdbscanParams>(ctx.cfg().cluster));
    assignment = std::move(res.assignment);
    tree = std::move(res.tree);
  }
  auto meta = ctx.meta(Stage::Cluster, artifact::kClusters);
  meta["method"] = assignment.method_tag;
  meta["n_clusters"] = assignment.n_clusters;
  meta["noise_count"] = assignment.noise_count();
  std::vector<ordered_json> rows;
  rows.reserve(proj.n_samples);
  for (std::size_t i = 0; i < proj.n_samples; ++i) {
    rows.push_back({{"id", proj.sample_id(i)}, {"cluster", assignment.labels[i]}});
  }
  ctx.write(artifact::kClusters, detail::to_jsonl(meta, rows));
  if (tree) {
    auto tj = tree->to_json();
    ordered_json doc{{"_meta", ctx.meta(Stage::Cluster, artifact::kCondensedTree)}};
    doc["clusters"] = std::move(tj["clusters"]);
    doc["entries"] = std::move(tj["entries"]);
    ctx.write(artifact::kCondensedTree, doc.dump() + "\n");
  } else {
    std::error_code ec;
    fs::remove(ctx.path(artifact::kCondensedTree), ec);
  }
}

struct ClusterFile {
  std::vector<std::string> ids;
  ClusterAssignment assignment;
};

inline ClusterFile read_cluster_file(const fs::path& path) {
  const auto jl = read_jsonl(path);
  ClusterFile out;
  out.assignment.method_tag = jl.meta.value("method", std::string{});
  int max_label = -1;
  for (const auto& r : jl.rows) {
    out.ids.push_back(r.at("id").get<std::string>());
    const int l = r.at("cluster").get<int>();
    if (l < kNoise) throw Error(ErrorKind::MalformedHeader, "cluster label below -1 in " + path.string());
    out.assignment.labels.push_back(l);
    max_label = std::max(max_label, l);
  }
  out.assignment.n_clusters = static_cast<std::size_t>(max_label + 1);
  return out;
}

inline void stage_likelihoods(StageContext& ctx) {
  ctx.require(Stage::Cluster, artifact::kClusters, nullptr);
  const auto cf = read_cluster_file(ctx.path(artifact::kClusters));
  const auto bank = scaled_likelihoods(cf.assignment, ctx.cfg().noise_policy);
  auto meta = ctx.meta(Stage::Likelihoods, artifact::kLikelihoods);
  meta["n_total"] = bank.n_total;
  meta["n_clusters"] = bank.n_clusters();
  meta["noise_count"] = bank.noise_count();
  ordered_json sizes = ordered_json::array();
  for (const auto& [id, size] : bank.cluster_sizes) sizes.push_back(size);
  meta["cluster_sizes"] = sizes;
  std::vector<ordered_json> rows;
  rows.reserve(bank.n_total);
  for (std::size_t i = 0; i < bank.n_total; ++i) {
    rows.push_back({{"id", cf.ids[i]}, {"cluster", bank.sample_cluster[i]}, {"likelihood", bank.sample_likelihood[i]}});
  }
  ctx.write(artifact::kLikelihoods, detail::to_jsonl(meta, rows));
}

struct LikelihoodFile {
  std::vector<std::string> ids;
  LikelihoodBank bank;
};

inline LikelihoodFile read_likelihood_file(const fs::path& path) {
  const auto jl = read_jsonl(path);
  LikelihoodFile out;
  out.bank.n_total = jl.rows.size();
  if (jl.meta.contains("params") && jl.meta["params"].contains("noise_policy")) {
    out.bank.noise_policy = parse_noise_policy(jl.meta["params"]["noise_policy"].get<std::string>());
  }
  for (const auto& r : jl.rows) {
    out.ids.push_back(r.at("id").get<std::string>());
    const int c = r.at("cluster").get<int>();
    const double l = r.at("likelihood").get<double>();
    out.bank.sample_cluster.push_back(c);
    out.bank.sample_likelihood.push_back(l);
    if (c != kNoise) {
      ++out.bank.cluster_sizes[c];
      out.bank.cluster_likelihood[c] = l;
    }
  }
  return out;
}

inline void stage_weights(StageContext& ctx) {
  ctx.require(Stage::Likelihoods, artifact::kLikelihoods, nullptr);
  const auto lf = read_likelihood_file(ctx.path(artifact::kLikelihoods));
  const auto table = weight_table(lf.bank, lf.ids, ctx.cfg().gfl);
  const auto meta = ctx.meta(Stage::Weights, artifact::kWeights);
  std::vector<ordered_json> rows;
  rows.reserve(table.weights.size());
  std::string csv = "# config_hash=" + meta["config_hash"].get<std::string>() +
                    " stage_key=" + meta["stage_key"].get<std::string>() + "\nid,likelihood,weight\n";
  for (std::size_t i = 0; i < table.weights.size(); ++i) {
    rows.push_back({{"id", table.sample_ids[i]}, {"likelihood", table.likelihoods[i]}, {"weight", table.weights[i]}});
    csv += table.sample_ids[i] + "," + format_double(table.likelihoods[i]) + "," + format_double(table.weights[i]) + "\n";
  }
  ctx.write(artifact::kWeights, to_jsonl(meta, rows));
  ctx.write(artifact::kWeightsCsv, csv);
}

inline std::string histogram_csv(const std::vector<HistogramBin>& bins, std::string_view comment = {}) {
  std::string out;
  if (!comment.empty()) out += "# " + std::string(comment) + "\n";
  out += "bin_low,bin_high,count\n";
  for (const auto& b : bins) {
    out += format_double(b.low) + "," + format_double(b.high) + "," + std::to_string(b.count) + "\n";
  }
  return out;
}

inline std::string histogram_svg(const std::vector<HistogramBin>& bins, std::string_view stamp) {
  constexpr double kWidth = 640.0, kHeight = 320.0, kMargin = 40.0;
  std::size_t peak = 1;
  for (const auto& b : bins) peak = std::max(peak, b.count);
  const double bar_w = (kWidth - 2 * kMargin) / static_cast<double>(bins.size());
  const double plot_h = kHeight - 2 * kMargin;
  std::string out;
  char buf[1024];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                kWidth, kHeight, kWidth, kHeight);
  out += buf;
  out += "<!-- " + std::string(stamp) + " -->\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t k = 0; k < bins.size(); ++k) {
    const double h = plot_h * static_cast<double>(bins[k].count) / static_cast<double>(peak);
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.3f\" y=\"%.3f\" width=\"%.3f\" height=\"%.3f\" fill=\"#4878a8\"><title>(%.4f, %.4f]: %zu</title></rect>\n",
                  kMargin + bar_w * static_cast<double>(k), kHeight - kMargin - h, bar_w * 0.9, h, bins[k].low,
                  bins[k].high, bins[k].count);
    out += buf;
  }
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" stroke=\"black\"/>\n"
                "<text x=\"%.0f\" y=\"%.0f\" font-size=\"12\" text-anchor=\"middle\">cluster likelihood</text>\n"
                "<text x=\"%.0f\" y=\"%.0f\" font-size=\"12\">0</text>\n"
                "<text x=\"%.0f\" y=\"%.0f\" font-size=\"12\" text-anchor=\"end\">1</text>\n"
                "<text x=\"%.0f\" y=\"%.0f\" font-size=\"12\">max count %zu</text>\n",
                kMargin, kHeight - kMargin, kWidth - kMargin, kHeight - kMargin, kWidth / 2, kHeight - 8.0, kMargin,
                kHeight - kMargin + 14.0, kWidth - kMargin, kHeight - kMargin + 14.0, kMargin, kMargin - 10.0, peak);
  out += buf;
  out += "</svg>\n";
  return out;
}

inline void stage_report(StageContext& ctx) {
  const auto wmeta = ctx.require(Stage::Weights, artifact::kWeights, nullptr);
  const auto lf = read_likelihood_file(ctx.path(artifact::kLikelihoods));
  const auto wl = read_jsonl(ctx.path(artifact::kWeights));
  const auto& c = ctx.cfg();

  const auto bins = likelihood_histogram(lf.bank, c.report.histogram_bins);
  const auto meta = ctx.meta(Stage::Report, artifact::kSummary);
  const std::string stamp =
      "config_hash=" + meta["config_hash"].get<std::string>() + " stage_key=" + meta["stage_key"].get<std::string>();
  ctx.write(artifact::kHistogram, histogram_csv(bins, stamp));
  if (c.report.emit_svg) {
    ctx.write(artifact::kHistogramSvg, histogram_svg(bins, stamp));
  } else {
    std::error_code ec;
    fs::remove(ctx.path(artifact::kHistogramSvg), ec);
  }

  std::vector<double> weights;
  weights.reserve(wl.rows.size());
  for (const auto& r : wl.rows) weights.push_back(r.at("weight").get<double>());
  const auto& lik = lf.bank.sample_likelihood;

  ordered_json s;
  s["_meta"] = meta;
  s["n_samples"] = lf.bank.n_total;
  s["n_clusters"] = lf.bank.n_clusters();
  s["noise_count"] = lf.bank.noise_count();
  s["noise_fraction"] =
      lf.bank.n_total == 0 ? 0.0 : static_cast<double>(lf.bank.noise_count()) / static_cast<double>(lf.bank.n_total);
  const auto cm = to_json(c.cluster);
  s["cluster_method"] = cm.begin().key();
  s["cluster_params"] = cm.begin().value();
  s["noise_policy"] = to_string(c.noise_policy);
  ordered_json sizes = ordered_json::array();
  for (const auto& [id, size] : lf.bank.cluster_sizes) sizes.push_back(size);
  s["cluster_sizes"] = sizes;
  s["likelihood"] = {{"min", *std::min_element(lik.begin(), lik.end())},
                     {"max", *std::max_element(lik.begin(), lik.end())}};
  s["gfl"] = to_json(c.gfl);
  s["weight"] = {{"min", *std::min_element(weights.begin(), weights.end())},
                 {"max", *std::max_element(weights.begin(), weights.end())},
                 {"mean", std::accumulate(weights.begin(), weights.end(), 0.0) / static_cast<double>(weights.size())}};
  if (fs::exists(ctx.path(artifact::kProjectionMeta))) {
    const auto pm = nlohmann::json::parse(read_file(ctx.path(artifact::kProjectionMeta)));
    s["projection"] = {{"initial_kl", pm.value("initial_kl", 0.0)},
                       {"final_kl", pm.value("final_kl", 0.0)},
                       {"bandwidth_unconverged_rows", pm.value("bandwidth_unconverged_rows", 0)}};
  }
  s["histogram_bins"] = c.report.histogram_bins;
  (void)wmeta;
  ctx.write(artifact::kSummary, s.dump(2) + "\n");
}

inline void run_stage_in(StageContext& ctx, Stage stage) {
  try {
    switch (stage) {
      case Stage::Ingest: stage_ingest(ctx); break;
      case Stage::Project: stage_project(ctx); break;
      case Stage::Cluster: stage_cluster(ctx); break;
      case Stage::Likelihoods: stage_likelihoods(ctx); break;
      case Stage::Weights: stage_weights(ctx); break;
      case Stage::Report: stage_report(ctx); break;
    }
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e);
  } catch (const nlohmann::json::exception& e) {
    throw StageError(stage, Error(ErrorKind::MalformedHeader, e.what()));
  } catch (const fs::filesystem_error& e) {
    throw StageError(stage, Error(ErrorKind::IoFailure, e.what()));
  }
}

inline void remove_all(const std::vector<fs::path>& files) {
  for (const auto& f : files) {
    std::error_code ec;
    fs::remove(f, ec);
  }
}

// Refreshes a cached DSEQ artifact's sidecar so it carries the current
// config hash; the payload is reused untouched.
inline void refresh_meta(StageContext& ctx, Stage s, const char* meta_file) {
  auto meta = nlohmann::ordered_json::parse(read_file(ctx.path(meta_file)));
  const auto fresh = ctx.meta(s, meta.value("artifact", std::string{}).c_str());
  meta["config_hash"] = fresh["config_hash"];
  const auto bytes = meta.dump(2) + "\n";
  if (bytes != read_file(ctx.path(meta_file))) write_file_atomic(ctx.path(meta_file), bytes);
}

inline StageKeys prepare(const PipelineConfig& cfg) {
  validate(cfg);
  std::error_code ec;
  fs::create_directories(cfg.output_dir, ec);
  if (ec) throw Error(ErrorKind::IoFailure, "cannot create output directory " + cfg.output_dir.string());
  return compute_stage_keys(cfg);
}

}  // namespace detail

// Runs one stage against cached upstream artifacts in cfg.output_dir.
inline RunArtifacts run_stage(const PipelineConfig& cfg, Stage stage) {
  auto keys = detail::prepare(cfg);
  DirectoryLock lock(cfg.output_dir);
  detail::StageContext ctx(cfg, std::move(keys));
  try {
    detail::run_stage_in(ctx, stage);
  } catch (...) {
    detail::remove_all(ctx.written());
    throw;
  }
  RunArtifacts out{cfg.output_dir, ctx.written(), {}};
  if (stage == Stage::Report) out.summary = nlohmann::json::parse(read_file(ctx.path(artifact::kSummary)));
  return out;
}

// Runs every stage. Ingest and projection are reused when their cached
// stage keys match. On failure the failing stage's files are removed; earlier
// stages completed and stay usable as cache.
inline RunArtifacts run_pipeline(const PipelineConfig& cfg) {
  auto keys = detail::prepare(cfg);
  DirectoryLock lock(cfg.output_dir);
  detail::StageContext ctx(cfg, std::move(keys));
  std::size_t mark = 0;
  try {
    for (const auto s : kAllStages) {
      mark = ctx.written().size();
      if (s == Stage::Ingest && ctx.cached(s, artifact::kEmbeddings, artifact::kEmbeddingsMeta)) {
        detail::refresh_meta(ctx, s, artifact::kEmbeddingsMeta);
      } else if (s == Stage::Project && ctx.cached(s, artifact::kProjection, artifact::kProjectionMeta)) {
        detail::refresh_meta(ctx, s, artifact::kProjectionMeta);
      } else {
        detail::run_stage_in(ctx, s);
      }
    }
  } catch (...) {
    detail::remove_all({ctx.written().begin() + static_cast<std::ptrdiff_t>(mark), ctx.written().end()});
    throw;
  }
  RunArtifacts out{cfg.output_dir, ctx.written(), {}};
  out.summary = nlohmann::json::parse(read_file(ctx.path(artifact::kSummary)));
  return out;
}

}  // namespace equity
