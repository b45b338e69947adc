#pragma once

// Cluster occurrence likelihoods.
//
//   P(C_i)  = |C_i| / N               (N counts every sample, noise included)
//   L_s(i)  = |C_i| / max_k |C_k|     (1.0 for the most common cluster)

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "equity/clustering.hpp"
#include "equity/error.hpp"

namespace equity {

// How samples labelled as noise get a likelihood.
enum class NoisePolicy {
  Singleton,   // each noise sample is its own cluster of size 1
  MinCluster,  // the smallest cluster likelihood
  Unit,        // 1.0
};

inline std::string_view to_string(NoisePolicy p) {
  switch (p) {
    case NoisePolicy::Singleton: return "singleton";
    case NoisePolicy::MinCluster: return "min_cluster";
    case NoisePolicy::Unit: return "unit";
  }
  return "singleton";
}

inline NoisePolicy parse_noise_policy(std::string_view s) {
  if (s == "singleton") return NoisePolicy::Singleton;
  if (s == "min_cluster") return NoisePolicy::MinCluster;
  if (s == "unit") return NoisePolicy::Unit;
  throw Error(ErrorKind::InvalidConfig, "unknown noise policy '" + std::string(s) + "'");
}

struct LikelihoodBank {
  std::map<int, std::size_t> cluster_sizes;
  std::size_t n_total = 0;
  std::map<int, double> cluster_likelihood;
  std::vector<double> sample_likelihood;
  std::vector<int> sample_cluster;
  NoisePolicy noise_policy = NoisePolicy::Singleton;

  std::size_t n_clusters() const { return cluster_sizes.size(); }
  std::size_t noise_count() const {
    std::size_t clustered = 0;
    for (const auto& [id, size] : cluster_sizes) clustered += size;
    return n_total - clustered;
  }
};

inline std::map<int, std::size_t> cluster_sizes(const ClusterAssignment& a) {
  std::map<int, std::size_t> sizes;
  for (const int l : a.labels) {
    if (l != kNoise) ++sizes[l];
  }
  return sizes;
}

inline std::map<int, double> cluster_probabilities(const ClusterAssignment& a) {
  if (a.labels.empty()) throw Error(ErrorKind::EmptyAssignment, "assignment has no samples");
  const double n = static_cast<double>(a.labels.size());
  std::map<int, double> out;
  for (const auto& [id, size] : cluster_sizes(a)) out.emplace(id, static_cast<double>(size) / n);
  return out;
}

inline LikelihoodBank scaled_likelihoods(const ClusterAssignment& a, NoisePolicy policy = NoisePolicy::Singleton) {
  if (a.labels.empty()) throw Error(ErrorKind::EmptyAssignment, "assignment has no samples");
  LikelihoodBank bank;
  bank.cluster_sizes = cluster_sizes(a);
  if (bank.cluster_sizes.empty()) throw Error(ErrorKind::NoClusters, "every sample is noise");
  bank.n_total = a.labels.size();
  bank.noise_policy = policy;

  std::size_t largest = 0;
  for (const auto& [id, size] : bank.cluster_sizes) largest = std::max(largest, size);
  const double denom = static_cast<double>(largest);
  double smallest = 1.0;
  for (const auto& [id, size] : bank.cluster_sizes) {
    const double l = static_cast<double>(size) / denom;
    bank.cluster_likelihood.emplace(id, l);
    smallest = std::min(smallest, l);
  }
  const double noise_value = policy == NoisePolicy::Singleton    ? 1.0 / denom
                             : policy == NoisePolicy::MinCluster ? smallest
                                                                 : 1.0;
  bank.sample_likelihood.reserve(bank.n_total);
  bank.sample_cluster = a.labels;
  for (const int l : a.labels) {
    bank.sample_likelihood.push_back(l == kNoise ? noise_value : bank.cluster_likelihood.at(l));
  }
  return bank;
}

struct HistogramBin {
  double low = 0.0;
  double high = 0.0;
  std::size_t count = 0;
};

// Bins (k/B, (k+1)/B] over (0, 1]; counts clusters, not samples.
inline std::vector<HistogramBin> likelihood_histogram(const LikelihoodBank& bank, std::size_t n_bins) {
  if (n_bins < 1) throw Error(ErrorKind::InvalidConfig, "histogram needs at least one bin");
  std::vector<HistogramBin> bins(n_bins);
  const double b = static_cast<double>(n_bins);
  for (std::size_t k = 0; k < n_bins; ++k) {
    bins[k].low = static_cast<double>(k) / b;
    bins[k].high = static_cast<double>(k + 1) / b;
  }
  for (const auto& [id, l] : bank.cluster_likelihood) {
    auto idx = static_cast<std::ptrdiff_t>(std::ceil(l * b)) - 1;
    idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(n_bins) - 1);
    // ceil(l * B) can land one bin off when l * B rounds across an integer.
    while (idx > 0 && l <= bins[static_cast<std::size_t>(idx)].low) --idx;
    while (idx + 1 < static_cast<std::ptrdiff_t>(n_bins) && l > bins[static_cast<std::size_t>(idx)].high) ++idx;
    ++bins[static_cast<std::size_t>(idx)].count;
  }
  return bins;
}

}  // namespace equity
