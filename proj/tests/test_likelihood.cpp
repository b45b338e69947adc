#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "equity/likelihood.hpp"

using namespace equity;

namespace {

ClusterAssignment from_sizes(const std::vector<std::size_t>& sizes, std::size_t noise = 0) {
  ClusterAssignment a;
  for (std::size_t c = 0; c < sizes.size(); ++c) a.labels.insert(a.labels.end(), sizes[c], static_cast<int>(c));
  a.labels.insert(a.labels.end(), noise, kNoise);
  a.n_clusters = sizes.size();
  return a;
}

ErrorKind kind_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no equity::Error thrown";
  return ErrorKind::Validation;
}

// 4-decimal truncation of num/den in exact integer arithmetic.
long truncated_4dp(long num, long den) { return num * 10000 / den; }

}  // namespace

TEST(Probabilities, SingleCluster) {
  const auto p = cluster_probabilities(from_sizes({12}));
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p.at(0), 1.0);
}

TEST(Probabilities, KittiSizes) {
  // 416 and 10 inside a 3712-sample set; the remaining 3286 fill other clusters.
  auto a = from_sizes({416, 10, 3286});
  const auto p = cluster_probabilities(a);
  EXPECT_NEAR(p.at(0), 416.0 / 3712.0, 1e-15);
  EXPECT_NEAR(p.at(0), 0.1120689655, 1e-10);
  EXPECT_NEAR(p.at(1), 0.0026939655, 1e-10);
}

TEST(Probabilities, NoiseCountsTowardN) {
  const auto p = cluster_probabilities(from_sizes({3, 1}, 4));
  EXPECT_EQ(p.at(0), 3.0 / 8.0);
  EXPECT_EQ(p.at(1), 1.0 / 8.0);
  const auto all_noise = cluster_probabilities(from_sizes({}, 5));
  EXPECT_TRUE(all_noise.empty());
  EXPECT_EQ(kind_of([] { cluster_probabilities(ClusterAssignment{}); }), ErrorKind::EmptyAssignment);
}

TEST(Scaled, PublishedRatios) {
  const auto big = scaled_likelihoods(from_sizes({23385, 116}));
  EXPECT_EQ(big.cluster_likelihood.at(0), 1.0);
  EXPECT_EQ(big.cluster_likelihood.at(1), 116.0 / 23385.0);
  EXPECT_EQ(truncated_4dp(116, 23385), 49);  // reported as 0.0049
  EXPECT_NEAR(big.cluster_likelihood.at(1), 0.0049604447, 1e-10);

  const auto kitti = scaled_likelihoods(from_sizes({416, 10}));
  EXPECT_EQ(kitti.cluster_likelihood.at(1), 10.0 / 416.0);
  EXPECT_EQ(truncated_4dp(10, 416), 240);  // reported as 0.0240
  EXPECT_NEAR(kitti.cluster_likelihood.at(1), 0.0240384615, 1e-10);
}

TEST(Scaled, SingleClusterIsUnit) {
  const auto b = scaled_likelihoods(from_sizes({9}));
  for (const double l : b.sample_likelihood) EXPECT_EQ(l, 1.0);
}

TEST(Scaled, NoisePolicies) {
  const auto a = from_sizes({8, 2}, 3);
  const auto s = scaled_likelihoods(a, NoisePolicy::Singleton);
  const auto m = scaled_likelihoods(a, NoisePolicy::MinCluster);
  const auto u = scaled_likelihoods(a, NoisePolicy::Unit);
  EXPECT_EQ(s.sample_likelihood.back(), 1.0 / 8.0);
  EXPECT_EQ(m.sample_likelihood.back(), 2.0 / 8.0);
  EXPECT_EQ(u.sample_likelihood.back(), 1.0);
  EXPECT_EQ(s.noise_count(), 3u);
  EXPECT_EQ(s.n_total, 13u);
  std::size_t sum = 0;
  for (const auto& [id, size] : s.cluster_sizes) sum += size;
  EXPECT_EQ(sum + s.noise_count(), s.n_total);
  EXPECT_EQ(kind_of([] { scaled_likelihoods(from_sizes({}, 4)); }), ErrorKind::NoClusters);
  EXPECT_EQ(parse_noise_policy("min_cluster"), NoisePolicy::MinCluster);
  EXPECT_EQ(kind_of([] { parse_noise_policy("drop"); }), ErrorKind::InvalidConfig);
}

TEST(Scaled, InvariantsOnRandomAssignments) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::size_t> sizes(1 + rng() % 12);
    for (auto& s : sizes) s = 1 + rng() % 500;
    const std::size_t noise = rng() % 50;
    auto a = from_sizes(sizes, noise);
    const auto bank = scaled_likelihoods(a);
    const auto prob = cluster_probabilities(a);

    double max_l = 0.0;
    for (const auto& [id, l] : bank.cluster_likelihood) max_l = std::max(max_l, l);
    EXPECT_EQ(max_l, 1.0);
    for (const double l : bank.sample_likelihood) {
      EXPECT_GT(l, 0.0);
      EXPECT_LE(l, 1.0);
    }
    const auto argmax = std::max_element(prob.begin(), prob.end(),
                                         [](const auto& x, const auto& y) { return x.second < y.second; })->first;
    EXPECT_EQ(bank.cluster_likelihood.at(argmax), 1.0);
    for (const auto& [id, l] : bank.cluster_likelihood) EXPECT_NEAR(l, prob.at(id) / prob.at(argmax), 1e-12);

    // Replicating every cluster k times leaves the ratios unchanged.
    const std::size_t k = 2 + rng() % 5;
    auto scaled = sizes;
    for (auto& s : scaled) s *= k;
    const auto bank_k = scaled_likelihoods(from_sizes(scaled, noise));
    for (const auto& [id, l] : bank.cluster_likelihood) EXPECT_NEAR(bank_k.cluster_likelihood.at(id), l, 1e-15);

    // Relabelling permutes keys but not the multiset of sample values.
    std::vector<int> relabel(sizes.size());
    std::iota(relabel.begin(), relabel.end(), 0);
    std::shuffle(relabel.begin(), relabel.end(), rng);
    auto b = a;
    for (int& l : b.labels) {
      if (l != kNoise) l = relabel[static_cast<std::size_t>(l)];
    }
    auto x = bank.sample_likelihood, y = scaled_likelihoods(b).sample_likelihood;
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    EXPECT_EQ(x, y);
  }
}

TEST(Histogram, HandBinned) {
  const auto b = scaled_likelihoods(from_sizes({4, 2, 2, 1}));
  const auto h = likelihood_histogram(b, 4);
  ASSERT_EQ(h.size(), 4u);
  EXPECT_EQ(h[0].count, 1u);
  EXPECT_EQ(h[1].count, 2u);
  EXPECT_EQ(h[2].count, 0u);
  EXPECT_EQ(h[3].count, 1u);
  EXPECT_EQ(h[0].low, 0.0);
  EXPECT_EQ(h[3].high, 1.0);
}

TEST(Histogram, TotalsAndTopBin) {
  const auto one = scaled_likelihoods(from_sizes({5}));
  for (const std::size_t bins : {1u, 7u, 50u}) {
    const auto h = likelihood_histogram(one, bins);
    EXPECT_EQ(h.back().count, 1u);
  }
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    std::vector<std::size_t> sizes(1 + rng() % 30);
    for (auto& s : sizes) s = 1 + rng() % 100;
    const auto b = scaled_likelihoods(from_sizes(sizes));
    for (const std::size_t bins : {1u, 3u, 10u, 50u, 100u}) {
      const auto h = likelihood_histogram(b, bins);
      std::size_t total = 0;
      for (std::size_t k = 0; k < h.size(); ++k) {
        total += h[k].count;
        if (k > 0) {
          EXPECT_EQ(h[k].low, h[k - 1].high);
        }
      }
      EXPECT_EQ(total, sizes.size());
      // Each likelihood lies in its bin (low, high].
      for (const auto& [id, l] : b.cluster_likelihood) {
        std::size_t hits = 0;
        for (const auto& bin : h) hits += l > bin.low && l <= bin.high;
        EXPECT_EQ(hits, 1u);
      }
    }
  }
  EXPECT_EQ(kind_of([&] { likelihood_histogram(one, 0); }), ErrorKind::InvalidConfig);
}
