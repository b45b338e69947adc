#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <set>

#include "equity/clustering.hpp"
#include "oracles.hpp"

using namespace equity;

namespace {

Matrix line(std::initializer_list<double> xs) {
  Matrix m(xs.size(), 1);
  std::size_t i = 0;
  for (const double v : xs) m(i++, 0) = v;
  return m;
}

Matrix uniform_cube(std::size_t n, std::uint64_t seed, double side = 10.0) {
  Matrix m(n, 3);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, side);
  for (double& v : m.data) v = u(rng);
  return m;
}

Matrix permute_rows(const Matrix& x, const std::vector<std::size_t>& perm) {
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t c = 0; c < x.cols; ++c) out(i, c) = x(perm[i], c);
  }
  return out;
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

}  // namespace

TEST(RegionQuery, Examples) {
  EXPECT_EQ(region_query(line({3.0}), 0, 0.1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(region_query(line({0, 1, 2, 10}), 1, 1.5), (std::vector<std::size_t>{0, 1, 2}));
  const auto pts = line({0, 1, 2, 10});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(region_query(pts, i, 0.5), (std::vector<std::size_t>{i}));
}

TEST(RegionQuery, BoundaryIsInclusive) {
  EXPECT_EQ(region_query(line({0.0, 1.5}), 0, 1.5).size(), 2u);
}

TEST(NeighborGrid, AgreesWithBruteForce) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t dims = 1 + t % 3;
    Matrix pts(150, dims);
    std::normal_distribution<double> g(0.0, 3.0);
    for (double& v : pts.data) v = std::round(g(rng) * 4.0) / 4.0;  // lattice values put points on cell edges
    const double eps = 0.25 + 0.25 * (t % 5);
    NeighborGrid grid(pts, eps);
    ASSERT_TRUE(grid.usable());
    for (std::size_t i = 0; i < pts.rows; ++i) ASSERT_EQ(grid.query(i), region_query(pts, i, eps));
  }
}

TEST(Dbscan, LineExample) {
  const auto a = dbscan(line({0, 1, 2, 10, 11, 12}), {1.5, 2});
  EXPECT_EQ(a.labels, (std::vector<int>{0, 0, 0, 1, 1, 1}));
  EXPECT_EQ(a.n_clusters, 2u);
  EXPECT_EQ(a.method_tag, "dbscan");
  EXPECT_EQ(a.params_echo["eps"], 1.5);
}

TEST(Dbscan, IdenticalPointsFormOneCluster) {
  Matrix pts(7, 3);
  const auto a = dbscan(pts, {0.1, 7});
  EXPECT_EQ(a.n_clusters, 1u);
  EXPECT_EQ(a.noise_count(), 0u);
}

TEST(Dbscan, MinSamplesAboveNIsAllNoise) {
  const auto pts = uniform_cube(20, 3, 1.0);
  const auto a = dbscan(pts, {100.0, 21});
  EXPECT_EQ(a.n_clusters, 0u);
  EXPECT_EQ(a.noise_count(), 20u);
}

TEST(Dbscan, BorderPointGoesToFirstCluster) {
  // 1.5 is within eps of core points 0.8 and 2.2 but has only 3 neighbours.
  const auto pts = line({0.0, 0.2, 0.4, 0.8, 1.5, 2.2, 2.6, 2.8, 3.0});
  EXPECT_EQ(region_query(pts, 4, 0.75).size(), 3u);
  const auto a = dbscan(pts, {0.75, 4});
  EXPECT_EQ(a.labels, (std::vector<int>{0, 0, 0, 0, 0, 1, 1, 1, 1}));
}

TEST(Dbscan, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2024);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng() % 200;
    const auto pts = uniform_cube(n, rng(), 10.0);
    const double eps = 0.3 + static_cast<double>(rng() % 1000) / 1000.0 * 2.5;
    const std::size_t min_samples = 1 + rng() % 8;
    const auto got = dbscan(pts, {eps, min_samples});
    const auto want = oracle::dbscan_reference(pts, eps, min_samples);
    ASSERT_EQ(oracle::canonical_labels(got.labels), oracle::canonical_labels(want)) << "instance " << t;
    ASSERT_EQ(got.labels, want) << "instance " << t;
  }
}

TEST(Dbscan, LabelsAreContiguousAndOrdered) {
  const auto pts = uniform_cube(150, 17);
  const auto a = dbscan(pts, {1.2, 4});
  int next = 0;
  for (const int l : a.labels) {
    ASSERT_GE(l, kNoise);
    ASSERT_LT(l, static_cast<int>(a.n_clusters));
    if (l == kNoise) continue;
    ASSERT_LE(l, next);  // first appearances come in order 0, 1, 2, ...
    if (l == next) ++next;
  }
  EXPECT_EQ(next, static_cast<int>(a.n_clusters));
}

TEST(Dbscan, CoreMembershipInvariantUnderPermutation) {
  // Well-separated blobs with min_samples = 1 have no border points.
  const auto blobs = oracle::gaussian_blobs(4, 30, 3, 0.3, 8.0, 3);
  std::vector<std::size_t> perm(blobs.points.rows);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(9));
  const auto a = dbscan(blobs.points, {1.0, 1});
  const auto b = dbscan(permute_rows(blobs.points, perm), {1.0, 1});
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t j = 0; j < perm.size(); ++j) {
      ASSERT_EQ(a.labels[perm[i]] == a.labels[perm[j]], b.labels[i] == b.labels[j]);
    }
  }
}

TEST(Dbscan, RaisingEpsNeverShrinksClusteredSet) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto pts = uniform_cube(120, seed);
    std::size_t prev = 0;
    for (double eps = 0.2; eps < 4.0; eps += 0.2) {
      const auto a = dbscan(pts, {eps, 5});
      const std::size_t clustered = a.labels.size() - a.noise_count();
      ASSERT_GE(clustered, prev);
      prev = clustered;
    }
  }
}

TEST(CoreDistances, Examples) {
  const auto pts = line({0, 1, 3});
  EXPECT_EQ(core_distances(pts, 1), (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(core_distances(pts, 2), (std::vector<double>{1, 1, 2}));
  const auto dup = line({0, 0, 5, 5, 9});
  const auto cd = core_distances(dup, 2);
  EXPECT_EQ(cd[0], 0.0);
  EXPECT_EQ(cd[1], 0.0);
  EXPECT_EQ(cd[2], 0.0);
  EXPECT_EQ(cd[3], 0.0);
  EXPECT_EQ(cd[4], 4.0);
  EXPECT_EQ(kind_of([&] { core_distances(pts, 4); }), ErrorKind::KTooLarge);
}

TEST(Mst, WeightInvariantUnderPermutation) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto pts = uniform_cube(80, 300 + seed);
    std::vector<std::size_t> perm(pts.rows);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(seed));
    const auto q = permute_rows(pts, perm);
    double wa = 0.0, wb = 0.0;
    for (const auto& e : mutual_reachability_mst(pts, core_distances(pts, 1))) wa += e.weight;
    for (const auto& e : mutual_reachability_mst(q, core_distances(q, 1))) wb += e.weight;
    EXPECT_NEAR(wa, wb, 1e-12 * wa);
  }
}

TEST(Mst, SpansAllPoints) {
  const auto pts = uniform_cube(60, 8);
  const auto mst = mutual_reachability_mst(pts, core_distances(pts, 3));
  ASSERT_EQ(mst.size(), 59u);
  std::vector<std::size_t> parent(60);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t v) {
    while (parent[v] != v) v = parent[v];
    return v;
  };
  for (const auto& e : mst) {
    const auto a = find(e.a), b = find(e.b);
    ASSERT_NE(a, b);
    parent[a] = b;
  }
}

TEST(Hdbscan, TwoSeparatedPairs) {
  const auto r = hdbscan(line({0.0, 1.0, 100.0, 101.0}), {2, 1, "excess_of_mass"});
  EXPECT_EQ(r.assignment.n_clusters, 2u);
  EXPECT_EQ(r.assignment.noise_count(), 0u);
  EXPECT_EQ(r.assignment.labels, (std::vector<int>{0, 0, 1, 1}));
  EXPECT_FALSE(r.tree.selected[0]);
}

TEST(Hdbscan, MinClusterSizeNIsAllNoise) {
  const auto pts = uniform_cube(40, 4);
  const auto r = hdbscan(pts, {40, 5, "excess_of_mass"});
  EXPECT_EQ(r.assignment.n_clusters, 0u);
  EXPECT_EQ(r.assignment.noise_count(), 40u);
}

TEST(Hdbscan, RecoversThreeBlobs) {
  std::size_t good = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto blobs = oracle::gaussian_blobs(3, 100, 3, 1.0, 10.0, seed);
    const auto r = hdbscan(blobs.points, {25, 5, "excess_of_mass"});
    const double ari = oracle::adjusted_rand_index(r.assignment.labels, blobs.labels);
    good += ari >= 0.95 && r.assignment.n_clusters == 3;
  }
  EXPECT_GE(good, 9u);
}

TEST(Hdbscan, SelectedClustersDisjointAndLargeEnough) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto pts = uniform_cube(150, 50 + seed);
    const std::size_t mcs = 5 + seed;
    const auto r = hdbscan(pts, {mcs, 4, "excess_of_mass"});
    std::vector<std::size_t> sizes(r.assignment.n_clusters, 0);
    for (const int l : r.assignment.labels) {
      if (l != kNoise) ++sizes.at(static_cast<std::size_t>(l));
    }
    for (const auto s : sizes) EXPECT_GE(s, mcs);

    // No selected cluster is an ancestor of another.
    std::vector<std::size_t> parent(r.tree.n_clusters(), 0);
    for (const auto& e : r.tree.entries) {
      if (e.child_is_cluster) parent[e.child] = e.parent;
    }
    for (std::size_t c = 1; c < r.tree.n_clusters(); ++c) {
      if (!r.tree.selected[c]) continue;
      for (std::size_t a = parent[c]; a != 0; a = parent[a]) EXPECT_FALSE(r.tree.selected[a]);
    }
  }
}

TEST(Hdbscan, CondensedTreeAccountsForEveryPointOnce) {
  const auto blobs = oracle::gaussian_blobs(3, 40, 3, 1.0, 10.0, 6);
  const auto r = hdbscan(blobs.points, {10, 5, "excess_of_mass"});
  std::multiset<std::size_t> points;
  for (const auto& e : r.tree.entries) {
    if (!e.child_is_cluster) points.insert(e.child);
    EXPECT_GE(e.lambda, r.tree.birth_lambda[e.parent]);
    EXPECT_TRUE(std::isfinite(e.lambda));
  }
  EXPECT_EQ(points.size(), blobs.points.rows);
  EXPECT_EQ(std::set<std::size_t>(points.begin(), points.end()).size(), blobs.points.rows);
  const auto j = r.tree.to_json();
  EXPECT_EQ(j["clusters"].size(), r.tree.n_clusters());
}

TEST(Hdbscan, DuplicatePointsStayFinite) {
  Matrix pts(30, 3);
  for (std::size_t i = 15; i < 30; ++i) pts(i, 0) = 50.0;
  const auto r = hdbscan(pts, {5, 3, "excess_of_mass"});
  EXPECT_EQ(r.assignment.n_clusters, 2u);
  for (const double s : r.tree.stability) EXPECT_TRUE(std::isfinite(s));
}

TEST(Hdbscan, Errors) {
  const auto pts = uniform_cube(4, 1);
  EXPECT_EQ(kind_of([&] { hdbscan(pts, {5, 1, "excess_of_mass"}); }), ErrorKind::InsufficientPoints);
  EXPECT_EQ(kind_of([&] { hdbscan(pts, {2, 1, "leaf"}); }), ErrorKind::InvalidConfig);
  EXPECT_EQ(kind_of([&] { hdbscan(pts, {2, 5, "excess_of_mass"}); }), ErrorKind::KTooLarge);
  EXPECT_EQ(kind_of([&] { dbscan(pts, {0.0, 2}); }), ErrorKind::InvalidConfig);
}
