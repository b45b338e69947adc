#pragma once

// Density clustering in the projected space: DBSCAN and HDBSCAN (excess of
// mass selection). Both return labels renumbered by ascending smallest member
// index, with -1 for noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "equity/error.hpp"
#include "equity/matrix.hpp"

namespace equity {

inline constexpr int kNoise = -1;

struct DbscanParams {
  double eps = 0.5;
  std::size_t min_samples = 5;
};

struct HdbscanParams {
  std::size_t min_cluster_size = 5;
  std::size_t min_samples = 5;
  std::string selection = "excess_of_mass";
};

struct ClusterAssignment {
  std::vector<int> labels;
  std::size_t n_clusters = 0;
  std::string method_tag;
  nlohmann::ordered_json params_echo = nlohmann::ordered_json::object();

  std::size_t noise_count() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), kNoise));
  }
};

inline void validate(const DbscanParams& p) {
  if (!(p.eps > 0.0) || !std::isfinite(p.eps)) throw Error(ErrorKind::InvalidConfig, "dbscan eps must be > 0");
  if (p.min_samples < 1) throw Error(ErrorKind::InvalidConfig, "dbscan min_samples must be >= 1");
}

inline void validate(const HdbscanParams& p) {
  if (p.min_cluster_size < 2) throw Error(ErrorKind::InvalidConfig, "hdbscan min_cluster_size must be >= 2");
  if (p.min_samples < 1) throw Error(ErrorKind::InvalidConfig, "hdbscan min_samples must be >= 1");
  if (p.selection != "excess_of_mass") {
    throw Error(ErrorKind::InvalidConfig, "hdbscan selection '" + p.selection + "' unsupported");
  }
}

inline nlohmann::ordered_json to_json(const DbscanParams& p) {
  return {{"eps", p.eps}, {"min_samples", p.min_samples}};
}

inline nlohmann::ordered_json to_json(const HdbscanParams& p) {
  return {{"min_cluster_size", p.min_cluster_size}, {"min_samples", p.min_samples}, {"selection", p.selection}};
}

// Relabels clusters 0..k-1 by ascending smallest member index; noise kept.
inline std::size_t renumber_by_first_member(std::vector<int>& labels) {
  std::map<int, int> remap;
  int next = 0;
  for (const int l : labels) {
    if (l != kNoise && !remap.contains(l)) remap.emplace(l, next++);
  }
  for (int& l : labels) {
    if (l != kNoise) l = remap.at(l);
  }
  return static_cast<std::size_t>(next);
}

// All j with |x_i - x_j| <= eps, including i, ascending.
inline std::vector<std::size_t> region_query(const Matrix& points, std::size_t i, double eps) {
  std::vector<std::size_t> out;
  const double eps2 = eps * eps;
  for (std::size_t j = 0; j < points.rows; ++j) {
    if (squared_distance(points.row(i), points.row(j)) <= eps2) out.push_back(j);
  }
  return out;
}

// Uniform grid over up to 3 dimensions. Returns exactly the same index sets
// as region_query, in the same order.
class NeighborGrid {
 public:
  static constexpr std::size_t kMaxDims = 3;

  NeighborGrid(const Matrix& points, double eps)
      : points_(points), eps_(eps), cell_(eps * (1.0 + 1e-9)), dims_(points.cols) {
    usable_ = dims_ >= 1 && dims_ <= kMaxDims;
    if (!usable_) return;
    keys_.resize(points.rows);
    for (std::size_t i = 0; i < points.rows; ++i) {
      Key key{};
      for (std::size_t c = 0; c < dims_; ++c) {
        const double f = std::floor(points(i, c) / cell_);
        if (!(std::abs(f) < 1e15)) {
          usable_ = false;
          return;
        }
        key[c] = static_cast<std::int64_t>(f);
      }
      keys_[i] = key;
      cells_[key].push_back(i);
    }
  }

  bool usable() const { return usable_; }

  std::vector<std::size_t> query(std::size_t i) const {
    if (!usable_) return region_query(points_, i, eps_);
    std::vector<std::size_t> out;
    const double eps2 = eps_ * eps_;
    const Key& base = keys_[i];
    std::array<std::int64_t, kMaxDims> offset{};
    const std::size_t combos = dims_ == 1 ? 3 : dims_ == 2 ? 9 : 27;
    for (std::size_t code = 0; code < combos; ++code) {
      std::size_t rem = code;
      Key key = base;
      for (std::size_t c = 0; c < dims_; ++c) {
        offset[c] = static_cast<std::int64_t>(rem % 3) - 1;
        rem /= 3;
        key[c] += offset[c];
      }
      const auto it = cells_.find(key);
      if (it == cells_.end()) continue;
      for (const std::size_t j : it->second) {
        if (squared_distance(points_.row(i), points_.row(j)) <= eps2) out.push_back(j);
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  using Key = std::array<std::int64_t, kMaxDims>;

  const Matrix& points_;
  double eps_;
  double cell_;
  std::size_t dims_;
  bool usable_ = false;
  std::vector<Key> keys_;
  std::map<Key, std::vector<std::size_t>> cells_;
};

// Core points have >= min_samples neighbours (self included). Clusters are
// expanded in ascending index order; a border point joins the first cluster
// that reaches it.
inline ClusterAssignment dbscan(const Matrix& points, const DbscanParams& p) {
  validate(p);
  constexpr int kUnvisited = -2;
  const std::size_t n = points.rows;
  NeighborGrid grid(points, p.eps);
  std::vector<int> labels(n, kUnvisited);
  int cluster = 0;
  std::vector<std::size_t> queue;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != kUnvisited) continue;
    auto seeds = grid.query(i);
    if (seeds.size() < p.min_samples) {
      labels[i] = kNoise;
      continue;
    }
    labels[i] = cluster;
    queue.assign(seeds.begin(), seeds.end());
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const std::size_t j = queue[head];
      if (labels[j] == kNoise) labels[j] = cluster;
      if (labels[j] != kUnvisited) continue;
      labels[j] = cluster;
      const auto more = grid.query(j);
      if (more.size() >= p.min_samples) queue.insert(queue.end(), more.begin(), more.end());
    }
    ++cluster;
  }
  ClusterAssignment out;
  out.labels = std::move(labels);
  out.n_clusters = renumber_by_first_member(out.labels);
  out.method_tag = "dbscan";
  out.params_echo = to_json(p);
  return out;
}

// Distance to the k-th nearest neighbour, the point itself being the 1st.
inline std::vector<double> core_distances(const Matrix& points, std::size_t k) {
  const std::size_t n = points.rows;
  if (k < 1 || k > n) {
    throw Error(ErrorKind::KTooLarge, "core distance k=" + std::to_string(k) + " with n=" + std::to_string(n));
  }
  std::vector<double> out(n);
  parallel_for(n, [&](std::size_t i) {
    std::vector<double> d(n);
    for (std::size_t j = 0; j < n; ++j) d[j] = squared_distance(points.row(i), points.row(j));
    d[i] = 0.0;
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k - 1), d.end());
    out[i] = std::sqrt(d[k - 1]);
  });
  return out;
}

struct MstEdge {
  std::size_t a = 0;
  std::size_t b = 0;
  double weight = 0.0;
};

inline double mutual_reachability(const Matrix& points, const std::vector<double>& core, std::size_t a,
                                  std::size_t b) {
  const double d = std::sqrt(squared_distance(points.row(a), points.row(b)));
  return std::max({core[a], core[b], d});
}

// Prim's algorithm on the complete mutual-reachability graph, O(N^2).
inline std::vector<MstEdge> mutual_reachability_mst(const Matrix& points, const std::vector<double>& core) {
  const std::size_t n = points.rows;
  std::vector<MstEdge> edges;
  if (n < 2) return edges;
  edges.reserve(n - 1);
  std::vector<bool> in_tree(n, false);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> from(n, 0);
  std::size_t current = 0;
  in_tree[0] = true;
  for (std::size_t step = 1; step < n; ++step) {
    std::size_t next = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (in_tree[j]) continue;
      const double w = mutual_reachability(points, core, current, j);
      if (w < best[j]) {
        best[j] = w;
        from[j] = current;
      }
      if (next == n || best[j] < best[next]) next = j;
    }
    in_tree[next] = true;
    edges.push_back({from[next], next, best[next]});
    current = next;
  }
  return edges;
}

struct CondensedEntry {
  std::size_t parent = 0;   // cluster id
  std::size_t child = 0;    // cluster id if child_is_cluster, else point index
  bool child_is_cluster = false;
  double lambda = 0.0;
  std::size_t child_size = 1;
};

// Condensed cluster hierarchy. Cluster 0 is the root; ids grow with depth.
struct CondensedTree {
  std::vector<CondensedEntry> entries;
  std::vector<double> birth_lambda;
  std::vector<double> stability;  // raw stability per cluster
  std::vector<bool> selected;

  std::size_t n_clusters() const { return birth_lambda.size(); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json clusters = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < n_clusters(); ++c) {
      clusters.push_back({{"id", c},
                          {"birth_lambda", birth_lambda[c]},
                          {"stability", stability[c]},
                          {"selected", static_cast<bool>(selected[c])}});
    }
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
      rows.push_back({{"parent", e.parent},
                      {"child", e.child},
                      {"child_is_cluster", e.child_is_cluster},
                      {"lambda", e.lambda},
                      {"child_size", e.child_size}});
    }
    return {{"clusters", clusters}, {"entries", rows}};
  }
};

struct HdbscanResult {
  ClusterAssignment assignment;
  CondensedTree tree;
};

namespace detail {

struct Dendrogram {
  // Node ids: 0..n-1 are points, n.. are merges in ascending weight order.
  std::vector<std::size_t> left, right;
  std::vector<double> distance;
  std::vector<std::size_t> size;
  std::size_t n_points = 0;

  std::size_t root() const { return n_points + left.size() - 1; }
  bool is_leaf(std::size_t node) const { return node < n_points; }
  std::size_t node_size(std::size_t node) const { return is_leaf(node) ? 1 : size[node - n_points]; }
};

inline Dendrogram single_linkage(std::vector<MstEdge> edges, std::size_t n) {
  std::stable_sort(edges.begin(), edges.end(), [](const MstEdge& x, const MstEdge& y) { return x.weight < y.weight; });
  Dendrogram t;
  t.n_points = n;
  std::vector<std::size_t> parent(2 * n - 1);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  for (const auto& e : edges) {
    const std::size_t ra = find(e.a);
    const std::size_t rb = find(e.b);
    const std::size_t node = n + t.left.size();
    t.left.push_back(ra);
    t.right.push_back(rb);
    t.distance.push_back(e.weight);
    t.size.push_back(t.node_size(ra) + t.node_size(rb));
    parent[ra] = node;
    parent[rb] = node;
  }
  return t;
}

inline void collect_leaves(const Dendrogram& t, std::size_t node, std::vector<std::size_t>& out) {
  std::vector<std::size_t> stack{node};
  while (!stack.empty()) {
    const std::size_t cur = stack.back();
    stack.pop_back();
    if (t.is_leaf(cur)) {
      out.push_back(cur);
    } else {
      stack.push_back(t.right[cur - t.n_points]);
      stack.push_back(t.left[cur - t.n_points]);
    }
  }
}

}  // namespace detail

// Builds the condensed tree and runs excess-of-mass selection. The root is
// never selectable. A cluster with child clusters is kept only when its own
// stability strictly exceeds the summed stability of its selected
// descendants; leaf clusters are always candidates.
inline CondensedTree condense_and_select(const std::vector<MstEdge>& mst, std::size_t n,
                                         std::size_t min_cluster_size) {
  const auto dendro = detail::single_linkage(mst, n);

  double min_positive = std::numeric_limits<double>::infinity();
  for (const double d : dendro.distance) {
    if (d > 0.0) min_positive = std::min(min_positive, d);
  }
  // Zero merge distances (duplicate points) map to a finite lambda beyond
  // every finite one, so stabilities stay finite.
  const double zero_lambda = std::isinf(min_positive) ? 1.0 : 2.0 / min_positive;
  auto lambda_of = [&](double d) { return d > 0.0 ? 1.0 / d : zero_lambda; };

  CondensedTree tree;
  tree.birth_lambda.push_back(0.0);
  const std::size_t total_nodes = n + dendro.left.size();
  std::vector<std::size_t> relabel(total_nodes, 0);
  std::vector<bool> ignore(total_nodes, false);
  std::vector<std::size_t> order{dendro.root()};
  std::vector<std::size_t> leaves;
  for (std::size_t head = 0; head < order.size(); ++head) {
    const std::size_t node = order[head];
    if (dendro.is_leaf(node)) continue;
    const std::size_t k = node - n;
    order.push_back(dendro.left[k]);
    order.push_back(dendro.right[k]);
    if (ignore[node]) continue;

    const std::size_t cluster = relabel[node];
    const std::size_t left = dendro.left[k];
    const std::size_t right = dendro.right[k];
    const double lambda = lambda_of(dendro.distance[k]);
    const std::size_t left_size = dendro.node_size(left);
    const std::size_t right_size = dendro.node_size(right);
    const bool left_big = left_size >= min_cluster_size;
    const bool right_big = right_size >= min_cluster_size;

    auto spill = [&](std::size_t child) {
      leaves.clear();
      detail::collect_leaves(dendro, child, leaves);
      std::sort(leaves.begin(), leaves.end());
      for (const std::size_t point : leaves) tree.entries.push_back({cluster, point, false, lambda, 1});
      std::vector<std::size_t> stack{child};
      while (!stack.empty()) {
        const std::size_t cur = stack.back();
        stack.pop_back();
        ignore[cur] = true;
        if (!dendro.is_leaf(cur)) {
          stack.push_back(dendro.left[cur - n]);
          stack.push_back(dendro.right[cur - n]);
        }
      }
    };
    auto split_off = [&](std::size_t child, std::size_t size) {
      const std::size_t id = tree.birth_lambda.size();
      tree.birth_lambda.push_back(lambda);
      relabel[child] = id;
      tree.entries.push_back({cluster, id, true, lambda, size});
    };

    if (left_big && right_big) {
      split_off(left, left_size);
      split_off(right, right_size);
    } else if (!left_big && !right_big) {
      spill(left);
      spill(right);
    } else if (!left_big) {
      spill(left);
      relabel[right] = cluster;
    } else {
      spill(right);
      relabel[left] = cluster;
    }
  }

  const std::size_t n_clusters = tree.birth_lambda.size();
  tree.stability.assign(n_clusters, 0.0);
  std::vector<std::vector<std::size_t>> children(n_clusters);
  for (const auto& e : tree.entries) {
    tree.stability[e.parent] += (e.lambda - tree.birth_lambda[e.parent]) * static_cast<double>(e.child_size);
    if (e.child_is_cluster) children[e.parent].push_back(e.child);
  }

  tree.selected.assign(n_clusters, false);
  std::vector<double> subtree(tree.stability);
  for (std::size_t c = n_clusters; c-- > 1;) {
    if (children[c].empty()) {
      tree.selected[c] = true;
      continue;
    }
    double child_sum = 0.0;
    for (const std::size_t ch : children[c]) child_sum += subtree[ch];
    if (tree.stability[c] > child_sum) {
      tree.selected[c] = true;
      std::vector<std::size_t> stack(children[c].begin(), children[c].end());
      while (!stack.empty()) {
        const std::size_t cur = stack.back();
        stack.pop_back();
        tree.selected[cur] = false;
        stack.insert(stack.end(), children[cur].begin(), children[cur].end());
      }
    } else {
      subtree[c] = child_sum;
    }
  }
  return tree;
}

inline HdbscanResult hdbscan(const Matrix& points, const HdbscanParams& p) {
  validate(p);
  const std::size_t n = points.rows;
  if (n < p.min_cluster_size || n < 2) {
    throw Error(ErrorKind::InsufficientPoints,
                "hdbscan needs n >= min_cluster_size (n=" + std::to_string(n) + ")");
  }
  if (p.min_samples > n) throw Error(ErrorKind::KTooLarge, "hdbscan min_samples exceeds n");

  const auto core = core_distances(points, p.min_samples);
  const auto mst = mutual_reachability_mst(points, core);
  HdbscanResult out;
  out.tree = condense_and_select(mst, n, p.min_cluster_size);

  std::vector<std::vector<const CondensedEntry*>> by_parent(out.tree.n_clusters());
  for (const auto& e : out.tree.entries) by_parent[e.parent].push_back(&e);

  std::vector<int> labels(n, kNoise);
  for (std::size_t c = 1; c < out.tree.n_clusters(); ++c) {
    if (!out.tree.selected[c]) continue;
    std::vector<std::size_t> stack{c};
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      for (const auto* e : by_parent[cur]) {
        if (e->child_is_cluster) {
          stack.push_back(e->child);
        } else {
          labels[e->child] = static_cast<int>(c);
        }
      }
    }
  }
  out.assignment.labels = std::move(labels);
  out.assignment.n_clusters = renumber_by_first_member(out.assignment.labels);
  out.assignment.method_tag = "hdbscan";
  out.assignment.params_echo = to_json(p);
  return out;
}

}  // namespace equity
