#pragma once

// PCA-initialised exact t-SNE.
//
// All O(N^2) passes are row-parallel: every row writes only its own slot and
// cross-row reductions run afterwards in ascending index order, so results
// are bit-identical for any worker count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "equity/embedding_io.hpp"
#include "equity/error.hpp"
#include "equity/matrix.hpp"

namespace equity {

struct PcaResult {
  Matrix coords;                            // N x k
  Matrix components;                        // k x D, orthonormal rows
  std::vector<double> explained_variance;   // descending, 1/N convention
};

// Projects mean-centred rows onto the top-k principal directions. Each
// direction is signed so that its largest-magnitude loading is positive.
// Identical rows give all-zero coordinates with zero variance.
inline PcaResult pca_project(const Matrix& x, std::size_t k) {
  const std::size_t n = x.rows;
  const std::size_t d = x.cols;
  if (n < 2) throw Error(ErrorKind::InvalidConfig, "PCA needs at least 2 samples");
  if (k < 1 || k > std::min(n, d)) {
    throw Error(ErrorKind::InvalidConfig, "PCA rank k=" + std::to_string(k) + " outside [1, min(n, d)]");
  }

  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMajor> raw(x.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const Eigen::RowVectorXd mean = raw.colwise().mean();
  const Eigen::MatrixXd centered = raw.rowwise() - mean;
  const double inv_n = 1.0 / static_cast<double>(n);

  Eigen::MatrixXd directions(d, k);
  std::vector<double> variance(k);
  if (d <= n) {
    const Eigen::MatrixXd cov = (centered.transpose() * centered) * inv_n;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    for (std::size_t c = 0; c < k; ++c) {
      const auto src = static_cast<Eigen::Index>(d - 1 - c);
      variance[c] = std::max(0.0, eig.eigenvalues()(src));
      directions.col(static_cast<Eigen::Index>(c)) = eig.eigenvectors().col(src);
    }
  } else {
    // Wide data: diagonalise the N x N Gram matrix instead.
    const Eigen::MatrixXd gram = (centered * centered.transpose()) * inv_n;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    const double floor = 1e-12 * std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
    for (std::size_t c = 0; c < k; ++c) {
      const auto src = static_cast<Eigen::Index>(n - 1 - c);
      const double lambda = eig.eigenvalues()(src);
      auto col = directions.col(static_cast<Eigen::Index>(c));
      if (lambda > floor) {
        variance[c] = lambda;
        col = centered.transpose() * eig.eigenvectors().col(src);
        col.normalize();
      } else {
        variance[c] = 0.0;
        col.setZero();
      }
    }
  }

  for (Eigen::Index c = 0; c < directions.cols(); ++c) {
    auto col = directions.col(c);
    Eigen::Index arg = 0;
    for (Eigen::Index r = 1; r < col.size(); ++r) {
      if (std::abs(col(r)) > std::abs(col(arg))) arg = r;
    }
    if (col(arg) < 0.0) col = -col;
  }

  const Eigen::MatrixXd proj = centered * directions;
  PcaResult out;
  out.coords = Matrix(n, k);
  out.components = Matrix(k, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      out.coords(i, c) = proj(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t j = 0; j < d; ++j) {
      out.components(c, j) = directions(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c));
    }
  }
  out.explained_variance = std::move(variance);
  return out;
}

enum class BandwidthStatus { Converged, Unconverged, AllZeroDistances, Unachievable };

struct BandwidthResult {
  double beta = 0.0;                 // precision of the Gaussian kernel
  double entropy_bits = 0.0;         // log2 of the achieved perplexity
  std::vector<double> probabilities; // p_{j|i}, aligned with the input distances
  BandwidthStatus status = BandwidthStatus::Converged;
  std::size_t iterations = 0;
};

// Bisection on beta so that p_{j|i} ~ exp(-beta * d_ij^2) has the requested
// perplexity. Distances are shifted by their minimum before exponentiating.
inline BandwidthResult calibrate_bandwidth(std::span<const double> sq_dists, double perplexity,
                                           double tol = 1e-5, std::size_t max_iters = 50) {
  const std::size_t m = sq_dists.size();
  if (m == 0) throw Error(ErrorKind::Validation, "bandwidth calibration needs at least one neighbour");
  if (!(perplexity > 0.0)) throw Error(ErrorKind::InvalidConfig, "perplexity must be positive");

  BandwidthResult out;
  out.probabilities.assign(m, 1.0 / static_cast<double>(m));
  const double uniform_entropy = std::log2(static_cast<double>(m));

  const double dmin = *std::min_element(sq_dists.begin(), sq_dists.end());
  const double dmax = *std::max_element(sq_dists.begin(), sq_dists.end());
  if (dmax <= 0.0) {
    out.status = BandwidthStatus::AllZeroDistances;
    out.entropy_bits = uniform_entropy;
    return out;
  }
  if (perplexity > static_cast<double>(m)) {
    out.status = BandwidthStatus::Unachievable;
    out.entropy_bits = uniform_entropy;
    return out;
  }

  // Sums run over the sorted shifts so the result depends only on the multiset
  // of distances: duplicate points get bit-identical rows.
  std::vector<double> shifted(m);
  for (std::size_t j = 0; j < m; ++j) shifted[j] = sq_dists[j] - dmin;
  std::vector<double> sorted = shifted;
  std::sort(sorted.begin(), sorted.end());

  const double target = std::log2(perplexity);
  auto kernel_sum = [&](double beta) {
    double sum = 0.0;
    for (const double v : sorted) sum += std::exp(-beta * v);
    return sum;
  };
  auto entropy_at = [&](double beta) {
    double sum = 0.0;
    double weighted = 0.0;
    for (const double v : sorted) {
      const double w = std::exp(-beta * v);
      sum += w;
      weighted += w * v;
    }
    return (std::log(sum) + beta * weighted / sum) / std::numbers::ln2;
  };

  double mean_shift = 0.0;
  for (const double v : sorted) mean_shift += v;
  mean_shift /= static_cast<double>(m);

  double beta = mean_shift > 0.0 ? 1.0 / mean_shift : 1.0;
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  double best_beta = beta;
  double best_gap = std::numeric_limits<double>::infinity();
  out.status = BandwidthStatus::Unconverged;
  for (std::size_t it = 0; it < max_iters; ++it) {
    const double h = entropy_at(beta);
    const double gap = std::abs(h - target);
    out.iterations = it + 1;
    if (gap < best_gap) {
      best_gap = gap;
      best_beta = beta;
    }
    if (gap < tol) {
      out.status = BandwidthStatus::Converged;
      break;
    }
    if (h > target) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
    } else {
      hi = beta;
      beta = 0.5 * (beta + lo);
    }
  }

  out.beta = best_beta;
  out.entropy_bits = entropy_at(best_beta);
  const double sum = kernel_sum(best_beta);
  for (std::size_t j = 0; j < m; ++j) out.probabilities[j] = std::exp(-best_beta * shifted[j]) / sum;
  return out;
}

struct TsneConfig {
  std::size_t target_dim = 3;
  double perplexity = 30.0;
  double early_exaggeration_factor = 12.0;
  std::size_t early_exaggeration_iters = 250;
  std::size_t total_iters = 1000;
  std::optional<double> learning_rate;  // default n / early_exaggeration_factor
  double momentum_early = 0.5;
  double momentum_late = 0.8;
  std::uint64_t seed = 0;
  double perplexity_tolerance = 1e-5;
  std::size_t perplexity_max_bisect = 50;

  double effective_learning_rate(std::size_t n) const {
    return learning_rate.value_or(static_cast<double>(n) / early_exaggeration_factor);
  }
};

inline void validate(const TsneConfig& cfg, std::size_t n) {
  auto fail = [](const std::string& why) { throw Error(ErrorKind::InvalidConfig, "t-SNE: " + why); };
  if (cfg.target_dim != 2 && cfg.target_dim != 3) fail("target_dim must be 2 or 3");
  if (!(cfg.perplexity > 0.0)) fail("perplexity must be positive");
  if (!(cfg.perplexity < static_cast<double>(n))) {
    fail("perplexity " + std::to_string(cfg.perplexity) + " must be below n_samples " + std::to_string(n));
  }
  if (!(cfg.early_exaggeration_factor > 0.0)) fail("early_exaggeration_factor must be positive");
  if (cfg.total_iters < 1) fail("total_iters must be >= 1");
  if (cfg.early_exaggeration_iters >= cfg.total_iters) fail("early_exaggeration_iters must be < total_iters");
  if (cfg.learning_rate && !(*cfg.learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(cfg.momentum_early >= 0.0 && cfg.momentum_early < 1.0)) fail("momentum_early must lie in [0, 1)");
  if (!(cfg.momentum_late >= 0.0 && cfg.momentum_late < 1.0)) fail("momentum_late must lie in [0, 1)");
  if (!(cfg.perplexity_tolerance > 0.0)) fail("perplexity_tolerance must be positive");
  if (cfg.perplexity_max_bisect < 1) fail("perplexity_max_bisect must be >= 1");
}

struct ConditionalAffinities {
  Matrix conditional;  // row i holds p_{j|i}; zero diagonal
  std::vector<double> betas;
  std::vector<BandwidthStatus> status;
};

inline ConditionalAffinities conditional_affinities(const Matrix& sq_dists, double perplexity, double tol,
                                                    std::size_t max_iters) {
  const std::size_t n = sq_dists.rows;
  ConditionalAffinities out{Matrix(n, n), std::vector<double>(n), std::vector<BandwidthStatus>(n)};
  parallel_for(n, [&](std::size_t i) {
    std::vector<double> row;
    row.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) row.push_back(sq_dists(i, j));
    }
    const auto res = calibrate_bandwidth(row, perplexity, tol, max_iters);
    std::size_t k = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) out.conditional(i, j) = res.probabilities[k++];
    }
    out.betas[i] = res.beta;
    out.status[i] = res.status;
  });
  return out;
}

inline constexpr double kAffinityFloor = 1e-12;

// P = (C + C^T) / (2N), off-diagonal entries floored, renormalised to sum 1.
inline Matrix symmetrize_affinities(const Matrix& conditional) {
  const std::size_t n = conditional.rows;
  Matrix p(n, n);
  const double scale = 1.0 / (2.0 * static_cast<double>(n));
  std::vector<double> row_sum(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      p(i, j) = std::max((conditional(i, j) + conditional(j, i)) * scale, kAffinityFloor);
      row_sum[i] += p(i, j);
    }
  }
  const double total = std::accumulate(row_sum.begin(), row_sum.end(), 0.0);
  for (double& v : p.data) v /= total;
  return p;
}

struct AffinityResult {
  Matrix p;
  ConditionalAffinities conditional;

  std::size_t unconverged_rows() const {
    std::size_t c = 0;
    for (const auto s : conditional.status) c += s != BandwidthStatus::Converged;
    return c;
  }
};

inline AffinityResult joint_affinities(const Matrix& x, const TsneConfig& cfg) {
  if (x.rows < 3) throw Error(ErrorKind::InsufficientPoints, "joint affinities need n >= 3");
  const Matrix d2 = pairwise_squared_distances(x);
  auto cond = conditional_affinities(d2, cfg.perplexity, cfg.perplexity_tolerance, cfg.perplexity_max_bisect);
  Matrix p = symmetrize_affinities(cond.conditional);
  return {std::move(p), std::move(cond)};
}

inline AffinityResult joint_affinities(const EmbeddingMatrix& m, const TsneConfig& cfg) {
  return joint_affinities(to_matrix(m), cfg);
}

namespace detail {

// One O(N^2) pass: Student-t kernel, KL(P || Q) and the gradient of
// KL(exaggeration * P || Q).
struct TsnePass {
  double kl = 0.0;
  Matrix gradient;
};

inline TsnePass tsne_pass(const Matrix& p, const Matrix& y, double exaggeration, bool want_gradient) {
  const std::size_t n = y.rows;
  const std::size_t dim = y.cols;
  Matrix num(n, n);
  std::vector<double> row_z(n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double v = 1.0 / (1.0 + squared_distance(y.row(i), y.row(j)));
      num(i, j) = v;
      s += v;
    }
    row_z[i] = s;
  });
  const double z = std::accumulate(row_z.begin(), row_z.end(), 0.0);
  const double inv_z = 1.0 / z;

  TsnePass out;
  if (want_gradient) out.gradient = Matrix(n, dim);
  std::vector<double> row_kl(n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    double kl = 0.0;
    auto g = want_gradient ? out.gradient.row(i) : std::span<double>{};
    const auto yi = y.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double pij = p(i, j);
      const double qij = std::max(num(i, j) * inv_z, std::numeric_limits<double>::min());
      if (pij > 0.0) kl += pij * std::log(pij / qij);
      if (want_gradient) {
        const double coeff = 4.0 * (exaggeration * pij - qij) * num(i, j);
        const auto yj = y.row(j);
        for (std::size_t c = 0; c < dim; ++c) g[c] += coeff * (yi[c] - yj[c]);
      }
    }
    row_kl[i] = kl;
  });
  out.kl = std::accumulate(row_kl.begin(), row_kl.end(), 0.0);
  return out;
}

}  // namespace detail

// KL(P || Q) for low-dimensional coordinates y under the Student-t kernel.
inline double kl_divergence(const Matrix& p, const Matrix& y) {
  return detail::tsne_pass(p, y, 1.0, false).kl;
}

// Analytic gradient: dKL/dy_i = 4 sum_j (p_ij - q_ij)(1 + |y_i - y_j|^2)^-1 (y_i - y_j).
inline Matrix kl_gradient(const Matrix& p, const Matrix& y) {
  return detail::tsne_pass(p, y, 1.0, true).gradient;
}

struct ProjectionResult {
  Matrix coords;
  // kl_trace[t] is KL(P || Q) at the coordinates entering iteration t; the
  // last entry is the KL of the returned coordinates.
  std::vector<double> kl_trace;
  std::vector<double> pca_explained_variance;
  std::vector<BandwidthStatus> bandwidth_status;
};

inline constexpr double kInitStddev = 1e-4;

// PCA coordinates rescaled to stddev 1e-4 per axis. Axes PCA cannot fill
// (zero variance, or D < target_dim) get seeded Gaussian noise of that scale.
inline Matrix tsne_initial_coords(const Matrix& x, const TsneConfig& cfg, std::vector<double>* variance = nullptr) {
  const std::size_t n = x.rows;
  const std::size_t k = std::min({cfg.target_dim, n, x.cols});
  const auto pca = pca_project(x, k);
  if (variance) *variance = pca.explained_variance;

  Matrix y(n, cfg.target_dim);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, kInitStddev);
  for (std::size_t c = 0; c < cfg.target_dim; ++c) {
    double sd = 0.0;
    if (c < k) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += pca.coords(i, c);
      mean /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) sd += (pca.coords(i, c) - mean) * (pca.coords(i, c) - mean);
      sd = std::sqrt(sd / static_cast<double>(n));
    }
    if (sd > 0.0) {
      for (std::size_t i = 0; i < n; ++i) y(i, c) = pca.coords(i, c) * (kInitStddev / sd);
    } else {
      for (std::size_t i = 0; i < n; ++i) y(i, c) = noise(rng);
    }
  }
  return y;
}

inline ProjectionResult tsne_embed(const Matrix& x, const TsneConfig& cfg) {
  const std::size_t n = x.rows;
  if (n < 4) throw Error(ErrorKind::InsufficientPoints, "t-SNE needs n >= 4");
  validate(cfg, n);

  auto aff = joint_affinities(x, cfg);
  ProjectionResult out;
  out.bandwidth_status = aff.conditional.status;
  Matrix y = tsne_initial_coords(x, cfg, &out.pca_explained_variance);

  const double lr = cfg.effective_learning_rate(n);
  Matrix velocity(n, cfg.target_dim);
  out.kl_trace.reserve(cfg.total_iters + 1);
  for (std::size_t it = 0; it < cfg.total_iters; ++it) {
    const bool early = it < cfg.early_exaggeration_iters;
    const double exaggeration = early ? cfg.early_exaggeration_factor : 1.0;
    const double momentum = early ? cfg.momentum_early : cfg.momentum_late;
    const auto pass = detail::tsne_pass(aff.p, y, exaggeration, true);
    out.kl_trace.push_back(pass.kl);
    for (std::size_t k = 0; k < y.data.size(); ++k) {
      velocity.data[k] = momentum * velocity.data[k] - lr * pass.gradient.data[k];
      y.data[k] += velocity.data[k];
      if (!std::isfinite(y.data[k])) {
        throw Error(ErrorKind::NonFiniteUpdate, "t-SNE diverged at iteration " + std::to_string(it));
      }
    }
  }
  out.kl_trace.push_back(kl_divergence(aff.p, y));
  out.coords = std::move(y);
  return out;
}

inline ProjectionResult tsne_embed(const EmbeddingMatrix& m, const TsneConfig& cfg) {
  return tsne_embed(to_matrix(m), cfg);
}

}  // namespace equity
