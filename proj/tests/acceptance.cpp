// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Tolerances and budgets are fixed here.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>

#include "equity/equity.hpp"
#include "fixture_data.hpp"
#include "oracles.hpp"

using namespace equity;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok;
  std::string detail;
};

int failures = 0;

void criterion(const char* name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = secs < budget_s;
  const bool pass = o.ok && in_time;
  failures += !pass;
  std::printf("%s %-28s %8.2fs (budget %.0fs) %s%s\n", pass ? "PASS" : "FAIL", name, secs, budget_s, o.detail.c_str(),
              in_time ? "" : " [over budget]");
  std::fflush(stdout);
}

Outcome gfl_exactness() {
  double worst = 0.0;
  for (std::size_t k = 0; k < 10000; ++k) {
    const double p = static_cast<double>(k) / 9999.0;
    for (const double g : {0.5, 1.0, 2.0, 5.0}) {
      worst = std::max(worst, std::abs(gfl_weight(p, {0.0, g}) - std::pow(1.0 - p, g)));
    }
  }
  bool endpoints = true;
  for (const double eta : {0.0, 0.3, 1.0, 7.5}) {
    endpoints &= gfl_weight(0.0, {eta, 5.0}) == 1.0;
    endpoints &= gfl_weight(1.0, {eta, 5.0}) == eta / (eta + 1.0);
  }
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0), ue(0.0, 10.0), ug(0.0, 10.0);
  std::size_t violations = 0;
  for (std::size_t k = 0; k < 100000; ++k) {
    double p1 = u(rng), p2 = u(rng);
    if (p1 > p2) std::swap(p1, p2);
    double e1 = ue(rng), e2 = ue(rng);
    if (e1 > e2) std::swap(e1, e2);
    const double g = ug(rng);
    const double w1 = gfl_weight(p1, {e1, g}), w2 = gfl_weight(p2, {e1, g});
    violations += !(w1 >= w2);                                       // non-increasing in p
    violations += !(gfl_weight(p2, {e2, g}) >= w2 - 1e-15);          // (1-p)^g <= 1 so larger eta lifts w
    violations += !(w1 <= 1.0 && w2 >= e1 / (e1 + 1.0) - 1e-15);    // range [eta/(eta+1), 1]
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "max|err|=%.2e endpoints=%s violations=%zu", worst, endpoints ? "exact" : "off",
                violations);
  return {worst <= 1e-12 && endpoints && violations == 0, buf};
}

// floor(small / big * 10^4) in integers.
std::size_t truncate_4dp(std::size_t small, std::size_t big) { return small * 10000 / big; }

Outcome likelihood_ratios() {
  auto ratio = [](std::size_t big, std::size_t small) {
    ClusterAssignment a;
    a.labels.assign(big, 0);
    a.labels.insert(a.labels.end(), small, 1);
    a.n_clusters = 2;
    return scaled_likelihoods(a).cluster_likelihood.at(1);
  };
  const double r1 = ratio(23385, 116), r2 = ratio(416, 10);
  // The ratios must be the correctly rounded quotients of the integer sizes,
  // and the exact rationals must print as the reported values.
  const bool exact = r1 == 116.0 / 23385.0 && r2 == 10.0 / 416.0;
  const bool printed = truncate_4dp(116, 23385) == 49 && truncate_4dp(10, 416) == 240 &&
                       static_cast<std::size_t>(r1 * 1e4) == 49 && static_cast<std::size_t>(r2 * 1e4) == 240;
  char buf[128];
  std::snprintf(buf, sizeof buf, "116/23385=%.6f (0.0049) 10/416=%.6f (0.0240)", r1, r2);
  return {exact && printed, buf};
}

Outcome dbscan_oracle() {
  std::mt19937_64 rng(7);
  std::size_t agree = 0;
  for (std::size_t t = 0; t < 200; ++t) {
    const std::size_t n = 20 + rng() % 181;
    std::uniform_real_distribution<double> u(0.0, 10.0);
    Matrix x(n, 3);
    for (double& v : x.data) v = u(rng);
    const double eps = 0.5 + static_cast<double>(rng() % 200) / 100.0;
    const std::size_t ms = 1 + rng() % 8;
    const auto got = dbscan(x, {eps, ms}).labels;
    agree += oracle::canonical_labels(got) == oracle::canonical_labels(oracle::dbscan_reference(x, eps, ms));
  }
  return {agree == 200, std::to_string(agree) + "/200 identical"};
}

Outcome hdbscan_blobs() {
  std::size_t good = 0;
  std::string aris;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto blobs = oracle::gaussian_blobs(3, 100, 3, 1.0, 10.0, seed);
    HdbscanParams p;
    p.min_cluster_size = 25;
    const auto r = hdbscan(blobs.points, p);
    const double ari = oracle::adjusted_rand_index(r.assignment.labels, blobs.labels);
    good += ari >= 0.95;
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.3f ", ari);
    aris += buf;
  }
  return {good >= 9, std::to_string(good) + "/10 seeds ARI>=0.95 [" + aris + "]"};
}

double max_abs(const Matrix& m) {
  double v = 0.0;
  for (const double x : m.data) v = std::max(v, std::abs(x));
  return v;
}

Outcome tsne_correctness() {
  const auto x = oracle::random_matrix(10, 5, 77);
  TsneConfig cfg;
  cfg.perplexity = 3.0;
  const auto p = joint_affinities(x, cfg).p;
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto y = oracle::random_matrix(10, 3, 100 + s);
    const auto g = kl_gradient(p, y);
    const double h = 1e-6;
    double err = 0.0;
    for (std::size_t k = 0; k < y.data.size(); ++k) {
      Matrix plus = y, minus = y;
      plus.data[k] += h;
      minus.data[k] -= h;
      err = std::max(err, std::abs((kl_divergence(p, plus) - kl_divergence(p, minus)) / (2 * h) - g.data[k]));
    }
    worst = std::max(worst, err / max_abs(g));
  }

  const auto blobs = oracle::gaussian_blobs(3, 50, 50, 0.1, 10.0, 11);
  const auto r = tsne_embed(blobs.points, TsneConfig{});
  const double purity = oracle::nn_purity(r.coords, blobs.labels);
  const bool kl_down = r.kl_trace.back() < r.kl_trace.front();

  const auto big = oracle::gaussian_blobs(4, 500, 50, 1.0, 10.0, 12);
  const auto t0 = std::chrono::steady_clock::now();
  const auto rb = tsne_embed(big.points, TsneConfig{});
  const double big_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool big_ok = rb.coords.rows == 2000 && std::isfinite(rb.kl_trace.back()) && big_s < 300.0;

  char buf[192];
  std::snprintf(buf, sizeof buf, "grad rel err=%.2e purity=%.3f KL %.3f->%.3f N=2000 %.1fs", worst, purity,
                r.kl_trace.front(), r.kl_trace.back(), big_s);
  return {worst < 1e-5 && purity >= 0.95 && kl_down && big_ok, buf};
}

Outcome determinism() {
  oracle::TempDir a("acc-a"), b("acc-b");
  PipelineConfig cfg;
  cfg.input_path = fs::path(EQUITY_FIXTURE_DIR) / "three_blobs_500.dseq";
  cfg.cluster = DbscanParams{2.0, 10};
  cfg.report.emit_svg = true;
  cfg.output_dir = a.path();
  run_pipeline(cfg);
  cfg.output_dir = b.path();
  run_pipeline(cfg);
  std::size_t files = 0, same = 0;
  for (const auto& e : fs::directory_iterator(a.path())) {
    ++files;
    const auto other = b / e.path().filename().string();
    same += fs::exists(other) && read_file(e.path()) == read_file(other);
  }
  std::size_t files_b = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(b.path())) ++files_b;
  return {files > 0 && same == files && files == files_b, std::to_string(same) + "/" + std::to_string(files) +
                                                               " files byte-identical"};
}

Outcome demo() {
  std::size_t wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    DemoConfig cfg;
    cfg.train.seed = seed;
    cfg.trainer.seed = seed;
    const auto r = run_equity_demo(cfg);
    const double u = r.rare_recall_uniform(cfg.rare_blob), w = r.rare_recall_weighted(cfg.rare_blob);
    wins += w >= u;
  }
  return {wins >= 8, "GFL rare recall >= uniform on " + std::to_string(wins) + "/10 seeds"};
}

}  // namespace

int main() {
  criterion("gfl_exactness", 1.0, gfl_exactness);
  criterion("likelihood_ratios", 1.0, likelihood_ratios);
  criterion("dbscan_oracle", 30.0, dbscan_oracle);
  criterion("hdbscan_blob_recovery", 60.0, hdbscan_blobs);
  criterion("tsne_correctness", 330.0, tsne_correctness);
  criterion("pipeline_determinism", 120.0, determinism);
  criterion("equity_demo", 120.0, demo);
  std::printf("%s: %d failing\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}
