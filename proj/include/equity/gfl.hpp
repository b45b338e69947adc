#pragma once

// Generalized Focal Loss sample weights:
//
//   W(p; eta, gamma) = (eta + (1 - p)^gamma) / (eta + 1)
//
// p is the sample's scaled likelihood. eta = 0 reduces to the focal term
// (1 - p)^gamma; larger eta flattens the weights towards 1.

#include <cmath>
#include <string>
#include <vector>

#include "equity/error.hpp"
#include "equity/likelihood.hpp"

namespace equity {

struct GflParams {
  double eta = 1.0;
  double gamma = 5.0;

  friend bool operator==(const GflParams&, const GflParams&) = default;
};

inline void validate(const GflParams& p) {
  if (!std::isfinite(p.eta) || !std::isfinite(p.gamma) || p.eta < 0.0 || p.gamma < 0.0) {
    throw Error(ErrorKind::DomainError, "GFL parameters must be finite and >= 0 (eta=" + std::to_string(p.eta) +
                                            ", gamma=" + std::to_string(p.gamma) + ")");
  }
}

inline double gfl_weight(double p, const GflParams& params) {
  validate(params);
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorKind::DomainError, "likelihood " + std::to_string(p) + " outside [0, 1]");
  return (params.eta + std::pow(1.0 - p, params.gamma)) / (params.eta + 1.0);
}

struct WeightTable {
  std::vector<std::string> sample_ids;
  std::vector<double> likelihoods;
  std::vector<double> weights;
  GflParams params;
};

inline WeightTable weight_table(const LikelihoodBank& bank, const std::vector<std::string>& sample_ids,
                                const GflParams& params) {
  validate(params);
  if (sample_ids.size() != bank.sample_likelihood.size()) {
    throw Error(ErrorKind::DimensionMismatch, "sample ids and likelihood bank differ in length");
  }
  WeightTable t;
  t.sample_ids = sample_ids;
  t.likelihoods = bank.sample_likelihood;
  t.params = params;
  t.weights.reserve(t.likelihoods.size());
  for (const double l : t.likelihoods) t.weights.push_back(gfl_weight(l, params));
  return t;
}

}  // namespace equity
