#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fcca/models.hpp"

namespace fcca {

struct CostWeights {
  double l0 = 0.1;
  double l1 = 1.0;
  double l2 = 0.0;
};

/// One counterfactual query.
///
/// Cost of a candidate x is  l0*|{j : x_j != x0_j}| + l1*sum|x_j - x0_j| + l2*sum(x_j - x0_j)^2.
/// Ensembles: the target class must win with class margin >= `margin`
/// (boosting: +-raw >= margin; forest: avg w[y_ce] - avg w[y0] >= margin).
/// Linear models: s*(w.x + b) >= 1 with s = +1 for y_ce = 1, -1 for y_ce = 0.
struct CEProblem {
  std::vector<double> x0;
  int y0 = 0;
  int y_ce = 1;
  CostWeights weights;
  std::vector<double> eps;
  double margin = 1e-4;
  // Box [lower_j, upper_j]; empty vectors mean [0,1] on every feature.
  std::vector<double> lower;
  std::vector<double> upper;
  // Features that must keep their value; empty means all mutable.
  std::vector<bool> immutable;

  std::size_t dim() const { return x0.size(); }
  double lo(std::size_t j) const { return lower.empty() ? 0.0 : lower[j]; }
  double hi(std::size_t j) const { return upper.empty() ? 1.0 : upper[j]; }
  bool is_immutable(std::size_t j) const { return !immutable.empty() && immutable[j]; }
};

/// Builds a query for `x0` asking for the opposite of its predicted label.
CEProblem make_problem(const TargetModel& model, std::span<const double> x0,
                       std::span<const double> eps, const CostWeights& weights,
                       double margin = 1e-4);

enum class CEStatus { Optimal, Infeasible };

struct CESolution {
  CEStatus status = CEStatus::Infeasible;
  std::vector<double> x_ce;
  double cost = 0.0;
  // Features with |x0_j - x_ce_j| > eps_j.
  std::vector<std::size_t> changed;
  double margin_achieved = 0.0;
  std::size_t nodes_explored = 0;
};

/// Sorted admissible values of one feature. `origin` indexes x0_j.
struct FeatureCandidates {
  std::vector<double> values;
  std::vector<double> costs;
  std::size_t origin = 0;
};

struct CandidateGrid {
  std::vector<FeatureCandidates> features;
};

double ce_cost(const CEProblem& prob, std::span<const double> x);

/// Class margin of `x` towards `y_ce` for an ensemble (see CEProblem).
double class_margin(const Ensemble& model, std::span<const double> x, int y0, int y_ce);
/// s*(w.x + b) for a linear model.
double class_margin(const LinearModel& model, std::span<const double> x, int y_ce);

/// Per feature: x0_j plus c - eps_j and c + eps_j for every split c on j,
/// restricted to the box and to values at distance >= eps_j from every split
/// on j. Box edges are added when the box is narrower than [0,1].
/// Immutable features keep x0_j only.
CandidateGrid build_candidates(const Ensemble& model, const CEProblem& prob);

/// Exact minimum-cost counterfactual over the candidate grid by branch and
/// bound. Ties break on lower cost, then fewer changed coordinates, then the
/// lexicographically smallest vector of candidate indices.
CESolution solve_ensemble_ce(const Ensemble& model, const CEProblem& prob);

/// Exact minimum-cost counterfactual for a linear model inside the box.
CESolution solve_linear_ce(const LinearModel& model, const CEProblem& prob);

CESolution solve_ce(const TargetModel& model, const CEProblem& prob);

/// Exhaustive search over the Cartesian candidate grid. Test oracle.
CESolution brute_force_oracle(const Ensemble& model, const CEProblem& prob);

/// Grid search for linear models: every coordinate but one ranges over
/// {x0_j, box edges, uniform grid of step `resolution`}; the remaining one is
/// moved by the smallest amount that satisfies the margin. Test oracle.
CESolution brute_force_oracle(const LinearModel& model, const CEProblem& prob,
                              double resolution);

/// Solves every problem, possibly in parallel. Results are index-aligned with `problems`.
std::vector<CESolution> solve_batch(const TargetModel& model, std::span<const CEProblem> problems,
                                    unsigned threads = 0);

/// CSV with columns index,status,cost,changed_features,<f>_scaled...,<f>_orig...
void write_ce_csv(const std::filesystem::path& path, const TargetModel& model,
                  std::span<const std::size_t> row_index, std::span<const CESolution> solutions);

}  // namespace fcca
