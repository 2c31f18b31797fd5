#pragma once

#include <functional>
#include <string>
#include <vector>

#include "btl/matrix.hpp"
#include "btl/param_model.hpp"
#include "btl/prior.hpp"

namespace btl {

struct DirectionSet {
    std::vector<ParamVector> directions;
    std::string origin;  // "top_singular" or "random"
};

// Leading left singular vectors of the deviation matrix, descending singular
// value order, computed through the rank x rank Gram matrix.
DirectionSet top_singular_directions(const LowRankGaussian& prior, int k);

// i.i.d. standard normal directions for the random-direction comparison.
DirectionSet random_directions(int dim, int k, uint64_t seed);

// Rescales each per-filter group of `direction` to the norm of the matching
// group of `reference`; zero-norm direction groups stay zero.
ParamVector filter_normalize(const ParamVector& direction, const ParamVector& reference,
                             const ParamLayout& layout);

struct ScanResult {
    std::vector<double> grid;
    Matrix losses;  // directions x grid, test NLL at base + t * normalized direction
};

ScanResult perturbation_scan(const MlpModel& model, const ParamVector& base,
                             const DirectionSet& directions, const std::vector<double>& grid,
                             const Matrix& test_inputs, const std::vector<int>& test_labels,
                             bool frozen_head);

// Mean test NLL of a parameter vector on a labeled set (scan objective).
double test_nll(const MlpModel& model, const ParamVector& params, const Matrix& inputs,
                const std::vector<int>& labels);

struct SweepPoint {
    double key = 0.0;  // rank or lambda
    double mean_error = 0.0;
    double se_error = 0.0;
    int runs = 0;
};

// Runs one downstream inference for a (modified prior, seed) pair and returns
// its test error. Supplied by the orchestration layer.
using DownstreamRun = std::function<double(const LowRankGaussian& prior, uint64_t seed)>;

std::vector<SweepPoint> rank_ablation(const LowRankGaussian& prior, const std::vector<int>& ranks,
                                      const std::vector<uint64_t>& seeds, const DownstreamRun& run);

std::vector<SweepPoint> lambda_sweep(const LowRankGaussian& prior,
                                     const std::vector<double>& lambdas,
                                     const std::vector<uint64_t>& seeds, const DownstreamRun& run);

}  // namespace btl
