#include "btl/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "btl/errors.hpp"

namespace btl {

DirectionSet top_singular_directions(const LowRankGaussian& prior, int k) {
    const int rank = prior.rank();
    if (k < 1 || k > rank) {
        throw ConfigError("top_singular_directions: k = " + std::to_string(k) +
                          " outside [1, rank = " + std::to_string(rank) + "]");
    }
    const Matrix& dev = prior.deviations();
    const int d = prior.dim();

    Matrix gram(rank, rank, 0.0);
    for (int a = 0; a < rank; ++a) {
        for (int b = a; b < rank; ++b) {
            double s = 0.0;
            for (int i = 0; i < d; ++i) s += dev(i, a) * dev(i, b);
            gram(a, b) = gram(b, a) = s;
        }
    }
    const SymmetricEigen eig = symmetric_eigen(gram);

    DirectionSet out;
    out.origin = "top_singular";
    for (int c = 0; c < k; ++c) {
        const double sv = std::sqrt(std::max(0.0, eig.values[c]));
        if (sv <= 1e-12) {
            throw ConfigError("top_singular_directions: deviation matrix is numerically rank " +
                              std::to_string(c) + ", cannot produce " + std::to_string(k) +
                              " directions");
        }
        ParamVector v(d, 0.0);
        for (int i = 0; i < d; ++i) {
            double s = 0.0;
            for (int a = 0; a < rank; ++a) s += dev(i, a) * eig.vectors(a, c);
            v[i] = s / sv;
        }
        out.directions.push_back(std::move(v));
    }
    return out;
}

DirectionSet random_directions(int dim, int k, uint64_t seed) {
    if (k < 1) throw ConfigError("random_directions: k must be >= 1");
    RngStream rng(seed);
    DirectionSet out;
    out.origin = "random";
    for (int c = 0; c < k; ++c) {
        ParamVector v(dim);
        for (int i = 0; i < dim; ++i) v[i] = rng.normal();
        out.directions.push_back(std::move(v));
    }
    return out;
}

ParamVector filter_normalize(const ParamVector& direction, const ParamVector& reference,
                             const ParamLayout& layout) {
    if (direction.size() != reference.size() ||
        static_cast<int>(direction.size()) != layout.total_dim) {
        throw DimensionError("filter_normalize: direction length " +
                             std::to_string(direction.size()) + ", reference length " +
                             std::to_string(reference.size()) + ", layout total_dim " +
                             std::to_string(layout.total_dim));
    }
    ParamVector out = direction;
    for (const auto& block : layout.blocks) {
        const int group_len = block.length / block.filters;
        for (int f = 0; f < block.filters; ++f) {
            const int off = block.offset + f * group_len;
            double dn = 0.0, rn = 0.0;
            for (int i = 0; i < group_len; ++i) {
                dn += direction[off + i] * direction[off + i];
                rn += reference[off + i] * reference[off + i];
            }
            dn = std::sqrt(dn);
            rn = std::sqrt(rn);
            const double s = dn > 0.0 ? rn / dn : 0.0;
            for (int i = 0; i < group_len; ++i) out[off + i] = direction[off + i] * s;
        }
    }
    return out;
}

double test_nll(const MlpModel& model, const ParamVector& params, const Matrix& inputs,
                const std::vector<int>& labels) {
    Matrix probs = forward(model, params, inputs);
    softmax_rows(probs);
    double nll = 0.0;
    for (int i = 0; i < inputs.rows(); ++i) {
        nll -= std::log(std::max(probs(i, labels[i]), 1e-300));
    }
    return nll / inputs.rows();
}

ScanResult perturbation_scan(const MlpModel& model, const ParamVector& base,
                             const DirectionSet& directions, const std::vector<double>& grid,
                             const Matrix& test_inputs, const std::vector<int>& test_labels,
                             bool frozen_head) {
    ScanResult out;
    out.grid = grid;
    out.losses = Matrix(static_cast<int>(directions.directions.size()),
                        static_cast<int>(grid.size()), 0.0);

    std::vector<int> head_idx;
    if (frozen_head) head_idx = model.layout.group_indices("head");

    for (size_t di = 0; di < directions.directions.size(); ++di) {
        ParamVector dir = filter_normalize(directions.directions[di], base, model.layout);
        for (int i : head_idx) dir[i] = 0.0;
        for (size_t gi = 0; gi < grid.size(); ++gi) {
            ParamVector w = base;
            for (size_t j = 0; j < w.size(); ++j) w[j] += grid[gi] * dir[j];
            out.losses(static_cast<int>(di), static_cast<int>(gi)) =
                test_nll(model, w, test_inputs, test_labels);
        }
    }
    return out;
}

namespace {

SweepPoint aggregate(double key, const std::vector<double>& errors) {
    SweepPoint p;
    p.key = key;
    p.runs = static_cast<int>(errors.size());
    double mean = 0.0;
    for (double e : errors) mean += e;
    mean /= p.runs;
    double var = 0.0;
    for (double e : errors) var += (e - mean) * (e - mean);
    p.mean_error = mean;
    p.se_error = p.runs > 1 ? std::sqrt(var / (p.runs - 1) / p.runs) : 0.0;
    return p;
}

}  // namespace

std::vector<SweepPoint> rank_ablation(const LowRankGaussian& prior, const std::vector<int>& ranks,
                                      const std::vector<uint64_t>& seeds,
                                      const DownstreamRun& run) {
    std::vector<SweepPoint> table;
    for (int r : ranks) {
        const LowRankGaussian truncated = prior.truncated(r);
        std::vector<double> errors;
        for (uint64_t seed : seeds) errors.push_back(run(truncated, seed));
        table.push_back(aggregate(static_cast<double>(r), errors));
    }
    return table;
}

std::vector<SweepPoint> lambda_sweep(const LowRankGaussian& prior,
                                     const std::vector<double>& lambdas,
                                     const std::vector<uint64_t>& seeds,
                                     const DownstreamRun& run) {
    std::vector<double> sorted = lambdas;
    std::sort(sorted.begin(), sorted.end());
    std::vector<SweepPoint> table;
    for (double lam : sorted) {
        const LowRankGaussian rescaled = prior.rescaled(lam);
        std::vector<double> errors;
        for (uint64_t seed : seeds) errors.push_back(run(rescaled, seed));
        table.push_back(aggregate(lam, errors));
    }
    return table;
}

}  // namespace btl
