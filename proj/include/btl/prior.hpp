#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "btl/matrix.hpp"
#include "btl/param_model.hpp"
#include "btl/rng.hpp"

namespace btl {

// Gaussian with covariance scale * (diag(diag_var)/2 + D D^T / (2 * dev_denom)).
// dev_denom is fixed at construction (rank - 1 for a freshly fitted posterior)
// and survives rank truncation so that dropping columns only removes their
// contribution instead of rescaling the remainder.
class LowRankGaussian {
public:
    LowRankGaussian(ParamVector mean, std::vector<double> diag_var, Matrix deviations,
                    double scale = 1.0, std::optional<double> dev_denom = std::nullopt);

    int dim() const { return static_cast<int>(mean_.size()); }
    int rank() const { return deviations_.cols(); }
    double scale() const { return scale_; }
    double dev_denom() const { return dev_denom_; }
    const ParamVector& mean() const { return mean_; }
    const std::vector<double>& diag_var() const { return diag_var_; }
    const Matrix& deviations() const { return deviations_; }

    // Same distribution with the covariance multiplied by lambda.
    LowRankGaussian rescaled(double lambda) const;

    // Keeps the `rank` columns of D with the largest norms (ties by column
    // index); rank 0 yields the pure diagonal Gaussian.
    LowRankGaussian truncated(int rank) const;

    // Exact multivariate normal log density via the Woodbury identity and the
    // matrix determinant lemma on the rank x rank capacity matrix.
    double log_density(const ParamVector& w) const;

    // -Sigma^{-1} (w - mean); the exact gradient of log_density.
    ParamVector grad_log_density(const ParamVector& w) const;

    ParamVector sample(RngStream& rng) const;

private:
    void factorize();
    void check_dim(const ParamVector& w, const char* op) const;

    ParamVector mean_;
    std::vector<double> diag_var_;
    Matrix deviations_;  // dim x rank
    double scale_ = 1.0;
    double dev_denom_ = 1.0;

    // Cached factorization of Sigma = A + B B^T with A = (scale/2) diag(diag_var),
    // B = sqrt(scale / (2 dev_denom)) D.
    std::vector<double> inv_a_;
    Matrix capacity_chol_;  // chol(I + B^T A^{-1} B), rank x rank
    double log_det_ = 0.0;
    double b_coef_ = 0.0;  // sqrt(scale / (2 dev_denom))
};

inline LowRankGaussian rescale(const LowRankGaussian& prior, double lambda) {
    return prior.rescaled(lambda);
}

// Zero-mean isotropic Gaussian for parameter groups without a learned prior.
struct IsotropicGaussian {
    double variance = 1.0;
};

// Prior over a full parameter vector: an optional learned component over one
// block group plus zero-mean isotropic components over the rest. Every layout
// block must be covered exactly once.
class CompositePrior {
public:
    CompositePrior(ParamLayout layout,
                   std::optional<std::pair<std::string, LowRankGaussian>> learned,
                   std::vector<std::pair<std::string, IsotropicGaussian>> isotropic);

    const ParamLayout& layout() const { return layout_; }
    const std::optional<std::pair<std::string, LowRankGaussian>>& learned() const { return learned_; }

    double log_density(const ParamVector& w) const;
    std::pair<double, ParamVector> log_density_and_grad(const ParamVector& w) const;

    // Mean of the full prior: learned mean on its group, zero elsewhere.
    ParamVector mode() const;

private:
    ParamLayout layout_;
    std::optional<std::pair<std::string, LowRankGaussian>> learned_;
    std::vector<int> learned_indices_;
    std::vector<std::pair<std::string, IsotropicGaussian>> isotropic_;
    std::vector<std::vector<int>> isotropic_indices_;
};

}  // namespace btl
