// Test-only energy targets with closed-form posteriors.
#pragma once

#include <vector>

#include "btl/samplers.hpp"
#include "oracles.hpp"

namespace testing_targets {

// U(w) = sum_k 1/2 (w - m_k)^T P_k (w - m_k): a product of Gaussian factors
// whose posterior is N(m*, (sum P_k)^{-1}). Deterministic gradient.
class GaussianTarget final : public btl::EnergyTarget {
public:
    GaussianTarget(std::vector<oracle::Vec> means, std::vector<oracle::Mat> precisions)
        : means_(std::move(means)), precisions_(std::move(precisions)) {}

    int dim() const override { return static_cast<int>(means_[0].size()); }
    int dataset_size() const override { return 0; }

    double energy_and_grad(const btl::ParamVector& w, std::span<const int>, btl::RngStream&,
                           btl::ParamVector& grad) const override {
        const int d = dim();
        grad.assign(d, 0.0);
        double u = 0.0;
        for (size_t k = 0; k < means_.size(); ++k) {
            for (int i = 0; i < d; ++i) {
                double s = 0.0;
                for (int j = 0; j < d; ++j) s += precisions_[k][i][j] * (w[j] - means_[k][j]);
                grad[i] += s;
                u += 0.5 * (w[i] - means_[k][i]) * s;
            }
        }
        return u;
    }

    // Analytic posterior moments.
    oracle::Mat posterior_precision() const {
        const int d = dim();
        oracle::Mat p = oracle::make_mat(d, d);
        for (const auto& prec : precisions_)
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) p[i][j] += prec[i][j];
        return p;
    }

    oracle::Mat posterior_covariance() const {
        const auto p = posterior_precision();
        const int d = dim();
        const auto l = oracle::dense_cholesky(p);
        oracle::Mat cov = oracle::make_mat(d, d);
        for (int c = 0; c < d; ++c) {
            oracle::Vec e(d, 0.0);
            e[c] = 1.0;
            const auto col = oracle::dense_solve(l, e);
            for (int r = 0; r < d; ++r) cov[r][c] = col[r];
        }
        return cov;
    }

    oracle::Vec posterior_mean() const {
        const int d = dim();
        oracle::Vec rhs(d, 0.0);
        for (size_t k = 0; k < means_.size(); ++k) {
            for (int i = 0; i < d; ++i) {
                for (int j = 0; j < d; ++j) rhs[i] += precisions_[k][i][j] * means_[k][j];
            }
        }
        const auto l = oracle::dense_cholesky(posterior_precision());
        return oracle::dense_solve(l, rhs);
    }

private:
    std::vector<oracle::Vec> means_;
    std::vector<oracle::Mat> precisions_;
};

inline GaussianTarget conjugate_2d() {
    // prior N(0, 2 I) and a correlated Gaussian likelihood factor
    oracle::Mat p0 = {{0.5, 0.0}, {0.0, 0.5}};
    oracle::Mat p1 = {{3.0, 1.0}, {1.0, 2.0}};
    return GaussianTarget({{0.0, 0.0}, {1.0, -1.0}}, {p0, p1});
}

inline GaussianTarget standard_normal_1d() {
    return GaussianTarget({{0.0}}, {{{1.0}}});
}

}  // namespace testing_targets
