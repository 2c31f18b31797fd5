#include "btl/prior.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "btl/errors.hpp"

namespace btl {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

LowRankGaussian::LowRankGaussian(ParamVector mean, std::vector<double> diag_var, Matrix deviations,
                                 double scale, std::optional<double> dev_denom)
    : mean_(std::move(mean)),
      diag_var_(std::move(diag_var)),
      deviations_(std::move(deviations)),
      scale_(scale) {
    const int d = dim();
    if (static_cast<int>(diag_var_.size()) != d) {
        throw DimensionError("LowRankGaussian: diag_var length " + std::to_string(diag_var_.size()) +
                             " vs mean length " + std::to_string(d));
    }
    if (deviations_.cols() > 0 && deviations_.rows() != d) {
        throw DimensionError("LowRankGaussian: deviations have " + std::to_string(deviations_.rows()) +
                             " rows, expected " + std::to_string(d));
    }
    if (!(scale_ > 0.0)) throw ConfigError("LowRankGaussian: scale must be positive");
    for (double v : diag_var_) {
        if (!(v > 0.0)) throw ConfigError("LowRankGaussian: diagonal variances must be positive");
    }
    if (dev_denom.has_value()) {
        if (!(*dev_denom > 0.0)) throw ConfigError("LowRankGaussian: dev_denom must be positive");
        dev_denom_ = *dev_denom;
    } else {
        if (rank() == 1) {
            throw ConfigError("LowRankGaussian: rank 1 requires an explicit dev_denom");
        }
        dev_denom_ = rank() > 1 ? static_cast<double>(rank() - 1) : 1.0;
    }
    factorize();
}

void LowRankGaussian::factorize() {
    const int d = dim();
    const int r = rank();
    inv_a_.resize(d);
    double log_det_a = 0.0;
    for (int i = 0; i < d; ++i) {
        const double a = 0.5 * scale_ * diag_var_[i];
        inv_a_[i] = 1.0 / a;
        log_det_a += std::log(a);
    }
    b_coef_ = std::sqrt(scale_ / (2.0 * dev_denom_));

    if (r == 0) {
        capacity_chol_ = Matrix();
        log_det_ = log_det_a;
        return;
    }
    // capacity = I + B^T A^{-1} B, with B = b_coef * D
    Matrix cap(r, r, 0.0);
    for (int a = 0; a < r; ++a) {
        for (int b = a; b < r; ++b) {
            double s = 0.0;
            for (int i = 0; i < d; ++i) {
                s += deviations_(i, a) * inv_a_[i] * deviations_(i, b);
            }
            s *= b_coef_ * b_coef_;
            if (a == b) s += 1.0;
            cap(a, b) = cap(b, a) = s;
        }
    }
    capacity_chol_ = cholesky(cap);
    log_det_ = log_det_a + cholesky_log_det(capacity_chol_);
}

void LowRankGaussian::check_dim(const ParamVector& w, const char* op) const {
    if (static_cast<int>(w.size()) != dim()) {
        throw DimensionError(std::string(op) + ": input length " + std::to_string(w.size()) +
                             " does not match prior dimension " + std::to_string(dim()));
    }
    for (double x : w) {
        if (!std::isfinite(x)) throw ConfigError(std::string(op) + ": non-finite input");
    }
}

LowRankGaussian LowRankGaussian::rescaled(double lambda) const {
    if (!(lambda > 0.0)) throw ConfigError("rescale: lambda must be positive");
    return LowRankGaussian(mean_, diag_var_, deviations_, lambda, dev_denom_);
}

LowRankGaussian LowRankGaussian::truncated(int keep) const {
    if (keep < 0 || keep > rank()) {
        throw ConfigError("truncated: rank " + std::to_string(keep) + " outside [0, " +
                          std::to_string(rank()) + "]");
    }
    const int d = dim();
    std::vector<double> norms(rank());
    for (int c = 0; c < rank(); ++c) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += deviations_(i, c) * deviations_(i, c);
        norms[c] = s;
    }
    std::vector<int> order(rank());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return norms[a] > norms[b]; });
    order.resize(keep);
    std::sort(order.begin(), order.end());  // keep original column order

    Matrix kept(keep > 0 ? d : 0, keep, 0.0);
    for (int c = 0; c < keep; ++c)
        for (int i = 0; i < d; ++i) kept(i, c) = deviations_(i, order[c]);
    return LowRankGaussian(mean_, diag_var_, std::move(kept), scale_, dev_denom_);
}

double LowRankGaussian::log_density(const ParamVector& w) const {
    check_dim(w, "log_density");
    const int d = dim();
    const int r = rank();

    std::vector<double> u(d);  // A^{-1} (w - mean)
    double quad = 0.0;
    for (int i = 0; i < d; ++i) {
        const double rsd = w[i] - mean_[i];
        u[i] = rsd * inv_a_[i];
        quad += rsd * u[i];
    }
    if (r > 0) {
        std::vector<double> t(r, 0.0);  // B^T u
        for (int c = 0; c < r; ++c) {
            double s = 0.0;
            for (int i = 0; i < d; ++i) s += deviations_(i, c) * u[i];
            t[c] = b_coef_ * s;
        }
        const std::vector<double> s = cholesky_solve(capacity_chol_, t);
        for (int c = 0; c < r; ++c) quad -= t[c] * s[c];
    }
    return -0.5 * (d * kLog2Pi + log_det_ + quad);
}

ParamVector LowRankGaussian::grad_log_density(const ParamVector& w) const {
    check_dim(w, "grad_log_density");
    const int d = dim();
    const int r = rank();

    std::vector<double> u(d);
    for (int i = 0; i < d; ++i) u[i] = (w[i] - mean_[i]) * inv_a_[i];

    ParamVector grad(d);
    if (r == 0) {
        for (int i = 0; i < d; ++i) grad[i] = -u[i];
        return grad;
    }
    std::vector<double> t(r, 0.0);
    for (int c = 0; c < r; ++c) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += deviations_(i, c) * u[i];
        t[c] = b_coef_ * s;
    }
    const std::vector<double> s = cholesky_solve(capacity_chol_, t);
    // grad = -(u - A^{-1} B s)
    for (int i = 0; i < d; ++i) {
        double corr = 0.0;
        for (int c = 0; c < r; ++c) corr += deviations_(i, c) * s[c];
        grad[i] = -(u[i] - inv_a_[i] * b_coef_ * corr);
    }
    return grad;
}

ParamVector LowRankGaussian::sample(RngStream& rng) const {
    const int d = dim();
    const int r = rank();
    ParamVector w(mean_);
    const double diag_coef = std::sqrt(scale_ / 2.0);
    for (int i = 0; i < d; ++i) {
        w[i] += diag_coef * std::sqrt(diag_var_[i]) * rng.normal();
    }
    if (r > 0) {
        std::vector<double> z(r);
        for (int c = 0; c < r; ++c) z[c] = rng.normal();
        for (int i = 0; i < d; ++i) {
            double s = 0.0;
            for (int c = 0; c < r; ++c) s += deviations_(i, c) * z[c];
            w[i] += b_coef_ * s;
        }
    }
    return w;
}

CompositePrior::CompositePrior(ParamLayout layout,
                               std::optional<std::pair<std::string, LowRankGaussian>> learned,
                               std::vector<std::pair<std::string, IsotropicGaussian>> isotropic)
    : layout_(std::move(layout)), learned_(std::move(learned)), isotropic_(std::move(isotropic)) {
    std::set<std::string> covered_blocks;
    auto cover_group = [&](const std::string& group) {
        auto it = layout_.groups.find(group);
        if (it == layout_.groups.end()) {
            throw ConfigError("CompositePrior: no group named '" + group + "' in layout");
        }
        for (const auto& name : it->second) {
            if (!covered_blocks.insert(name).second) {
                throw ConfigError("CompositePrior: block '" + name + "' covered twice");
            }
        }
    };

    if (learned_.has_value()) {
        cover_group(learned_->first);
        learned_indices_ = layout_.group_indices(learned_->first);
        if (static_cast<int>(learned_indices_.size()) != learned_->second.dim()) {
            throw DimensionError("CompositePrior: learned prior dimension " +
                                 std::to_string(learned_->second.dim()) + " vs group '" +
                                 learned_->first + "' length " +
                                 std::to_string(learned_indices_.size()));
        }
    }
    for (const auto& [group, iso] : isotropic_) {
        if (!(iso.variance > 0.0)) {
            throw ConfigError("CompositePrior: isotropic variance for group '" + group +
                              "' must be positive");
        }
        cover_group(group);
        isotropic_indices_.push_back(layout_.group_indices(group));
    }
    for (const auto& b : layout_.blocks) {
        if (!covered_blocks.count(b.name)) {
            throw ConfigError("CompositePrior: block '" + b.name + "' not covered by any component");
        }
    }
}

double CompositePrior::log_density(const ParamVector& w) const {
    return log_density_and_grad(w).first;
}

std::pair<double, ParamVector> CompositePrior::log_density_and_grad(const ParamVector& w) const {
    if (static_cast<int>(w.size()) != layout_.total_dim) {
        throw DimensionError("CompositePrior: input length " + std::to_string(w.size()) +
                             " does not match layout total_dim " + std::to_string(layout_.total_dim));
    }
    double logp = 0.0;
    ParamVector grad(w.size(), 0.0);

    if (learned_.has_value()) {
        ParamVector slice(learned_indices_.size());
        for (size_t i = 0; i < learned_indices_.size(); ++i) slice[i] = w[learned_indices_[i]];
        logp += learned_->second.log_density(slice);
        const ParamVector g = learned_->second.grad_log_density(slice);
        for (size_t i = 0; i < learned_indices_.size(); ++i) grad[learned_indices_[i]] = g[i];
    }
    for (size_t c = 0; c < isotropic_.size(); ++c) {
        const double var = isotropic_[c].second.variance;
        const auto& idx = isotropic_indices_[c];
        double quad = 0.0;
        for (int i : idx) {
            quad += w[i] * w[i];
            grad[i] = -w[i] / var;
        }
        logp += -0.5 * (idx.size() * (kLog2Pi + std::log(var)) + quad / var);
    }
    return {logp, std::move(grad)};
}

ParamVector CompositePrior::mode() const {
    ParamVector m(layout_.total_dim, 0.0);
    if (learned_.has_value()) {
        const auto& mean = learned_->second.mean();
        for (size_t i = 0; i < learned_indices_.size(); ++i) m[learned_indices_[i]] = mean[i];
    }
    return m;
}

}  // namespace btl
