#include "btl/swag.hpp"

#include <algorithm>
#include <string>

#include "btl/errors.hpp"

namespace btl {

void SwagConfig::validate() const {
    if (max_rank < 2) throw ConfigError("swag: max_rank must be >= 2");
    if (total_snapshots < max_rank) throw ConfigError("swag: total_snapshots must be >= max_rank");
    if (snapshot_interval < 1) throw ConfigError("swag: snapshot_interval must be >= 1");
    if (!(variance_epsilon > 0.0)) throw ConfigError("swag: variance_epsilon must be positive");
}

SwagState::SwagState(int dim, int max_rank)
    : max_rank_(max_rank), running_mean_(dim, 0.0), running_sq_mean_(dim, 0.0) {
    if (dim <= 0) throw ConfigError("swag: dimension must be positive");
    if (max_rank < 1) throw ConfigError("swag: max_rank must be >= 1");
}

void SwagState::update(const ParamVector& snapshot) {
    if (static_cast<int>(snapshot.size()) != dim()) {
        throw DimensionError("swag update: snapshot length " + std::to_string(snapshot.size()) +
                             " does not match state dimension " + std::to_string(dim()));
    }
    ++count_;
    const double inv_n = 1.0 / count_;
    for (int i = 0; i < dim(); ++i) {
        running_mean_[i] += (snapshot[i] - running_mean_[i]) * inv_n;
        running_sq_mean_[i] += (snapshot[i] * snapshot[i] - running_sq_mean_[i]) * inv_n;
    }
    ring_.push_back(snapshot);
    if (static_cast<int>(ring_.size()) > max_rank_) ring_.pop_front();
}

LowRankGaussian finalize(const SwagState& state, const SwagConfig& cfg) {
    cfg.validate();
    if (state.count() < cfg.max_rank) {
        throw ConfigError("swag finalize: have " + std::to_string(state.count()) +
                          " snapshots, need at least max_rank = " + std::to_string(cfg.max_rank));
    }
    if (state.max_rank() < cfg.max_rank) {
        throw ConfigError("swag finalize: state ring capacity " + std::to_string(state.max_rank()) +
                          " is below cfg.max_rank " + std::to_string(cfg.max_rank));
    }
    const int d = state.dim();
    const int rank = cfg.max_rank;
    const auto& mean = state.running_mean();

    // Use the most recent `rank` snapshots from the ring.
    const auto& ring = state.ring();
    const int first = static_cast<int>(ring.size()) - rank;

    std::vector<double> diag_var(d, 0.0);
    Matrix dev(d, rank, 0.0);
    for (int c = 0; c < rank; ++c) {
        const ParamVector& snap = ring[first + c];
        for (int i = 0; i < d; ++i) {
            const double delta = snap[i] - mean[i];
            dev(i, c) = delta;
            diag_var[i] += delta * delta;
        }
    }
    const double inv_den = 1.0 / (rank - 1);
    for (int i = 0; i < d; ++i) {
        diag_var[i] = std::max(cfg.variance_epsilon, diag_var[i] * inv_den);
    }
    return LowRankGaussian(mean, std::move(diag_var), std::move(dev), 1.0,
                           static_cast<double>(rank - 1));
}

}  // namespace btl
