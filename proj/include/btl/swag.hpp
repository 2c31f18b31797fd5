#pragma once

#include <deque>

#include "btl/param_model.hpp"
#include "btl/prior.hpp"

namespace btl {

struct SwagConfig {
    int snapshot_interval = 1;    // steps between snapshots
    int max_rank = 2;             // L, columns of the deviation matrix
    int total_snapshots = 2;      // M
    double variance_epsilon = 1e-8;

    void validate() const;
};

// Running first/second moments over parameter snapshots plus a ring buffer of
// the most recent max_rank raw snapshots. Deviations are formed at finalize
// against the final running mean.
class SwagState {
public:
    SwagState(int dim, int max_rank);

    void update(const ParamVector& snapshot);

    int dim() const { return static_cast<int>(running_mean_.size()); }
    int count() const { return count_; }
    int max_rank() const { return max_rank_; }
    const ParamVector& running_mean() const { return running_mean_; }
    const ParamVector& running_sq_mean() const { return running_sq_mean_; }
    const std::deque<ParamVector>& ring() const { return ring_; }

private:
    int count_ = 0;
    int max_rank_;
    ParamVector running_mean_;
    ParamVector running_sq_mean_;
    std::deque<ParamVector> ring_;  // oldest first, holds min(count, max_rank)
};

// Builds the posterior Gaussian: mean = running mean, floored per-coordinate
// variances and deviation columns from the ring snapshots, scale 1.
LowRankGaussian finalize(const SwagState& state, const SwagConfig& cfg);

}  // namespace btl
