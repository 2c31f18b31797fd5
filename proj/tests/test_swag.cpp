#include <doctest.h>

#include <cmath>

#include "btl/errors.hpp"
#include "btl/rng.hpp"
#include "btl/swag.hpp"
#include "oracles.hpp"

using namespace btl;

TEST_CASE("swag: two-point running mean") {
    SwagState state(2, 2);
    state.update({1.0, 2.0});
    state.update({3.0, 4.0});
    CHECK(state.count() == 2);
    CHECK(state.running_mean()[0] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(state.running_mean()[1] == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("swag: dimension mismatch is rejected") {
    SwagState state(2, 2);
    CHECK_THROWS_AS(state.update({1.0, 2.0, 3.0}), DimensionError);
}

TEST_CASE("swag: identical snapshots floor the variance and zero the deviations") {
    SwagState state(3, 2);
    const ParamVector w = {0.5, -1.0, 2.0};
    for (int i = 0; i < 5; ++i) state.update(w);
    const SwagConfig cfg{1, 2, 2, 1e-8};
    const LowRankGaussian g = finalize(state, cfg);
    for (int i = 0; i < 3; ++i) {
        CHECK(g.mean()[i] == doctest::Approx(w[i]).epsilon(1e-15));
        CHECK(g.diag_var()[i] == doctest::Approx(1e-8));
        for (int c = 0; c < g.rank(); ++c) CHECK(g.deviations()(i, c) == 0.0);
    }
}

TEST_CASE("swag: incremental mean matches the batch mean on 7 random snapshots") {
    RngStream rng(5);
    const int d = 6, n = 7;
    SwagState state(d, 3);
    std::vector<ParamVector> snaps;
    for (int t = 0; t < n; ++t) {
        ParamVector w(d);
        for (auto& v : w) v = rng.normal() * 3.0;
        snaps.push_back(w);
        state.update(w);
    }
    for (int i = 0; i < d; ++i) {
        double m = 0.0;
        for (const auto& w : snaps) m += w[i];
        m /= n;
        CHECK(std::abs(state.running_mean()[i] - m) <= 1e-12 * std::max(1.0, std::abs(m)));
    }
    // ring holds the most recent 3 in order
    CHECK(state.ring().size() == 3);
    CHECK(state.ring().back() == snaps.back());
    CHECK(state.ring().front() == snaps[n - 3]);
}

TEST_CASE("swag: finalize matches the dense covariance on the spec two-point example") {
    SwagState state(2, 2);
    state.update({1.0, 2.0});
    state.update({3.0, 4.0});
    const SwagConfig cfg{1, 2, 2, 1e-8};
    const LowRankGaussian g = finalize(state, cfg);

    CHECK(g.mean()[0] == doctest::Approx(2.0));
    CHECK(g.mean()[1] == doctest::Approx(3.0));
    CHECK(g.diag_var()[0] == doctest::Approx(2.0));
    CHECK(g.diag_var()[1] == doctest::Approx(2.0));

    // Sigma = diag(2,2)/2 + D D^T / (2*(L-1)) = [[2,1],[1,2]]
    const auto cov = oracle::dense_covariance(g);
    CHECK(cov[0][0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(cov[0][1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cov[1][0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cov[1][1] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("swag: finalized blend matches the dense assembly oracle at d=5 L=3") {
    RngStream rng(17);
    const int d = 5, rank = 3, n = 9;
    SwagState state(d, rank);
    std::vector<ParamVector> snaps;
    for (int t = 0; t < n; ++t) {
        ParamVector w(d);
        for (auto& v : w) v = rng.normal();
        snaps.push_back(w);
        state.update(w);
    }
    const SwagConfig cfg{1, rank, rank, 1e-8};
    const LowRankGaussian g = finalize(state, cfg);

    // dense: (1/2) diag + (1/(2(L-1))) sum over the last L snapshots
    const auto& mu = state.running_mean();
    oracle::Mat want = oracle::make_mat(d, d);
    for (int c = 0; c < rank; ++c) {
        const auto& w = snaps[n - rank + c];
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                want[i][j] += (w[i] - mu[i]) * (w[j] - mu[j]) / (2.0 * (rank - 1));
    }
    for (int i = 0; i < d; ++i) {
        double v = 0.0;
        for (int c = 0; c < rank; ++c) {
            const auto& w = snaps[n - rank + c];
            v += (w[i] - mu[i]) * (w[i] - mu[i]);
        }
        want[i][i] += 0.5 * std::max(1e-8, v / (rank - 1));
    }

    const auto got = oracle::dense_covariance(g);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) CHECK(std::abs(got[i][j] - want[i][j]) < 1e-10);
}

TEST_CASE("swag: implied covariance is positive definite (cholesky succeeds)") {
    RngStream rng(23);
    const int d = 4, rank = 3;
    SwagState state(d, rank);
    for (int t = 0; t < 6; ++t) {
        ParamVector w(d);
        for (auto& v : w) v = rng.normal() * 0.1;
        state.update(w);
    }
    const LowRankGaussian g = finalize(state, {1, rank, rank, 1e-8});
    CHECK_NOTHROW(oracle::dense_cholesky(oracle::dense_covariance(g)));
}

TEST_CASE("swag: mean is order-insensitive and finalize is pure") {
    RngStream rng(29);
    const int d = 3;
    std::vector<ParamVector> snaps;
    for (int t = 0; t < 6; ++t) {
        ParamVector w(d);
        for (auto& v : w) v = rng.normal();
        snaps.push_back(w);
    }
    SwagState fwd(d, 2), rev(d, 2);
    for (const auto& w : snaps) fwd.update(w);
    for (auto it = snaps.rbegin(); it != snaps.rend(); ++it) rev.update(*it);
    for (int i = 0; i < d; ++i) {
        CHECK(fwd.running_mean()[i] == doctest::Approx(rev.running_mean()[i]).epsilon(1e-12));
    }

    const SwagConfig cfg{1, 2, 2, 1e-8};
    const LowRankGaussian a = finalize(fwd, cfg);
    const LowRankGaussian b = finalize(fwd, cfg);
    CHECK(a.mean() == b.mean());
    CHECK(a.diag_var() == b.diag_var());
    CHECK(a.deviations() == b.deviations());
}

TEST_CASE("swag: too few snapshots is an error") {
    SwagState state(2, 4);
    state.update({1.0, 2.0});
    CHECK_THROWS_AS(finalize(state, {1, 4, 4, 1e-8}), ConfigError);
    CHECK_THROWS_AS((SwagConfig{1, 1, 4, 1e-8}).validate(), ConfigError);   // L < 2
    CHECK_THROWS_AS((SwagConfig{1, 4, 3, 1e-8}).validate(), ConfigError);   // M < L
    CHECK_THROWS_AS((SwagConfig{0, 2, 4, 1e-8}).validate(), ConfigError);   // interval < 1
}
