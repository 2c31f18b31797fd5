#include <doctest.h>

#include <cmath>
#include <limits>

#include "btl/errors.hpp"
#include "btl/prior.hpp"
#include "oracles.hpp"

using namespace btl;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

LowRankGaussian random_prior(int d, int rank, double scale, uint64_t seed) {
    RngStream rng(seed);
    ParamVector mean(d);
    std::vector<double> diag(d);
    for (int i = 0; i < d; ++i) {
        mean[i] = rng.normal();
        diag[i] = 0.1 + rng.uniform();
    }
    Matrix dev(rank > 0 ? d : 0, rank);
    for (int c = 0; c < rank; ++c)
        for (int i = 0; i < d; ++i) dev(i, c) = rng.normal();
    return LowRankGaussian(std::move(mean), std::move(diag), std::move(dev), scale);
}

LowRankGaussian standard_iso(int d) {
    // diag_var = 2 so the blended covariance is the identity
    return LowRankGaussian(ParamVector(d, 0.0), std::vector<double>(d, 2.0), Matrix(), 1.0);
}

}  // namespace

TEST_CASE("prior: standard normal mode and unit quadratic") {
    const LowRankGaussian p = standard_iso(2);
    CHECK(p.log_density({0.0, 0.0}) == doctest::Approx(-kLog2Pi).epsilon(1e-12));
    CHECK(p.log_density({1.0, 0.0}) == doctest::Approx(-kLog2Pi - 0.5).epsilon(1e-12));
    CHECK(p.log_density({0.0, 0.0}) == doctest::Approx(-1.837877).epsilon(1e-6));
}

TEST_CASE("prior: rescale by 4 on the isotropic case") {
    const LowRankGaussian p = standard_iso(2).rescaled(4.0);
    // log N((2,0); 0, 4I) = -log(8 pi) - 1/2
    CHECK(p.log_density({2.0, 0.0}) ==
          doctest::Approx(-std::log(8.0 * 3.14159265358979323846) - 0.5).epsilon(1e-12));
    CHECK(p.log_density({2.0, 0.0}) == doctest::Approx(-3.72417).epsilon(1e-5));
}

TEST_CASE("prior: rescale with lambda = 1 changes nothing, mean is invariant") {
    const LowRankGaussian p = random_prior(5, 2, 1.0, 3);
    const LowRankGaussian q = p.rescaled(1.0);
    RngStream rng(4);
    for (int t = 0; t < 10; ++t) {
        ParamVector w(5);
        for (auto& v : w) v = 2.0 * rng.normal();
        CHECK(p.log_density(w) == doctest::Approx(q.log_density(w)).epsilon(1e-14));
    }
    // the mode stays at the mean for every lambda
    for (double lam : {0.5, 1.0, 10.0, 1000.0}) {
        const LowRankGaussian r = p.rescaled(lam);
        const ParamVector g = r.grad_log_density(r.mean());
        for (double v : g) CHECK(std::abs(v) < 1e-12);
    }
    CHECK_THROWS_AS(p.rescaled(0.0), ConfigError);
    CHECK_THROWS_AS(p.rescaled(-2.0), ConfigError);
}

TEST_CASE("prior: woodbury log density matches the dense cholesky oracle") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const int d = 2 + static_cast<int>(seed % 7) * 7;     // up to 44
        const int rank = static_cast<int>(seed % 4) * 3;      // 0, 3, 6, 9
        const double scale = seed % 3 == 0 ? 0.5 : (seed % 3 == 1 ? 1.0 : 10.0);
        const LowRankGaussian p = random_prior(d, rank, scale, 100 + seed);
        const auto cov = oracle::dense_covariance(p);

        RngStream rng(200 + seed);
        ParamVector w(d);
        for (int i = 0; i < d; ++i) w[i] = p.mean()[i] + rng.normal();

        const double want = oracle::dense_log_density(p.mean(), cov, w);
        const double got = p.log_density(w);
        CHECK(std::abs(got - want) <= 1e-8 * std::max(1.0, std::abs(want)));

        const auto want_grad = oracle::dense_grad_log_density(p.mean(), cov, w);
        const auto got_grad = p.grad_log_density(w);
        CHECK(oracle::rel_error(got_grad, want_grad) < 1e-8);
    }
}

TEST_CASE("prior: gradient basics") {
    const LowRankGaussian iso = standard_iso(2);
    const ParamVector g = iso.grad_log_density({1.0, -2.0});
    CHECK(g[0] == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(g[1] == doctest::Approx(2.0).epsilon(1e-12));

    const LowRankGaussian p = random_prior(6, 3, 2.0, 7);
    const ParamVector zero = p.grad_log_density(p.mean());
    for (double v : zero) CHECK(std::abs(v) < 1e-12);

    RngStream rng(8);
    ParamVector w(6);
    for (int i = 0; i < 6; ++i) w[i] = p.mean()[i] + 0.5 * rng.normal();
    const auto fd = oracle::central_differences(
        [&](const oracle::Vec& x) { return p.log_density(x); }, w);
    CHECK(oracle::rel_error(p.grad_log_density(w), fd) < 1e-6);
}

TEST_CASE("prior: log density rejects bad input") {
    const LowRankGaussian p = standard_iso(2);
    CHECK_THROWS_AS(p.log_density({1.0}), DimensionError);
    CHECK_THROWS_AS(p.log_density({1.0, std::numeric_limits<double>::infinity()}), ConfigError);
}

TEST_CASE("prior: rank-0 path equals the direct diagonal computation") {
    RngStream rng(11);
    const int d = 4;
    ParamVector mean(d);
    std::vector<double> diag(d);
    for (int i = 0; i < d; ++i) {
        mean[i] = rng.normal();
        diag[i] = 0.2 + rng.uniform();
    }
    const LowRankGaussian p(mean, diag, Matrix(), 3.0);
    ParamVector w(d);
    for (int i = 0; i < d; ++i) w[i] = mean[i] + rng.normal();

    double want = 0.0;
    for (int i = 0; i < d; ++i) {
        const double var = 3.0 * 0.5 * diag[i];
        want += -0.5 * (kLog2Pi + std::log(var) + (w[i] - mean[i]) * (w[i] - mean[i]) / var);
    }
    CHECK(p.log_density(w) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("prior: sampling matches the implied covariance") {
    const LowRankGaussian p = random_prior(4, 2, 1.5, 13);
    const auto cov = oracle::dense_covariance(p);

    RngStream rng(14);
    const int draws = 100000;
    std::vector<double> mean_acc(4, 0.0);
    oracle::Mat cov_acc = oracle::make_mat(4, 4);
    for (int t = 0; t < draws; ++t) {
        const ParamVector w = p.sample(rng);
        for (int i = 0; i < 4; ++i) mean_acc[i] += w[i];
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                cov_acc[i][j] += (w[i] - p.mean()[i]) * (w[j] - p.mean()[j]);
    }
    double max_sd = 0.0;
    for (int i = 0; i < 4; ++i) max_sd = std::max(max_sd, std::sqrt(cov[i][i]));
    for (int i = 0; i < 4; ++i) {
        CHECK(std::abs(mean_acc[i] / draws - p.mean()[i]) < 0.05 * max_sd);
        for (int j = 0; j < 4; ++j) {
            CHECK(std::abs(cov_acc[i][j] / draws - cov[i][j]) <
                  0.05 * std::max(1.0, std::abs(cov[i][j])) + 0.02 * max_sd * max_sd);
        }
    }

    // fixed seed reproduces the draw; collapsed prior stays at the mean
    RngStream r1(15), r2(15);
    CHECK(p.sample(r1) == p.sample(r2));

    const LowRankGaussian tight(ParamVector(3, 1.0), std::vector<double>(3, 1e-8), Matrix(), 1.0);
    RngStream r3(16);
    const ParamVector w = tight.sample(r3);
    for (double v : w) CHECK(std::abs(v - 1.0) < 1e-3);
}

TEST_CASE("prior: density integrates to one on a 2-d box") {
    const LowRankGaussian p = random_prior(2, 2, 1.0, 17);
    const auto cov = oracle::dense_covariance(p);
    const double sd = std::sqrt(std::max(cov[0][0], cov[1][1]));
    const double half = 8.0 * sd;
    const int n = 400;
    const double h = 2.0 * half / n;
    double integral = 0.0;
    ParamVector w(2);
    for (int i = 0; i <= n; ++i) {
        w[0] = p.mean()[0] - half + i * h;
        const double wx = (i == 0 || i == n) ? 0.5 : 1.0;
        for (int j = 0; j <= n; ++j) {
            w[1] = p.mean()[1] - half + j * h;
            const double wy = (j == 0 || j == n) ? 0.5 : 1.0;
            integral += wx * wy * std::exp(p.log_density(w));
        }
    }
    integral *= h * h;
    CHECK(integral == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("prior: truncation keeps the largest columns and the denominator") {
    ParamVector mean(3, 0.0);
    std::vector<double> diag(3, 1.0);
    Matrix dev(3, 3, 0.0);
    dev(0, 0) = 1.0;   // norm 1
    dev(1, 1) = 3.0;   // norm 3
    dev(2, 2) = 2.0;   // norm 2
    const LowRankGaussian p(mean, diag, dev, 1.0);
    CHECK(p.dev_denom() == doctest::Approx(2.0));

    const LowRankGaussian t2 = p.truncated(2);
    CHECK(t2.rank() == 2);
    CHECK(t2.dev_denom() == doctest::Approx(2.0));  // unchanged by truncation
    CHECK(t2.deviations()(1, 0) == doctest::Approx(3.0));
    CHECK(t2.deviations()(2, 1) == doctest::Approx(2.0));

    const LowRankGaussian t0 = p.truncated(0);
    CHECK(t0.rank() == 0);
    CHECK_THROWS_AS(p.truncated(4), ConfigError);
    CHECK_THROWS_AS(p.truncated(-1), ConfigError);
}

TEST_CASE("composite: additivity, joint mode, and the block-dense oracle") {
    ParamLayout layout;
    layout.blocks = {{"fe", 0, 3, 1}, {"out", 3, 2, 1}};
    layout.groups["feature_extractor"] = {"fe"};
    layout.groups["head"] = {"out"};
    layout.total_dim = 5;
    layout.validate();

    SUBCASE("two standard-normal blocks at zero") {
        CompositePrior prior(layout, std::nullopt,
                             {{"feature_extractor", IsotropicGaussian{1.0}},
                              {"head", IsotropicGaussian{1.0}}});
        const auto [logp, grad] = prior.log_density_and_grad(ParamVector(5, 0.0));
        CHECK(logp == doctest::Approx(-2.5 * kLog2Pi).epsilon(1e-12));
        for (double g : grad) CHECK(g == 0.0);
    }

    SUBCASE("learned block at its mean, head at zero: gradient vanishes") {
        const LowRankGaussian learned = random_prior(3, 2, 1.0, 19);
        CompositePrior prior(layout, std::make_pair(std::string("feature_extractor"), learned),
                             {{"head", IsotropicGaussian{0.5}}});
        ParamVector w(5, 0.0);
        for (int i = 0; i < 3; ++i) w[i] = learned.mean()[i];
        const auto [logp, grad] = prior.log_density_and_grad(w);
        for (double g : grad) CHECK(std::abs(g) < 1e-12);
    }

    SUBCASE("random composite matches the block-dense oracle") {
        const LowRankGaussian learned = random_prior(3, 2, 2.0, 23);
        const double head_var = 0.7;
        CompositePrior prior(layout, std::make_pair(std::string("feature_extractor"), learned),
                             {{"head", IsotropicGaussian{head_var}}});
        RngStream rng(24);
        ParamVector w(5);
        for (auto& v : w) v = rng.normal();

        const auto cov = oracle::dense_covariance(learned);
        const oracle::Vec fe_w{w[0], w[1], w[2]};
        double want = oracle::dense_log_density(learned.mean(), cov, fe_w);
        for (int i = 3; i < 5; ++i) {
            want += -0.5 * (kLog2Pi + std::log(head_var) + w[i] * w[i] / head_var);
        }
        const auto [logp, grad] = prior.log_density_and_grad(w);
        CHECK(std::abs(logp - want) <= 1e-8 * std::max(1.0, std::abs(want)));

        const auto fd = oracle::central_differences(
            [&](const oracle::Vec& x) { return prior.log_density(x); }, w);
        CHECK(oracle::rel_error(grad, fd) < 1e-6);
    }

    SUBCASE("uncovered or doubly covered blocks are rejected") {
        CHECK_THROWS_AS(CompositePrior(layout, std::nullopt,
                                       {{"head", IsotropicGaussian{1.0}}}),
                        ConfigError);
        CHECK_THROWS_AS(CompositePrior(layout, std::nullopt,
                                       {{"feature_extractor", IsotropicGaussian{1.0}},
                                        {"feature_extractor", IsotropicGaussian{1.0}},
                                        {"head", IsotropicGaussian{1.0}}}),
                        ConfigError);
        const LowRankGaussian wrong_dim = random_prior(2, 0, 1.0, 29);
        CHECK_THROWS_AS(CompositePrior(layout,
                                       std::make_pair(std::string("feature_extractor"), wrong_dim),
                                       {{"head", IsotropicGaussian{1.0}}}),
                        DimensionError);
    }
}

TEST_CASE("prior: rank 1 requires an explicit denominator") {
    Matrix dev(2, 1, 1.0);
    CHECK_THROWS_AS(LowRankGaussian(ParamVector(2, 0.0), {1.0, 1.0}, dev, 1.0), ConfigError);
    CHECK_NOTHROW(LowRankGaussian(ParamVector(2, 0.0), {1.0, 1.0}, dev, 1.0, 2.0));
}
