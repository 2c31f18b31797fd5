// Test-only reference implementations, deliberately independent of the
// library code paths they are used to check.
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "btl/matrix.hpp"
#include "btl/param_model.hpp"
#include "btl/prior.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<std::vector<double>>;

inline Mat make_mat(int r, int c, double fill = 0.0) { return Mat(r, Vec(c, fill)); }

// Textbook Cholesky (lower), separate from btl::cholesky on purpose.
inline Mat dense_cholesky(const Mat& a) {
    const int n = static_cast<int>(a.size());
    Mat l = make_mat(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[i][j];
            for (int k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
            if (i == j) {
                if (s <= 0.0) throw std::runtime_error("oracle cholesky: not PD");
                l[i][j] = std::sqrt(s);
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    return l;
}

inline Vec dense_solve(const Mat& l, const Vec& b) {
    const int n = static_cast<int>(b.size());
    Vec y(b);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < i; ++k) y[i] -= l[i][k] * y[k];
        y[i] /= l[i][i];
    }
    for (int i = n - 1; i >= 0; --i) {
        for (int k = i + 1; k < n; ++k) y[i] -= l[k][i] * y[k];
        y[i] /= l[i][i];
    }
    return y;
}

// Dense covariance implied by a low-rank-plus-diagonal prior:
// scale * (diag(var)/2 + D D^T / (2 * dev_denom)).
inline Mat dense_covariance(const btl::LowRankGaussian& prior) {
    const int d = prior.dim();
    Mat cov = make_mat(d, d);
    for (int i = 0; i < d; ++i) cov[i][i] = 0.5 * prior.scale() * prior.diag_var()[i];
    const double coef = prior.scale() / (2.0 * prior.dev_denom());
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
            double s = 0.0;
            for (int c = 0; c < prior.rank(); ++c) {
                s += prior.deviations()(i, c) * prior.deviations()(j, c);
            }
            cov[i][j] += coef * s;
        }
    }
    return cov;
}

// Multivariate normal log density through the dense route.
inline double dense_log_density(const Vec& mean, const Mat& cov, const Vec& w) {
    const int d = static_cast<int>(mean.size());
    const Mat l = dense_cholesky(cov);
    Vec r(d);
    for (int i = 0; i < d; ++i) r[i] = w[i] - mean[i];
    const Vec s = dense_solve(l, r);
    double quad = 0.0;
    for (int i = 0; i < d; ++i) quad += r[i] * s[i];
    double log_det = 0.0;
    for (int i = 0; i < d; ++i) log_det += 2.0 * std::log(l[i][i]);
    return -0.5 * (d * std::log(2.0 * 3.14159265358979323846) + log_det + quad);
}

inline Vec dense_grad_log_density(const Vec& mean, const Mat& cov, const Vec& w) {
    const int d = static_cast<int>(mean.size());
    const Mat l = dense_cholesky(cov);
    Vec r(d);
    for (int i = 0; i < d; ++i) r[i] = w[i] - mean[i];
    Vec s = dense_solve(l, r);
    for (auto& v : s) v = -v;
    return s;
}

// Central finite differences of a scalar function.
inline Vec central_differences(const std::function<double(const Vec&)>& f, const Vec& x,
                               double h = 1e-5) {
    Vec g(x.size());
    Vec xp = x;
    for (size_t i = 0; i < x.size(); ++i) {
        const double orig = xp[i];
        xp[i] = orig + h;
        const double fp = f(xp);
        xp[i] = orig - h;
        const double fm = f(xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline double rel_error(const Vec& a, const Vec& b) {
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

// Scalar-loop re-computation of the MLP forward pass straight from block
// reads, no shared code with btl::forward.
inline Mat scalar_forward(const btl::MlpModel& model, const btl::ParamVector& params,
                          const Mat& inputs) {
    const int n_layers = model.layer_count();
    Mat h = inputs;
    for (int l = 0; l < n_layers; ++l) {
        const int in = model.layer_dims[l], out = model.layer_dims[l + 1];
        const auto w = btl::read_block(params, model.layout.block("layer" + std::to_string(l) + ".weight"));
        const auto b = btl::read_block(params, model.layout.block("layer" + std::to_string(l) + ".bias"));
        Mat next = make_mat(static_cast<int>(h.size()), out);
        for (size_t i = 0; i < h.size(); ++i) {
            for (int o = 0; o < out; ++o) {
                double s = b[o];
                for (int k = 0; k < in; ++k) s += w[o * in + k] * h[i][k];
                if (l < n_layers - 1) {
                    s = model.activation == btl::Activation::tanh ? std::tanh(s)
                                                                  : (s > 0.0 ? s : 0.0);
                }
                next[i][o] = s;
            }
        }
        h = std::move(next);
    }
    return h;
}

// Multiclass perceptron; returns the number of training mistakes after
// convergence (0 means linearly separable within the iteration budget).
inline int perceptron_mistakes(const btl::Matrix& x, const std::vector<int>& y, int classes,
                               int max_epochs = 200) {
    const int n = x.rows(), d = x.cols();
    Mat w = make_mat(classes, d + 1);  // last column is the bias
    for (int epoch = 0; epoch < max_epochs; ++epoch) {
        int mistakes = 0;
        for (int i = 0; i < n; ++i) {
            int arg = 0;
            double best = -1e300;
            for (int c = 0; c < classes; ++c) {
                double s = w[c][d];
                for (int j = 0; j < d; ++j) s += w[c][j] * x(i, j);
                if (s > best) {
                    best = s;
                    arg = c;
                }
            }
            if (arg != y[i]) {
                ++mistakes;
                for (int j = 0; j < d; ++j) {
                    w[y[i]][j] += x(i, j);
                    w[arg][j] -= x(i, j);
                }
                w[y[i]][d] += 1.0;
                w[arg][d] -= 1.0;
            }
        }
        if (mistakes == 0) return 0;
    }
    int mistakes = 0;
    for (int i = 0; i < n; ++i) {
        int arg = 0;
        double best = -1e300;
        for (int c = 0; c < classes; ++c) {
            double s = w[c][d];
            for (int j = 0; j < d; ++j) s += w[c][j] * x(i, j);
            if (s > best) {
                best = s;
                arg = c;
            }
        }
        if (arg != y[i]) ++mistakes;
    }
    return mistakes;
}

inline double mean(const Vec& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / v.size();
}

inline double variance(const Vec& v) {
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / (v.size() - 1);
}

inline double standard_error(const Vec& v) { return std::sqrt(variance(v) / v.size()); }

}  // namespace oracle
