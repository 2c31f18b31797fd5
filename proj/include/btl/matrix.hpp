#pragma once

#include <cstddef>
#include <vector>

namespace btl {

// Dense row-major matrix of doubles. Everything here is desk scale; no BLAS.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * static_cast<size_t>(cols), fill) {}

    int rows() const { return rows_; }
    int cols() const { return cols_; }

    double& operator()(int i, int j) { return data_[static_cast<size_t>(i) * cols_ + j]; }
    double operator()(int i, int j) const { return data_[static_cast<size_t>(i) * cols_ + j]; }

    double* row(int i) { return data_.data() + static_cast<size_t>(i) * cols_; }
    const double* row(int i) const { return data_.data() + static_cast<size_t>(i) * cols_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    size_t size() const { return data_.size(); }

    bool operator==(const Matrix&) const = default;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
// Throws std::runtime_error on a non-positive pivot.
Matrix cholesky(const Matrix& a);

// Solves (L L^T) x = b given the lower factor L.
std::vector<double> cholesky_solve(const Matrix& chol_lower, const std::vector<double>& b);

// log det(L L^T) from the lower factor.
double cholesky_log_det(const Matrix& chol_lower);

// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
// values are sorted descending; vectors holds matching eigenvectors as columns.
struct SymmetricEigen {
    std::vector<double> values;
    Matrix vectors;
};
SymmetricEigen symmetric_eigen(const Matrix& a);

}  // namespace btl
