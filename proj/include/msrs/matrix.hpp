#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace msrs {

// Dense row-major f64 matrix. Immutable-by-convention value type: operations
// return new matrices, nothing here mutates shared state.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix row_vector(std::vector<double> v);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool all_finite() const;

    // Index of the first non-finite entry, flattened; size() when all finite.
    std::size_t first_non_finite() const;

    bool operator==(const Matrix& o) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Elementwise / BLAS-ish helpers on top of the kernel dispatch.
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix matmul(const Matrix& a, const Matrix& b);           // A * B
Matrix matmul_nt(const Matrix& a, const Matrix& b);        // A * B^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);        // A^T * B
Matrix transpose(const Matrix& a);

double frobenius_norm(const Matrix& a);
double frobenius_inner(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);

// max |A - B| over entries; shapes must match.
double max_abs_diff(const Matrix& a, const Matrix& b);

} // namespace msrs
