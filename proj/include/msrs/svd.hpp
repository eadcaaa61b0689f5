#pragma once

#include <vector>

#include "msrs/matrix.hpp"

namespace msrs {

// Thin SVD: M (d x n) = U * diag(sigma) * V^T with U (d x k), V (n x k),
// k = min(d, n).
//
// Guarantees:
//  - U, V have orthonormal columns (max deviation <= 1e-10);
//  - sigma is non-increasing and non-negative;
//  - reconstruction max-error <= 1e-8 * sigma[0];
//  - sign convention: the largest-magnitude entry of every column of U is
//    non-negative, ties broken toward the earliest row (V flips jointly);
//  - bit-deterministic across runs and platforms for identical input bits
//    (fixed cyclic sweep order, arithmetic restricted to +,-,*,/,sqrt).
struct SvdResult {
    Matrix u;                  // d x k, orthonormal columns
    std::vector<double> sigma; // length k, non-increasing, >= 0
    Matrix v;                  // n x k, orthonormal columns
};

// One-sided Jacobi. Throws msrs::numeric_error on non-finite input, naming
// the offending entry.
SvdResult svd(const Matrix& m);

} // namespace msrs
