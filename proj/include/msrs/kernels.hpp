#pragma once

#include <cstddef>
#include <string>

namespace msrs::kernels {

// Dense f64 kernels. Every entry point has a scalar reference implementation
// and, on x86-64 with AVX2, a vectorized variant selected at runtime.
//
// Contract: for identical inputs every variant produces bit-identical output.
// This is what makes run/platform determinism hold regardless of which table
// the dispatcher picks, and it constrains the SIMD code: one rounding per
// multiply and one per add (no FMA), and the per-element accumulation order
// of matmul is the same k-sequential order as the scalar loop. Reductions
// (dot, sum, max) stay scalar in all tables for the same reason.
struct Table {
    const char* name;

    // c[i] = a[i] op b[i]
    void (*add)(const double* a, const double* b, double* c, std::size_t n);
    void (*sub)(const double* a, const double* b, double* c, std::size_t n);
    void (*mul)(const double* a, const double* b, double* c, std::size_t n);

    // c[i] = s * a[i]
    void (*scale)(const double* a, double s, double* c, std::size_t n);

    // y[i] += s * x[i]
    void (*axpy)(double s, const double* x, double* y, std::size_t n);

    // C(m x n) = A(m x k) * B(k x n), row-major, C overwritten.
    // Accumulation order per output element is k = 0..k-1.
    void (*matmul)(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n);
};

const Table& scalar_table();

// nullptr when AVX2 is unavailable (at build or at runtime).
const Table* avx2_table();

// Runtime-selected table. Honors MSRS_KERNELS=scalar|avx2 (checked once).
const Table& active();

// Scalar-only helpers shared by all paths (sequential order, deterministic).
double dot(const double* a, const double* b, std::size_t n);
double sum(const double* a, std::size_t n);
double sum_squares(const double* a, std::size_t n);

} // namespace msrs::kernels
