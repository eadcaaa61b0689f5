#include "msrs/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "msrs/errors.hpp"

namespace msrs {

namespace {

constexpr int kMaxSweeps = 60;
constexpr double kPairTol = 1e-15;

// One-sided Jacobi on a tall matrix A (d x n, d >= n): rotates column pairs
// until all pairs are mutually orthogonal relative to their norms. V
// accumulates the rotations, so A_in = A_out * V^T with A_out having
// orthogonal columns of norm sigma.
void jacobi_orthogonalize(Matrix& a, Matrix& v) {
    const std::size_t d = a.rows();
    const std::size_t n = a.cols();

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    const double x = a(i, p);
                    const double y = a(i, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if (app == 0.0 || aqq == 0.0) continue;
                if (std::fabs(apq) <= kPairTol * std::sqrt(app * aqq)) continue;

                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;

                for (std::size_t i = 0; i < d; ++i) {
                    const double x = a(i, p);
                    const double y = a(i, q);
                    a(i, p) = c * x - s * y;
                    a(i, q) = s * x + c * y;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double x = v(i, p);
                    const double y = v(i, q);
                    v(i, p) = c * x - s * y;
                    v(i, q) = s * x + c * y;
                }
                rotated = true;
            }
        }
        if (!rotated) break;
    }
}

// Deterministic orthonormal completion for exactly-zero columns: first
// standard basis vector whose residual against the existing columns keeps
// more than half its norm.
void complete_column(Matrix& u, std::size_t col) {
    const std::size_t d = u.rows();
    for (std::size_t cand = 0; cand < d; ++cand) {
        std::vector<double> w(d, 0.0);
        w[cand] = 1.0;
        for (std::size_t j = 0; j < u.cols(); ++j) {
            if (j == col) continue;
            double proj = 0.0;
            for (std::size_t i = 0; i < d; ++i) proj += w[i] * u(i, j);
            for (std::size_t i = 0; i < d; ++i) w[i] -= proj * u(i, j);
        }
        double norm2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) norm2 += w[i] * w[i];
        if (norm2 > 0.25) {
            const double inv = 1.0 / std::sqrt(norm2);
            for (std::size_t i = 0; i < d; ++i) u(i, col) = w[i] * inv;
            return;
        }
    }
    throw numeric_error("svd: failed to complete orthonormal basis");
}

SvdResult svd_tall(const Matrix& m) {
    const std::size_t d = m.rows();
    const std::size_t n = m.cols();

    Matrix a = m;
    Matrix v = Matrix::identity(n);
    jacobi_orthogonalize(a, v);

    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += a(i, j) * a(i, j);
        norms[j] = std::sqrt(s);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    SvdResult r;
    r.u = Matrix(d, n);
    r.v = Matrix(n, n);
    r.sigma.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        r.sigma[j] = norms[src];
        if (norms[src] > 0.0) {
            const double inv = 1.0 / norms[src];
            for (std::size_t i = 0; i < d; ++i) r.u(i, j) = a(i, src) * inv;
        }
        for (std::size_t i = 0; i < n; ++i) r.v(i, j) = v(i, src);
    }
    for (std::size_t j = 0; j < n; ++j) {
        if (r.sigma[j] == 0.0) complete_column(r.u, j);
    }
    return r;
}

void apply_sign_convention(SvdResult& r) {
    const std::size_t d = r.u.rows();
    const std::size_t nv = r.v.rows();
    for (std::size_t j = 0; j < r.sigma.size(); ++j) {
        std::size_t best = 0;
        double best_abs = -1.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double a = std::fabs(r.u(i, j));
            if (a > best_abs) { // strict: earliest row wins ties
                best_abs = a;
                best = i;
            }
        }
        if (r.u(best, j) < 0.0) {
            for (std::size_t i = 0; i < d; ++i) r.u(i, j) = -r.u(i, j);
            for (std::size_t i = 0; i < nv; ++i) r.v(i, j) = -r.v(i, j);
        }
    }
}

} // namespace

SvdResult svd(const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0) throw config_error("svd: empty matrix");
    const std::size_t bad = m.first_non_finite();
    if (bad != m.size()) {
        throw numeric_error("svd: non-finite entry at (" + std::to_string(bad / m.cols()) +
                            ", " + std::to_string(bad % m.cols()) + ")");
    }

    SvdResult r;
    if (m.rows() >= m.cols()) {
        r = svd_tall(m);
    } else {
        // Wide input: factor the transpose and swap the factors.
        SvdResult t = svd_tall(transpose(m));
        r.u = std::move(t.v);
        r.v = std::move(t.u);
        r.sigma = std::move(t.sigma);
    }
    apply_sign_convention(r);
    return r;
}

} // namespace msrs
