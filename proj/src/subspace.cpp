#include "msrs/subspace.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "msrs/errors.hpp"
#include "msrs/kernels.hpp"
#include "msrs/svd.hpp"

namespace msrs {

namespace {

constexpr double kOrthoTol = 1e-8;
constexpr double kZeroResidualTol = 1e-10;
constexpr double kDropRowTol = 1e-10;

std::vector<double> energies_of(const std::vector<double>& sigma, ExtractOptions::Energy mode) {
    std::vector<double> e(sigma.size());
    for (std::size_t i = 0; i < sigma.size(); ++i) {
        e[i] = mode == ExtractOptions::Energy::Sigma ? sigma[i] : sigma[i] * sigma[i];
    }
    return e;
}

// Rows of U^T restricted to the top r columns of U.
Matrix top_left_vectors_as_rows(const SvdResult& s, std::size_t r) {
    Matrix b(r, s.u.rows());
    for (std::size_t k = 0; k < r; ++k) {
        for (std::size_t i = 0; i < s.u.rows(); ++i) b(k, i) = s.u(i, k);
    }
    return b;
}

void require_orthonormal_rows(const Matrix& a, const char* what) {
    const Matrix gram = matmul_nt(a, a);
    const double dev = max_abs_diff(gram, Matrix::identity(a.rows()));
    if (dev > kOrthoTol) {
        throw config_error(std::string(what) + ": rows are not orthonormal (deviation " +
                           std::to_string(dev) + ")");
    }
}

} // namespace

ActivationBank make_bank(std::vector<Matrix> per_attribute_rows, int layer) {
    if (per_attribute_rows.empty()) throw config_error("make_bank: no attributes");
    const std::size_t d = per_attribute_rows[0].cols();
    ActivationBank bank;
    bank.layer = layer;
    bank.width = d;
    for (std::size_t i = 0; i < per_attribute_rows.size(); ++i) {
        const Matrix& rows = per_attribute_rows[i];
        if (rows.rows() == 0) {
            throw config_error("make_bank: attribute " + std::to_string(i) + " has no samples");
        }
        if (rows.cols() != d) throw config_error("make_bank: sample width mismatch");
        if (!rows.all_finite()) throw numeric_error("make_bank: non-finite activation");
        Matrix mean(1, d);
        for (std::size_t r = 0; r < rows.rows(); ++r) {
            kernels::active().add(mean.data(), rows.data() + r * d, mean.data(), d);
        }
        const double inv = 1.0 / static_cast<double>(rows.rows());
        kernels::active().scale(mean.data(), inv, mean.data(), d);
        bank.means.push_back(std::move(mean));
    }
    bank.samples = std::move(per_attribute_rows);
    return bank;
}

ActivationBank aggregate(const FrozenModel& model,
                         const std::vector<std::vector<std::vector<int>>>& sequences_per_attribute,
                         int layer) {
    if (sequences_per_attribute.empty()) throw config_error("aggregate: no attributes");
    const auto d = static_cast<std::size_t>(model.config().d_model);
    std::vector<Matrix> rows;
    for (std::size_t i = 0; i < sequences_per_attribute.size(); ++i) {
        const auto& seqs = sequences_per_attribute[i];
        if (seqs.empty()) {
            throw config_error("aggregate: attribute " + std::to_string(i) + " has no samples");
        }
        Matrix m(seqs.size(), d);
        for (std::size_t j = 0; j < seqs.size(); ++j) {
            const auto [logits, cap] = model.forward_capture(seqs[j], layer);
            const std::size_t last = cap.states.rows() - 1;
            for (std::size_t c = 0; c < d; ++c) m(j, c) = cap.states(last, c);
        }
        rows.push_back(std::move(m));
    }
    return make_bank(std::move(rows), layer);
}

std::size_t energy_rank(std::span<const double> sigma, double threshold) {
    if (sigma.empty()) throw config_error("energy_rank: empty spectrum");
    if (!(threshold > 0.0) || threshold > 1.0) {
        throw config_error("energy_rank: threshold must be in (0, 1]");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < sigma.size(); ++i) {
        if (sigma[i] < 0.0) throw config_error("energy_rank: negative singular value");
        if (i > 0 && sigma[i] > sigma[i - 1]) {
            throw config_error("energy_rank: spectrum is not non-increasing");
        }
        total += sigma[i];
    }
    if (total == 0.0) throw numeric_error("energy_rank: degenerate all-zero spectrum");

    double cum = 0.0;
    for (std::size_t r = 0; r < sigma.size(); ++r) {
        cum += sigma[r];
        if (cum / total >= threshold) return r + 1;
    }
    return sigma.size();
}

SubspaceBasis extract_shared(const ActivationBank& bank, const ExtractOptions& opts) {
    const std::size_t n = bank.attribute_count();
    const std::size_t d = bank.width;
    Matrix tau_c(d, n); // means as columns
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t r = 0; r < d; ++r) tau_c(r, i) = bank.means[i](0, r);
    }
    if (max_abs(tau_c) == 0.0) {
        throw numeric_error("extract_shared: all attribute means are zero (rank 0)");
    }

    const SvdResult s = svd(tau_c);
    const std::vector<double> e = energies_of(s.sigma, opts.energy);
    const std::size_t r_s = energy_rank(e, opts.threshold);

    SubspaceBasis b;
    b.kind = SubspaceBasis::Kind::Shared;
    b.basis = top_left_vectors_as_rows(s, r_s);
    const double total = kernels::sum(e.data(), e.size());
    b.energy_captured = kernels::sum(e.data(), r_s) / total;
    return b;
}

SubspaceBasis extract_private(const ActivationBank& bank, int attribute,
                              const SubspaceBasis& shared, const ExtractOptions& opts) {
    if (attribute < 0 || static_cast<std::size_t>(attribute) >= bank.attribute_count()) {
        throw config_error("extract_private: unknown attribute " + std::to_string(attribute));
    }
    if (shared.basis.cols() != bank.width) {
        throw config_error("extract_private: shared basis width mismatch");
    }

    // Activation matrix with samples (or the mean) as columns.
    Matrix h = opts.residual_source == ExtractOptions::ResidualSource::Samples
                   ? transpose(bank.samples[static_cast<std::size_t>(attribute)])
                   : transpose(bank.means[static_cast<std::size_t>(attribute)]);

    // residual = H - B^T (B H)
    const Matrix projected = matmul_tn(shared.basis, matmul(shared.basis, h));
    const Matrix residual = sub(h, projected);

    SubspaceBasis b;
    b.kind = SubspaceBasis::Kind::Private;
    b.attribute = attribute;
    if (max_abs(residual) <= kZeroResidualTol * std::max(1.0, max_abs(h))) {
        b.basis = Matrix(0, bank.width);
        b.energy_captured = 0.0;
        return b;
    }

    const SvdResult s = svd(residual);
    const std::vector<double> e = energies_of(s.sigma, opts.energy);
    const std::size_t r_i = energy_rank(e, opts.threshold);
    b.basis = top_left_vectors_as_rows(s, r_i);
    const double total = kernels::sum(e.data(), e.size());
    b.energy_captured = kernels::sum(e.data(), r_i) / total;
    return b;
}

const BlockDesc& AlignedSubspace::block_for_attribute(int attribute) const {
    for (const BlockDesc& b : layout) {
        if (b.kind == SubspaceBasis::Kind::Private && b.attribute == attribute) return b;
    }
    throw config_error("AlignedSubspace: unknown attribute " + std::to_string(attribute));
}

Matrix AlignedSubspace::slice_block(const BlockDesc& block) const {
    Matrix out(block.length, matrix.cols());
    for (std::size_t r = 0; r < block.length; ++r) {
        for (std::size_t c = 0; c < matrix.cols(); ++c) out(r, c) = matrix(block.offset + r, c);
    }
    return out;
}

namespace {

// Removes components of each block row along `against` rows, then
// re-orthonormalizes within the block; rows that collapse are dropped.
Matrix orthogonalize_block(const Matrix& block, const std::vector<Matrix>& against) {
    std::vector<std::vector<double>> kept;
    const std::size_t d = block.cols();
    for (std::size_t r = 0; r < block.rows(); ++r) {
        std::vector<double> w(block.row(r).begin(), block.row(r).end());
        for (const Matrix& m : against) {
            for (std::size_t p = 0; p < m.rows(); ++p) {
                const double proj = kernels::dot(w.data(), m.data() + p * d, d);
                kernels::active().axpy(-proj, m.data() + p * d, w.data(), d);
            }
        }
        for (const auto& prev : kept) {
            const double proj = kernels::dot(w.data(), prev.data(), d);
            kernels::active().axpy(-proj, prev.data(), w.data(), d);
        }
        const double norm = std::sqrt(kernels::sum_squares(w.data(), d));
        if (norm > kDropRowTol) {
            const double inv = 1.0 / norm;
            for (double& x : w) x *= inv;
            kept.push_back(std::move(w));
        }
    }
    Matrix out(kept.size(), d);
    for (std::size_t r = 0; r < kept.size(); ++r) {
        for (std::size_t c = 0; c < d; ++c) out(r, c) = kept[r][c];
    }
    return out;
}

// Proportional truncation to `cap` rows: every nonempty block keeps at least
// one row while the budget allows (blocks in declared order), the rest goes
// to the largest proportional deficit first.
std::vector<std::size_t> capped_ranks(const std::vector<std::size_t>& ranks, std::size_t cap) {
    const std::size_t total = [&] {
        std::size_t t = 0;
        for (std::size_t r : ranks) t += r;
        return t;
    }();
    if (cap == 0 || total <= cap) return ranks;

    std::vector<std::size_t> out(ranks.size(), 0);
    std::size_t budget = cap;
    for (std::size_t i = 0; i < ranks.size() && budget > 0; ++i) {
        if (ranks[i] > 0) {
            out[i] = 1;
            --budget;
        }
    }
    while (budget > 0) {
        std::size_t best = ranks.size();
        double best_deficit = 0.0;
        for (std::size_t i = 0; i < ranks.size(); ++i) {
            if (out[i] >= ranks[i]) continue;
            const double quota = static_cast<double>(ranks[i]) * static_cast<double>(cap) /
                                 static_cast<double>(total);
            const double deficit = quota - static_cast<double>(out[i]);
            if (best == ranks.size() || deficit > best_deficit) {
                best = i;
                best_deficit = deficit;
            }
        }
        if (best == ranks.size()) break;
        ++out[best];
        --budget;
    }
    return out;
}

} // namespace

AlignedSubspace build_aligned(const SubspaceBasis& shared, std::vector<SubspaceBasis> privates,
                              const ExtractOptions& opts) {
    const std::size_t d = shared.basis.cols();
    for (const SubspaceBasis& p : privates) {
        if (!p.empty() && p.basis.cols() != d) {
            throw config_error("build_aligned: basis width mismatch");
        }
    }

    Matrix shared_block = shared.basis;
    std::vector<Matrix> private_blocks;
    private_blocks.reserve(privates.size());
    for (const SubspaceBasis& p : privates) {
        private_blocks.push_back(p.empty() ? Matrix(0, d) : p.basis);
    }

    if (opts.cross_orthogonalize) {
        std::vector<Matrix> accumulated{shared_block};
        for (Matrix& block : private_blocks) {
            if (block.rows() == 0) continue;
            block = orthogonalize_block(block, accumulated);
            accumulated.push_back(block);
        }
    }

    if (opts.max_total_rank > 0) {
        std::vector<std::size_t> ranks{shared_block.rows()};
        for (const Matrix& b : private_blocks) ranks.push_back(b.rows());
        const std::vector<std::size_t> capped = capped_ranks(ranks, opts.max_total_rank);
        auto truncate = [&](Matrix& m, std::size_t keep) {
            if (keep == m.rows()) return;
            Matrix t(keep, d);
            for (std::size_t r = 0; r < keep; ++r) {
                for (std::size_t c = 0; c < d; ++c) t(r, c) = m(r, c);
            }
            m = std::move(t);
        };
        truncate(shared_block, capped[0]);
        for (std::size_t i = 0; i < private_blocks.size(); ++i) {
            truncate(private_blocks[i], capped[i + 1]);
        }
    }

    AlignedSubspace out;
    std::size_t total = shared_block.rows();
    for (const Matrix& b : private_blocks) total += b.rows();
    out.matrix = Matrix(total, d);

    std::size_t at = 0;
    auto append = [&](const Matrix& b, SubspaceBasis::Kind kind, int attribute) {
        BlockDesc desc;
        desc.kind = kind;
        desc.attribute = attribute;
        desc.offset = at;
        desc.length = b.rows();
        for (std::size_t r = 0; r < b.rows(); ++r) {
            for (std::size_t c = 0; c < d; ++c) out.matrix(at + r, c) = b(r, c);
        }
        at += b.rows();
        out.layout.push_back(desc);
    };
    append(shared_block, SubspaceBasis::Kind::Shared, -1);
    for (std::size_t i = 0; i < private_blocks.size(); ++i) {
        const int attr = privates[i].attribute >= 0 ? privates[i].attribute : static_cast<int>(i);
        append(private_blocks[i], SubspaceBasis::Kind::Private, attr);
        out.attribute_order.push_back(attr);
    }
    return out;
}

AlignedSubspace extract_all(const ActivationBank& bank, const ExtractOptions& opts) {
    const SubspaceBasis shared = extract_shared(bank, opts);
    std::vector<SubspaceBasis> privates;
    for (std::size_t i = 0; i < bank.attribute_count(); ++i) {
        privates.push_back(extract_private(bank, static_cast<int>(i), shared, opts));
    }
    return build_aligned(shared, std::move(privates), opts);
}

std::vector<double> principal_angles(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw config_error("principal_angles: width mismatch");
    if (a.rows() == 0 || b.rows() == 0) return {};
    require_orthonormal_rows(a, "principal_angles: first basis");
    require_orthonormal_rows(b, "principal_angles: second basis");

    const SvdResult s = svd(matmul_nt(a, b));
    const std::size_t k = std::min(a.rows(), b.rows());
    std::vector<double> angles(k);
    for (std::size_t i = 0; i < k; ++i) {
        angles[i] = std::acos(std::clamp(s.sigma[i], 0.0, 1.0));
    }
    return angles;
}

} // namespace msrs
