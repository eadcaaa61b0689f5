#include "msrs/placement.hpp"

#include <cmath>

#include "msrs/errors.hpp"
#include "msrs/kernels.hpp"

namespace msrs {

std::vector<double> project_block(const Matrix& block, std::span<const double> h) {
    if (block.rows() == 0) return std::vector<double>(h.size(), 0.0);
    if (block.cols() != h.size()) throw config_error("project_block: width mismatch");

    const std::size_t r = block.rows();
    const std::size_t d = block.cols();
    std::vector<double> coeff(r);
    for (std::size_t i = 0; i < r; ++i) {
        coeff[i] = kernels::dot(block.data() + i * d, h.data(), d);
    }
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        kernels::active().axpy(coeff[i], block.data() + i * d, out.data(), d);
    }
    return out;
}

double relevance_score(const Matrix& block, std::span<const double> h) {
    const std::vector<double> p = project_block(block, h);
    return std::sqrt(kernels::sum_squares(p.data(), p.size()));
}

PlacementDecision select_position(const Matrix& block, const HiddenCapture& capture,
                                  PlacementStrategy strategy, int attribute) {
    const std::size_t t_len = capture.states.rows();
    if (t_len == 0) throw config_error("select_position: empty capture");

    PlacementDecision d;
    d.attribute = attribute;
    d.strategy = strategy;
    d.scores.resize(t_len);
    for (std::size_t t = 0; t < t_len; ++t) {
        d.scores[t] = relevance_score(block, capture.states.row(t));
    }

    if (strategy == PlacementStrategy::LastToken) {
        d.position = t_len - 1;
        return d;
    }

    bool all_zero = true;
    std::size_t best = 0;
    double best_score = d.scores[0];
    for (std::size_t t = 0; t < t_len; ++t) {
        if (d.scores[t] != 0.0) all_zero = false;
        if (d.scores[t] > best_score) { // strict: ties keep the earliest index
            best_score = d.scores[t];
            best = t;
        }
    }
    if (all_zero) {
        d.position = t_len - 1;
        d.fallback_last = true;
    } else {
        d.position = best;
    }
    return d;
}

Matrix scoring_block(const Matrix& trained_r, const AlignedSubspace& layout, int attribute,
                     bool include_shared, bool orthonormalize) {
    if (trained_r.rows() != layout.total_rank() || trained_r.cols() != layout.matrix.cols()) {
        throw config_error("scoring_block: trained R does not match the layout");
    }
    const std::size_t d = trained_r.cols();

    std::vector<std::pair<std::size_t, std::size_t>> spans; // offset, length
    if (include_shared) {
        for (const BlockDesc& b : layout.layout) {
            if (b.kind == SubspaceBasis::Kind::Shared) spans.emplace_back(b.offset, b.length);
        }
    }
    const BlockDesc& priv = layout.block_for_attribute(attribute);
    spans.emplace_back(priv.offset, priv.length);

    std::size_t rows = 0;
    for (const auto& [off, len] : spans) rows += len;
    Matrix out(rows, d);
    std::size_t at = 0;
    for (const auto& [off, len] : spans) {
        for (std::size_t r = 0; r < len; ++r) {
            for (std::size_t c = 0; c < d; ++c) out(at + r, c) = trained_r(off + r, c);
        }
        at += len;
    }

    if (!orthonormalize || out.rows() == 0) return out;

    // Modified Gram-Schmidt, dropping collapsed rows.
    std::vector<std::vector<double>> kept;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        std::vector<double> w(out.row(r).begin(), out.row(r).end());
        for (const auto& prev : kept) {
            const double proj = kernels::dot(w.data(), prev.data(), d);
            kernels::active().axpy(-proj, prev.data(), w.data(), d);
        }
        const double norm = std::sqrt(kernels::sum_squares(w.data(), d));
        if (norm > 1e-10) {
            for (double& x : w) x /= norm;
            kept.push_back(std::move(w));
        }
    }
    Matrix ortho(kept.size(), d);
    for (std::size_t r = 0; r < kept.size(); ++r) {
        for (std::size_t c = 0; c < d; ++c) ortho(r, c) = kept[r][c];
    }
    return ortho;
}

} // namespace msrs
