#pragma once

#include <span>
#include <vector>

#include "msrs/matrix.hpp"
#include "msrs/toymodel.hpp"

namespace msrs {

// Per-attribute layer-l activation samples plus their means.
struct ActivationBank {
    int layer = 0;
    std::size_t width = 0;       // d
    std::vector<Matrix> samples; // per attribute: N_i x d, rows are samples
    std::vector<Matrix> means;   // per attribute: 1 x d

    std::size_t attribute_count() const { return samples.size(); }
};

// Builds a bank from raw activation rows (one N_i x d matrix per attribute).
ActivationBank make_bank(std::vector<Matrix> per_attribute_rows, int layer);

// Captures the layer-l last-token state of every sequence and aggregates
// per-attribute means.
ActivationBank aggregate(const FrozenModel& model,
                         const std::vector<std::vector<std::vector<int>>>& sequences_per_attribute,
                         int layer);

struct SubspaceBasis {
    enum class Kind { Shared, Private };
    Kind kind = Kind::Shared;
    int attribute = -1;     // valid for Private
    Matrix basis;           // rank x d, orthonormal rows; rank 0 => empty
    double energy_captured = 0.0;

    std::size_t rank() const { return basis.rows(); }
    bool empty() const { return basis.rows() == 0; }
};

struct BlockDesc {
    SubspaceBasis::Kind kind = SubspaceBasis::Kind::Shared;
    int attribute = -1;
    std::size_t offset = 0;
    std::size_t length = 0;
};

// Block-row concatenation [shared; private_1; ...; private_n] with an
// explicit layout. Zero-length private blocks are kept in the layout so
// prior-mask indexing stays well defined.
struct AlignedSubspace {
    Matrix matrix; // r x d
    std::vector<BlockDesc> layout;
    std::vector<int> attribute_order;

    std::size_t total_rank() const { return matrix.rows(); }
    const BlockDesc& block_for_attribute(int attribute) const;
    Matrix slice_block(const BlockDesc& block) const;
};

struct ExtractOptions {
    double threshold = 0.90;
    enum class ResidualSource { Mean, Samples };
    ResidualSource residual_source = ResidualSource::Samples;
    enum class Energy { Sigma, SigmaSquared };
    Energy energy = Energy::Sigma;
    bool cross_orthogonalize = false;
    std::size_t max_total_rank = 0; // 0 = uncapped
};

// Smallest r with sum(top r energies) / sum(all) >= threshold. Spectrum must
// be non-negative, non-increasing and not identically zero; threshold in
// (0, 1].
std::size_t energy_rank(std::span<const double> sigma, double threshold);

// Top left singular vectors of the concatenated means [tau_1 | ... | tau_n]
// (d x n), rank chosen by the energy rule.
SubspaceBasis extract_shared(const ActivationBank& bank, const ExtractOptions& opts = {});

// Residual directions of attribute i after removing the shared projection.
// With ResidualSource::Samples the projection is removed from each sample
// vector and the residual matrix (d x N_i) is decomposed; with Mean the
// literal single-vector residual of tau_i is used. A numerically zero
// residual yields an explicit rank-0 outcome.
SubspaceBasis extract_private(const ActivationBank& bank, int attribute,
                              const SubspaceBasis& shared, const ExtractOptions& opts = {});

// Extraction pipeline: shared, one private per attribute, concatenation.
// Applies cross_orthogonalize and max_total_rank from opts.
AlignedSubspace build_aligned(const SubspaceBasis& shared, std::vector<SubspaceBasis> privates,
                              const ExtractOptions& opts = {});
AlignedSubspace extract_all(const ActivationBank& bank, const ExtractOptions& opts = {});

// Principal angles (radians, non-decreasing) between two orthonormal-row
// spans: arccos of the singular values of A * B^T, clamped to [0, 1].
std::vector<double> principal_angles(const Matrix& a, const Matrix& b);

} // namespace msrs
