#pragma once

#include <span>
#include <vector>

#include "msrs/matrix.hpp"
#include "msrs/subspace.hpp"
#include "msrs/toymodel.hpp"

namespace msrs {

enum class PlacementStrategy { LastToken, ImportantToken };

struct PlacementDecision {
    int attribute = -1;
    std::vector<double> scores; // s_{i,t}, one per token
    std::size_t position = 0;
    PlacementStrategy strategy = PlacementStrategy::LastToken;
    bool fallback_last = false; // all-zero scores, position forced to T-1
};

// R_i^T R_i h. An empty block (r_i = 0) projects to the zero vector.
std::vector<double> project_block(const Matrix& block, std::span<const double> h);

// L2 norm of the block projection.
double relevance_score(const Matrix& block, std::span<const double> h);

// ImportantToken: argmax of the scores, ties toward the smallest index;
// all-zero scores fall back to the last token and set the flag. LastToken:
// position T-1 (scores still reported).
PlacementDecision select_position(const Matrix& block, const HiddenCapture& capture,
                                  PlacementStrategy strategy, int attribute = -1);

// The attribute's slice of a trained R for scoring: the private block by
// default, optionally stacked under the shared block, optionally
// re-orthonormalized (dropping collapsed rows).
Matrix scoring_block(const Matrix& trained_r, const AlignedSubspace& layout, int attribute,
                     bool include_shared = false, bool orthonormalize = false);

} // namespace msrs
