#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "msrs/matrix.hpp"
#include "msrs/subspace.hpp"
#include "msrs/tape.hpp"
#include "msrs/toymodel.hpp"

namespace msrs {

// Gating granularity for the mask network: no gating, one gate per subspace
// block, or one gate per basis row.
enum class Granularity { SameSpace, AttributeBlocks, RankWise };

// Trainable low-rank intervention
//   phi(h) = h + R^T diag(m(h)) (W h + b - R h)
// with a one-hidden-layer sigmoid-output mask network. The frozen reference
// subspace S_align carries the block layout used by prior masks and
// per-block gating.
struct SteeringModule {
    Matrix r_basis; // r x d
    Matrix w;       // r x d
    Matrix b;       // 1 x r
    Matrix mlp_w1;  // d x r, hidden = gelu(h * mlp_w1 + mlp_b1)
    Matrix mlp_b1;  // 1 x r
    Matrix mlp_w2;  // r x out_dim
    Matrix mlp_b2;  // 1 x out_dim
    Granularity granularity = Granularity::AttributeBlocks;
    AlignedSubspace s_align;
    double lambda1 = 0.3;
    double lambda2 = 0.5;
    int layer = 0;

    std::size_t rank() const { return r_basis.rows(); }
    std::size_t width() const { return r_basis.cols(); }
    // Raw mask-network output width: block count under AttributeBlocks,
    // otherwise r.
    std::size_t mask_output_dim() const;
};

enum class SteeringInit { Aligned, Random };

// Aligned init: R = S_align plus a small seeded perturbation (scale 1e-2),
// W = R's initial value, b = 0, mask output layer zeroed so every gate
// starts at 0.5. Random init: seeded orthonormal rows for R instead.
SteeringModule init_steering(const AlignedSubspace& s_align, Granularity granularity,
                             double lambda1, double lambda2, int layer, std::uint64_t seed,
                             SteeringInit init = SteeringInit::Aligned);

struct PriorMask {
    std::vector<double> values; // length r, entries 0 or 1
    int active_attribute = -1;
};

// Ones at the shared block and at the active attribute's block, zeros
// elsewhere.
PriorMask build_prior_mask(const std::vector<BlockDesc>& layout, int attribute);

// m(h) for one hidden state; length r (per-block weights broadcast within
// their block under AttributeBlocks, all ones under SameSpace).
std::vector<double> mask_weights(const SteeringModule& module, std::span<const double> h);

// phi(h); throws msrs::numeric_error on a non-finite intermediate.
std::vector<double> intervene(const SteeringModule& module, std::span<const double> h);

double loss_reg(std::span<const double> m, std::span<const double> m_prior);
// Cosine dissimilarity under the Frobenius inner product; both matrices must
// be nonzero.
double loss_align(const Matrix& r, const Matrix& s_align);
// -log softmax(logits)[gold]
double task_loss(std::span<const double> logits, int gold);

struct LossBreakdown {
    double task = 0.0;
    double reg = 0.0;
    double align = 0.0;
    double total = 0.0;
};

// --- tape graph pieces -------------------------------------------------

struct SteeringParamNodes {
    GradTape::Id r = -1, w = -1, b = -1;
    GradTape::Id mlp_w1 = -1, mlp_b1 = -1, mlp_w2 = -1, mlp_b2 = -1;
};

// Enters the module parameters on the tape. train_r = false freezes R
// (it still participates in the graph).
SteeringParamNodes add_steering_params(GradTape& tape, const SteeringModule& module,
                                       bool train_r = true);

// m(h_row) as a 1 x r node.
GradTape::Id mask_weights_node(GradTape& tape, const SteeringModule& module,
                               const SteeringParamNodes& params, GradTape::Id h_row);

// phi(h_row) as a 1 x d node.
GradTape::Id intervene_node(GradTape& tape, const SteeringModule& module,
                            const SteeringParamNodes& params, GradTape::Id h_row);

// ||m - m_prior||^2 as a scalar node.
GradTape::Id loss_reg_node(GradTape& tape, GradTape::Id mask, const PriorMask& prior);

// 1 - <R, S>/(||R|| ||S||) as a scalar node.
GradTape::Id loss_align_node(GradTape& tape, const SteeringParamNodes& params,
                             const Matrix& s_align);

// --- trainer ------------------------------------------------------------

struct TrainSample {
    int attribute = 0;
    std::vector<int> tokens;
    int label = 0;
};

enum class TrainPosition { LastToken, ImportantToken };

struct TrainConfig {
    double lr = 5e-3;
    int steps = 200;
    int batch_size = 2;
    std::uint64_t seed = 42;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    TrainPosition position = TrainPosition::LastToken;
    bool train_r = true;     // false: freeze R (fixed SVD-concat ablation arm)
    bool use_align = true;   // false: drop the alignment term entirely
};

struct StepRecord {
    int step = 0;
    LossBreakdown losses;
};

struct TrainResult {
    std::vector<StepRecord> log;
    bool aborted = false;
    std::string abort_reason;
};

// Adam on R, W, b and the mask network; the model stays frozen. Round-robin
// attribute batching from a seeded shuffle; deterministic for a fixed seed.
// A non-finite loss aborts the run and restores the last good parameters.
TrainResult train(SteeringModule& module, const FrozenModel& model,
                  const std::vector<TrainSample>& samples, const TrainConfig& config);

} // namespace msrs
