#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "msrs/matrix.hpp"
#include "msrs/tape.hpp"

namespace msrs {

struct ModelConfig {
    int vocab_size = 64;
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 4;
    int max_seq_len = 32;
    std::uint64_t seed = 42;
};

// Hidden states captured at one layer: states row t is the residual-stream
// vector for token t at the output of block `layer` (input of block layer+1).
struct HiddenCapture {
    int layer = 0;
    Matrix states; // T x d
    std::vector<int> token_ids;
};

// Seeded decoder-only transformer with frozen weights. Pre-norm blocks,
// GELU feed-forward, learned position embeddings. All weights are plain
// matrices entered on a tape as non-trainable inputs per forward call, so
// gradients propagate through the frozen stack into whatever an
// intervention hook attaches.
class FrozenModel {
public:
    struct Block {
        Matrix ln1_gain, ln1_bias;
        Matrix wq, wk, wv, wo; // d x d, applied as x * W
        Matrix bq, bk, bv, bo; // 1 x d
        Matrix ln2_gain, ln2_bias;
        Matrix w_ff1; // d x 4d
        Matrix b_ff1; // 1 x 4d
        Matrix w_ff2; // 4d x d
        Matrix b_ff2; // 1 x d
    };

    const ModelConfig& config() const { return config_; }
    std::uint64_t checksum() const;

    // Logits (T x vocab) for a token sequence.
    Matrix forward(const std::vector<int>& tokens) const;

    // Logits plus the layer-l hidden states.
    std::pair<Matrix, HiddenCapture> forward_capture(const std::vector<int>& tokens,
                                                     int layer) const;

    // Replaces h_p by phi(h_p) at every placed position before the remaining
    // layers run. Positions must be in range and distinct.
    Matrix forward_intervene(
        const std::vector<int>& tokens, int layer, const std::vector<std::size_t>& positions,
        const std::function<std::vector<double>(std::span<const double>)>& phi) const;

    // Tape-level forward. hook(tape, row_node, position) returns the replaced
    // 1 x d row; pass an empty position list (or null hook) for a plain
    // forward. Returns the logits node; *capture_out receives the layer-l
    // states when non-null (pre-intervention values).
    using InterveneHook = std::function<GradTape::Id(GradTape&, GradTape::Id, std::size_t)>;
    GradTape::Id build_forward(GradTape& tape, const std::vector<int>& tokens, int layer,
                               const std::vector<std::size_t>& positions,
                               const InterveneHook& hook, Matrix* capture_out = nullptr) const;

    // Weight tensors in serialization order.
    std::vector<const Matrix*> weight_list() const;
    std::vector<Matrix*> weight_list();

    ModelConfig config_;
    Matrix tok_emb; // vocab x d
    Matrix pos_emb; // max_seq x d
    std::vector<Block> blocks;
    Matrix lnf_gain, lnf_bias; // 1 x d
    Matrix w_out;              // d x vocab
    Matrix b_out;              // 1 x vocab

private:
    void validate_tokens(const std::vector<int>& tokens) const;
};

// Deterministic weights from config.seed; rejects invalid dimension relations.
FrozenModel init_model(const ModelConfig& config);

} // namespace msrs
