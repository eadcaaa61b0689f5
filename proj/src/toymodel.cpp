#include "msrs/toymodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "msrs/errors.hpp"
#include "msrs/rng.hpp"

namespace msrs {

namespace {

constexpr double kInitStd = 0.08;
// The unembedding is frozen, so its scale sets the reachable logit range;
// too small and every distribution stays near uniform no matter how the
// stream is steered.
constexpr double kUnembedStd = 0.30;
constexpr double kMaskedScore = -1e30;

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double std_dev) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.gaussian() * std_dev;
    return m;
}

Matrix constant_row(std::size_t cols, double v) {
    Matrix m(1, cols);
    for (std::size_t i = 0; i < cols; ++i) m(0, i) = v;
    return m;
}

std::uint64_t fnv1a_update(std::uint64_t h, const Matrix& m) {
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(m.data());
    const std::size_t n = m.size() * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

FrozenModel init_model(const ModelConfig& config) {
    if (config.vocab_size < 1 || config.d_model < 1 || config.n_layers < 1 ||
        config.n_heads < 1 || config.max_seq_len < 1) {
        throw config_error("init_model: all dimensions must be >= 1");
    }
    if (config.d_model % config.n_heads != 0) {
        throw config_error("init_model: d_model must be divisible by n_heads");
    }

    Rng rng(config.seed);
    const auto v = static_cast<std::size_t>(config.vocab_size);
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto ff = 4 * d;

    FrozenModel m;
    m.config_ = config;
    m.tok_emb = gaussian_matrix(rng, v, d, kInitStd);
    m.pos_emb = gaussian_matrix(rng, static_cast<std::size_t>(config.max_seq_len), d, kInitStd);
    for (int l = 0; l < config.n_layers; ++l) {
        FrozenModel::Block b;
        b.ln1_gain = constant_row(d, 1.0);
        b.ln1_bias = constant_row(d, 0.0);
        b.wq = gaussian_matrix(rng, d, d, kInitStd);
        b.wk = gaussian_matrix(rng, d, d, kInitStd);
        b.wv = gaussian_matrix(rng, d, d, kInitStd);
        b.wo = gaussian_matrix(rng, d, d, kInitStd);
        b.bq = constant_row(d, 0.0);
        b.bk = constant_row(d, 0.0);
        b.bv = constant_row(d, 0.0);
        b.bo = constant_row(d, 0.0);
        b.ln2_gain = constant_row(d, 1.0);
        b.ln2_bias = constant_row(d, 0.0);
        b.w_ff1 = gaussian_matrix(rng, d, ff, kInitStd);
        b.b_ff1 = constant_row(ff, 0.0);
        b.w_ff2 = gaussian_matrix(rng, ff, d, kInitStd);
        b.b_ff2 = constant_row(d, 0.0);
        m.blocks.push_back(std::move(b));
    }
    m.lnf_gain = constant_row(d, 1.0);
    m.lnf_bias = constant_row(d, 0.0);
    m.w_out = gaussian_matrix(rng, d, v, kUnembedStd);
    m.b_out = constant_row(v, 0.0);
    return m;
}

std::vector<const Matrix*> FrozenModel::weight_list() const {
    std::vector<const Matrix*> w{&tok_emb, &pos_emb};
    for (const Block& b : blocks) {
        w.insert(w.end(), {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.bq, &b.bk,
                           &b.bv, &b.bo, &b.ln2_gain, &b.ln2_bias, &b.w_ff1, &b.b_ff1, &b.w_ff2,
                           &b.b_ff2});
    }
    w.insert(w.end(), {&lnf_gain, &lnf_bias, &w_out, &b_out});
    return w;
}

std::vector<Matrix*> FrozenModel::weight_list() {
    std::vector<Matrix*> w{&tok_emb, &pos_emb};
    for (Block& b : blocks) {
        w.insert(w.end(), {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.bq, &b.bk,
                           &b.bv, &b.bo, &b.ln2_gain, &b.ln2_bias, &b.w_ff1, &b.b_ff1, &b.w_ff2,
                           &b.b_ff2});
    }
    w.insert(w.end(), {&lnf_gain, &lnf_bias, &w_out, &b_out});
    return w;
}

std::uint64_t FrozenModel::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Matrix* m : weight_list()) h = fnv1a_update(h, *m);
    return h;
}

void FrozenModel::validate_tokens(const std::vector<int>& tokens) const {
    if (tokens.empty()) throw config_error("forward: empty token sequence");
    if (tokens.size() > static_cast<std::size_t>(config_.max_seq_len)) {
        throw config_error("forward: sequence longer than max_seq_len");
    }
    for (int t : tokens) {
        if (t < 0 || t >= config_.vocab_size) {
            throw config_error("forward: token id out of range: " + std::to_string(t));
        }
    }
}

GradTape::Id FrozenModel::build_forward(GradTape& tape, const std::vector<int>& tokens, int layer,
                                        const std::vector<std::size_t>& positions,
                                        const InterveneHook& hook, Matrix* capture_out) const {
    validate_tokens(tokens);
    if (layer < 0 || layer >= config_.n_layers) {
        throw config_error("forward: layer out of range: " + std::to_string(layer));
    }
    const std::size_t t_len = tokens.size();
    for (std::size_t p : positions) {
        if (p >= t_len) throw config_error("forward: intervention position out of range");
    }
    {
        std::vector<std::size_t> sorted = positions;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
            throw config_error("forward: duplicate intervention positions");
        }
    }

    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto heads = static_cast<std::size_t>(config_.n_heads);
    const std::size_t dh = d / heads;

    auto in = [&](const Matrix& m) { return tape.input(m, false); };

    // Shared constants for this forward.
    Matrix ones_col(t_len, 1);
    for (std::size_t i = 0; i < t_len; ++i) ones_col(i, 0) = 1.0;
    const GradTape::Id ones = in(ones_col);

    Matrix causal(t_len, t_len);
    for (std::size_t i = 0; i < t_len; ++i) {
        for (std::size_t j = i + 1; j < t_len; ++j) causal(i, j) = kMaskedScore;
    }
    const GradTape::Id mask = in(causal);

    auto bcast = [&](GradTape::Id bias) { return tape.matmul(ones, bias); };
    auto affine = [&](GradTape::Id x, GradTape::Id w, GradTape::Id b) {
        return tape.add(tape.matmul(x, w), bcast(b));
    };

    std::vector<int> pos_ids(t_len);
    std::iota(pos_ids.begin(), pos_ids.end(), 0);
    GradTape::Id x = tape.add(tape.gather_rows(in(tok_emb), tokens),
                              tape.gather_rows(in(pos_emb), pos_ids));

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int l = 0; l < config_.n_layers; ++l) {
        const Block& blk = blocks[static_cast<std::size_t>(l)];

        // attention sublayer
        GradTape::Id a = tape.layer_norm(x, in(blk.ln1_gain), in(blk.ln1_bias));
        GradTape::Id q = affine(a, in(blk.wq), in(blk.bq));
        GradTape::Id k = affine(a, in(blk.wk), in(blk.bk));
        GradTape::Id v = affine(a, in(blk.wv), in(blk.bv));
        std::vector<GradTape::Id> head_outs;
        for (std::size_t h = 0; h < heads; ++h) {
            GradTape::Id qh = tape.slice_cols(q, h * dh, dh);
            GradTape::Id kh = tape.slice_cols(k, h * dh, dh);
            GradTape::Id vh = tape.slice_cols(v, h * dh, dh);
            GradTape::Id scores = tape.scale(tape.matmul(qh, tape.transpose_of(kh)), inv_sqrt_dh);
            GradTape::Id attn = tape.softmax_rows(tape.add(scores, mask));
            head_outs.push_back(tape.matmul(attn, vh));
        }
        GradTape::Id o = affine(tape.concat_cols(head_outs), in(blk.wo), in(blk.bo));
        x = tape.add(x, o);

        // feed-forward sublayer
        GradTape::Id f = tape.layer_norm(x, in(blk.ln2_gain), in(blk.ln2_bias));
        GradTape::Id ff = affine(tape.gelu(affine(f, in(blk.w_ff1), in(blk.b_ff1))), in(blk.w_ff2),
                                 in(blk.b_ff2));
        x = tape.add(x, ff);

        if (l == layer) {
            if (capture_out != nullptr) *capture_out = tape.value(x);
            if (!positions.empty() && hook) {
                std::vector<std::size_t> sorted = positions;
                std::sort(sorted.begin(), sorted.end());
                std::vector<GradTape::Id> segments;
                std::size_t at = 0;
                for (std::size_t p : sorted) {
                    if (p > at) segments.push_back(tape.slice_rows(x, at, p - at));
                    segments.push_back(hook(tape, tape.slice_rows(x, p, 1), p));
                    at = p + 1;
                }
                if (at < t_len) segments.push_back(tape.slice_rows(x, at, t_len - at));
                x = segments.size() == 1 ? segments[0] : tape.concat_rows(segments);
            }
        }
    }

    GradTape::Id xf = tape.layer_norm(x, in(lnf_gain), in(lnf_bias));
    return affine(xf, in(w_out), in(b_out));
}

Matrix FrozenModel::forward(const std::vector<int>& tokens) const {
    GradTape tape;
    const GradTape::Id logits = build_forward(tape, tokens, 0, {}, nullptr, nullptr);
    return tape.value(logits);
}

std::pair<Matrix, HiddenCapture> FrozenModel::forward_capture(const std::vector<int>& tokens,
                                                              int layer) const {
    GradTape tape;
    HiddenCapture cap;
    cap.layer = layer;
    cap.token_ids = tokens;
    const GradTape::Id logits = build_forward(tape, tokens, layer, {}, nullptr, &cap.states);
    return {tape.value(logits), std::move(cap)};
}

Matrix FrozenModel::forward_intervene(
    const std::vector<int>& tokens, int layer, const std::vector<std::size_t>& positions,
    const std::function<std::vector<double>(std::span<const double>)>& phi) const {
    GradTape tape;
    auto hook = [&](GradTape& t, GradTape::Id row, std::size_t) {
        const Matrix& h = t.value(row);
        std::vector<double> out = phi(h.row(0));
        if (out.size() != h.cols()) {
            throw config_error("forward_intervene: phi changed the vector width");
        }
        return t.input(Matrix::row_vector(std::move(out)), false);
    };
    const GradTape::Id logits = build_forward(tape, tokens, layer, positions, hook, nullptr);
    return tape.value(logits);
}

} // namespace msrs
