#include "msrs/steering.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "msrs/errors.hpp"
#include "msrs/kernels.hpp"
#include "msrs/placement.hpp"
#include "msrs/rng.hpp"

namespace msrs {

namespace {

constexpr double kPerturbScale = 1e-2;

double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

// Broadcast matrix E^T (blocks x r): row b has ones over block b's rows.
Matrix block_broadcast(const std::vector<BlockDesc>& layout, std::size_t r) {
    Matrix e(layout.size(), r);
    for (std::size_t bi = 0; bi < layout.size(); ++bi) {
        for (std::size_t j = 0; j < layout[bi].length; ++j) e(bi, layout[bi].offset + j) = 1.0;
    }
    return e;
}

void validate_layout(const std::vector<BlockDesc>& layout, std::size_t r) {
    std::size_t at = 0;
    for (const BlockDesc& b : layout) {
        if (b.offset != at) throw config_error("layout does not tile [0, r)");
        at += b.length;
    }
    if (at != r) throw config_error("layout does not tile [0, r)");
}

} // namespace

std::size_t SteeringModule::mask_output_dim() const {
    return granularity == Granularity::AttributeBlocks ? s_align.layout.size() : rank();
}

SteeringModule init_steering(const AlignedSubspace& s_align, Granularity granularity,
                             double lambda1, double lambda2, int layer, std::uint64_t seed,
                             SteeringInit init) {
    if (lambda1 < 0.0 || lambda2 < 0.0) throw config_error("init_steering: negative lambda");
    if (s_align.total_rank() == 0) throw config_error("init_steering: empty aligned subspace");
    validate_layout(s_align.layout, s_align.total_rank());

    const std::size_t r = s_align.total_rank();
    const std::size_t d = s_align.matrix.cols();
    Rng rng(seed);

    SteeringModule m;
    m.granularity = granularity;
    m.s_align = s_align;
    m.lambda1 = lambda1;
    m.lambda2 = lambda2;
    m.layer = layer;

    if (init == SteeringInit::Aligned) {
        m.r_basis = s_align.matrix;
        for (std::size_t i = 0; i < m.r_basis.size(); ++i) {
            m.r_basis.data()[i] += rng.gaussian() * kPerturbScale;
        }
    } else {
        // seeded gaussian rows, orthonormalized
        Matrix g(r, d);
        for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = rng.gaussian();
        std::vector<std::vector<double>> kept;
        for (std::size_t row = 0; row < r; ++row) {
            std::vector<double> w(g.row(row).begin(), g.row(row).end());
            for (const auto& prev : kept) {
                const double proj = kernels::dot(w.data(), prev.data(), d);
                kernels::active().axpy(-proj, prev.data(), w.data(), d);
            }
            const double norm = std::sqrt(kernels::sum_squares(w.data(), d));
            if (norm <= 1e-12) throw numeric_error("init_steering: degenerate random basis");
            for (double& x : w) x /= norm;
            kept.push_back(std::move(w));
        }
        m.r_basis = Matrix(r, d);
        for (std::size_t row = 0; row < r; ++row) {
            for (std::size_t c = 0; c < d; ++c) m.r_basis(row, c) = kept[row][c];
        }
    }

    m.w = m.r_basis;
    m.b = Matrix(1, r);
    m.mlp_w1 = Matrix(d, r);
    for (std::size_t i = 0; i < m.mlp_w1.size(); ++i) {
        m.mlp_w1.data()[i] = rng.gaussian() * 0.02;
    }
    m.mlp_b1 = Matrix(1, r);
    m.mlp_w2 = Matrix(r, m.mask_output_dim()); // zero: all gates start at 0.5
    m.mlp_b2 = Matrix(1, m.mask_output_dim());
    return m;
}

PriorMask build_prior_mask(const std::vector<BlockDesc>& layout, int attribute) {
    std::size_t r = 0;
    for (const BlockDesc& b : layout) r += b.length;
    validate_layout(layout, r);

    bool found = false;
    PriorMask prior;
    prior.active_attribute = attribute;
    prior.values.assign(r, 0.0);
    for (const BlockDesc& b : layout) {
        const bool on = b.kind == SubspaceBasis::Kind::Shared ||
                        (b.kind == SubspaceBasis::Kind::Private && b.attribute == attribute);
        if (b.kind == SubspaceBasis::Kind::Private && b.attribute == attribute) found = true;
        if (on) {
            for (std::size_t j = 0; j < b.length; ++j) prior.values[b.offset + j] = 1.0;
        }
    }
    if (!found) {
        throw config_error("build_prior_mask: unknown attribute " + std::to_string(attribute));
    }
    return prior;
}

std::vector<double> mask_weights(const SteeringModule& module, std::span<const double> h) {
    if (h.size() != module.width()) throw config_error("mask_weights: width mismatch");
    const std::size_t r = module.rank();
    if (module.granularity == Granularity::SameSpace) return std::vector<double>(r, 1.0);

    // hidden = gelu(h * W1 + b1)
    std::vector<double> hidden(r);
    for (std::size_t j = 0; j < r; ++j) {
        double z = module.mlp_b1(0, j);
        for (std::size_t i = 0; i < h.size(); ++i) z += h[i] * module.mlp_w1(i, j);
        hidden[j] = gelu_value(z);
    }
    const std::size_t out_dim = module.mask_output_dim();
    std::vector<double> gates(out_dim);
    for (std::size_t j = 0; j < out_dim; ++j) {
        double z = module.mlp_b2(0, j);
        for (std::size_t i = 0; i < r; ++i) z += hidden[i] * module.mlp_w2(i, j);
        gates[j] = sigmoid_value(z);
    }
    if (module.granularity == Granularity::RankWise) return gates;

    std::vector<double> m(r, 0.0);
    for (std::size_t bi = 0; bi < module.s_align.layout.size(); ++bi) {
        const BlockDesc& blk = module.s_align.layout[bi];
        for (std::size_t j = 0; j < blk.length; ++j) m[blk.offset + j] = gates[bi];
    }
    return m;
}

std::vector<double> intervene(const SteeringModule& module, std::span<const double> h) {
    if (h.size() != module.width()) throw config_error("intervene: width mismatch");
    const std::size_t r = module.rank();
    const std::size_t d = module.width();
    const std::vector<double> m = mask_weights(module, h);

    // edit = m .* (W h + b - R h), one coordinate per basis row
    std::vector<double> edit(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double wh = kernels::dot(module.w.data() + i * d, h.data(), d);
        const double rh = kernels::dot(module.r_basis.data() + i * d, h.data(), d);
        edit[i] = m[i] * (wh + module.b(0, i) - rh);
    }
    std::vector<double> out(h.begin(), h.end());
    for (std::size_t i = 0; i < r; ++i) {
        kernels::active().axpy(edit[i], module.r_basis.data() + i * d, out.data(), d);
    }
    for (double v : out) {
        if (!std::isfinite(v)) throw numeric_error("intervene: non-finite intermediate");
    }
    return out;
}

double loss_reg(std::span<const double> m, std::span<const double> m_prior) {
    if (m.size() != m_prior.size()) throw config_error("loss_reg: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double d = m[i] - m_prior[i];
        s += d * d;
    }
    return s;
}

double loss_align(const Matrix& r, const Matrix& s_align) {
    if (!r.same_shape(s_align)) throw config_error("loss_align: shape mismatch");
    const double nr = frobenius_norm(r);
    const double ns = frobenius_norm(s_align);
    if (nr == 0.0 || ns == 0.0) throw numeric_error("loss_align: zero matrix has no cosine");
    return 1.0 - frobenius_inner(r, s_align) / (nr * ns);
}

double task_loss(std::span<const double> logits, int gold) {
    if (gold < 0 || static_cast<std::size_t>(gold) >= logits.size()) {
        throw config_error("task_loss: gold label out of range");
    }
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double s = 0.0;
    for (double v : logits) s += std::exp(v - m);
    return m + std::log(s) - logits[static_cast<std::size_t>(gold)];
}

// --- tape graph pieces -------------------------------------------------

SteeringParamNodes add_steering_params(GradTape& tape, const SteeringModule& module,
                                       bool train_r) {
    SteeringParamNodes p;
    p.r = tape.input(module.r_basis, train_r);
    p.w = tape.input(module.w, true);
    p.b = tape.input(module.b, true);
    p.mlp_w1 = tape.input(module.mlp_w1, true);
    p.mlp_b1 = tape.input(module.mlp_b1, true);
    p.mlp_w2 = tape.input(module.mlp_w2, true);
    p.mlp_b2 = tape.input(module.mlp_b2, true);
    return p;
}

GradTape::Id mask_weights_node(GradTape& tape, const SteeringModule& module,
                               const SteeringParamNodes& params, GradTape::Id h_row) {
    const std::size_t r = module.rank();
    if (module.granularity == Granularity::SameSpace) {
        Matrix ones(1, r);
        for (std::size_t i = 0; i < r; ++i) ones(0, i) = 1.0;
        return tape.input(ones, false);
    }
    GradTape::Id hidden =
        tape.gelu(tape.add(tape.matmul(h_row, params.mlp_w1), params.mlp_b1));
    GradTape::Id gates =
        tape.sigmoid(tape.add(tape.matmul(hidden, params.mlp_w2), params.mlp_b2));
    if (module.granularity == Granularity::RankWise) return gates;

    return tape.matmul(gates, tape.input(block_broadcast(module.s_align.layout, r), false));
}

GradTape::Id intervene_node(GradTape& tape, const SteeringModule& module,
                            const SteeringParamNodes& params, GradTape::Id h_row) {
    GradTape::Id mask = mask_weights_node(tape, module, params, h_row);
    GradTape::Id wh_b = tape.add(tape.matmul(h_row, tape.transpose_of(params.w)), params.b);
    GradTape::Id rh = tape.matmul(h_row, tape.transpose_of(params.r));
    GradTape::Id edit = tape.hadamard(mask, tape.sub(wh_b, rh));
    return tape.add(h_row, tape.matmul(edit, params.r));
}

GradTape::Id loss_reg_node(GradTape& tape, GradTape::Id mask, const PriorMask& prior) {
    if (tape.value(mask).cols() != prior.values.size()) {
        throw config_error("loss_reg: length mismatch");
    }
    GradTape::Id prior_node = tape.input(Matrix::row_vector(prior.values), false);
    GradTape::Id diff = tape.sub(mask, prior_node);
    return tape.frob_inner(diff, diff);
}

GradTape::Id loss_align_node(GradTape& tape, const SteeringParamNodes& params,
                             const Matrix& s_align) {
    const double ns = frobenius_norm(s_align);
    if (ns == 0.0) throw numeric_error("loss_align: zero reference matrix");
    GradTape::Id s_node = tape.input(s_align, false);
    GradTape::Id cosine = tape.scale(
        tape.hadamard(tape.frob_inner(params.r, s_node), tape.reciprocal(tape.l2_norm(params.r))),
        1.0 / ns);
    Matrix one(1, 1);
    one(0, 0) = 1.0;
    return tape.sub(tape.input(one, false), cosine);
}

// --- trainer ------------------------------------------------------------

namespace {

struct AdamSlot {
    Matrix m, v;
};

void adam_update(Matrix& param, const Matrix& grad, AdamSlot& slot, const TrainConfig& cfg,
                 int t) {
    if (slot.m.empty()) {
        slot.m = Matrix(param.rows(), param.cols());
        slot.v = Matrix(param.rows(), param.cols());
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad.data()[i];
        slot.m.data()[i] = cfg.beta1 * slot.m.data()[i] + (1.0 - cfg.beta1) * g;
        slot.v.data()[i] = cfg.beta2 * slot.v.data()[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = slot.m.data()[i] / bc1;
        const double vhat = slot.v.data()[i] / bc2;
        param.data()[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
}

} // namespace

TrainResult train(SteeringModule& module, const FrozenModel& model,
                  const std::vector<TrainSample>& samples, const TrainConfig& config) {
    if (samples.empty()) throw config_error("train: no samples");
    if (config.batch_size < 1 || config.steps < 0) throw config_error("train: bad schedule");

    // Per-attribute pools, seeded shuffle, round-robin interleaving so each
    // optimizer step sees every attribute within n steps.
    std::map<int, std::vector<std::size_t>> pools;
    for (std::size_t i = 0; i < samples.size(); ++i) pools[samples[i].attribute].push_back(i);
    Rng rng(config.seed);
    std::vector<int> attr_ids;
    for (auto& [attr, pool] : pools) {
        rng.shuffle(pool);
        attr_ids.push_back(attr);
    }
    std::vector<std::size_t> cursors(attr_ids.size(), 0);

    TrainResult result;
    std::size_t draw = 0;
    std::vector<AdamSlot> adam(7);

    for (int step = 0; step < config.steps; ++step) {
        // snapshot for NaN rollback
        const SteeringModule before = module;

        GradTape tape;
        SteeringParamNodes params = add_steering_params(tape, module, config.train_r);

        std::vector<GradTape::Id> ce_terms;
        std::vector<GradTape::Id> reg_terms;
        for (int bi = 0; bi < config.batch_size; ++bi) {
            const std::size_t ai = draw % attr_ids.size();
            ++draw;
            auto& pool = pools[attr_ids[ai]];
            const TrainSample& s = samples[pool[cursors[ai] % pool.size()]];
            ++cursors[ai];

            std::size_t position = s.tokens.size() - 1;
            if (config.position == TrainPosition::ImportantToken) {
                const auto [logits, cap] = model.forward_capture(s.tokens, module.layer);
                const Matrix block =
                    scoring_block(module.r_basis, module.s_align, s.attribute, false, false);
                position =
                    select_position(block, cap, PlacementStrategy::ImportantToken, s.attribute)
                        .position;
            }

            GradTape::Id mask_at_position = -1;
            auto hook = [&](GradTape& t, GradTape::Id row, std::size_t) {
                mask_at_position = mask_weights_node(t, module, params, row);
                GradTape::Id wh_b = t.add(t.matmul(row, t.transpose_of(params.w)), params.b);
                GradTape::Id rh = t.matmul(row, t.transpose_of(params.r));
                GradTape::Id edit = t.hadamard(mask_at_position, t.sub(wh_b, rh));
                return t.add(row, t.matmul(edit, params.r));
            };
            GradTape::Id logits = model.build_forward(tape, s.tokens, module.layer, {position},
                                                      hook, nullptr);
            GradTape::Id last_row = tape.slice_rows(logits, s.tokens.size() - 1, 1);
            ce_terms.push_back(tape.cross_entropy(last_row, {s.label}));

            const PriorMask prior = build_prior_mask(module.s_align.layout, s.attribute);
            reg_terms.push_back(loss_reg_node(tape, mask_at_position, prior));
        }

        auto mean_of = [&](const std::vector<GradTape::Id>& terms) {
            GradTape::Id acc = terms[0];
            for (std::size_t i = 1; i < terms.size(); ++i) acc = tape.add(acc, terms[i]);
            return tape.scale(acc, 1.0 / static_cast<double>(terms.size()));
        };
        GradTape::Id task = mean_of(ce_terms);
        GradTape::Id reg = mean_of(reg_terms);

        LossBreakdown losses;
        losses.task = tape.scalar_value(task);
        losses.reg = tape.scalar_value(reg);

        GradTape::Id total = tape.add(task, tape.scale(reg, module.lambda1));
        if (config.use_align) {
            GradTape::Id align = loss_align_node(tape, params, module.s_align.matrix);
            losses.align = tape.scalar_value(align);
            total = tape.add(total, tape.scale(align, module.lambda2));
        }
        losses.total = tape.scalar_value(total);

        if (!std::isfinite(losses.total)) {
            module = before;
            result.aborted = true;
            result.abort_reason = "non-finite loss at step " + std::to_string(step);
            return result;
        }

        const auto grads = tape.backward(total);
        const int t = step + 1;
        auto apply = [&](Matrix& param, GradTape::Id id, int slot) {
            const auto it = grads.find(id);
            if (it == grads.end()) return; // frozen
            adam_update(param, it->second, adam[static_cast<std::size_t>(slot)], config, t);
        };
        apply(module.r_basis, params.r, 0);
        apply(module.w, params.w, 1);
        apply(module.b, params.b, 2);
        apply(module.mlp_w1, params.mlp_w1, 3);
        apply(module.mlp_b1, params.mlp_b1, 4);
        apply(module.mlp_w2, params.mlp_w2, 5);
        apply(module.mlp_b2, params.mlp_b2, 6);

        result.log.push_back({step, losses});
    }
    return result;
}

} // namespace msrs
