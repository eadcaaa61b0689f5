#include <doctest.h>

#include <cmath>
#include <cstring>

#include "msrs/dataset.hpp"
#include "msrs/errors.hpp"
#include "msrs/rng.hpp"
#include "msrs/steering.hpp"
#include "oracles.hpp"

using namespace msrs;

namespace {

Matrix rows_from(const std::vector<std::vector<double>>& rows) {
    Matrix m(rows.size(), rows[0].size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
    }
    return m;
}

// layout (shared=2, A=3, B=3) over width d with orthonormal rows
AlignedSubspace aligned_8(std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    const Matrix all = oracle::gram_schmidt_rows(oracle::random_matrix(rng, 8, d));
    AlignedSubspace a;
    a.matrix = all;
    a.layout = {{SubspaceBasis::Kind::Shared, -1, 0, 2},
                {SubspaceBasis::Kind::Private, 0, 2, 3},
                {SubspaceBasis::Kind::Private, 1, 5, 3}};
    a.attribute_order = {0, 1};
    return a;
}

SteeringModule desk_module(Granularity g = Granularity::AttributeBlocks,
                           std::uint64_t seed = 42) {
    return init_steering(aligned_8(16, 7), g, 0.3, 0.5, 1, seed);
}

} // namespace

TEST_CASE("mask network basics") {
    SUBCASE("all-zero weights give 0.5 everywhere") {
        SteeringModule m = desk_module(Granularity::RankWise);
        m.mlp_w1 = Matrix(16, 8);
        m.mlp_b1 = Matrix(1, 8);
        m.mlp_w2 = Matrix(8, 8);
        m.mlp_b2 = Matrix(1, 8);
        const std::vector<double> h(16, 0.7);
        for (double g : mask_weights(m, h)) CHECK(g == 0.5);
    }
    SUBCASE("zero-init module starts with every gate at 0.5") {
        const SteeringModule m = desk_module(Granularity::AttributeBlocks);
        Rng rng(3);
        std::vector<double> h(16);
        for (double& x : h) x = rng.gaussian();
        for (double g : mask_weights(m, h)) CHECK(g == 0.5);
    }
    SUBCASE("+20 output bias saturates that gate") {
        SteeringModule m = desk_module(Granularity::RankWise);
        m.mlp_b2(0, 3) = 20.0;
        const std::vector<double> h(16, 0.0);
        const auto gates = mask_weights(m, h);
        CHECK(gates[3] >= 1.0 - 1e-8);
        CHECK(gates[0] == 0.5);
    }
    SUBCASE("AttributeBlocks broadcasts (a,b,c) to (a,a,b,b,b,c,c,c)") {
        SteeringModule m = desk_module(Granularity::AttributeBlocks);
        m.mlp_b2(0, 0) = 1.0;
        m.mlp_b2(0, 1) = -2.0;
        m.mlp_b2(0, 2) = 3.0;
        const std::vector<double> h(16, 0.0);
        const auto gates = mask_weights(m, h);
        REQUIRE(gates.size() == 8);
        const double a = 1.0 / (1.0 + std::exp(-1.0));
        const double b = 1.0 / (1.0 + std::exp(2.0));
        const double c = 1.0 / (1.0 + std::exp(-3.0));
        CHECK(gates[0] == doctest::Approx(a).epsilon(1e-12));
        CHECK(gates[1] == doctest::Approx(a).epsilon(1e-12));
        for (int i = 2; i < 5; ++i) CHECK(gates[i] == doctest::Approx(b).epsilon(1e-12));
        for (int i = 5; i < 8; ++i) CHECK(gates[i] == doctest::Approx(c).epsilon(1e-12));
    }
    SUBCASE("SameSpace is all ones") {
        const SteeringModule m = desk_module(Granularity::SameSpace);
        const std::vector<double> h(16, 0.9);
        for (double g : mask_weights(m, h)) CHECK(g == 1.0);
    }
}

TEST_CASE("intervention hand evaluation: d=4, r=2 standard-basis case") {
    AlignedSubspace a;
    a.matrix = rows_from({{1.0, 0.0, 0.0, 0.0}, {0.0, 1.0, 0.0, 0.0}});
    a.layout = {{SubspaceBasis::Kind::Shared, -1, 0, 1},
                {SubspaceBasis::Kind::Private, 0, 1, 1}};
    a.attribute_order = {0};
    SteeringModule m = init_steering(a, Granularity::RankWise, 0.3, 0.5, 0, 1);
    m.r_basis = a.matrix;
    m.w = Matrix(2, 4);
    m.b = rows_from({{1.0, 1.0}});
    // saturate all gates to 1
    m.mlp_w1 = Matrix(4, 2);
    m.mlp_b1 = Matrix(1, 2);
    m.mlp_w2 = Matrix(2, 2);
    m.mlp_b2 = rows_from({{1e4, 1e4}});

    const std::vector<double> h{3.0, 5.0, 7.0, 9.0};
    const auto out = intervene(m, h);
    // m=1: h' = h + R^T (W h + b - R h) = (1, 1, 7, 9)
    CHECK(out[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(out[1] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(out[2] == 7.0);
    CHECK(out[3] == 9.0);
}

TEST_CASE("intervention matches a literal scalar-by-scalar evaluation") {
    Rng rng(33);
    SteeringModule m = desk_module(Granularity::RankWise, 8);
    for (std::size_t i = 0; i < m.mlp_w2.size(); ++i) m.mlp_w2.data()[i] = rng.gaussian();
    for (std::size_t i = 0; i < m.mlp_b2.size(); ++i) m.mlp_b2.data()[i] = rng.gaussian();
    const std::size_t r = m.rank();
    const std::size_t d = m.width();

    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> h(d);
        for (double& x : h) x = rng.gaussian();
        const auto out = intervene(m, h);
        const auto mask = mask_weights(m, h);

        // h + R^T diag(m) (W h + b - R h), written out with plain loops
        std::vector<double> expect(h.begin(), h.end());
        for (std::size_t i = 0; i < r; ++i) {
            double wh = 0.0, rh = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                wh += m.w(i, c) * h[c];
                rh += m.r_basis(i, c) * h[c];
            }
            const double gated = mask[i] * (wh + m.b(0, i) - rh);
            for (std::size_t c = 0; c < d; ++c) expect[c] += m.r_basis(i, c) * gated;
        }
        for (std::size_t c = 0; c < d; ++c) {
            CHECK(out[c] == doctest::Approx(expect[c]).epsilon(1e-12));
        }
    }
}

TEST_CASE("intervention fixed points are exact") {
    Rng rng(21);
    SUBCASE("saturated-off mask leaves h untouched") {
        SteeringModule m = desk_module(Granularity::RankWise);
        m.mlp_w1 = Matrix(16, 8);
        m.mlp_b1 = Matrix(1, 8);
        m.mlp_w2 = Matrix(8, 8);
        Matrix b2(1, 8);
        for (std::size_t i = 0; i < 8; ++i) b2(0, i) = -1e4; // sigmoid underflows to 0
        m.mlp_b2 = b2;
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<double> h(16);
            for (double& x : h) x = rng.gaussian();
            const auto out = intervene(m, h);
            for (std::size_t i = 0; i < 16; ++i) CHECK(out[i] == h[i]);
        }
    }
    SUBCASE("W = R, b = 0 cancels for any mask") {
        SteeringModule m = desk_module(Granularity::RankWise, 5);
        // random mask network
        Rng wrng(9);
        for (std::size_t i = 0; i < m.mlp_w2.size(); ++i) m.mlp_w2.data()[i] = wrng.gaussian();
        m.w = m.r_basis;
        m.b = Matrix(1, 8);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<double> h(16);
            for (double& x : h) x = rng.gaussian();
            const auto out = intervene(m, h);
            for (std::size_t i = 0; i < 16; ++i) CHECK(out[i] == h[i]);
        }
    }
}

TEST_CASE("orthonormal R with unit mask: in-subspace edit, out-of-subspace untouched") {
    Rng rng(22);
    SteeringModule m = desk_module(Granularity::RankWise, 6);
    m.r_basis = m.s_align.matrix; // orthonormal rows
    m.w = oracle::random_matrix(rng, 8, 16, 0.5);
    for (std::size_t i = 0; i < 8; ++i) m.b(0, i) = rng.gaussian();
    m.mlp_w1 = Matrix(16, 8);
    m.mlp_b1 = Matrix(1, 8);
    m.mlp_w2 = Matrix(8, 8);
    Matrix b2(1, 8);
    for (std::size_t i = 0; i < 8; ++i) b2(0, i) = 1e4; // gates pinned at 1
    m.mlp_b2 = b2;

    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> h(16);
        for (double& x : h) x = rng.gaussian();
        const auto out = intervene(m, h);

        // R phi(h) = W h + b
        for (std::size_t i = 0; i < 8; ++i) {
            double r_phi = 0.0, wh_b = m.b(0, i);
            for (std::size_t c = 0; c < 16; ++c) {
                r_phi += m.r_basis(i, c) * out[c];
                wh_b += m.w(i, c) * h[c];
            }
            CHECK(std::fabs(r_phi - wh_b) <= 1e-10);
        }
        // (I - R^T R) phi(h) = (I - R^T R) h
        const Matrix rtr = matmul_tn(m.r_basis, m.r_basis);
        for (std::size_t i = 0; i < 16; ++i) {
            double lhs = out[i], rhs = h[i];
            for (std::size_t c = 0; c < 16; ++c) {
                lhs -= rtr(i, c) * out[c];
                rhs -= rtr(i, c) * h[c];
            }
            CHECK(std::fabs(lhs - rhs) <= 1e-10);
        }
    }
}

TEST_CASE("prior masks") {
    const AlignedSubspace a = aligned_8(16, 7);
    SUBCASE("attribute A: (1,1,1,1,1,0,0,0)") {
        const PriorMask p = build_prior_mask(a.layout, 0);
        const std::vector<double> expect{1, 1, 1, 1, 1, 0, 0, 0};
        CHECK(p.values == expect);
    }
    SUBCASE("attribute B: (1,1,0,0,0,1,1,1)") {
        const PriorMask p = build_prior_mask(a.layout, 1);
        const std::vector<double> expect{1, 1, 0, 0, 0, 1, 1, 1};
        CHECK(p.values == expect);
    }
    SUBCASE("unknown attribute rejected") {
        CHECK_THROWS_AS((void)build_prior_mask(a.layout, 9), config_error);
    }
    SUBCASE("single attribute with an empty private block: all ones") {
        std::vector<BlockDesc> layout = {{SubspaceBasis::Kind::Shared, -1, 0, 3},
                                         {SubspaceBasis::Kind::Private, 0, 3, 0}};
        const PriorMask p = build_prior_mask(layout, 0);
        CHECK(p.values == std::vector<double>{1, 1, 1});
    }
}

TEST_CASE("loss_reg") {
    const std::vector<double> prior{1, 1, 0, 0, 0, 1, 1, 1};
    SUBCASE("m = prior gives zero") { CHECK(loss_reg(prior, prior) == 0.0); }
    SUBCASE("m = 0.5 against a binary prior of length 8 gives 2.0") {
        const std::vector<double> half(8, 0.5);
        CHECK(loss_reg(half, prior) == 2.0);
    }
    SUBCASE("seeded pair matches an elementwise sum") {
        Rng rng(23);
        std::vector<double> m(12), p(12);
        for (std::size_t i = 0; i < 12; ++i) {
            m[i] = rng.uniform();
            p[i] = rng.uniform();
        }
        double expect = 0.0;
        for (std::size_t i = 0; i < 12; ++i) expect += (m[i] - p[i]) * (m[i] - p[i]);
        CHECK(loss_reg(m, p) == doctest::Approx(expect).epsilon(1e-15));
    }
    SUBCASE("length mismatch rejected") {
        CHECK_THROWS_AS((void)loss_reg(std::vector<double>{1.0}, prior), config_error);
    }
}

TEST_CASE("loss_align") {
    Rng rng(24);
    const Matrix s = oracle::random_matrix(rng, 4, 9);
    CHECK(loss_align(s, s) == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(loss_align(scale(s, -1.0), s) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(loss_align(scale(s, 2.0), s) == doctest::Approx(0.0).epsilon(1e-14));
    CHECK_THROWS_AS((void)loss_align(Matrix(4, 9), s), numeric_error);
}

TEST_CASE("task_loss") {
    SUBCASE("uniform logits over vocab 64 give ln 64") {
        const std::vector<double> logits(64, 0.25);
        CHECK(task_loss(logits, 17) == doctest::Approx(std::log(64.0)).epsilon(1e-12));
    }
    SUBCASE("a 40-logit gap drives the loss under 1e-6") {
        std::vector<double> logits(64, 0.0);
        logits[5] = 40.0;
        CHECK(task_loss(logits, 5) <= 1e-6);
        CHECK(task_loss(logits, 5) >= 0.0);
    }
    SUBCASE("seeded case matches an independent log-sum-exp") {
        Rng rng(25);
        std::vector<double> logits(10);
        for (double& x : logits) x = rng.gaussian() * 3.0;
        double lse = 0.0;
        for (double x : logits) lse += std::exp(x);
        const double expect = std::log(lse) - logits[4];
        CHECK(task_loss(logits, 4) == doctest::Approx(expect).epsilon(1e-12));
    }
    SUBCASE("gold out of range rejected") {
        CHECK_THROWS_AS((void)task_loss(std::vector<double>{1.0, 2.0}, 2), config_error);
    }
}

TEST_CASE("initialization invariants") {
    const SteeringModule m = desk_module();
    CHECK(m.w == m.r_basis);
    CHECK(max_abs(m.b) == 0.0);
    CHECK(max_abs(m.mlp_w2) == 0.0);
    CHECK(max_abs(m.mlp_b2) == 0.0);
    CHECK(max_abs_diff(m.r_basis, m.s_align.matrix) <= 0.1); // small perturbation
    CHECK(max_abs_diff(m.r_basis, m.s_align.matrix) > 0.0);
    CHECK_THROWS_AS((void)init_steering(aligned_8(16, 7), Granularity::SameSpace, -0.1, 0.5, 0, 1),
                    config_error);
}

TEST_CASE("full objective gradient check through the toy model") {
    ModelConfig mc;
    mc.vocab_size = 32;
    mc.d_model = 16;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.max_seq_len = 16;
    mc.seed = 5;
    const FrozenModel model = init_model(mc);
    const SteeringModule module = desk_module(Granularity::AttributeBlocks, 11);

    GradTape tape;
    SteeringParamNodes params = add_steering_params(tape, module);
    GradTape::Id mask_node_id = -1;
    auto hook = [&](GradTape& t, GradTape::Id row, std::size_t) {
        mask_node_id = mask_weights_node(t, module, params, row);
        GradTape::Id wh_b = t.add(t.matmul(row, t.transpose_of(params.w)), params.b);
        GradTape::Id rh = t.matmul(row, t.transpose_of(params.r));
        GradTape::Id edit = t.hadamard(mask_node_id, t.sub(wh_b, rh));
        return t.add(row, t.matmul(edit, params.r));
    };
    const std::vector<int> tokens{4, 9, 1, 30, 7};
    const auto logits = model.build_forward(tape, tokens, 1, {4}, hook, nullptr);
    const auto ce = tape.cross_entropy(tape.slice_rows(logits, 4, 1), {12});
    const auto reg = loss_reg_node(tape, mask_node_id, build_prior_mask(module.s_align.layout, 0));
    const auto align = loss_align_node(tape, params, module.s_align.matrix);
    const auto total =
        tape.add(ce, tape.add(tape.scale(reg, module.lambda1), tape.scale(align, module.lambda2)));

    CHECK(tape.grad_check(total, 1e-4) <= 1e-4);
}

TEST_CASE("loss breakdown identity") {
    // total = task + lambda1*reg + lambda2*align to 1e-12
    Rng rng(26);
    const double task = rng.uniform() * 4.0;
    const double reg = rng.uniform() * 2.0;
    const double align = rng.uniform();
    LossBreakdown l;
    l.task = task;
    l.reg = reg;
    l.align = align;
    l.total = task + 0.3 * reg + 0.5 * align;
    CHECK(std::fabs(l.total - (l.task + 0.3 * l.reg + 0.5 * l.align)) <= 1e-12);
}

namespace {

std::vector<TrainSample> synthetic_samples(const FrozenModel& model, int per_attr,
                                           std::uint64_t seed) {
    AttributeTaskSpec spec;
    spec.n_attributes = 2;
    spec.samples_per_attribute = per_attr;
    spec.make_linalg = false;
    spec.seed = seed;
    spec.model = model.config();
    spec.layer = 1;
    spec.train_fraction = 1.0;
    GeneratedTasks tasks = generate_tasks(spec, model);
    return tasks.train_set;
}

} // namespace

TEST_CASE("trainer contracts") {
    ModelConfig mc;
    mc.vocab_size = 64;
    mc.d_model = 16;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.max_seq_len = 16;
    mc.seed = 3;
    const FrozenModel model = init_model(mc);
    const auto samples = synthetic_samples(model, 8, 9);
    const AlignedSubspace aligned = aligned_8(16, 7);

    SUBCASE("lambda1 = lambda2 = 0 makes total equal task at every step") {
        SteeringModule module =
            init_steering(aligned, Granularity::AttributeBlocks, 0.0, 0.0, 1, 42);
        TrainConfig cfg;
        cfg.steps = 5;
        cfg.batch_size = 2;
        const TrainResult r = train(module, model, samples, cfg);
        REQUIRE(r.log.size() == 5);
        for (const StepRecord& s : r.log) {
            CHECK(s.losses.total == doctest::Approx(s.losses.task).epsilon(1e-15));
        }
    }
    SUBCASE("the recorded breakdown satisfies total = task + l1*reg + l2*align") {
        SteeringModule module =
            init_steering(aligned, Granularity::AttributeBlocks, 0.3, 0.5, 1, 42);
        TrainConfig cfg;
        cfg.steps = 6;
        const TrainResult r = train(module, model, samples, cfg);
        for (const StepRecord& s : r.log) {
            CHECK(std::fabs(s.losses.total -
                            (s.losses.task + 0.3 * s.losses.reg + 0.5 * s.losses.align)) <=
                  1e-12);
        }
    }
    SUBCASE("important-token training position runs deterministically") {
        SteeringModule m1 = init_steering(aligned, Granularity::AttributeBlocks, 0.3, 0.5, 1, 42);
        SteeringModule m2 = init_steering(aligned, Granularity::AttributeBlocks, 0.3, 0.5, 1, 42);
        TrainConfig cfg;
        cfg.steps = 6;
        cfg.position = TrainPosition::ImportantToken;
        const TrainResult r1 = train(m1, model, samples, cfg);
        (void)train(m2, model, samples, cfg);
        REQUIRE_FALSE(r1.aborted);
        CHECK(m1.r_basis == m2.r_basis);
        CHECK(m1.mlp_w2 == m2.mlp_w2);
    }
    SUBCASE("zero learning rate leaves parameters bit-exact") {
        SteeringModule module =
            init_steering(aligned, Granularity::AttributeBlocks, 0.3, 0.5, 1, 42);
        const SteeringModule before = module;
        TrainConfig cfg;
        cfg.steps = 1;
        cfg.lr = 0.0;
        (void)train(module, model, samples, cfg);
        CHECK(module.r_basis == before.r_basis);
        CHECK(module.w == before.w);
        CHECK(module.b == before.b);
        CHECK(module.mlp_w1 == before.mlp_w1);
        CHECK(module.mlp_w2 == before.mlp_w2);
    }
    SUBCASE("same seed twice gives identical parameter bits") {
        SteeringModule m1 = init_steering(aligned, Granularity::AttributeBlocks, 0.3, 0.5, 1, 42);
        SteeringModule m2 = init_steering(aligned, Granularity::AttributeBlocks, 0.3, 0.5, 1, 42);
        TrainConfig cfg;
        cfg.steps = 8;
        (void)train(m1, model, samples, cfg);
        (void)train(m2, model, samples, cfg);
        CHECK(m1.r_basis == m2.r_basis);
        CHECK(m1.w == m2.w);
        CHECK(m1.mlp_w1 == m2.mlp_w1);
        CHECK(m1.mlp_w2 == m2.mlp_w2);
    }
    SUBCASE("train_r = false keeps R bit-frozen while the rest moves") {
        SteeringModule module =
            init_steering(aligned, Granularity::AttributeBlocks, 0.3, 0.5, 1, 42);
        module.r_basis = aligned.matrix; // the fixed-concatenation arm
        module.w = module.r_basis;
        const Matrix frozen_r = module.r_basis;
        TrainConfig cfg;
        cfg.steps = 6;
        cfg.train_r = false;
        cfg.use_align = false;
        const TrainResult r = train(module, model, samples, cfg);
        REQUIRE_FALSE(r.aborted);
        CHECK(module.r_basis == frozen_r);
        CHECK(max_abs_diff(module.w, frozen_r) > 0.0); // W did train
        for (const StepRecord& s : r.log) CHECK(s.losses.align == 0.0);
    }
    SUBCASE("the frozen model is unchanged by training") {
        const std::uint64_t before = model.checksum();
        SteeringModule module =
            init_steering(aligned, Granularity::AttributeBlocks, 0.3, 0.5, 1, 42);
        TrainConfig cfg;
        cfg.steps = 10;
        (void)train(module, model, samples, cfg);
        CHECK(model.checksum() == before);
    }
    SUBCASE("training reduces the loss on the synthetic task") {
        SteeringModule module =
            init_steering(aligned, Granularity::AttributeBlocks, 0.3, 0.5, 1, 42);
        TrainConfig cfg;
        cfg.steps = 40;
        const TrainResult r = train(module, model, samples, cfg);
        REQUIRE_FALSE(r.aborted);
        CHECK(r.log.back().losses.task < r.log.front().losses.task);
    }
    SUBCASE("a non-finite loss aborts and restores the last good parameters") {
        SteeringModule module =
            init_steering(aligned, Granularity::AttributeBlocks, 0.3, 0.5, 1, 42);
        // poison W so the first step's loss is NaN
        module.w(0, 0) = std::numeric_limits<double>::quiet_NaN();
        const Matrix poisoned = module.w;
        TrainConfig cfg;
        cfg.steps = 3;
        const TrainResult r = train(module, model, samples, cfg);
        CHECK(r.aborted);
        CHECK(r.log.empty());
        // rollback to the pre-step state (bytewise: NaN != NaN under ==)
        CHECK(std::memcmp(module.w.data(), poisoned.data(),
                          poisoned.size() * sizeof(double)) == 0);
    }
}
