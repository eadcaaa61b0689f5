// Acceptance suite: one criterion per function, one PASS/FAIL line each.
// Run with no arguments for the full suite, or with a criterion number.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "msrs/ablation.hpp"
#include "msrs/container.hpp"
#include "msrs/dataset.hpp"
#include "msrs/errors.hpp"
#include "msrs/kernels.hpp"
#include "msrs/metrics.hpp"
#include "msrs/pipeline.hpp"
#include "msrs/rng.hpp"
#include "msrs/steering.hpp"
#include "msrs/subspace.hpp"
#include "msrs/svd.hpp"
#include "msrs/toymodel.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace msrs;

namespace {

// Pinned by the pre-registered oracle run of the default desk experiment
// (d=32, 2 attributes, 256 samples/attribute, 200 steps, lr 5e-3, batch 2,
// seed 42): observed per-attribute eval-loss reductions were 3.197 and
// 4.246. The acceptance floor sits below both; the run is deterministic,
// so the margin only absorbs FP-environment differences, not behavior.
constexpr double kPinnedLossReduction = 2.5;

constexpr double kDeg5 = 0.08726646259971647;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Failure {
    std::string detail;
};

#define REQUIRE_OK(cond, msg)                                                                     \
    do {                                                                                          \
        if (!(cond)) throw Failure{std::string(msg)};                                             \
    } while (0)

// ---- criterion 1: SVD kernel ----------------------------------------------

void criterion_svd(std::string& detail) {
    const auto t0 = Clock::now();
    Rng rng(1001);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t rows = 1 + rng.below(64);
        const std::size_t cols = 1 + rng.below(64);
        const Matrix m = oracle::random_matrix(rng, rows, cols);
        const SvdResult r = svd(m);
        const std::size_t k = std::min(rows, cols);

        REQUIRE_OK(max_abs_diff(matmul_tn(r.u, r.u), Matrix::identity(k)) <= 1e-10,
                   "U orthonormality exceeded 1e-10");
        REQUIRE_OK(max_abs_diff(matmul_tn(r.v, r.v), Matrix::identity(k)) <= 1e-10,
                   "V orthonormality exceeded 1e-10");
        for (std::size_t j = 0; j < k; ++j) {
            REQUIRE_OK(r.sigma[j] >= 0.0, "negative singular value");
            if (j > 0) REQUIRE_OK(r.sigma[j] <= r.sigma[j - 1], "ordering violated");
        }
        Matrix us = r.u;
        for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t i = 0; i < us.rows(); ++i) us(i, j) *= r.sigma[j];
        }
        REQUIRE_OK(max_abs_diff(matmul_nt(us, r.v), m) <= 1e-8 * r.sigma[0],
                   "reconstruction exceeded 1e-8 * sigma1");
        for (std::size_t j = 0; j < k; ++j) {
            std::size_t best = 0;
            double best_abs = -1.0;
            for (std::size_t i = 0; i < r.u.rows(); ++i) {
                if (std::fabs(r.u(i, j)) > best_abs) {
                    best_abs = std::fabs(r.u(i, j));
                    best = i;
                }
            }
            REQUIRE_OK(r.u(best, j) >= 0.0, "sign convention violated");
        }
    }
    const double secs = seconds_since(t0);
    REQUIRE_OK(secs < 30.0, "runtime exceeded 30 s");
    char buf[96];
    std::snprintf(buf, sizeof buf, "1000 matrices up to 64x64, %.1f s", secs);
    detail = buf;
}

// ---- criterion 2: energy-rank minimality -----------------------------------

void criterion_energy_rank(std::string& detail) {
    REQUIRE_OK(energy_rank(std::vector<double>{9.0, 0.6, 0.4}, 0.90) == 1,
               "boundary spectrum (9.0, 0.6, 0.4) must give r = 1");

    Rng rng(2002);
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t len = 1 + rng.below(16);
        std::vector<double> sigma(len);
        for (double& s : sigma) s = rng.uniform() * 8.0;
        if (rng.below(4) == 0) sigma[len - 1] = 0.0; // exercise zero tails
        std::sort(sigma.begin(), sigma.end(), std::greater<>());
        if (sigma[0] == 0.0) sigma[0] = 1.0;
        const double threshold = 0.05 + 0.95 * rng.uniform();

        const std::size_t got = energy_rank(sigma, threshold);

        double total = 0.0;
        for (double s : sigma) total += s;
        std::size_t expect = sigma.size();
        double cum = 0.0;
        for (std::size_t r = 0; r < sigma.size(); ++r) {
            cum += sigma[r];
            if (cum / total >= threshold) {
                expect = r + 1;
                break;
            }
        }
        REQUIRE_OK(got == expect, "exhaustive scan disagreed");
        if (got > 1) {
            double prev = 0.0;
            for (std::size_t r = 0; r + 1 < got; ++r) prev += sigma[r];
            REQUIRE_OK(prev / total < threshold, "returned rank is not minimal");
        }
    }
    detail = "10000 seeded spectra, zero disagreements";
}

// ---- criterion 3: shared/private orthogonality ------------------------------

void criterion_orthogonality(std::string& detail) {
    Rng rng(3003);
    int extractions = 0;
    for (int n_attr = 1; n_attr <= 3; ++n_attr) {
        for (int rep = 0; rep < 5; ++rep) {
            std::vector<Matrix> rows;
            for (int i = 0; i < n_attr; ++i) {
                Matrix m = oracle::random_matrix(rng, 48, 32);
                for (std::size_t j = 0; j < m.rows(); ++j) {
                    m(j, static_cast<std::size_t>(i)) += 2.0 + rep;
                }
                rows.push_back(std::move(m));
            }
            const ActivationBank bank = make_bank(rows, 1);
            const SubspaceBasis shared = extract_shared(bank);
            REQUIRE_OK(max_abs_diff(matmul_nt(shared.basis, shared.basis),
                                    Matrix::identity(shared.rank())) <= 1e-8,
                       "shared orthonormality exceeded 1e-8");
            for (int i = 0; i < n_attr; ++i) {
                const SubspaceBasis priv = extract_private(bank, i, shared);
                if (!priv.empty()) {
                    REQUIRE_OK(max_abs(matmul_nt(shared.basis, priv.basis)) <= 1e-8,
                               "shared/private orthogonality exceeded 1e-8");
                }
            }
            ++extractions;
        }
    }
    detail = std::to_string(extractions) + " extractions, d=32, n in {1,2,3}";
}

// ---- criterion 4: planted-subspace recovery ---------------------------------

void criterion_planted_recovery(std::string& detail) {
    const auto t0 = Clock::now();
    const FrozenModel model = init_model(ModelConfig{});

    AttributeTaskSpec spec;
    spec.n_attributes = 3;
    spec.samples_per_attribute = 256;
    spec.shared_rank = 2;
    spec.private_ranks = {2, 2, 2};
    spec.seed = 42;
    spec.make_model = false;
    spec.model.d_model = 32;

    for (double sigma : {0.01, 0.0}) {
        spec.noise_sigma = sigma;
        const double tolerance = sigma == 0.0 ? 1e-6 : kDeg5;
        const GeneratedTasks tasks = generate_tasks(spec, model);
        const ActivationBank bank = make_bank(tasks.linalg_samples, 1);
        const SubspaceBasis shared = extract_shared(bank);
        const auto shared_angles = principal_angles(shared.basis, tasks.planted_shared);
        REQUIRE_OK(!shared_angles.empty() && shared_angles.back() <= tolerance,
                   "shared-span recovery exceeded tolerance");
        for (int i = 0; i < 3; ++i) {
            const SubspaceBasis priv = extract_private(bank, i, shared);
            REQUIRE_OK(!priv.empty(), "private extraction came back empty");
            const auto angles = principal_angles(
                priv.basis, tasks.planted_private[static_cast<std::size_t>(i)]);
            REQUIRE_OK(angles.back() <= tolerance, "private-span recovery exceeded tolerance");
        }
    }
    const double secs = seconds_since(t0);
    REQUIRE_OK(secs < 10.0, "runtime exceeded 10 s");
    char buf[96];
    std::snprintf(buf, sizeof buf, "noise 0.01 within 5 deg, noiseless within 1e-6 rad, %.1f s",
                  secs);
    detail = buf;
}

// ---- criterion 5: intervention fixed points ---------------------------------

void criterion_fixed_points(std::string& detail) {
    Rng rng(5005);
    const std::size_t d = 32, r = 8;
    for (int trial = 0; trial < 1000; ++trial) {
        const Matrix all = oracle::gram_schmidt_rows(oracle::random_matrix(rng, r, d));
        AlignedSubspace a;
        a.matrix = all;
        a.layout = {{SubspaceBasis::Kind::Shared, -1, 0, 2},
                    {SubspaceBasis::Kind::Private, 0, 2, 3},
                    {SubspaceBasis::Kind::Private, 1, 5, 3}};
        a.attribute_order = {0, 1};
        SteeringModule m =
            init_steering(a, Granularity::RankWise, 0.3, 0.5, 0,
                          42 + static_cast<std::uint64_t>(trial));
        m.r_basis = oracle::random_matrix(rng, r, d); // arbitrary R
        m.w = oracle::random_matrix(rng, r, d);
        for (std::size_t i = 0; i < r; ++i) m.b(0, i) = rng.gaussian();

        std::vector<double> h(d);
        for (double& x : h) x = rng.gaussian();

        // saturated-off mask
        SteeringModule off = m;
        for (std::size_t i = 0; i < off.mlp_b2.size(); ++i) off.mlp_b2.data()[i] = -1e4;
        const auto out_off = intervene(off, h);
        for (std::size_t i = 0; i < d; ++i) {
            REQUIRE_OK(out_off[i] == h[i], "m = 0 fixed point violated");
        }

        // W = R, b = 0 cancellation under a random mask
        SteeringModule cancel = m;
        for (std::size_t i = 0; i < cancel.mlp_w2.size(); ++i) {
            cancel.mlp_w2.data()[i] = rng.gaussian();
        }
        cancel.w = cancel.r_basis;
        cancel.b = Matrix(1, r);
        const auto out_cancel = intervene(cancel, h);
        for (std::size_t i = 0; i < d; ++i) {
            REQUIRE_OK(out_cancel[i] == h[i], "W = R, b = 0 fixed point violated");
        }
    }
    detail = "1000 seeded (h, R) pairs, both fixed points bit-exact";
}

// ---- criterion 6: loss identities -------------------------------------------

void criterion_loss_identities(std::string& detail) {
    Rng rng(6006);
    const Matrix s = oracle::random_matrix(rng, 8, 32);
    REQUIRE_OK(std::fabs(loss_align(s, s)) <= 1e-14, "align(S, S) must be 0");
    REQUIRE_OK(std::fabs(loss_align(scale(s, -1.0), s) - 2.0) <= 1e-14,
               "align(-S, S) must be 2");
    REQUIRE_OK(std::fabs(loss_align(scale(s, 2.0), s)) <= 1e-14, "align(2S, S) must be 0");

    const std::vector<double> prior{1, 1, 1, 1, 1, 0, 0, 0};
    REQUIRE_OK(loss_reg(prior, prior) == 0.0, "reg(m = prior) must be 0");
    REQUIRE_OK(loss_reg(std::vector<double>(8, 0.5), prior) == 2.0,
               "reg(0.5 * ones, binary prior, r = 8) must be 2.0");

    for (int trial = 0; trial < 100; ++trial) {
        const double task = rng.uniform() * 5.0;
        const double reg = rng.uniform() * 3.0;
        const double align = rng.uniform() * 2.0;
        const double total = task + 0.3 * reg + 0.5 * align;
        REQUIRE_OK(std::fabs(total - (task + 0.3 * reg + 0.5 * align)) <= 1e-12,
                   "breakdown identity violated at lambda1=0.3, lambda2=0.5");
    }
    detail = "alignment and regularizer identities, lambda1=0.3 / lambda2=0.5 breakdown";
}

// ---- criterion 7: gradient correctness --------------------------------------

void criterion_gradients(std::string& detail) {
    const auto t0 = Clock::now();
    ModelConfig mc;
    mc.vocab_size = 48;
    mc.d_model = 32;
    mc.n_layers = 2;
    mc.n_heads = 4;
    mc.max_seq_len = 16;

    double worst = 0.0;
    Rng rng(7007);
    for (int instance = 0; instance < 20; ++instance) {
        mc.seed = 100 + static_cast<std::uint64_t>(instance);
        const FrozenModel model = init_model(mc);

        const Matrix all = oracle::gram_schmidt_rows(oracle::random_matrix(rng, 8, 32));
        AlignedSubspace a;
        a.matrix = all;
        a.layout = {{SubspaceBasis::Kind::Shared, -1, 0, 2},
                    {SubspaceBasis::Kind::Private, 0, 2, 3},
                    {SubspaceBasis::Kind::Private, 1, 5, 3}};
        a.attribute_order = {0, 1};
        const SteeringModule module =
            init_steering(a,
                          instance % 2 == 0 ? Granularity::AttributeBlocks
                                            : Granularity::RankWise,
                          0.3, 0.5, 1, 9000 + static_cast<std::uint64_t>(instance));

        std::vector<int> tokens(5);
        for (int& t : tokens) t = static_cast<int>(rng.below(48));
        const int gold = static_cast<int>(rng.below(48));

        GradTape tape;
        SteeringParamNodes params = add_steering_params(tape, module);
        GradTape::Id mask_id = -1;
        auto hook = [&](GradTape& t, GradTape::Id row, std::size_t) {
            mask_id = mask_weights_node(t, module, params, row);
            GradTape::Id wh_b = t.add(t.matmul(row, t.transpose_of(params.w)), params.b);
            GradTape::Id rh = t.matmul(row, t.transpose_of(params.r));
            GradTape::Id edit = t.hadamard(mask_id, t.sub(wh_b, rh));
            return t.add(row, t.matmul(edit, params.r));
        };
        const auto logits =
            model.build_forward(tape, tokens, 1, {tokens.size() - 1}, hook, nullptr);
        const auto ce = tape.cross_entropy(tape.slice_rows(logits, tokens.size() - 1, 1), {gold});
        const auto reg =
            loss_reg_node(tape, mask_id, build_prior_mask(module.s_align.layout, instance % 2));
        const auto align = loss_align_node(tape, params, module.s_align.matrix);
        const auto total = tape.add(
            ce, tape.add(tape.scale(reg, module.lambda1), tape.scale(align, module.lambda2)));

        const double err = tape.grad_check(total, 1e-4);
        worst = std::max(worst, err);
        REQUIRE_OK(err <= 1e-4,
                   "gradient error exceeded 1e-4 on instance " + std::to_string(instance));
    }
    const double secs = seconds_since(t0);
    REQUIRE_OK(secs < 60.0, "runtime exceeded 60 s");
    char buf[112];
    std::snprintf(buf, sizeof buf, "20 instances, worst relative error %.2e, %.1f s", worst,
                  secs);
    detail = buf;
}

// ---- criterion 8: placement invariances -------------------------------------

void criterion_placement(std::string& detail) {
    Rng rng(8008);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t t_len = 2 + rng.below(14);
        const Matrix block = oracle::gram_schmidt_rows(oracle::random_matrix(rng, 3, 32));
        const Matrix q = oracle::gram_schmidt_rows(oracle::random_matrix(rng, 3, 3));
        const Matrix states = oracle::random_matrix(rng, t_len, 32);
        HiddenCapture cap;
        cap.states = states;
        cap.token_ids.assign(t_len, 0);

        const PlacementDecision base =
            select_position(block, cap, PlacementStrategy::ImportantToken, 0);
        const PlacementDecision rotated =
            select_position(matmul(q, block), cap, PlacementStrategy::ImportantToken, 0);
        REQUIRE_OK(base.position == rotated.position, "argmax changed under Q-rebasis");
        for (std::size_t t = 0; t < t_len; ++t) {
            REQUIRE_OK(std::fabs(base.scores[t] - rotated.scores[t]) <= 1e-10,
                       "scores changed under Q-rebasis beyond 1e-10");
        }

        HiddenCapture scaled;
        scaled.states = scale(states, 17.0);
        scaled.token_ids = cap.token_ids;
        const PlacementDecision s =
            select_position(block, scaled, PlacementStrategy::ImportantToken, 0);
        REQUIRE_OK(s.position == base.position, "argmax changed under uniform scaling");
    }

    // tie-break and fallback behave exactly as specified
    Matrix same(3, 4);
    for (std::size_t t = 0; t < 3; ++t) {
        same(t, 0) = 1.0;
        same(t, 1) = 2.0;
    }
    HiddenCapture tie;
    tie.states = same;
    tie.token_ids = {0, 0, 0};
    Matrix e0(1, 4);
    e0(0, 0) = 1.0;
    REQUIRE_OK(select_position(e0, tie, PlacementStrategy::ImportantToken, 0).position == 0,
               "ties must resolve to the smallest index");
    const PlacementDecision fb =
        select_position(Matrix(0, 4), tie, PlacementStrategy::ImportantToken, 0);
    REQUIRE_OK(fb.position == 2 && fb.fallback_last,
               "all-zero scores must fall back to T-1 with the flag set");
    detail = "500 seeded sequences, rebasis and scaling invariances hold";
}

// ---- criterion 9: end-to-end training oracle --------------------------------

MetricsReport default_desk_run() {
    ExperimentConfig cfg; // defaults are the desk experiment of the harness
    cfg.task.make_linalg = false;
    return run_experiment(cfg);
}

void criterion_training(std::string& detail) {
    const auto t0 = Clock::now();
    const MetricsReport r1 = default_desk_run();

    double min_reduction = 1e300;
    for (int attr = 0; attr < 2; ++attr) {
        const std::string p = "attr." + std::to_string(attr) + ".mean_loss";
        const double pre = r1.find_double("pre." + p);
        const double post = r1.find_double("post." + p);
        REQUIRE_OK(post < pre, "attribute " + std::to_string(attr) +
                                   " eval loss did not strictly decrease");
        REQUIRE_OK(pre - post >= kPinnedLossReduction,
                   "attribute " + std::to_string(attr) +
                       " reduction fell short of the pinned oracle threshold");
        min_reduction = std::min(min_reduction, pre - post);
    }
    REQUIRE_OK(r1.find("model.frozen") == "true", "frozen-model checksum changed");
    REQUIRE_OK(r1.find("train.aborted") == "false", "training aborted");

    const MetricsReport r2 = default_desk_run();
    REQUIRE_OK(r1 == r2, "repeat run is not bit-identical");

    const double secs = seconds_since(t0);
    REQUIRE_OK(secs < 300.0, "runtime exceeded 5 min");
    char buf[128];
    std::snprintf(buf, sizeof buf,
                  "min reduction %.2f (pinned %.2f), deterministic repeat, %.1f s",
                  min_reduction, kPinnedLossReduction, secs);
    detail = buf;
}

// ---- criterion 10: ablation structure ---------------------------------------

void criterion_ablation(std::string& detail) {
    const auto t0 = Clock::now();
    const fs::path dir = fs::temp_directory_path() / "msrs_acceptance_ablate";
    fs::remove_all(dir);

    Config grid;
    grid.set_int("task.samples_per_attribute", 96);
    grid.set("task.families", "model");
    grid.set_int("train.steps", 50);
    grid.set("axes.granularity", "same,attribute,rank");
    grid.set("axes.placement", "last,important");
    grid.set("axes.seed", "42,43,44");

    const AblationOutcome first = run_ablation(grid, dir.string(), false, true);
    REQUIRE_OK(first.cell_keys.size() == 18, "expected 3 x 2 x 3 = 18 cells");
    REQUIRE_OK(first.cells_run == 18, "not every cell ran");

    // distinct deterministic outputs per cell
    auto file_text = [&](const std::string& key) {
        std::ifstream in(dir / (key + ".report"));
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    std::map<std::string, int> seen;
    std::map<std::string, std::string> original;
    for (const std::string& key : first.cell_keys) {
        const std::string text = file_text(key);
        REQUIRE_OK(!text.empty(), "missing report for cell " + key);
        seen[text] += 1;
        original[key] = text;
    }
    REQUIRE_OK(seen.size() == 18, "cell reports are not pairwise distinct");

    // summary carries mean and std per cell group
    const MetricsReport summary = MetricsReport::load((dir / "summary.txt").string());
    int groups_checked = 0;
    for (const char* g : {"same", "attribute", "rank"}) {
        for (const char* p : {"last", "important"}) {
            const std::string base = "g-" + std::string(g) + "_p-" + p + "_l-1_a-full.attr.0.";
            REQUIRE_OK(summary.has(base + "accuracy_mean"),
                       "summary missing " + base + "accuracy_mean");
            REQUIRE_OK(summary.has(base + "accuracy_std"),
                       "summary missing " + base + "accuracy_std");
            ++groups_checked;
        }
    }
    REQUIRE_OK(fs::exists(dir / "grid.csv"), "csv table not emitted");

    // interruption: delete two cells' outputs and resume
    const std::vector<std::string> victims{first.cell_keys[1], first.cell_keys[10]};
    for (const std::string& v : victims) {
        fs::remove(dir / (v + ".report"));
        fs::remove(dir / (v + ".done"));
    }
    const AblationOutcome resumed = run_ablation(grid, dir.string(), true, false);
    REQUIRE_OK(resumed.cells_run == 2, "resume recomputed the wrong number of cells");
    REQUIRE_OK(resumed.cells_skipped == 16, "resume skipped the wrong number of cells");
    for (const std::string& key : first.cell_keys) {
        REQUIRE_OK(file_text(key) == original.at(key),
                   "cell output changed across resume (order dependence): " + key);
    }

    // report (not assert) the granularity ordering at this scale
    std::string ranking = "mean accuracy by granularity (last-token):";
    for (const char* g : {"same", "attribute", "rank"}) {
        double acc = 0.0;
        int n = 0;
        for (int attr = 0; attr < 2; ++attr) {
            acc += summary.find_double("g-" + std::string(g) + "_p-last_l-1_a-full.attr." +
                                       std::to_string(attr) + ".accuracy_mean");
            ++n;
        }
        char buf[48];
        std::snprintf(buf, sizeof buf, " %s=%.3f", g, acc / n);
        ranking += buf;
    }
    std::printf("       %s\n", ranking.c_str());

    fs::remove_all(dir);
    const double secs = seconds_since(t0);
    char buf[96];
    std::snprintf(buf, sizeof buf, "18 cells + resume, %d groups summarized, %.1f s",
                  groups_checked, secs);
    detail = buf;
}

// ---- criterion 11: persistence ----------------------------------------------

void criterion_persistence(std::string& detail) {
    const fs::path dir = fs::temp_directory_path() / "msrs_acceptance_persist";
    fs::remove_all(dir);
    fs::create_directories(dir);
    Rng rng(1111);

    auto file_bytes = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in),
                           std::istreambuf_iterator<char>());
    };

    // 100 round-trips per storable type
    for (int i = 0; i < 100; ++i) {
        const fs::path p = dir / "m.msrs";
        const Matrix m = oracle::random_matrix(rng, 1 + rng.below(8), 1 + rng.below(8));
        save_matrix(p.string(), m);
        REQUIRE_OK(load_matrix(p.string()) == m, "matrix round-trip differed");
    }
    for (int i = 0; i < 100; ++i) {
        SubspaceBasis b;
        b.kind = i % 2 == 0 ? SubspaceBasis::Kind::Shared : SubspaceBasis::Kind::Private;
        b.attribute = i % 2 == 0 ? -1 : i % 3;
        b.basis = oracle::gram_schmidt_rows(oracle::random_matrix(rng, 1 + rng.below(4), 12));
        b.energy_captured = rng.uniform();
        const fs::path p = dir / "b.msrs";
        save_basis(p.string(), b);
        const SubspaceBasis back = load_basis(p.string());
        REQUIRE_OK(back.basis == b.basis && back.energy_captured == b.energy_captured,
                   "basis round-trip differed");
    }
    for (int i = 0; i < 100; ++i) {
        const Matrix all = oracle::gram_schmidt_rows(oracle::random_matrix(rng, 6, 16));
        AlignedSubspace a;
        a.matrix = all;
        a.layout = {{SubspaceBasis::Kind::Shared, -1, 0, 2},
                    {SubspaceBasis::Kind::Private, 0, 2, 2},
                    {SubspaceBasis::Kind::Private, 1, 4, 2}};
        a.attribute_order = {0, 1};
        const fs::path p = dir / "a.msrs";
        save_aligned(p.string(), a);
        REQUIRE_OK(load_aligned(p.string()).matrix == a.matrix, "aligned round-trip differed");
    }
    ModelConfig mc;
    mc.vocab_size = 32;
    mc.d_model = 16;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.max_seq_len = 8;
    for (int i = 0; i < 100; ++i) {
        mc.seed = static_cast<std::uint64_t>(i);
        const FrozenModel model = init_model(mc);
        const fs::path p = dir / "model.msrs";
        save_model(p.string(), model);
        REQUIRE_OK(load_model(p.string()).checksum() == model.checksum(),
                   "model round-trip differed");
        const std::string once = file_bytes(p);
        save_model(p.string(), model);
        REQUIRE_OK(file_bytes(p) == once, "model re-save differed");
    }
    {
        const Matrix all = oracle::gram_schmidt_rows(oracle::random_matrix(rng, 4, 16));
        AlignedSubspace a;
        a.matrix = all;
        a.layout = {{SubspaceBasis::Kind::Shared, -1, 0, 2},
                    {SubspaceBasis::Kind::Private, 0, 2, 2}};
        a.attribute_order = {0};
        for (int i = 0; i < 100; ++i) {
            SteeringModule m = init_steering(a, Granularity::AttributeBlocks, 0.3, 0.5, 1,
                                             static_cast<std::uint64_t>(i));
            const fs::path p = dir / "ckpt.msrs";
            save_checkpoint(p.string(), m);
            const SteeringModule back = load_checkpoint(p.string());
            REQUIRE_OK(back.r_basis == m.r_basis && back.mlp_w1 == m.mlp_w1 &&
                           back.s_align.matrix == m.s_align.matrix,
                       "checkpoint round-trip differed");
        }
    }

    // crafted corruptions, each rejected with the correct named check
    const Matrix m = oracle::random_matrix(rng, 4, 4);
    const fs::path good_path = dir / "good.msrs";
    save_matrix(good_path.string(), m);
    const std::string good = file_bytes(good_path);

    auto expect_reject = [&](const std::string& bytes, const std::string& needle) {
        const fs::path p = dir / "bad.msrs";
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        out << bytes;
        out.close();
        try {
            (void)load_matrix(p.string());
        } catch (const io_error& e) {
            REQUIRE_OK(std::string(e.what()).find(needle) != std::string::npos,
                       "rejection did not name '" + needle + "': " + e.what());
            return;
        }
        throw Failure{"corrupted file was accepted (wanted '" + needle + "')"};
    };
    expect_reject(good.substr(0, good.size() - 1), "truncated");
    {
        std::string bad = good;
        bad[0] = 'Z';
        expect_reject(bad, "magic");
    }
    {
        std::string bad = good;
        bad[30] = static_cast<char>(bad[30] ^ 0x01); // inside the payload
        expect_reject(bad, "checksum");
    }
    {
        SubspaceBasis b;
        b.kind = SubspaceBasis::Kind::Shared;
        b.attribute = -1;
        b.basis = oracle::random_matrix(rng, 2, 8); // deliberately not orthonormal
        const fs::path p = dir / "nonortho.msrs";
        save_basis(p.string(), b);
        try {
            (void)load_basis(p.string());
            throw Failure{"non-orthonormal basis was accepted"};
        } catch (const io_error& e) {
            REQUIRE_OK(std::string(e.what()).find("orthonormality") != std::string::npos,
                       "rejection did not name orthonormality");
        }
    }

    fs::remove_all(dir);
    detail = "100 round-trips per type, all crafted corruptions rejected by name";
}

struct Criterion {
    int id;
    const char* name;
    std::function<void(std::string&)> run;
};

} // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria{
        {1, "svd kernel", criterion_svd},
        {2, "energy-rank minimality", criterion_energy_rank},
        {3, "shared/private orthogonality", criterion_orthogonality},
        {4, "planted-subspace recovery", criterion_planted_recovery},
        {5, "intervention fixed points", criterion_fixed_points},
        {6, "loss identities", criterion_loss_identities},
        {7, "gradient correctness", criterion_gradients},
        {8, "placement invariances", criterion_placement},
        {9, "end-to-end training oracle", criterion_training},
        {10, "ablation structure", criterion_ablation},
        {11, "persistence", criterion_persistence},
    };

    int only = 0;
    if (argc > 1) only = std::atoi(argv[1]);

    int failures = 0;
    for (const Criterion& c : criteria) {
        if (only != 0 && c.id != only) continue;
        std::string detail;
        try {
            c.run(detail);
            std::printf("[%2d] PASS  %-30s %s\n", c.id, c.name, detail.c_str());
        } catch (const Failure& f) {
            std::printf("[%2d] FAIL  %-30s %s\n", c.id, c.name, f.detail.c_str());
            ++failures;
        } catch (const std::exception& e) {
            std::printf("[%2d] FAIL  %-30s unexpected exception: %s\n", c.id, c.name, e.what());
            ++failures;
        }
        std::fflush(stdout);
    }
    if (only == 0) {
        std::printf("%d/%zu criteria passed\n",
                    static_cast<int>(criteria.size()) - failures, criteria.size());
    }
    return failures == 0 ? 0 : 1;
}
