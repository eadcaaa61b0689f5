#include "msrs/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "msrs/container.hpp"
#include "msrs/errors.hpp"
#include "msrs/svd.hpp"

namespace fs = std::filesystem;

namespace msrs {

namespace {

// The intervention for one row, optionally hard-gated by a prior mask.
GradTape::Id apply_phi(GradTape& tape, const SteeringModule& module,
                       const SteeringParamNodes& params, GradTape::Id row,
                       int forced_attribute) {
    if (forced_attribute < 0) return intervene_node(tape, module, params, row);
    const PriorMask prior = build_prior_mask(module.s_align.layout, forced_attribute);
    GradTape::Id mask = tape.input(Matrix::row_vector(prior.values), false);
    GradTape::Id wh_b = tape.add(tape.matmul(row, tape.transpose_of(params.w)), params.b);
    GradTape::Id rh = tape.matmul(row, tape.transpose_of(params.r));
    GradTape::Id edit = tape.hadamard(mask, tape.sub(wh_b, rh));
    return tape.add(row, tape.matmul(edit, params.r));
}

} // namespace

EvalOutcome evaluate(const FrozenModel& model, const SteeringModule& module,
                     const std::vector<TrainSample>& data, const EvalOptions& opts) {
    if (data.empty()) throw config_error("evaluate: empty dataset");

    struct Accum {
        std::size_t count = 0;
        std::size_t correct = 0;
        double loss_sum = 0.0;
        std::map<std::size_t, std::size_t> positions;
    };
    std::map<int, Accum> per_attr;

    EvalOutcome out;
    for (const TrainSample& s : data) {
        const auto [base_logits, capture] = model.forward_capture(s.tokens, module.layer);
        const std::size_t t_len = s.tokens.size();

        // intervention positions chosen per attribute
        std::map<std::size_t, std::vector<int>> by_position;
        if (opts.apply_intervention) {
            if (opts.strategy == PlacementStrategy::LastToken) {
                for (int attr : module.s_align.attribute_order) {
                    by_position[t_len - 1].push_back(attr);
                }
            } else {
                for (int attr : module.s_align.attribute_order) {
                    const Matrix block = scoring_block(module.r_basis, module.s_align, attr,
                                                       opts.include_shared, opts.orthonormalize);
                    const PlacementDecision d =
                        select_position(block, capture, opts.strategy, attr);
                    by_position[d.position].push_back(attr);
                }
            }
        }

        Matrix logits;
        if (by_position.empty()) {
            logits = base_logits;
        } else {
            GradTape tape;
            SteeringParamNodes params = add_steering_params(tape, module, false);
            std::vector<std::size_t> positions;
            for (const auto& [pos, attrs] : by_position) positions.push_back(pos);
            auto hook = [&](GradTape& t, GradTape::Id row, std::size_t pos) {
                const std::size_t applications =
                    opts.compose_duplicate ? by_position.at(pos).size() : 1;
                GradTape::Id cur = row;
                for (std::size_t i = 0; i < applications; ++i) {
                    cur = apply_phi(t, module, params, cur, opts.forced_attribute);
                }
                return cur;
            };
            GradTape::Id node =
                model.build_forward(tape, s.tokens, module.layer, positions, hook, nullptr);
            logits = tape.value(node);
        }

        const std::size_t last = t_len - 1;
        const double loss = task_loss(logits.row(last), s.label);
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j) {
            if (logits(last, j) > logits(last, best)) best = j;
        }

        Accum& acc = per_attr[s.attribute];
        ++acc.count;
        acc.loss_sum += loss;
        if (static_cast<int>(best) == s.label) ++acc.correct;
        for (const auto& [pos, attrs] : by_position) {
            for (int attr : attrs) ++per_attr[attr].positions[pos];
        }

        SampleOutcome so;
        so.attribute = s.attribute;
        so.gold = s.label;
        so.predicted = static_cast<int>(best);
        so.loss = loss;
        for (const auto& [pos, attrs] : by_position) so.positions.push_back(pos);
        out.samples.push_back(std::move(so));
    }

    MetricsReport& r = out.report;
    r.put("report.kind", "eval");
    r.put("eval.placement", placement_to_string(opts.strategy));
    std::size_t total = 0, total_correct = 0;
    double total_loss = 0.0;
    for (const auto& [attr, acc] : per_attr) {
        if (acc.count == 0) continue;
        const std::string p = "attr." + std::to_string(attr) + ".";
        r.put_int(p + "count", static_cast<long long>(acc.count));
        r.put_double(p + "accuracy",
                     static_cast<double>(acc.correct) / static_cast<double>(acc.count));
        r.put_double(p + "mean_loss", acc.loss_sum / static_cast<double>(acc.count));
        if (!acc.positions.empty()) {
            std::string hist;
            for (const auto& [pos, n] : acc.positions) {
                if (!hist.empty()) hist += ",";
                hist += std::to_string(pos) + ":" + std::to_string(n);
            }
            r.put(p + "positions", hist);
        }
        total += acc.count;
        total_correct += acc.correct;
        total_loss += acc.loss_sum;
    }
    r.put_double("overall.accuracy",
                 static_cast<double>(total_correct) / static_cast<double>(total));
    r.put_double("overall.mean_loss", total_loss / static_cast<double>(total));
    return out;
}

// --- config plumbing ------------------------------------------------------

Granularity granularity_from_string(const std::string& s) {
    if (s == "same") return Granularity::SameSpace;
    if (s == "attribute") return Granularity::AttributeBlocks;
    if (s == "rank") return Granularity::RankWise;
    throw config_error("unknown granularity '" + s + "' (same|attribute|rank)");
}

std::string granularity_to_string(Granularity g) {
    switch (g) {
    case Granularity::SameSpace: return "same";
    case Granularity::AttributeBlocks: return "attribute";
    case Granularity::RankWise: return "rank";
    }
    return "attribute";
}

PlacementStrategy placement_from_string(const std::string& s) {
    if (s == "last") return PlacementStrategy::LastToken;
    if (s == "important") return PlacementStrategy::ImportantToken;
    throw config_error("unknown placement '" + s + "' (last|important)");
}

std::string placement_to_string(PlacementStrategy p) {
    return p == PlacementStrategy::LastToken ? "last" : "important";
}

const std::set<std::string>& experiment_config_keys() {
    static const std::set<std::string> keys = {
        "task.n_attributes", "task.samples_per_attribute", "task.seq_len", "task.shared_rank",
        "task.private_ranks", "task.noise_sigma", "task.label_count", "task.mean_scale",
        "task.coeff_scale", "task.shared_jitter", "task.train_fraction", "task.seed",
        "task.families", "model.vocab_size", "model.d_model", "model.n_layers", "model.n_heads",
        "model.max_seq_len", "model.seed", "layer", "extract.threshold", "extract.residual_source",
        "extract.energy", "extract.cross_orthogonalize", "extract.max_total_rank",
        "train.granularity", "train.lambda1", "train.lambda2", "train.lr", "train.steps",
        "train.batch", "train.seed", "train.position", "train.alignment", "eval.placement",
        "eval.include_shared", "eval.orthonormalize", "eval.compose_duplicate",
        "eval.forced_attribute",
    };
    return keys;
}

ExperimentConfig experiment_from_config(const Config& cfg) {
    ExperimentConfig e;
    e.task.n_attributes = cfg.get_int("task.n_attributes", e.task.n_attributes);
    e.task.samples_per_attribute =
        cfg.get_int("task.samples_per_attribute", e.task.samples_per_attribute);
    e.task.seq_len = cfg.get_int("task.seq_len", e.task.seq_len);
    e.task.shared_rank = cfg.get_int("task.shared_rank", e.task.shared_rank);
    for (const std::string& s : cfg.get_list("task.private_ranks")) {
        e.task.private_ranks.push_back(std::stoi(s));
    }
    e.task.noise_sigma = cfg.get_double("task.noise_sigma", e.task.noise_sigma);
    e.task.label_count = cfg.get_int("task.label_count", e.task.label_count);
    e.task.mean_scale = cfg.get_double("task.mean_scale", e.task.mean_scale);
    e.task.coeff_scale = cfg.get_double("task.coeff_scale", e.task.coeff_scale);
    e.task.shared_jitter = cfg.get_double("task.shared_jitter", e.task.shared_jitter);
    e.task.train_fraction = cfg.get_double("task.train_fraction", e.task.train_fraction);
    e.task.seed = cfg.get_u64("task.seed", e.task.seed);
    if (cfg.has("task.families")) {
        e.task.make_linalg = false;
        e.task.make_model = false;
        for (const std::string& f : cfg.get_list("task.families")) {
            if (f == "linalg") {
                e.task.make_linalg = true;
            } else if (f == "model") {
                e.task.make_model = true;
            } else {
                throw config_error("task.families: unknown family '" + f + "'");
            }
        }
    }
    e.task.model.vocab_size = cfg.get_int("model.vocab_size", e.task.model.vocab_size);
    e.task.model.d_model = cfg.get_int("model.d_model", e.task.model.d_model);
    e.task.model.n_layers = cfg.get_int("model.n_layers", e.task.model.n_layers);
    e.task.model.n_heads = cfg.get_int("model.n_heads", e.task.model.n_heads);
    e.task.model.max_seq_len = cfg.get_int("model.max_seq_len", e.task.model.max_seq_len);
    e.task.model.seed = cfg.get_u64("model.seed", e.task.model.seed);
    e.task.layer = cfg.get_int("layer", e.task.layer);

    e.extract.threshold = cfg.get_double("extract.threshold", e.extract.threshold);
    const std::string rs = cfg.get_string("extract.residual_source", "samples");
    if (rs == "samples") {
        e.extract.residual_source = ExtractOptions::ResidualSource::Samples;
    } else if (rs == "mean") {
        e.extract.residual_source = ExtractOptions::ResidualSource::Mean;
    } else {
        throw config_error("extract.residual_source: expected mean|samples");
    }
    const std::string en = cfg.get_string("extract.energy", "sigma");
    if (en == "sigma") {
        e.extract.energy = ExtractOptions::Energy::Sigma;
    } else if (en == "sigma_squared") {
        e.extract.energy = ExtractOptions::Energy::SigmaSquared;
    } else {
        throw config_error("extract.energy: expected sigma|sigma_squared");
    }
    e.extract.cross_orthogonalize = cfg.get_bool("extract.cross_orthogonalize", false);
    e.extract.max_total_rank =
        static_cast<std::size_t>(cfg.get_int("extract.max_total_rank", 0));

    e.granularity = granularity_from_string(cfg.get_string("train.granularity", "attribute"));
    e.lambda1 = cfg.get_double("train.lambda1", e.lambda1);
    e.lambda2 = cfg.get_double("train.lambda2", e.lambda2);
    e.train.lr = cfg.get_double("train.lr", e.train.lr);
    e.train.steps = cfg.get_int("train.steps", e.train.steps);
    e.train.batch_size = cfg.get_int("train.batch", e.train.batch_size);
    e.train.seed = cfg.get_u64("train.seed", e.train.seed);
    const std::string tp = cfg.get_string("train.position", "last");
    e.train.position =
        tp == "important" ? TrainPosition::ImportantToken : TrainPosition::LastToken;
    e.alignment_mode = cfg.get_string("train.alignment", "full");
    if (e.alignment_mode != "full" && e.alignment_mode != "reft" &&
        e.alignment_mode != "svd_fixed") {
        throw config_error("train.alignment: expected full|reft|svd_fixed");
    }

    e.eval.strategy = placement_from_string(cfg.get_string("eval.placement", "last"));
    e.eval.include_shared = cfg.get_bool("eval.include_shared", false);
    e.eval.orthonormalize = cfg.get_bool("eval.orthonormalize", false);
    e.eval.compose_duplicate = cfg.get_bool("eval.compose_duplicate", false);
    e.eval.forced_attribute = cfg.get_int("eval.forced_attribute", -1);
    return e;
}

Config experiment_to_config(const ExperimentConfig& e) {
    Config c;
    c.set_int("task.n_attributes", e.task.n_attributes);
    c.set_int("task.samples_per_attribute", e.task.samples_per_attribute);
    c.set_int("task.seq_len", e.task.seq_len);
    c.set_int("task.shared_rank", e.task.shared_rank);
    if (!e.task.private_ranks.empty()) {
        std::string s;
        for (std::size_t i = 0; i < e.task.private_ranks.size(); ++i) {
            if (i > 0) s += ",";
            s += std::to_string(e.task.private_ranks[i]);
        }
        c.set("task.private_ranks", s);
    }
    c.set_double("task.noise_sigma", e.task.noise_sigma);
    c.set_int("task.label_count", e.task.label_count);
    c.set_double("task.mean_scale", e.task.mean_scale);
    c.set_double("task.coeff_scale", e.task.coeff_scale);
    c.set_double("task.shared_jitter", e.task.shared_jitter);
    c.set_double("task.train_fraction", e.task.train_fraction);
    c.set_int("task.seed", static_cast<long long>(e.task.seed));
    std::string families;
    if (e.task.make_linalg) families = "linalg";
    if (e.task.make_model) families += families.empty() ? "model" : ",model";
    c.set("task.families", families);
    c.set_int("model.vocab_size", e.task.model.vocab_size);
    c.set_int("model.d_model", e.task.model.d_model);
    c.set_int("model.n_layers", e.task.model.n_layers);
    c.set_int("model.n_heads", e.task.model.n_heads);
    c.set_int("model.max_seq_len", e.task.model.max_seq_len);
    c.set_int("model.seed", static_cast<long long>(e.task.model.seed));
    c.set_int("layer", e.task.layer);
    c.set_double("extract.threshold", e.extract.threshold);
    c.set("extract.residual_source",
          e.extract.residual_source == ExtractOptions::ResidualSource::Samples ? "samples"
                                                                               : "mean");
    c.set("extract.energy",
          e.extract.energy == ExtractOptions::Energy::Sigma ? "sigma" : "sigma_squared");
    c.set("extract.cross_orthogonalize", e.extract.cross_orthogonalize ? "true" : "false");
    c.set_int("extract.max_total_rank", static_cast<long long>(e.extract.max_total_rank));
    c.set("train.granularity", granularity_to_string(e.granularity));
    c.set_double("train.lambda1", e.lambda1);
    c.set_double("train.lambda2", e.lambda2);
    c.set_double("train.lr", e.train.lr);
    c.set_int("train.steps", e.train.steps);
    c.set_int("train.batch", e.train.batch_size);
    c.set_int("train.seed", static_cast<long long>(e.train.seed));
    c.set("train.position",
          e.train.position == TrainPosition::ImportantToken ? "important" : "last");
    c.set("train.alignment", e.alignment_mode);
    c.set("eval.placement", placement_to_string(e.eval.strategy));
    c.set("eval.include_shared", e.eval.include_shared ? "true" : "false");
    c.set("eval.orthonormalize", e.eval.orthonormalize ? "true" : "false");
    c.set("eval.compose_duplicate", e.eval.compose_duplicate ? "true" : "false");
    c.set_int("eval.forced_attribute", e.eval.forced_attribute);
    return c;
}

namespace {

void put_eval_section(MetricsReport& r, const std::string& prefix, const MetricsReport& eval) {
    for (const auto& [k, v] : eval.entries) {
        if (k == "report.kind") continue;
        r.put(prefix + k, v);
    }
}

void put_recovery_diagnostics(MetricsReport& r, const GeneratedTasks& tasks,
                              const ExtractOptions& opts, int layer) {
    const ActivationBank bank = make_bank(tasks.linalg_samples, layer);
    const SubspaceBasis shared = extract_shared(bank, opts);
    r.put_int("recovery.shared_rank", static_cast<long long>(shared.rank()));
    const auto shared_angles = principal_angles(shared.basis, tasks.planted_shared);
    if (!shared_angles.empty()) {
        r.put_double("recovery.shared_angle_max", shared_angles.back());
    }
    for (std::size_t i = 0; i < bank.attribute_count(); ++i) {
        const SubspaceBasis priv = extract_private(bank, static_cast<int>(i), shared, opts);
        const std::string p = "recovery.private_" + std::to_string(i) + ".";
        r.put_int(p + "rank", static_cast<long long>(priv.rank()));
        if (!priv.empty()) {
            const auto angles = principal_angles(priv.basis, tasks.planted_private[i]);
            if (!angles.empty()) r.put_double(p + "angle_max", angles.back());
        }
    }
}

} // namespace

MetricsReport run_experiment(const ExperimentConfig& cfg) {
    MetricsReport report;
    report.put("report.kind", "experiment");
    const Config echo = experiment_to_config(cfg);
    for (const auto& [k, v] : echo.entries()) report.put("config." + k, v);

    const FrozenModel model = init_model(cfg.task.model);
    const std::uint64_t checksum_before = model.checksum();
    report.put("model.checksum_before", std::to_string(checksum_before));

    AttributeTaskSpec task = cfg.task;
    task.make_model = true; // the experiment path always needs labeled sequences
    const GeneratedTasks tasks = generate_tasks(task, model);

    if (task.make_linalg) put_recovery_diagnostics(report, tasks, cfg.extract, task.layer);

    // Subspaces from the training sequences through the frozen model.
    std::vector<std::vector<std::vector<int>>> seqs(
        static_cast<std::size_t>(task.n_attributes));
    for (const TrainSample& s : tasks.train_set) {
        seqs[static_cast<std::size_t>(s.attribute)].push_back(s.tokens);
    }
    const ActivationBank bank = aggregate(model, seqs, task.layer);
    const SubspaceBasis shared = extract_shared(bank, cfg.extract);
    std::vector<SubspaceBasis> privates;
    for (std::size_t i = 0; i < bank.attribute_count(); ++i) {
        privates.push_back(extract_private(bank, static_cast<int>(i), shared, cfg.extract));
    }
    const AlignedSubspace aligned = build_aligned(shared, privates, cfg.extract);
    for (const BlockDesc& b : aligned.layout) {
        const std::string name = b.kind == SubspaceBasis::Kind::Shared
                                     ? "subspace.shared_rank"
                                     : "subspace.private_" + std::to_string(b.attribute) +
                                           "_rank";
        report.put_int(name, static_cast<long long>(b.length));
    }
    report.put_int("subspace.total_rank", static_cast<long long>(aligned.total_rank()));
    report.put_double("subspace.shared_energy", shared.energy_captured);
    for (const SubspaceBasis& p : privates) {
        report.put_double("subspace.private_" + std::to_string(p.attribute) + "_energy",
                          p.energy_captured);
    }

    TrainConfig train_cfg = cfg.train;
    SteeringInit init_style = SteeringInit::Aligned;
    bool use_align = true;
    if (cfg.alignment_mode == "reft") {
        init_style = SteeringInit::Random;
        use_align = false;
    } else if (cfg.alignment_mode == "svd_fixed") {
        train_cfg.train_r = false;
        use_align = false;
    }
    train_cfg.use_align = use_align;

    SteeringModule module = init_steering(aligned, cfg.granularity, cfg.lambda1, cfg.lambda2,
                                          task.layer, cfg.train.seed, init_style);
    if (cfg.alignment_mode == "svd_fixed") {
        module.r_basis = aligned.matrix; // frozen at the concatenated SVD basis
        module.w = module.r_basis;
    }

    const std::vector<TrainSample>& eval_set =
        tasks.eval_set.empty() ? tasks.train_set : tasks.eval_set;
    const EvalOutcome pre = evaluate(model, module, eval_set, cfg.eval);
    put_eval_section(report, "pre.", pre.report);

    const TrainResult tr = train(module, model, tasks.train_set, train_cfg);
    report.put("train.aborted", tr.aborted ? "true" : "false");
    if (tr.aborted) report.put("train.abort_reason", tr.abort_reason);
    report.put_int("train.steps_run", static_cast<long long>(tr.log.size()));
    for (const StepRecord& s : tr.log) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g", s.losses.task, s.losses.reg,
                      s.losses.align, s.losses.total);
        report.put("trajectory." + std::to_string(s.step), buf);
    }

    const EvalOutcome post = evaluate(model, module, eval_set, cfg.eval);
    put_eval_section(report, "post.", post.report);

    const std::uint64_t checksum_after = model.checksum();
    report.put("model.checksum_after", std::to_string(checksum_after));
    report.put("model.frozen", checksum_before == checksum_after ? "true" : "false");
    return report;
}

// --- CLI directory operations ----------------------------------------------

void cli_generate(const std::string& spec_path, const std::string& out_dir) {
    const Config spec = Config::parse_file(spec_path, experiment_config_keys());
    const ExperimentConfig e = experiment_from_config(spec);

    fs::create_directories(out_dir);
    const FrozenModel model = init_model(e.task.model);
    const GeneratedTasks tasks = generate_tasks(e.task, model);

    const fs::path dir(out_dir);
    save_model((dir / "model.msrs").string(), model);

    SubspaceBasis shared;
    shared.kind = SubspaceBasis::Kind::Shared;
    shared.basis = tasks.planted_shared;
    shared.energy_captured = 1.0;
    save_basis((dir / "planted_shared.msrs").string(), shared);
    for (std::size_t i = 0; i < tasks.planted_private.size(); ++i) {
        SubspaceBasis priv;
        priv.kind = SubspaceBasis::Kind::Private;
        priv.attribute = static_cast<int>(i);
        priv.basis = tasks.planted_private[i];
        priv.energy_captured = 1.0;
        save_basis((dir / ("planted_private_" + std::to_string(i) + ".msrs")).string(), priv);
    }
    for (std::size_t i = 0; i < tasks.probes.size(); ++i) {
        save_matrix((dir / ("probe_" + std::to_string(i) + ".msrs")).string(), tasks.probes[i]);
    }

    if (e.task.make_model) {
        save_records((dir / "train.txt").string(), to_records(tasks.train_set));
        save_records((dir / "eval.txt").string(), to_records(tasks.eval_set));
    }
    if (e.task.make_linalg) {
        std::vector<DatasetRecord> recs;
        for (std::size_t i = 0; i < tasks.linalg_samples.size(); ++i) {
            const Matrix& rows = tasks.linalg_samples[i];
            for (std::size_t j = 0; j < rows.rows(); ++j) {
                DatasetRecord r;
                r.attribute = static_cast<int>(i);
                r.vec.assign(rows.row(j).begin(), rows.row(j).end());
                recs.push_back(std::move(r));
            }
        }
        save_records((dir / "linalg.txt").string(), recs);
    }

    std::ofstream echo(dir / "spec.cfg");
    echo << experiment_to_config(e).to_text();
}

void cli_extract(const std::string& data_dir, const std::string& model_path, int layer,
                 const ExtractOptions& opts, const std::string& out_dir) {
    const fs::path dir(data_dir);
    fs::create_directories(out_dir);

    ActivationBank bank;
    if (fs::exists(dir / "train.txt")) {
        const FrozenModel model = load_model(model_path);
        const auto records = load_records((dir / "train.txt").string());
        const auto samples = to_samples(records);
        int max_attr = 0;
        for (const TrainSample& s : samples) max_attr = std::max(max_attr, s.attribute);
        std::vector<std::vector<std::vector<int>>> seqs(static_cast<std::size_t>(max_attr) + 1);
        for (const TrainSample& s : samples) {
            seqs[static_cast<std::size_t>(s.attribute)].push_back(s.tokens);
        }
        bank = aggregate(model, seqs, layer);
    } else if (fs::exists(dir / "linalg.txt")) {
        const auto records = load_records((dir / "linalg.txt").string());
        bank = make_bank(records_to_activation_rows(records), layer);
    } else {
        throw io_error("extract: neither train.txt nor linalg.txt found in " + data_dir);
    }

    const SubspaceBasis shared = extract_shared(bank, opts);
    std::vector<SubspaceBasis> privates;
    for (std::size_t i = 0; i < bank.attribute_count(); ++i) {
        privates.push_back(extract_private(bank, static_cast<int>(i), shared, opts));
    }
    const AlignedSubspace aligned = build_aligned(shared, privates, opts);

    const fs::path out(out_dir);
    save_basis((out / "shared.msrs").string(), shared);
    for (std::size_t i = 0; i < privates.size(); ++i) {
        save_basis((out / ("private_" + std::to_string(i) + ".msrs")).string(), privates[i]);
    }
    save_aligned((out / "aligned.msrs").string(), aligned);

    Config echo;
    echo.set_int("layer", layer);
    echo.set_double("threshold", opts.threshold);
    echo.set("residual_source",
             opts.residual_source == ExtractOptions::ResidualSource::Samples ? "samples" : "mean");
    echo.set("energy", opts.energy == ExtractOptions::Energy::Sigma ? "sigma" : "sigma_squared");
    echo.set("cross_orthogonalize", opts.cross_orthogonalize ? "true" : "false");
    echo.set_int("max_total_rank", static_cast<long long>(opts.max_total_rank));
    std::ofstream f(out / "extract.cfg");
    f << echo.to_text();
}

void cli_train(const std::string& subspaces_dir, const std::string& data_dir,
               const std::string& model_path, Granularity granularity, double lambda1,
               double lambda2, double lr, int steps, std::uint64_t seed,
               const std::string& out_ckpt) {
    const fs::path sub(subspaces_dir);
    const AlignedSubspace aligned = load_aligned((sub / "aligned.msrs").string());
    static const std::set<std::string> extract_keys = {
        "layer", "threshold", "residual_source", "energy", "cross_orthogonalize",
        "max_total_rank"};
    const Config extract_cfg = Config::parse_file((sub / "extract.cfg").string(), extract_keys);
    const int layer = extract_cfg.get_int("layer", 0);

    const FrozenModel model = load_model(model_path);
    const auto records = load_records((fs::path(data_dir) / "train.txt").string());
    const auto samples = to_samples(records);

    SteeringModule module =
        init_steering(aligned, granularity, lambda1, lambda2, layer, seed);
    TrainConfig cfg;
    cfg.lr = lr;
    cfg.steps = steps;
    cfg.seed = seed;
    const TrainResult result = train(module, model, samples, cfg);
    if (result.aborted) {
        // last-good parameters are retained in `module`; persist them with
        // the failure surfaced to the caller
        save_checkpoint(out_ckpt, module);
        throw numeric_error("train: " + result.abort_reason);
    }
    save_checkpoint(out_ckpt, module);

    std::ofstream log(out_ckpt + ".log", std::ios::trunc);
    if (!log) throw io_error("cannot open for writing: " + out_ckpt + ".log");
    char buf[200];
    for (const StepRecord& s : result.log) {
        std::snprintf(buf, sizeof buf, "step=%d task=%.17g reg=%.17g align=%.17g total=%.17g\n",
                      s.step, s.losses.task, s.losses.reg, s.losses.align, s.losses.total);
        log << buf;
    }
}

void cli_eval(const std::string& ckpt_path, const std::string& data_dir,
              PlacementStrategy strategy, const std::string& report_path,
              int forced_attribute) {
    const SteeringModule module = load_checkpoint(ckpt_path);
    const fs::path dir(data_dir);
    const FrozenModel model = load_model((dir / "model.msrs").string());
    const fs::path eval_file =
        fs::exists(dir / "eval.txt") ? dir / "eval.txt" : dir / "train.txt";
    const auto samples = to_samples(load_records(eval_file.string()));

    EvalOptions opts;
    opts.strategy = strategy;
    opts.forced_attribute = forced_attribute;
    const EvalOutcome outcome = evaluate(model, module, samples, opts);
    outcome.report.save(report_path);
}

} // namespace msrs
