#pragma once

#include <set>
#include <string>
#include <vector>

#include "msrs/config.hpp"
#include "msrs/dataset.hpp"
#include "msrs/metrics.hpp"
#include "msrs/placement.hpp"
#include "msrs/steering.hpp"
#include "msrs/subspace.hpp"
#include "msrs/toymodel.hpp"

namespace msrs {

struct EvalOptions {
    PlacementStrategy strategy = PlacementStrategy::LastToken;
    bool include_shared = false;  // score against the shared block too
    bool orthonormalize = false;  // re-orthonormalize the scoring block
    // When several attributes pick the same position, apply phi once per
    // attribute (nested, in declared order) instead of once per position.
    bool compose_duplicate = false;
    bool apply_intervention = true;
    int forced_attribute = -1; // >= 0: hard-gate with that attribute's prior mask
};

struct SampleOutcome {
    int attribute = 0;
    int gold = 0;
    int predicted = 0;
    double loss = 0.0;
    std::vector<std::size_t> positions; // intervened positions, ascending
};

struct EvalOutcome {
    MetricsReport report;
    std::vector<SampleOutcome> samples; // per-sample log for recount checks
};

// Per-attribute top-1 accuracy and mean task loss at the supervised (last)
// position, plus a per-attribute histogram of chosen intervention positions.
EvalOutcome evaluate(const FrozenModel& model, const SteeringModule& module,
                     const std::vector<TrainSample>& data, const EvalOptions& opts);

struct ExperimentConfig {
    AttributeTaskSpec task;
    ExtractOptions extract;
    Granularity granularity = Granularity::AttributeBlocks;
    double lambda1 = 0.3;
    double lambda2 = 0.5;
    TrainConfig train;
    std::string alignment_mode = "full"; // full | reft | svd_fixed
    EvalOptions eval;
};

// Full pipeline: model init, task generation, subspace extraction from the
// training sequences, steering init, pre-train evaluation, training,
// post-train evaluation. The report carries the config echo, subspace
// diagnostics (with planted-recovery angles when the linalg family is on),
// the per-step loss trajectory and pre/post per-attribute metrics.
MetricsReport run_experiment(const ExperimentConfig& cfg);

// Keys accepted in experiment/grid config files (axes.* excluded).
const std::set<std::string>& experiment_config_keys();
ExperimentConfig experiment_from_config(const Config& cfg);
Config experiment_to_config(const ExperimentConfig& cfg);

Granularity granularity_from_string(const std::string& s);
std::string granularity_to_string(Granularity g);
PlacementStrategy placement_from_string(const std::string& s);
std::string placement_to_string(PlacementStrategy p);

// CLI directory operations (see the tool's --help for the file layout).
void cli_generate(const std::string& spec_path, const std::string& out_dir);
void cli_extract(const std::string& data_dir, const std::string& model_path, int layer,
                 const ExtractOptions& opts, const std::string& out_dir);
void cli_train(const std::string& subspaces_dir, const std::string& data_dir,
               const std::string& model_path, Granularity granularity, double lambda1,
               double lambda2, double lr, int steps, std::uint64_t seed,
               const std::string& out_ckpt);
void cli_eval(const std::string& ckpt_path, const std::string& data_dir,
              PlacementStrategy strategy, const std::string& report_path,
              int forced_attribute = -1);

} // namespace msrs
