// msrs: synthetic multi-attribute steering workbench.
//
// Subcommands:
//   generate  build a seeded task directory (model, datasets, planted bases)
//   extract   shared/private subspace extraction from a task directory
//   train     fit the steering module on a task directory
//   eval      evaluate a checkpoint with last-token or important-token placement
//   ablate    run a seeded experiment grid with resume support
//
// Exit codes: 0 success, 1 usage/config error, 2 numerical failure,
// 3 I/O or corrupted file.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "msrs/ablation.hpp"
#include "msrs/config.hpp"
#include "msrs/errors.hpp"
#include "msrs/pipeline.hpp"

namespace {

std::string config_keys_help() {
    std::string out = "Config keys accepted in --spec and --grid files:\n";
    for (const std::string& k : msrs::grid_config_keys()) out += "  " + k + "\n";
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-subspace representation steering workbench"};
    app.require_subcommand(1);
    app.footer(config_keys_help());

    std::string spec_path, out_path, data_dir, model_path, subspaces_dir, ckpt_path, report_path,
        grid_path;
    int layer = 1;
    std::string residual_source = "samples";
    std::string energy = "sigma";
    bool cross_orthogonalize = false;
    int max_total_rank = 0;
    std::string granularity = "attribute";
    double lambda1 = 0.3, lambda2 = 0.5, lr = 5e-3;
    int steps = 200;
    std::uint64_t seed = 42;
    std::string placement = "last";
    bool resume = false, csv = false;

    CLI::App* generate = app.add_subcommand("generate", "Generate a seeded task directory");
    generate->add_option("--spec", spec_path, "Task spec config file")->required();
    generate->add_option("--out", out_path, "Output directory")->required();

    CLI::App* extract = app.add_subcommand("extract", "Extract steering subspaces");
    extract->add_option("--data", data_dir, "Task directory")->required();
    extract->add_option("--model", model_path, "Model container file")->required();
    extract->add_option("--layer", layer, "Capture layer")->required();
    extract->add_option("--residual-source", residual_source, "mean|samples (default samples)");
    extract->add_option("--energy", energy, "sigma|sigma_squared (default sigma)");
    extract->add_flag("--cross-orthogonalize", cross_orthogonalize,
                      "Orthogonalize private blocks against each other");
    extract->add_option("--max-total-rank", max_total_rank, "Cap on r_s + sum(r_i), 0 = none");
    extract->add_option("--out", out_path, "Output directory")->required();

    CLI::App* train = app.add_subcommand("train", "Train the steering module");
    train->add_option("--subspaces", subspaces_dir, "Directory written by extract")->required();
    train->add_option("--data", data_dir, "Task directory")->required();
    train->add_option("--model", model_path, "Model container file")->required();
    train->add_option("--granularity", granularity, "same|attribute|rank");
    train->add_option("--lambda1", lambda1, "Mask-prior regularization weight");
    train->add_option("--lambda2", lambda2, "Alignment loss weight");
    train->add_option("--lr", lr, "Learning rate");
    train->add_option("--steps", steps, "Optimizer steps");
    train->add_option("--seed", seed, "Training seed");
    train->add_option("--out", ckpt_path, "Checkpoint output path")->required();

    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
    eval->add_option("--data", data_dir, "Task directory (uses eval.txt and model.msrs)")
        ->required();
    eval->add_option("--placement", placement, "last|important");
    int forced_attribute = -1;
    eval->add_option("--forced-attribute", forced_attribute,
                     "Hard-gate with this attribute's prior mask at inference");
    eval->add_option("--report", report_path, "Report output path")->required();

    CLI::App* ablate = app.add_subcommand("ablate", "Run an experiment grid");
    ablate->add_option("--grid", grid_path, "Grid config file (axes.* plus base keys)")
        ->required();
    ablate->add_option("--out", out_path, "Output directory")->required();
    ablate->add_flag("--resume", resume, "Skip cells with valid manifests");
    ablate->add_flag("--csv", csv, "Also emit grid.csv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e); // prints help or the usage error
        return code == 0 ? 0 : 1;
    }

    try {
        if (generate->parsed()) {
            msrs::cli_generate(spec_path, out_path);
            std::cout << "generated " << out_path << "\n";
        } else if (extract->parsed()) {
            msrs::ExtractOptions opts;
            if (residual_source == "mean") {
                opts.residual_source = msrs::ExtractOptions::ResidualSource::Mean;
            } else if (residual_source == "samples") {
                opts.residual_source = msrs::ExtractOptions::ResidualSource::Samples;
            } else {
                throw msrs::config_error("--residual-source: expected mean|samples");
            }
            if (energy == "sigma") {
                opts.energy = msrs::ExtractOptions::Energy::Sigma;
            } else if (energy == "sigma_squared") {
                opts.energy = msrs::ExtractOptions::Energy::SigmaSquared;
            } else {
                throw msrs::config_error("--energy: expected sigma|sigma_squared");
            }
            opts.cross_orthogonalize = cross_orthogonalize;
            opts.max_total_rank = static_cast<std::size_t>(max_total_rank);
            msrs::cli_extract(data_dir, model_path, layer, opts, out_path);
            std::cout << "extracted subspaces to " << out_path << "\n";
        } else if (train->parsed()) {
            msrs::cli_train(subspaces_dir, data_dir, model_path,
                            msrs::granularity_from_string(granularity), lambda1, lambda2, lr,
                            steps, seed, ckpt_path);
            std::cout << "checkpoint written to " << ckpt_path << "\n";
        } else if (eval->parsed()) {
            msrs::cli_eval(ckpt_path, data_dir, msrs::placement_from_string(placement),
                           report_path, forced_attribute);
            std::cout << "report written to " << report_path << "\n";
        } else if (ablate->parsed()) {
            const msrs::Config grid =
                msrs::Config::parse_file(grid_path, msrs::grid_config_keys());
            const msrs::AblationOutcome outcome =
                msrs::run_ablation(grid, out_path, resume, csv);
            std::cout << "cells: " << outcome.cell_keys.size() << " run: " << outcome.cells_run
                      << " skipped: " << outcome.cells_skipped << "\n";
        }
    } catch (const msrs::config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const msrs::numeric_error& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 2;
    } catch (const msrs::io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
