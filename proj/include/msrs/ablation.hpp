#pragma once

#include <string>
#include <vector>

#include "msrs/config.hpp"
#include "msrs/pipeline.hpp"

namespace msrs {

// One cell = base experiment config + one value per axis. Cells are hermetic
// (each re-derives model, data and subspaces deterministically) so the grid
// can run in any order, in parallel, and resume from on-disk manifests.
struct AblationCell {
    std::string key; // canonical cell name, also the file stem
    ExperimentConfig config;
};

// Axes accepted in a grid file on top of the experiment keys:
//   axes.granularity = same,attribute,rank
//   axes.placement   = last,important
//   axes.seed        = 42,43,44
//   axes.layer       = 0,1            (optional; default: base layer)
//   axes.alignment   = full,reft,svd_fixed (optional; default: base mode)
const std::set<std::string>& grid_config_keys();
std::vector<AblationCell> expand_grid(const Config& grid);

struct AblationOutcome {
    std::vector<std::string> cell_keys;
    std::size_t cells_run = 0;
    std::size_t cells_skipped = 0;
};

// Runs every cell (worker pool, deterministic per-cell outputs), writing
// <key>.report plus a <key>.done manifest carrying the report checksum.
// With resume = true, cells whose manifest matches their report are skipped.
// Emits summary.txt with mean and standard deviation over seeds per cell
// group, and grid.csv when emit_csv is set.
AblationOutcome run_ablation(const Config& grid, const std::string& out_dir, bool resume,
                             bool emit_csv, int max_workers = 0);

} // namespace msrs
