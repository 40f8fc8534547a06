#pragma once

#include <string>
#include <vector>

#include "geossl/config.hpp"
#include "geossl/dataset.hpp"

namespace geossl {

// One row of the 2x2 loss x normalization comparison.
struct AblationCellResult {
    std::string loss;          // "mse" | "smooth_l1"
    std::string norm;          // "off" | "on"
    std::string target_space;  // "raw" | "z-scored" — the space the cell's R^2 lives in
    double r2 = 0.0;
    double top1 = 0.0;
    double alignment = 0.0;
    double uniformity = 0.0;
    std::string run_dir;
};

struct AblationResult {
    std::vector<AblationCellResult> cells;
    std::string csv_path;
    std::vector<std::string> chart_paths;
};

// The four cell configurations derived from a shared base, in fixed
// execution order: mse/off, mse/on, smooth_l1/off, smooth_l1/on. Cells
// differ only in the two ablated leaves plus their run directory.
std::vector<Config> ablation_cell_configs(const Config& base);

// Comparison table. Column order is part of the artifact contract.
std::string ablation_csv_text(const std::vector<AblationCellResult>& cells);

// Minimal standalone SVG bar chart, one bar per cell. Negative values hang
// below the zero baseline.
void write_bar_chart_svg(const std::string& path, const std::string& metric,
                         const std::vector<std::string>& labels,
                         const std::vector<double>& values);

// Trains and evaluates all four cells sequentially with the shared seed.
// Each run directory receives exactly: config.yaml, history.csv,
// checkpoint.shpc, eval.json. The comparison CSV is rewritten after every
// finished cell so an aborted grid preserves completed rows. R^2 comes from
// the val split; retrieval metrics use a pool drawn from the train split
// (the val split is far smaller than a useful candidate pool).
AblationResult run_ablation_grid(const Config& base, const std::vector<SampleRecord>& train,
                                 const std::vector<SampleRecord>& val);

}  // namespace geossl
