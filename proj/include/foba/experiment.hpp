#pragma once

// End-to-end experiment drivers: corpus preparation, a full train+evaluate
// run with its on-disk artifact set (manifest, loss CSV, checkpoints, metric
// report, prediction rasters, charts), and the component-toggle study.
//
// Run directory layout:
//   manifest.json     configuration echo + content hash (no timestamps)
//   loss.csv          one row per optimizer step
//   checkpoint.foba   final snapshot (plus periodic ones when configured)
//   report.txt/.json  train- and test-split metric blocks
//   loss_curve.png    objective chart
//   masks/            stage-mask snapshots for one held-out sample
//   predictions/      <id>_{sem1,sem2,change}.png for the test split

#include <string>
#include <vector>

#include <json.hpp>

#include "foba/config_io.hpp"
#include "foba/dataset.hpp"
#include "foba/trainer.hpp"

namespace foba {

struct PreparedData {
    std::vector<BiTemporalSample> train, test;
    Palette palette{{{0, {0, 0, 0}, "none"}}};
};

// Generates (or loads, when corpus_dir is set) the corpus and splits it.
PreparedData prepare_data(const RunConfig& rc);

struct ExperimentResult {
    TrainOutcome train;
    EvalOutcome train_eval;
    EvalOutcome test_eval;
    std::string run_dir;
    std::string checkpoint;
};

// Trains per `rc` and writes the full artifact set under run_dir.
ExperimentResult run_experiment(const std::string& run_dir, const RunConfig& rc);

// manifest.json holds the configuration and its canonical hash; reading
// verifies the hash so a hand-edited manifest cannot masquerade as a run's
// true configuration.
void write_manifest(const std::string& run_dir, const RunConfig& rc);
nlohmann::json read_manifest(const std::string& run_dir);

void write_loss_csv(const std::string& path, const std::vector<StepRecord>& history);
std::vector<StepRecord> read_loss_csv(const std::string& path);

// One row of the component study.
struct AblationSpec {
    std::string name;
    FoBaConfig model;
};

// baseline -> +interaction -> +guided decoding -> full (adds the
// consistency term); every row shares the base seed and widths.
std::vector<AblationSpec> default_ablation_grid(const FoBaConfig& base);

struct AblationRow {
    std::string name;
    bool gif = false;
    std::string fbg = "off";  // "off" or the guided-decode variant name
    bool consistency = false;
    std::string config_hash;
    MetricReport test;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::string markdown;  // also written to <out_dir>/ablation.md
};

// Runs every spec with the shared corpus and seed; one run directory per row.
AblationResult run_ablation(const std::string& out_dir, const RunConfig& base,
                            const std::vector<AblationSpec>& grid);

}  // namespace foba
