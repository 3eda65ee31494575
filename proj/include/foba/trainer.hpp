#pragma once

// Optimization loop (decoupled-weight-decay adaptive moments over shuffled
// mini-batches), evaluation driver, and raster-level metric recomputation.

#include <cstdint>
#include <string>
#include <vector>

#include "foba/checkpoint.hpp"
#include "foba/core_types.hpp"
#include "foba/dataset.hpp"
#include "foba/metrics.hpp"
#include "foba/model.hpp"
#include "foba/rng.hpp"

namespace foba {

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int64_t batch_size = 2;
    int64_t max_steps = 100;
    int64_t eval_every = 0;        // 0: no evaluation during training
    int64_t checkpoint_every = 0;  // 0: only the final snapshot
    std::string checkpoint_dir;    // empty: keep everything in memory
    std::string device = "cpu";    // only "cpu" exists
    std::string precision = "float32";  // "float32" or "float64"
    uint64_t shuffle_seed = 1;     // data order and flip draws
    bool augment_flips = false;    // random horizontal mirroring
    std::string resume;            // checkpoint to continue from

    void validate() const;  // throws ConfigError
};

// One optimizer step: the batch means of every objective term.
struct StepRecord {
    int64_t step = 0;
    double l_bcd = 0, l_scd = 0, l_cons = 0, l_sample = 0, l_f = 0;
    double total = 0;
};

struct EvalRecord {
    int64_t step = 0;
    MetricReport report;
};

struct TrainOutcome {
    std::vector<StepRecord> history;  // one entry per optimizer step taken
    std::vector<EvalRecord> evals;    // populated when eval_every > 0
    std::string final_checkpoint;     // empty when checkpoint_dir is empty
    // Stage-mask instrumentation, accumulated over every forward pass:
    // a violation is a mask pixel outside (0,1) or a foreground/background
    // pair that does not sum to one exactly.
    int64_t mask_checks = 0;
    int64_t mask_violations = 0;
};

struct EvalOptions {
    std::string predictions_dir;       // when set, prediction rasters go here
    const Palette* palette = nullptr;  // required with predictions_dir
};

struct EvalOutcome {
    MetricReport report;
    SCDConfusionMatrix cm{2};  // both temporal directions, one matrix
    int64_t mask_checks = 0;
    int64_t mask_violations = 0;
    // Pixels where the predicted change mask is 0: both semantic outputs
    // must be 0 there.
    int64_t gating_checks = 0;
    int64_t gating_violations = 0;
};

// Owns a model plus optimizer state and advances them to max_steps.
// Checkpoints capture the data-order stream exactly, so a run resumed from
// step k matches an uninterrupted run step for step.
template <typename T>
class Trainer {
public:
    Trainer(const FoBaConfig& model_cfg, const TrainConfig& tc);
    Trainer(const std::string& checkpoint_path, const TrainConfig& tc);  // resume

    // Trains from the current step to tc.max_steps. Throws ConfigError on an
    // empty corpus, NonFiniteLoss naming the offending step and sample ids,
    // NonFiniteGradient when a backward pass produces a non-finite entry.
    TrainOutcome run(const std::vector<BiTemporalSample>& train_corpus,
                     const std::vector<BiTemporalSample>* eval_corpus = nullptr);

    // Atomic snapshot of model + optimizer + data cursor; returns `path`.
    std::string save(const std::string& path) const;

    FoBaModel<T>& model() { return model_; }
    const FoBaModel<T>& model() const { return model_; }
    int64_t step() const { return cursor_.step; }

private:
    Trainer(Checkpoint<T> ck, const TrainConfig& tc);

    void adamw_step();

    TrainConfig tc_;
    FoBaModel<T> model_;
    OptimState<T> opt_;
    TrainCursor cursor_;
    Rng rng_;
};

// Forward + label-map extraction over a corpus, both temporal directions
// accumulated into one confusion matrix. Never touches model parameters.
template <typename T>
EvalOutcome evaluate(const FoBaModel<T>& model, const std::vector<BiTemporalSample>& corpus,
                     const EvalOptions& opts = {});

// Scores the ground truth against itself — the all-ones sanity ceiling.
EvalOutcome evaluate_oracle(const std::vector<BiTemporalSample>& corpus, int n_classes,
                            const EvalOptions& opts = {});

// Standalone metric computation from prediction rasters on disk, no model
// involved: reads <id>_sem1.png / <id>_sem2.png from pred_dir for every
// ground-truth sample and accumulates both directions.
EvalOutcome raster_metrics(const CorpusLayout& gt_layout, const std::string& pred_dir);

}  // namespace foba
