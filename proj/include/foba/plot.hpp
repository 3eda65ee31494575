#pragma once

// Static report images: a loss-curve chart rendered with a built-in 5x7
// bitmap font, and per-stage attention-mask snapshots for one sample.

#include <string>
#include <vector>

#include "foba/core_types.hpp"
#include "foba/model.hpp"
#include "foba/trainer.hpp"

namespace foba {

// One PNG chart of every objective term over the recorded steps.
void plot_loss_curve(const std::string& path, const std::vector<StepRecord>& history);

// Writes each stage's foreground mask for `sample` as a grayscale PNG
// (nearest-upsampled to the input grid) plus the ground-truth change mask,
// under `dir`.
template <typename T>
void save_mask_snapshots(const std::string& dir, const FoBaModel<T>& model,
                         const BiTemporalSample& sample);

}  // namespace foba
