#pragma once

// Versioned on-disk snapshot of a model in training: configuration echo,
// named parameter tensors, adaptive-moment optimizer accumulators, and the
// exact position of the data-order stream, so a resumed run continues the
// original bit for bit.
//
// Layout: the magic line "FOBA1\n", an 8-byte header length (host byte
// order; the file is a single-machine artifact), a JSON header listing the
// configuration and tensor order, then raw tensor data in header order —
// for every parameter its value, then, when optimizer state is present, its
// first and second moment. Writes go to a temporary sibling which is then
// renamed, so a crash never leaves a half-written file under the final name.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "foba/core_types.hpp"
#include "foba/param.hpp"
#include "foba/tensor.hpp"

namespace foba {

// Adaptive-moment accumulators, aligned with parameter-store creation order.
// Empty vectors mean the optimizer has not produced state yet.
template <typename T>
struct OptimState {
    std::vector<Tensor<T>> m;  // first moments
    std::vector<Tensor<T>> v;  // second moments
    int64_t t = 0;             // completed optimizer steps (bias-correction power)
};

// Where the training loop stopped: the step counter, the serialized
// data-order random stream, and the current epoch permutation with the next
// unread position in it.
struct TrainCursor {
    int64_t step = 0;
    std::string rng_state;
    std::vector<int64_t> order;
    int64_t pos = 0;
};

template <typename T>
struct Checkpoint {
    FoBaConfig config;
    std::vector<std::pair<std::string, Tensor<T>>> params;
    OptimState<T> opt;
    TrainCursor cursor;
};

// Atomic write. `opt` may be empty (no optimizer state yet); otherwise its
// vectors must align with the store entry for entry.
template <typename T>
void save_checkpoint(const std::string& path, const FoBaConfig& cfg,
                     const ParamStore<T>& params, const OptimState<T>& opt,
                     const TrainCursor& cursor);

// MissingFile when absent, IoError for malformed or truncated content,
// ConfigError when the stored element type does not match T.
template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path);

// Copies checkpoint tensors into an existing store. Entry count, order,
// names and shapes must all match (ConfigError / ShapeMismatch otherwise).
template <typename T>
void restore_params(ParamStore<T>& params, const Checkpoint<T>& ck);

}  // namespace foba
