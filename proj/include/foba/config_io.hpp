#pragma once

// JSON serialization for every configuration struct, with strict parsing
// (an unknown key is a ConfigError naming its full dotted path), dotted
// key=value overrides, and a canonical content hash for run manifests.

#include <cstdint>
#include <string>

#include <json.hpp>

#include "foba/core_types.hpp"
#include "foba/dataset.hpp"
#include "foba/trainer.hpp"

namespace foba {

// How a corpus is carved into train and test sides.
struct SplitConfig {
    double train_fraction = 0.75;
    double test_fraction = 0.25;
    uint64_t seed = 7;
};

// Standalone-evaluation settings.
struct EvalConfig {
    std::string checkpoint;  // model snapshot to score
    bool oracle = false;     // score ground truth against itself instead
};

// One experiment, end to end.
struct RunConfig {
    FoBaConfig model;
    TrainConfig train;
    SynthConfig synth;
    SplitConfig split;
    EvalConfig eval;
    std::string corpus_dir;  // when set, load this corpus instead of generating
};

nlohmann::json foba_config_to_json(const FoBaConfig& c);
FoBaConfig foba_config_from_json(const nlohmann::json& j, const std::string& path = "model");

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path = "train");

nlohmann::json synth_config_to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j, const std::string& path = "synth");

nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

// File forms: MissingFile when absent, IoError for unparseable text,
// ConfigError for unknown keys or ill-typed values.
RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& c);

// Overlays `patch` onto `base`; every key in `patch` must already exist in
// `base`, objects merge recursively, everything else is replaced.
void merge_config(nlohmann::json& base, const nlohmann::json& patch,
                  const std::string& prefix = "");

// Applies one "dotted.path=value" assignment. The path must already exist;
// the value is parsed as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

// FNV-1a over the canonical dump (keys sorted); stable across runs.
uint64_t config_hash(const nlohmann::json& j);
std::string config_hash_hex(const nlohmann::json& j);

}  // namespace foba
