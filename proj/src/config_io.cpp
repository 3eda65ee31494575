#include "foba/config_io.hpp"

#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "foba/errors.hpp"
#include "foba/rng.hpp"

using nlohmann::json;

namespace foba {

namespace {

// Object reader that consumes keys one by one and then refuses leftovers,
// so a typo in a config file is an error instead of a silent default.
class StrictObject {
public:
    StrictObject(const json& j, std::string path) : path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError(path_ + " must be an object");
        for (const auto& [k, v] : j.items()) pending_[k] = &v;
    }

    template <typename V>
    void get(const char* key, V& out) {
        auto it = pending_.find(key);
        if (it == pending_.end()) return;
        try {
            out = it->second->get<V>();
        } catch (const json::exception&) {
            throw ConfigError(path_ + "." + key + " has the wrong type");
        }
        pending_.erase(it);
    }

    template <typename V, size_t N>
    void get_array(const char* key, std::array<V, N>& out) {
        auto it = pending_.find(key);
        if (it == pending_.end()) return;
        std::vector<V> v;
        try {
            v = it->second->get<std::vector<V>>();
        } catch (const json::exception&) {
            throw ConfigError(path_ + "." + key + " has the wrong type");
        }
        if (v.size() != N)
            throw ConfigError(path_ + "." + key + " must hold exactly " + std::to_string(N) +
                              " entries");
        for (size_t i = 0; i < N; ++i) out[i] = v[i];
        pending_.erase(it);
    }

    const json* take(const char* key) {
        auto it = pending_.find(key);
        if (it == pending_.end()) return nullptr;
        const json* v = it->second;
        pending_.erase(it);
        return v;
    }

    void finish() const {
        if (!pending_.empty())
            throw ConfigError("unknown key: " + path_ + "." + pending_.begin()->first);
    }

private:
    std::string path_;
    std::map<std::string, const json*> pending_;
};

json loss_weights_to_json(const LossWeights& w) {
    return {{"lambda1", w.lambda1},
            {"lambda2", w.lambda2},
            {"lambda3", w.lambda3},
            {"lambda4", w.lambda4}};
}

LossWeights loss_weights_from_json(const json& j, const std::string& path) {
    LossWeights w;
    StrictObject o(j, path);
    o.get("lambda1", w.lambda1);
    o.get("lambda2", w.lambda2);
    o.get("lambda3", w.lambda3);
    o.get("lambda4", w.lambda4);
    o.finish();
    return w;
}

}  // namespace

json foba_config_to_json(const FoBaConfig& c) {
    json j;
    j["n_classes"] = c.n_classes;
    j["encoder_dims"] = c.encoder_dims;
    j["gif_dims"] = c.gif_dims;
    j["fbg_dim"] = c.fbg_dim;
    j["fbg_variant"] = to_string(c.fbg_variant);
    j["gif_enabled"] = c.gif_enabled;
    j["fbg_enabled"] = c.fbg_enabled;
    j["bg_branch_enabled"] = c.bg_branch_enabled;
    j["consistency_loss_enabled"] = c.consistency_loss_enabled;
    j["loss_weights"] = loss_weights_to_json(c.loss_weights);
    j["ssm_state_dim"] = c.ssm_state_dim;
    j["gn_groups"] = c.gn_groups;
    j["bottleneck_ratio"] = c.bottleneck_ratio;
    j["blocks_per_stage"] = c.blocks_per_stage;
    j["seed"] = c.seed;
    return j;
}

FoBaConfig foba_config_from_json(const json& j, const std::string& path) {
    FoBaConfig c;
    StrictObject o(j, path);
    o.get("n_classes", c.n_classes);
    o.get_array("encoder_dims", c.encoder_dims);
    o.get_array("gif_dims", c.gif_dims);
    o.get("fbg_dim", c.fbg_dim);
    if (const json* v = o.take("fbg_variant")) {
        if (!v->is_string()) throw ConfigError(path + ".fbg_variant must be a string");
        c.fbg_variant = fbg_variant_from_string(v->get<std::string>());
    }
    o.get_array("gif_enabled", c.gif_enabled);
    o.get_array("fbg_enabled", c.fbg_enabled);
    o.get("bg_branch_enabled", c.bg_branch_enabled);
    o.get("consistency_loss_enabled", c.consistency_loss_enabled);
    if (const json* v = o.take("loss_weights"))
        c.loss_weights = loss_weights_from_json(*v, path + ".loss_weights");
    o.get("ssm_state_dim", c.ssm_state_dim);
    o.get("gn_groups", c.gn_groups);
    o.get("bottleneck_ratio", c.bottleneck_ratio);
    o.get("blocks_per_stage", c.blocks_per_stage);
    o.get("seed", c.seed);
    o.finish();
    return c;
}

json train_config_to_json(const TrainConfig& c) {
    json j;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["batch_size"] = c.batch_size;
    j["max_steps"] = c.max_steps;
    j["eval_every"] = c.eval_every;
    j["checkpoint_every"] = c.checkpoint_every;
    j["checkpoint_dir"] = c.checkpoint_dir;
    j["device"] = c.device;
    j["precision"] = c.precision;
    j["shuffle_seed"] = c.shuffle_seed;
    j["augment_flips"] = c.augment_flips;
    j["resume"] = c.resume;
    return j;
}

TrainConfig train_config_from_json(const json& j, const std::string& path) {
    TrainConfig c;
    StrictObject o(j, path);
    o.get("lr", c.lr);
    o.get("weight_decay", c.weight_decay);
    o.get("beta1", c.beta1);
    o.get("beta2", c.beta2);
    o.get("adam_eps", c.adam_eps);
    o.get("batch_size", c.batch_size);
    o.get("max_steps", c.max_steps);
    o.get("eval_every", c.eval_every);
    o.get("checkpoint_every", c.checkpoint_every);
    o.get("checkpoint_dir", c.checkpoint_dir);
    o.get("device", c.device);
    o.get("precision", c.precision);
    o.get("shuffle_seed", c.shuffle_seed);
    o.get("augment_flips", c.augment_flips);
    o.get("resume", c.resume);
    o.finish();
    return c;
}

json synth_config_to_json(const SynthConfig& c) {
    json j;
    j["n_samples"] = c.n_samples;
    j["image_size"] = c.image_size;
    j["n_classes"] = c.n_classes;
    j["min_shapes"] = c.min_shapes;
    j["max_shapes"] = c.max_shapes;
    j["change_density"] = c.change_density;
    j["noise_amplitude"] = c.noise_amplitude;
    j["seed"] = c.seed;
    return j;
}

SynthConfig synth_config_from_json(const json& j, const std::string& path) {
    SynthConfig c;
    StrictObject o(j, path);
    o.get("n_samples", c.n_samples);
    o.get("image_size", c.image_size);
    o.get("n_classes", c.n_classes);
    o.get("min_shapes", c.min_shapes);
    o.get("max_shapes", c.max_shapes);
    o.get("change_density", c.change_density);
    o.get("noise_amplitude", c.noise_amplitude);
    o.get("seed", c.seed);
    o.finish();
    return c;
}

json run_config_to_json(const RunConfig& c) {
    json j;
    j["model"] = foba_config_to_json(c.model);
    j["train"] = train_config_to_json(c.train);
    j["synth"] = synth_config_to_json(c.synth);
    j["split"] = {{"train_fraction", c.split.train_fraction},
                  {"test_fraction", c.split.test_fraction},
                  {"seed", c.split.seed}};
    j["eval"] = {{"checkpoint", c.eval.checkpoint}, {"oracle", c.eval.oracle}};
    j["corpus_dir"] = c.corpus_dir;
    return j;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    StrictObject o(j, "run");
    if (const json* v = o.take("model")) c.model = foba_config_from_json(*v, "model");
    if (const json* v = o.take("train")) c.train = train_config_from_json(*v, "train");
    if (const json* v = o.take("synth")) c.synth = synth_config_from_json(*v, "synth");
    if (const json* v = o.take("split")) {
        StrictObject s(*v, "split");
        s.get("train_fraction", c.split.train_fraction);
        s.get("test_fraction", c.split.test_fraction);
        s.get("seed", c.split.seed);
        s.finish();
    }
    if (const json* v = o.take("eval")) {
        StrictObject s(*v, "eval");
        s.get("checkpoint", c.eval.checkpoint);
        s.get("oracle", c.eval.oracle);
        s.finish();
    }
    o.get("corpus_dir", c.corpus_dir);
    o.finish();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingFile("config file " + path + " does not exist");
    json j = json::parse(is, nullptr, false);
    if (j.is_discarded()) throw IoError(path + " is not valid JSON");
    json base = run_config_to_json(RunConfig{});
    merge_config(base, j);
    return run_config_from_json(base);
}

void save_run_config(const std::string& path, const RunConfig& c) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << run_config_to_json(c).dump(2) << "\n";
    if (!os) throw IoError("failed writing " + path);
}

void merge_config(json& base, const json& patch, const std::string& prefix) {
    if (!patch.is_object() || !base.is_object())
        throw ConfigError((prefix.empty() ? std::string("config") : prefix) +
                          " must be an object");
    for (const auto& [k, v] : patch.items()) {
        const std::string path = prefix.empty() ? k : prefix + "." + k;
        if (!base.contains(k)) throw ConfigError("unknown key: " + path);
        if (base[k].is_object() && v.is_object())
            merge_config(base[k], v, path);
        else
            base[k] = v;
    }
}

void apply_override(json& j, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + assignment + "' is not of the form key.path=value");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    std::vector<std::string> keys;
    std::stringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) keys.push_back(part);
    if (keys.empty() || path.empty())
        throw ConfigError("override '" + assignment + "' has an empty key path");

    json* node = &j;
    for (size_t i = 0; i + 1 < keys.size(); ++i) {
        if (!node->is_object() || !node->contains(keys[i]))
            throw ConfigError("unknown key: " + path);
        node = &(*node)[keys[i]];
    }
    if (!node->is_object() || !node->contains(keys.back()))
        throw ConfigError("unknown key: " + path);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;  // unquoted strings pass through as-is
    (*node)[keys.back()] = std::move(value);
}

uint64_t config_hash(const json& j) { return fnv1a64(j.dump()); }

std::string config_hash_hex(const json& j) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(config_hash(j)));
    return std::string(buf);
}

}  // namespace foba
