// Command-line workbench for the change-detection network: corpus
// generation, training, evaluation, the component-toggle study, and
// raster-level metric computation. Every subcommand is a pure function of
// its configuration: same config + seed, same artifacts.
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric abort.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "foba/config_io.hpp"
#include "foba/dataset.hpp"
#include "foba/errors.hpp"
#include "foba/experiment.hpp"
#include "foba/metrics.hpp"
#include "foba/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace foba;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    int64_t seed = -1;  // <0: keep the seeds in the config
};

void add_common(CLI::App* cmd, CommonArgs& args, const std::string& default_out) {
    args.out_dir = default_out;
    cmd->add_option("--config", args.config_path, "JSON configuration file");
    cmd->add_option("--set", args.overrides,
                    "dotted override, e.g. train.lr=3e-4 (repeatable)");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed,
                    "master seed; derives model, corpus, split and shuffle seeds");
}

// Precedence: built-in defaults, then the config file, then --set overrides,
// then --seed.
RunConfig resolve_config(const CommonArgs& args) {
    json j = run_config_to_json(RunConfig{});
    if (!args.config_path.empty()) {
        std::ifstream is(args.config_path);
        if (!is) throw ConfigError("config file " + args.config_path + " does not exist");
        json file = json::parse(is, nullptr, false);
        if (file.is_discarded()) throw IoError(args.config_path + " is not valid JSON");
        merge_config(j, file);
    }
    for (const auto& o : args.overrides) apply_override(j, o);
    if (args.seed >= 0) {
        const auto s = static_cast<uint64_t>(args.seed);
        j["model"]["seed"] = s;
        j["synth"]["seed"] = s + 1;
        j["split"]["seed"] = s + 2;
        j["train"]["shuffle_seed"] = s + 3;
    }
    return run_config_from_json(j);
}

std::string metrics_line(const MetricReport& r) {
    return "F_scd " + format_metric(r.f_scd) + "  mIoU " + format_metric(r.miou) + "  SeK " +
           format_metric(r.sek) + "  OA " + format_metric(r.oa);
}

int cmd_synth(const CommonArgs& args) {
    const RunConfig rc = resolve_config(args);
    const auto samples = synth_generate(rc.synth);
    const Palette palette = default_palette(rc.synth.n_classes);
    export_corpus(CorpusLayout{args.out_dir}, samples, palette);

    // occupancy statistics over both dates' label maps
    const int n_classes = rc.synth.n_classes;
    std::vector<int64_t> pixels(static_cast<size_t>(n_classes) + 1, 0);
    std::vector<int64_t> occurs(static_cast<size_t>(n_classes) + 1, 0);
    int64_t changed = 0, total = 0;
    for (const auto& s : samples) {
        std::set<int32_t> present;
        for (int64_t p = 0; p < s.sem_t1.numel(); ++p) {
            ++pixels[static_cast<size_t>(s.sem_t1[p])];
            ++pixels[static_cast<size_t>(s.sem_t2[p])];
            present.insert(s.sem_t1[p]);
            present.insert(s.sem_t2[p]);
            changed += s.change_mask[p];
            total += 2;
        }
        for (int32_t c : present) ++occurs[static_cast<size_t>(c)];
    }
    std::cout << "corpus " << args.out_dir << "\n";
    std::cout << "samples " << samples.size() << "\n";
    std::cout << "size " << rc.synth.image_size << "\n";
    std::cout << "pixels_total " << total << "\n";
    for (int c = 0; c <= n_classes; ++c)
        std::cout << "class " << c << " " << palette.entries()[static_cast<size_t>(c)].name
                  << " samples " << occurs[static_cast<size_t>(c)] << " pixels "
                  << pixels[static_cast<size_t>(c)] << "\n";
    std::cout << "changed_pixels " << changed << "\n";
    return 0;
}

int cmd_train(const CommonArgs& args) {
    const RunConfig rc = resolve_config(args);
    ExperimentResult res = run_experiment(args.out_dir, rc);
    std::cout << "run " << res.run_dir << "\n";
    std::cout << "steps " << res.train.history.size() << "\n";
    if (!res.train.history.empty())
        std::cout << "final_loss " << res.train.history.back().total << "\n";
    std::cout << "train " << metrics_line(res.train_eval.report) << "\n";
    std::cout << "test " << metrics_line(res.test_eval.report) << "\n";
    return 0;
}

template <typename T>
EvalOutcome eval_with_checkpoint(const RunConfig& rc, const std::string& out_dir) {
    Checkpoint<T> ck = load_checkpoint<T>(rc.eval.checkpoint);
    RunConfig effective = rc;
    effective.model = ck.config;  // the snapshot defines the model
    PreparedData data = prepare_data(effective);
    FoBaModel<T> model(ck.config);
    restore_params(model.params(), ck);
    EvalOptions opts;
    opts.predictions_dir = out_dir + "/predictions";
    opts.palette = &data.palette;
    return evaluate(model, data.test, opts);
}

int cmd_eval(const CommonArgs& args) {
    const RunConfig rc = resolve_config(args);
    std::error_code ec;
    fs::create_directories(args.out_dir, ec);
    if (ec) throw IoError("cannot create " + args.out_dir);

    EvalOutcome out;
    if (rc.eval.oracle) {
        PreparedData data = prepare_data(rc);
        EvalOptions opts;
        opts.predictions_dir = args.out_dir + "/predictions";
        opts.palette = &data.palette;
        out = evaluate_oracle(data.test, rc.model.n_classes, opts);
    } else {
        if (rc.eval.checkpoint.empty())
            throw ConfigError("eval.checkpoint is required unless eval.oracle is set");
        out = rc.train.precision == "float64"
                  ? eval_with_checkpoint<double>(rc, args.out_dir)
                  : eval_with_checkpoint<float>(rc, args.out_dir);
    }
    std::ofstream(args.out_dir + "/report.txt") << out.report.to_text();
    std::ofstream(args.out_dir + "/report.json") << out.report.to_json() << "\n";
    std::cout << metrics_line(out.report) << "\n";
    return 0;
}

int cmd_ablate(const CommonArgs& args, const std::string& rows) {
    const RunConfig rc = resolve_config(args);
    std::vector<AblationSpec> grid = default_ablation_grid(rc.model);
    if (!rows.empty()) {
        std::vector<AblationSpec> picked;
        std::stringstream ss(rows);
        std::string name;
        while (std::getline(ss, name, ',')) {
            bool found = false;
            for (const auto& spec : grid)
                if (spec.name == name) {
                    picked.push_back(spec);
                    found = true;
                }
            if (!found) {
                std::string known;
                for (const auto& spec : grid) known += (known.empty() ? "" : ", ") + spec.name;
                throw ConfigError("unknown ablation row '" + name + "' (rows: " + known + ")");
            }
        }
        grid = std::move(picked);
    }
    AblationResult res = run_ablation(args.out_dir, rc, grid);
    std::cout << res.markdown;
    return 0;
}

int cmd_metrics(const std::string& pred_dir, const std::string& gt_dir) {
    EvalOutcome out = raster_metrics(CorpusLayout{gt_dir}, pred_dir);
    std::cout << metrics_line(out.report) << "\n";
    std::cout << out.report.to_text();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"change-detection workbench: generate, train, evaluate, study, measure"};
    app.require_subcommand(1);

    CommonArgs synth_args, train_args, eval_args, ablate_args;
    std::string ablate_rows, metrics_pred, metrics_gt;

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic corpus on disk");
    add_common(synth, synth_args, "corpus");
    CLI::App* train = app.add_subcommand("train", "train a model and write the run artifacts");
    add_common(train, train_args, "run");
    CLI::App* eval = app.add_subcommand("eval", "score a checkpoint (or the oracle) on the test split");
    add_common(eval, eval_args, "eval");
    CLI::App* ablate = app.add_subcommand("ablate", "run the component-toggle study");
    add_common(ablate, ablate_args, "study");
    ablate->add_option("--rows", ablate_rows,
                       "comma-separated subset of the default grid rows");
    CLI::App* metrics = app.add_subcommand("metrics", "score prediction rasters against a corpus");
    metrics->add_option("--pred", metrics_pred, "directory of <id>_sem{1,2}.png rasters")
        ->required();
    metrics->add_option("--gt", metrics_gt, "ground-truth corpus directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_args);
        if (train->parsed()) return cmd_train(train_args);
        if (eval->parsed()) return cmd_eval(eval_args);
        if (ablate->parsed()) return cmd_ablate(ablate_args, ablate_rows);
        if (metrics->parsed()) return cmd_metrics(metrics_pred, metrics_gt);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NonFiniteLoss& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 4;
    } catch (const NonFiniteGradient& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 4;
    } catch (const NonFiniteAttention& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 4;
    } catch (const NonFiniteState& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 4;
    } catch (const DegenerateTarget& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 4;
    } catch (const DegenerateMetric& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
