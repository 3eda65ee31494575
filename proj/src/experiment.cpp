#include "foba/experiment.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "foba/errors.hpp"
#include "foba/metrics.hpp"
#include "foba/plot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace foba {

PreparedData prepare_data(const RunConfig& rc) {
    PreparedData data;
    std::vector<BiTemporalSample> corpus;
    if (!rc.corpus_dir.empty()) {
        const CorpusLayout layout{rc.corpus_dir};
        corpus = load_corpus(layout);
        if (corpus.empty()) throw MissingFile("corpus " + rc.corpus_dir + " holds no samples");
        data.palette = load_palette(layout.palette_file());
    } else {
        corpus = synth_generate(rc.synth);
        data.palette = default_palette(rc.synth.n_classes);
    }
    if (data.palette.max_id() != rc.model.n_classes)
        throw ConfigError("the corpus carries " + std::to_string(data.palette.max_id()) +
                          " classes but model.n_classes is " +
                          std::to_string(rc.model.n_classes));
    std::tie(data.train, data.test) =
        split_corpus(corpus, rc.split.train_fraction, rc.split.test_fraction, rc.split.seed);
    return data;
}

void write_manifest(const std::string& run_dir, const RunConfig& rc) {
    json config = run_config_to_json(rc);
    json manifest;
    manifest["format"] = "foba-run-1";
    manifest["config"] = config;
    manifest["config_hash"] = config_hash_hex(config);
    std::ofstream os(run_dir + "/manifest.json", std::ios::trunc);
    if (!os) throw IoError("cannot write " + run_dir + "/manifest.json");
    os << manifest.dump(2) << "\n";
}

json read_manifest(const std::string& run_dir) {
    const std::string path = run_dir + "/manifest.json";
    std::ifstream is(path);
    if (!is) throw MissingFile(path + " does not exist");
    json manifest = json::parse(is, nullptr, false);
    if (manifest.is_discarded()) throw IoError(path + " is not valid JSON");
    if (!manifest.contains("config") || !manifest.contains("config_hash"))
        throw IoError(path + " is missing required fields");
    if (config_hash_hex(manifest["config"]) != manifest["config_hash"].get<std::string>())
        throw ConfigError(path + ": stored hash does not match the configuration");
    return manifest;
}

void write_loss_csv(const std::string& path, const std::vector<StepRecord>& history) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    os << "step,l_bcd,l_scd,l_cons,l_sample,l_f,total\n";
    char buf[256];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                      static_cast<long long>(r.step), r.l_bcd, r.l_scd, r.l_cons, r.l_sample,
                      r.l_f, r.total);
        os << buf;
    }
    if (!os) throw IoError("failed writing " + path);
}

std::vector<StepRecord> read_loss_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingFile(path + " does not exist");
    std::vector<StepRecord> out;
    std::string header;
    std::getline(is, header);
    std::string lineno;
    while (std::getline(is, lineno)) {
        if (lineno.empty()) continue;
        StepRecord r;
        long long step = 0;
        if (std::sscanf(lineno.c_str(), "%lld,%lg,%lg,%lg,%lg,%lg,%lg", &step, &r.l_bcd,
                        &r.l_scd, &r.l_cons, &r.l_sample, &r.l_f, &r.total) != 7)
            throw IoError(path + ": malformed row '" + lineno + "'");
        r.step = step;
        out.push_back(r);
    }
    return out;
}

namespace {

template <typename T>
ExperimentResult finish_run(const std::string& run_dir, const PreparedData& data,
                            Trainer<T>& trainer) {
    ExperimentResult result;
    result.run_dir = run_dir;
    result.train = trainer.run(data.train, &data.test);
    result.checkpoint = result.train.final_checkpoint;

    result.train_eval = evaluate(trainer.model(), data.train);
    EvalOptions opts;
    opts.predictions_dir = run_dir + "/predictions";
    opts.palette = &data.palette;
    result.test_eval = evaluate(trainer.model(), data.test, opts);

    write_loss_csv(run_dir + "/loss.csv", result.train.history);
    plot_loss_curve(run_dir + "/loss_curve.png", result.train.history);
    if (!data.test.empty())
        save_mask_snapshots(run_dir + "/masks", trainer.model(), data.test.front());

    {
        std::ofstream os(run_dir + "/report.txt", std::ios::trunc);
        os << "train\n"
           << result.train_eval.report.to_text() << "\ntest\n"
           << result.test_eval.report.to_text();
    }
    {
        std::ofstream os(run_dir + "/report.json", std::ios::trunc);
        os << "{\"train\": " << result.train_eval.report.to_json()
           << ", \"test\": " << result.test_eval.report.to_json() << "}\n";
    }
    return result;
}

template <typename T>
ExperimentResult run_typed(const std::string& run_dir, const RunConfig& rc,
                           const PreparedData& data, const TrainConfig& tc) {
    if (tc.resume.empty()) {
        Trainer<T> trainer(rc.model, tc);
        return finish_run(run_dir, data, trainer);
    }
    Trainer<T> trainer(tc.resume, tc);
    return finish_run(run_dir, data, trainer);
}

}  // namespace

ExperimentResult run_experiment(const std::string& run_dir, const RunConfig& rc) {
    rc.model.validate();
    rc.train.validate();
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) throw IoError("cannot create " + run_dir);

    write_manifest(run_dir, rc);
    PreparedData data = prepare_data(rc);

    TrainConfig tc = rc.train;
    if (tc.checkpoint_dir.empty()) tc.checkpoint_dir = run_dir;
    if (rc.train.precision == "float64") return run_typed<double>(run_dir, rc, data, tc);
    return run_typed<float>(run_dir, rc, data, tc);
}

std::vector<AblationSpec> default_ablation_grid(const FoBaConfig& base) {
    std::vector<AblationSpec> grid;
    FoBaConfig off = base;
    off.gif_enabled = {false, false, false, false};
    off.fbg_enabled = {false, false, false};
    off.consistency_loss_enabled = false;
    grid.push_back({"baseline", off});

    FoBaConfig gif = off;
    gif.gif_enabled = base.gif_enabled;
    grid.push_back({"interaction", gif});

    FoBaConfig guided = gif;
    guided.fbg_enabled = base.fbg_enabled;
    grid.push_back({"interaction_guided", guided});

    FoBaConfig full = guided;
    full.consistency_loss_enabled = base.consistency_loss_enabled;
    grid.push_back({"full", full});
    return grid;
}

AblationResult run_ablation(const std::string& out_dir, const RunConfig& base,
                            const std::vector<AblationSpec>& grid) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir);

    AblationResult result;
    for (const auto& spec : grid) {
        RunConfig rc = base;
        rc.model = spec.model;
        ExperimentResult run = run_experiment(out_dir + "/" + spec.name, rc);

        AblationRow row;
        row.name = spec.name;
        for (bool g : spec.model.gif_enabled) row.gif = row.gif || g;
        bool any_fbg = false;
        for (bool f : spec.model.fbg_enabled) any_fbg = any_fbg || f;
        row.fbg = any_fbg ? to_string(spec.model.fbg_variant) : "off";
        row.consistency = spec.model.consistency_loss_enabled;
        row.config_hash = config_hash_hex(run_config_to_json(rc));
        row.test = run.test_eval.report;
        result.rows.push_back(std::move(row));
    }

    std::ostringstream md;
    md << "| config | GIF | F-BG | consistency | F_scd | mIoU | SeK | OA |\n";
    md << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : result.rows)
        md << "| " << r.name << " | " << (r.gif ? "on" : "off") << " | " << r.fbg << " | "
           << (r.consistency ? "on" : "off") << " | " << format_metric(r.test.f_scd) << " | "
           << format_metric(r.test.miou) << " | " << format_metric(r.test.sek) << " | "
           << format_metric(r.test.oa) << " |\n";
    result.markdown = md.str();

    std::ofstream os(out_dir + "/ablation.md", std::ios::trunc);
    if (!os) throw IoError("cannot write " + out_dir + "/ablation.md");
    os << result.markdown;
    return result;
}

}  // namespace foba
