#include "foba/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "foba/errors.hpp"
#include "foba/graph.hpp"
#include "foba/losses.hpp"
#include "foba/png_io.hpp"

namespace fs = std::filesystem;

namespace foba {

void TrainConfig::validate() const {
    if (!(lr > 0)) throw ConfigError("train.lr must be positive");
    if (!(weight_decay > 0)) throw ConfigError("train.weight_decay must be positive");
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1))
        throw ConfigError("train.beta1 and train.beta2 must lie in (0,1)");
    if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be positive");
    if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
    if (max_steps < 0) throw ConfigError("train.max_steps must be non-negative");
    if (eval_every < 0) throw ConfigError("train.eval_every must be non-negative");
    if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be non-negative");
    if (device != "cpu") throw ConfigError("train.device: only \"cpu\" exists");
    if (precision != "float32" && precision != "float64")
        throw ConfigError("train.precision must be \"float32\" or \"float64\"");
}

namespace {

const TrainConfig& validated(const TrainConfig& tc) {
    tc.validate();
    return tc;
}

// Counts every stage-mask pixel; a violation is a value outside the open
// unit interval or a foreground/background pair that does not sum to one.
template <typename T>
void check_masks(const Graph<T>& g, const FoBaOutput<T>& out, int64_t& checks,
                 int64_t& violations) {
    for (size_t i = 0; i < out.stage_masks.size(); ++i) {
        const Tensor<T>& mc = g.val(out.stage_masks[i]);
        const Tensor<T>& mu = g.val(out.stage_masks_uc[i]);
        for (int64_t k = 0; k < mc.numel(); ++k) {
            ++checks;
            const bool inside = mc[k] > T(0) && mc[k] < T(1);
            if (!inside || mc[k] + mu[k] != T(1)) ++violations;
        }
    }
}

BiTemporalSample hflip(const BiTemporalSample& s) {
    BiTemporalSample f = s;
    const int h = s.height(), w = s.width();
    const int64_t hw = static_cast<int64_t>(h) * w;
    for (int c = 0; c < s.image_t1.dim(0); ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                f.image_t1[c * hw + y * w + x] = s.image_t1[c * hw + y * w + (w - 1 - x)];
                f.image_t2[c * hw + y * w + x] = s.image_t2[c * hw + y * w + (w - 1 - x)];
            }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            f.sem_t1[y * w + x] = s.sem_t1[y * w + (w - 1 - x)];
            f.sem_t2[y * w + x] = s.sem_t2[y * w + (w - 1 - x)];
            f.change_mask[y * w + x] = s.change_mask[y * w + (w - 1 - x)];
        }
    return f;
}

void fisher_yates(std::vector<int64_t>& order, Rng& rng) {
    for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i) {
        const int64_t j = rng.uniform_int(0, i);
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
}

std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) {
        if (!out.empty()) out += ", ";
        out += id;
    }
    return out;
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(const FoBaConfig& model_cfg, const TrainConfig& tc)
    : tc_(validated(tc)), model_(model_cfg), rng_(tc.shuffle_seed) {
    const auto& ps = model_.params();
    for (size_t i = 0; i < ps.size(); ++i) {
        opt_.m.emplace_back(ps[i].value.dims());
        opt_.v.emplace_back(ps[i].value.dims());
    }
}

template <typename T>
Trainer<T>::Trainer(Checkpoint<T> ck, const TrainConfig& tc)
    : tc_(validated(tc)), model_(ck.config), cursor_(ck.cursor), rng_(tc.shuffle_seed) {
    restore_params(model_.params(), ck);
    if (!ck.opt.m.empty()) {
        opt_ = std::move(ck.opt);
    } else {
        const auto& ps = model_.params();
        for (size_t i = 0; i < ps.size(); ++i) {
            opt_.m.emplace_back(ps[i].value.dims());
            opt_.v.emplace_back(ps[i].value.dims());
        }
    }
    if (!cursor_.rng_state.empty()) rng_.load_state(cursor_.rng_state);
}

template <typename T>
Trainer<T>::Trainer(const std::string& checkpoint_path, const TrainConfig& tc)
    : Trainer(load_checkpoint<T>(checkpoint_path), tc) {}

template <typename T>
std::string Trainer<T>::save(const std::string& path) const {
    TrainCursor cur = cursor_;
    cur.rng_state = rng_.save_state();
    save_checkpoint(path, model_.config(), model_.params(), opt_, cur);
    return path;
}

template <typename T>
void Trainer<T>::adamw_step() {
    auto& ps = model_.params();
    opt_.t += 1;
    const double b1 = tc_.beta1, b2 = tc_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt_.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt_.t));
    for (size_t i = 0; i < ps.size(); ++i) {
        auto& p = ps[i];
        if (!p.requires_grad) continue;
        Tensor<T>& m = opt_.m[i];
        Tensor<T>& v = opt_.v[i];
        for (int64_t k = 0; k < p.value.numel(); ++k) {
            const double gk = static_cast<double>(p.grad[k]);
            m[k] = static_cast<T>(b1 * m[k] + (1.0 - b1) * gk);
            v[k] = static_cast<T>(b2 * v[k] + (1.0 - b2) * gk * gk);
            const double mh = static_cast<double>(m[k]) / c1;
            const double vh = static_cast<double>(v[k]) / c2;
            p.value[k] = static_cast<T>(
                p.value[k] -
                tc_.lr * (mh / (std::sqrt(vh) + tc_.adam_eps) + tc_.weight_decay * p.value[k]));
        }
    }
}

template <typename T>
TrainOutcome Trainer<T>::run(const std::vector<BiTemporalSample>& train_corpus,
                             const std::vector<BiTemporalSample>* eval_corpus) {
    if (train_corpus.empty()) throw ConfigError("training corpus is empty");
    const int64_t n = static_cast<int64_t>(train_corpus.size());
    if (!cursor_.order.empty() && static_cast<int64_t>(cursor_.order.size()) != n)
        throw ConfigError("resumed corpus has " + std::to_string(n) +
                          " samples, the checkpoint was cut for " +
                          std::to_string(cursor_.order.size()));
    if (cursor_.order.empty()) {
        cursor_.order.resize(static_cast<size_t>(n));
        std::iota(cursor_.order.begin(), cursor_.order.end(), int64_t{0});
        fisher_yates(cursor_.order, rng_);
        cursor_.pos = 0;
    }

    TrainOutcome out;
    const int64_t bs = std::min<int64_t>(tc_.batch_size, n);
    while (cursor_.step < tc_.max_steps) {
        if (cursor_.pos + bs > n) {
            fisher_yates(cursor_.order, rng_);
            cursor_.pos = 0;
        }
        std::vector<int64_t> batch(cursor_.order.begin() + cursor_.pos,
                                   cursor_.order.begin() + cursor_.pos + bs);
        cursor_.pos += bs;

        Graph<T> g(true);
        StepRecord rec;
        rec.step = cursor_.step + 1;
        typename Graph<T>::V total = Graph<T>::none;
        std::vector<std::string> ids;
        for (int64_t idx : batch) {
            const BiTemporalSample* sp = &train_corpus[static_cast<size_t>(idx)];
            BiTemporalSample flipped;
            if (tc_.augment_flips && rng_.bernoulli(0.5)) {
                flipped = hflip(*sp);
                sp = &flipped;
            }
            ids.push_back(sp->id);
            FoBaOutput<T> fwd = model_.forward(g, tensor_cast<T>(sp->image_t1),
                                               tensor_cast<T>(sp->image_t2));
            LossInputs<T> in;
            in.bcd_logits = fwd.bcd_logits;
            in.scd1_logits = fwd.scd1_logits;
            in.scd2_logits = fwd.scd2_logits;
            in.stage_masks = fwd.stage_masks;
            LossTerms<T> lt = total_loss(g, in, *sp, model_.config().loss_weights,
                                         model_.config().consistency_loss_enabled);
            rec.l_bcd += static_cast<double>(g.val(lt.l_bcd)[0]);
            rec.l_scd += static_cast<double>(g.val(lt.l_scd)[0]);
            rec.l_cons += static_cast<double>(g.val(lt.l_cons)[0]);
            rec.l_sample += static_cast<double>(g.val(lt.l_sample)[0]);
            rec.l_f += static_cast<double>(g.val(lt.l_f)[0]);
            total = (total == Graph<T>::none) ? lt.total : g.add(total, lt.total);
            check_masks(g, fwd, out.mask_checks, out.mask_violations);
        }
        const typename Graph<T>::V mean_loss = g.scale(total, T(1) / T(bs));
        const double loss_value = static_cast<double>(g.val(mean_loss)[0]);
        const double inv = 1.0 / static_cast<double>(bs);
        rec.l_bcd *= inv;
        rec.l_scd *= inv;
        rec.l_cons *= inv;
        rec.l_sample *= inv;
        rec.l_f *= inv;
        rec.total = loss_value;
        if (!std::isfinite(loss_value))
            throw NonFiniteLoss("non-finite loss at step " + std::to_string(rec.step) +
                                " on samples: " + join_ids(ids));
        g.backward(mean_loss);
        if (!model_.params().all_grads_finite())
            throw NonFiniteGradient("non-finite gradient at step " + std::to_string(rec.step) +
                                    " on samples: " + join_ids(ids));
        adamw_step();
        model_.params().zero_grads();
        ++cursor_.step;
        out.history.push_back(rec);

        if (tc_.eval_every > 0 && eval_corpus && cursor_.step % tc_.eval_every == 0) {
            EvalOutcome ev = evaluate(model_, *eval_corpus);
            out.mask_checks += ev.mask_checks;
            out.mask_violations += ev.mask_violations;
            out.evals.push_back({cursor_.step, ev.report});
        }
        if (tc_.checkpoint_every > 0 && !tc_.checkpoint_dir.empty() &&
            cursor_.step % tc_.checkpoint_every == 0) {
            char name[40];
            std::snprintf(name, sizeof(name), "checkpoint_%06lld.foba",
                          static_cast<long long>(cursor_.step));
            save(tc_.checkpoint_dir + "/" + name);
        }
    }
    if (!tc_.checkpoint_dir.empty())
        out.final_checkpoint = save(tc_.checkpoint_dir + "/checkpoint.foba");
    return out;
}

namespace {

void write_prediction_rasters(const std::string& dir, const std::string& id,
                              const Tensor<int32_t>& sem1, const Tensor<int32_t>& sem2,
                              const Tensor<uint8_t>& change, const Palette& palette) {
    write_png(dir + "/" + id + "_sem1.png", labels_to_raster(sem1, palette));
    write_png(dir + "/" + id + "_sem2.png", labels_to_raster(sem2, palette));
    write_png(dir + "/" + id + "_change.png", mask_to_raster(change));
}

void require_prediction_sink(const EvalOptions& opts) {
    if (opts.predictions_dir.empty()) return;
    if (!opts.palette) throw ConfigError("writing prediction rasters requires a palette");
    std::error_code ec;
    fs::create_directories(opts.predictions_dir, ec);
    if (ec) throw IoError("cannot create " + opts.predictions_dir);
}

}  // namespace

template <typename T>
EvalOutcome evaluate(const FoBaModel<T>& model, const std::vector<BiTemporalSample>& corpus,
                     const EvalOptions& opts) {
    require_prediction_sink(opts);
    EvalOutcome out;
    out.cm = SCDConfusionMatrix(model.config().n_classes + 1);
    for (const auto& s : corpus) {
        Graph<T> g(false);
        FoBaOutput<T> fwd =
            model.forward(g, tensor_cast<T>(s.image_t1), tensor_cast<T>(s.image_t2));
        PredictionMaps pm =
            predict(g.val(fwd.bcd_logits), g.val(fwd.scd1_logits), g.val(fwd.scd2_logits));
        check_masks(g, fwd, out.mask_checks, out.mask_violations);
        for (int64_t p = 0; p < pm.change.numel(); ++p) {
            ++out.gating_checks;
            if (pm.change[p] == 0 && (pm.sem1[p] != 0 || pm.sem2[p] != 0))
                ++out.gating_violations;
        }
        out.cm.accumulate(pm.sem1, s.sem_t1);
        out.cm.accumulate(pm.sem2, s.sem_t2);
        if (!opts.predictions_dir.empty())
            write_prediction_rasters(opts.predictions_dir, s.id, pm.sem1, pm.sem2, pm.change,
                                     *opts.palette);
    }
    out.report = compute_metrics(out.cm);
    return out;
}

EvalOutcome evaluate_oracle(const std::vector<BiTemporalSample>& corpus, int n_classes,
                            const EvalOptions& opts) {
    require_prediction_sink(opts);
    EvalOutcome out;
    out.cm = SCDConfusionMatrix(n_classes + 1);
    for (const auto& s : corpus) {
        out.cm.accumulate(s.sem_t1, s.sem_t1);
        out.cm.accumulate(s.sem_t2, s.sem_t2);
        for (int64_t p = 0; p < s.change_mask.numel(); ++p) {
            ++out.gating_checks;
            if (s.change_mask[p] == 0 && (s.sem_t1[p] != 0 || s.sem_t2[p] != 0))
                ++out.gating_violations;
        }
        if (!opts.predictions_dir.empty())
            write_prediction_rasters(opts.predictions_dir, s.id, s.sem_t1, s.sem_t2,
                                     s.change_mask, *opts.palette);
    }
    out.report = compute_metrics(out.cm);
    return out;
}

EvalOutcome raster_metrics(const CorpusLayout& gt_layout, const std::string& pred_dir) {
    const std::vector<BiTemporalSample> corpus = load_corpus(gt_layout);
    if (corpus.empty())
        throw MissingFile("no ground-truth samples under " + gt_layout.root);
    EvalOutcome out;
    const Palette palette = load_palette(gt_layout.palette_file());
    out.cm = SCDConfusionMatrix(palette.max_id() + 1);
    for (const auto& s : corpus) {
        const std::string f1 = pred_dir + "/" + s.id + "_sem1.png";
        const std::string f2 = pred_dir + "/" + s.id + "_sem2.png";
        const Tensor<int32_t> p1 = raster_to_labels(read_png(f1), palette, f1);
        const Tensor<int32_t> p2 = raster_to_labels(read_png(f2), palette, f2);
        if (p1.dims() != s.sem_t1.dims() || p2.dims() != s.sem_t2.dims())
            throw ShapeMismatch("prediction rasters for " + s.id +
                                " do not match the ground-truth grid");
        out.cm.accumulate(p1, s.sem_t1);
        out.cm.accumulate(p2, s.sem_t2);
    }
    out.report = compute_metrics(out.cm);
    return out;
}

template class Trainer<float>;
template class Trainer<double>;
template EvalOutcome evaluate<float>(const FoBaModel<float>&,
                                     const std::vector<BiTemporalSample>&, const EvalOptions&);
template EvalOutcome evaluate<double>(const FoBaModel<double>&,
                                      const std::vector<BiTemporalSample>&, const EvalOptions&);

}  // namespace foba
