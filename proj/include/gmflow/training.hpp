#pragma once

// Optimizer (Adam with decoupled weight decay), the one-cycle learning-rate
// schedule, gradient clipping, the seeded training loop and the evaluation
// pass producing MetricReports.

#include <fstream>
#include <iostream>

#include "gmflow/checkpoint.hpp"
#include "gmflow/image.hpp"
#include "gmflow/losses.hpp"
#include "gmflow/metrics.hpp"
#include "gmflow/parallel.hpp"
#include "gmflow/pipeline.hpp"
#include "gmflow/synthetic.hpp"
#include "json.hpp"

namespace gmflow {

struct TrainConfig {
    double lr_max = 4e-4;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    int batch_size = 4;        // desk default; the reference setup used 16
    int total_steps = 5000;    // desk default; the reference setup used 200k
    double warmup_frac = 0.05;
    double grad_clip_norm = 10.0;
    uint64_t seed = 0;
    int val_interval = 500;    // also validates at step 100 and at the end
    int checkpoint_interval = 1000;
    int val_max_samples = 96;

    void validate() const {
        if (!(lr_max > 0) || !(beta1 > 0) || !(beta2 > 0) || !(eps > 0) || weight_decay < 0 ||
            batch_size <= 0 || total_steps <= 0 || grad_clip_norm <= 0)
            throw Error("train config: all quantities must be positive");
        if (!(warmup_frac > 0.0 && warmup_frac < 1.0))
            throw Error("train config: warmup_frac must be in (0,1)");
    }
};

// Linear rise to lr_max over the warmup fraction, then linear annealing down
// to lr_max/25 at the final step.
inline double onecycle_lr(int step, const TrainConfig& cfg) {
    const double floor_lr = cfg.lr_max / 25.0;
    const double warm = cfg.warmup_frac * cfg.total_steps;
    if (step <= warm) return floor_lr + (cfg.lr_max - floor_lr) * (double(step) / warm);
    double frac = (double(step) - warm) / (double(cfg.total_steps) - warm);
    return cfg.lr_max + (floor_lr - cfg.lr_max) * frac;
}

// Global-norm clipping across every parameter gradient; returns the pre-clip
// norm.
template <class S>
double clip_gradients(ParamStore<S>& params, double max_norm) {
    double sq = 0;
    for (size_t i = 0; i < params.count(); ++i)
        for (S g : params[i].grad.v) sq += double(g) * double(g);
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        S scale = S(max_norm / norm);
        for (size_t i = 0; i < params.count(); ++i)
            for (S& g : params[i].grad.v) g *= scale;
    }
    return norm;
}

template <class S>
class AdamW {
public:
    AdamW(ParamStore<S>& params, const TrainConfig& cfg) : params_(params), cfg_(cfg) {
        m_.resize(params.count());
        v_.resize(params.count());
        for (size_t i = 0; i < params.count(); ++i) {
            m_[i] = Tensor<S>(params[i].value.shape);
            v_[i] = Tensor<S>(params[i].value.shape);
        }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (size_t i = 0; i < params_.count(); ++i) {
            auto& p = params_[i];
            if (!p.trainable) continue;
            S* pv = p.value.data();
            const S* g = p.grad.data();
            S* m = m_[i].data();
            S* v = v_[i].data();
            for (int64_t k = 0, e = p.value.size(); k < e; ++k) {
                m[k] = S(cfg_.beta1) * m[k] + S(1.0 - cfg_.beta1) * g[k];
                v[k] = S(cfg_.beta2) * v[k] + S(1.0 - cfg_.beta2) * g[k] * g[k];
                double mhat = double(m[k]) / bc1;
                double vhat = double(v[k]) / bc2;
                pv[k] -= S(lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                 cfg_.weight_decay * double(pv[k])));
            }
        }
    }

private:
    ParamStore<S>& params_;
    TrainConfig cfg_;
    std::vector<Tensor<S>> m_, v_;
    int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainLogRow {
    int step = 0;
    double lr = 0, loss = 0, grad_norm = 0;
};
struct ValLogRow {
    int step = 0;
    double total_loss = 0, mean_epe = 0, add_recall_01d = 0;
};
struct TrainResult {
    std::vector<TrainLogRow> log;
    std::vector<ValLogRow> val_log;
};

namespace detail {

// Everything train/evaluate need per sample, precomputed once.
template <class S>
struct PreparedSample {
    Tensor<S> target, rendered;
    GtFlowBase<S> gt;
    const SceneSample* scene = nullptr;
    const ObjectModel* model = nullptr;
};

template <class S>
PreparedSample<S> prepare_sample(const Dataset& data, size_t idx) {
    const SceneSample& s = data.sample(idx);
    PreparedSample<S> p;
    p.scene = &s;
    p.model = &data.model_of(s);
    p.target = image_to_tensor<S>(s.image_target);
    p.rendered = image_to_tensor<S>(s.image_rendered);
    FlowField full = ground_truth_flow(*p.model, s.pose_init, s.pose_gt, s.K);
    p.gt = make_gt_flow_base<S>(full, 8);
    return p;
}

// Per-sample forward + backward; returns the scalar loss. Gradients are
// written into `grads` (indexed like the param store), not into the store.
template <class S>
double sample_loss_and_grads(GmflowModel<S>& model, const PreparedSample<S>& ps,
                             const RefinementConfig& rcfg, const LossConfig& lcfg,
                             const std::vector<Vec3>& loss_pts,
                             std::vector<Tensor<S>>* grads) {
    Tape<S> tape(grads != nullptr);
    RefineGraph<S> g = refine_record(tape, model, ps.target, ps.rendered, *ps.model,
                                     ps.scene->pose_init, ps.scene->K, rcfg, &ps.gt);
    std::vector<Var<S>> pose_losses, flow_losses;
    for (int k = 0; k < rcfg.iterations; ++k) {
        pose_losses.push_back(point_matching_loss_op(tape, g.pose_rt[size_t(k)].first,
                                                     g.pose_rt[size_t(k)].second, loss_pts,
                                                     ps.model->points, ps.scene->pose_gt,
                                                     ps.model->symmetric));
        flow_losses.push_back(flow_loss_op(tape, g.f_inter[size_t(k)], ps.gt));
    }
    Var<S> total = total_loss_op(tape, pose_losses, flow_losses, lcfg);
    double loss = double(tape.val(total)[0]);
    if (grads) {
        tape.backward(total, /*accumulate_params=*/false);
        std::unordered_map<Parameter<S>*, size_t> index;
        for (size_t i = 0; i < model.params.count(); ++i) index[&model.params[i]] = i;
        for (auto& [param, gt] : tape.leaf_grads()) {
            Tensor<S>& dst = (*grads)[index.at(param)];
            if (dst.v.empty()) dst = Tensor<S>(param->value.shape);
            for (int64_t k = 0; k < gt->size(); ++k) dst[k] += (*gt)[k];
        }
    }
    return loss;
}

}  // namespace detail

// Validation pass over a fixed subset: mean total loss, mean final EPE
// (base-grid units) and ADD-0.1d recall.
template <class S>
ValLogRow validate(GmflowModel<S>& model, const Dataset& data,
                   const std::vector<size_t>& indices, const RefinementConfig& rcfg,
                   const LossConfig& lcfg, int step) {
    ValLogRow row;
    row.step = step;
    if (indices.empty()) return row;
    std::vector<double> losses(indices.size()), epes(indices.size());
    std::vector<uint8_t> hits(indices.size(), 0);
    parallel_for(int64_t(indices.size()), worker_threads(), [&](int64_t i) {
        auto ps = detail::prepare_sample<S>(data, indices[size_t(i)]);
        auto [pose, trace] = refine(model, ps.target, ps.rendered, *ps.model,
                                    ps.scene->pose_init, ps.scene->K, rcfg, &ps.gt);
        std::vector<double> pl, fl;
        auto pts = sample_loss_points(*ps.model, lcfg);
        for (size_t k = 0; k < trace.size(); ++k) {
            pl.push_back(point_matching_loss_points(trace.poses[k], ps.scene->pose_gt, pts,
                                                    ps.model->points, ps.model->symmetric));
            bool warn = false;
            fl.push_back(flow_loss(trace.f_inter[k], ps.gt.flow, ps.gt.mask, &warn));
        }
        losses[size_t(i)] = total_loss(pl, fl, lcfg);
        epes[size_t(i)] = trace.mean_epe.back();
        double add = add_error(pose, ps.scene->pose_gt, *ps.model, ps.model->symmetric, lcfg);
        hits[size_t(i)] = add < 0.1 * ps.model->diameter ? 1 : 0;
    });
    for (size_t i = 0; i < indices.size(); ++i) {
        row.total_loss += losses[i];
        row.mean_epe += epes[i];
        row.add_recall_01d += hits[i];
    }
    row.total_loss /= double(indices.size());
    row.mean_epe /= double(indices.size());
    row.add_recall_01d /= double(indices.size());
    return row;
}

// Seeded training loop; gradients of a batch are computed on per-sample
// tapes (optionally in parallel) and merged in sample order, so a given
// (dataset, config, seed) triple reproduces the log bit for bit.
template <class S>
TrainResult train(GmflowModel<S>& model, const Dataset& data, const RefinementConfig& rcfg,
                  const TrainConfig& tcfg, const LossConfig& lcfg,
                  const std::string& checkpoint_dir = "", bool quiet = false);

// Declared below, after checkpoint helpers exist.

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct OcclusionBucket {
    double lo = 0, hi = 0;
    int count = 0;
    double add_recall_005d = 0, add_recall_01d = 0;
};

struct MetricReport {
    double add_recall_005d = 0, add_recall_01d = 0;
    double mssd_auc = 0, mspd_auc = 0;
    double mean_epe = 0;   // full-resolution pixels
    double mean_add = 0;
    std::vector<double> per_iteration_epe;  // base-grid units per iteration
    double init_add_recall_005d = 0, init_add_recall_01d = 0, init_mean_add = 0;
    std::vector<OcclusionBucket> occlusion_buckets;
    int samples = 0, failures = 0;

    nlohmann::json to_json() const {
        nlohmann::json buckets = nlohmann::json::array();
        for (const auto& b : occlusion_buckets)
            buckets.push_back({{"lo", b.lo},
                               {"hi", b.hi},
                               {"count", b.count},
                               {"add_recall_005d", b.add_recall_005d},
                               {"add_recall_01d", b.add_recall_01d}});
        return nlohmann::json{{"add_recall_005d", add_recall_005d},
                              {"add_recall_01d", add_recall_01d},
                              {"mssd_auc", mssd_auc},
                              {"mspd_auc", mspd_auc},
                              {"mean_epe", mean_epe},
                              {"mean_add", mean_add},
                              {"per_iteration_epe", per_iteration_epe},
                              {"initial", {{"add_recall_005d", init_add_recall_005d},
                                           {"add_recall_01d", init_add_recall_01d},
                                           {"mean_add", init_mean_add}}},
                              {"occlusion_buckets", buckets},
                              {"samples", samples},
                              {"failures", failures}};
    }
};

template <class S>
MetricReport evaluate(GmflowModel<S>& model, const Dataset& data, Split split,
                      const RefinementConfig& rcfg, int occlusion_bucket_count = 0,
                      const LossConfig& lcfg = LossConfig{}) {
    rcfg.validate();
    const auto& indices = data.indices(split);
    MetricReport rep;
    rep.samples = int(indices.size());
    rep.per_iteration_epe.assign(size_t(rcfg.iterations), 0.0);
    if (indices.empty()) return rep;

    struct Row {
        double add = 0, init_add = 0, mssd = 0, mspd = 0, epe = 0;
        std::vector<double> iter_epe;
        double diameter = 1, occlusion = 0;
        int width = 0;
        bool failed = false;
    };
    std::vector<Row> rows(indices.size());

    parallel_for(int64_t(indices.size()), worker_threads(), [&](int64_t i) {
        Row& r = rows[size_t(i)];
        const SceneSample& scene = data.sample(indices[size_t(i)]);
        const ObjectModel& object = data.model_of(scene);
        r.diameter = object.diameter;
        r.occlusion = scene.occlusion_ratio;
        r.width = scene.K.width;
        r.init_add = add_error(scene.pose_init, scene.pose_gt, object, object.symmetric, lcfg);
        try {
            auto ps = detail::prepare_sample<S>(data, indices[size_t(i)]);
            auto [pose, trace] = refine(model, ps.target, ps.rendered, object, scene.pose_init,
                                        scene.K, rcfg, &ps.gt);
            r.add = add_error(pose, scene.pose_gt, object, object.symmetric, lcfg);
            auto syms = symmetry_set(scene.model_id);
            r.mssd = mssd_error(pose, scene.pose_gt, object, syms);
            r.mspd = mspd_error(pose, scene.pose_gt, object, syms, scene.K);
            r.iter_epe = trace.mean_epe;
            r.epe = trace.mean_epe.back();
        } catch (const Error&) {
            r.failed = true;
        }
    });

    int bucket_count = occlusion_bucket_count;
    if (bucket_count > 0) {
        rep.occlusion_buckets.resize(size_t(bucket_count));
        for (int b = 0; b < bucket_count; ++b) {
            rep.occlusion_buckets[size_t(b)].lo = double(b) / 10.0;
            rep.occlusion_buckets[size_t(b)].hi = double(b + 1) / 10.0;
        }
    }

    int ok = 0;
    for (const Row& r : rows) {
        rep.init_mean_add += r.init_add;
        rep.init_add_recall_005d += r.init_add < 0.05 * r.diameter ? 1 : 0;
        rep.init_add_recall_01d += r.init_add < 0.1 * r.diameter ? 1 : 0;
        if (r.failed) {
            ++rep.failures;
            continue;
        }
        ++ok;
        rep.mean_add += r.add;
        rep.add_recall_005d += r.add < 0.05 * r.diameter ? 1 : 0;
        rep.add_recall_01d += r.add < 0.1 * r.diameter ? 1 : 0;
        rep.mssd_auc += mssd_auc_of(r.mssd, r.diameter);
        rep.mspd_auc += mspd_auc_of(r.mspd, r.width);
        rep.mean_epe += r.epe * 8.0;
        for (size_t k = 0; k < r.iter_epe.size(); ++k)
            rep.per_iteration_epe[k] += r.iter_epe[k];
        if (bucket_count > 0) {
            int b = std::min(bucket_count - 1, int(r.occlusion * 10.0));
            auto& bucket = rep.occlusion_buckets[size_t(b)];
            ++bucket.count;
            bucket.add_recall_005d += r.add < 0.05 * r.diameter ? 1 : 0;
            bucket.add_recall_01d += r.add < 0.1 * r.diameter ? 1 : 0;
        }
    }
    const double n = double(indices.size());
    rep.init_mean_add /= n;
    rep.init_add_recall_005d /= n;
    rep.init_add_recall_01d /= n;
    // failures count toward recall denominators with zero contribution
    rep.add_recall_005d /= n;
    rep.add_recall_01d /= n;
    rep.mssd_auc /= n;
    rep.mspd_auc /= n;
    if (ok > 0) {
        rep.mean_add /= double(ok);
        rep.mean_epe /= double(ok);
        for (auto& e : rep.per_iteration_epe) e /= double(ok);
    }
    for (auto& b : rep.occlusion_buckets) {
        if (b.count > 0) {
            b.add_recall_005d /= double(b.count);
            b.add_recall_01d /= double(b.count);
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// train() definition
// ---------------------------------------------------------------------------

template <class S>
TrainResult train(GmflowModel<S>& model, const Dataset& data, const RefinementConfig& rcfg,
                  const TrainConfig& tcfg, const LossConfig& lcfg,
                  const std::string& checkpoint_dir, bool quiet) {
    tcfg.validate();
    rcfg.validate();
    lcfg.validate();
    const auto& train_idx = data.indices(Split::Train);
    if (train_idx.empty()) throw Error("train: dataset has no training split");

    // stable pose-loss point subsets per object
    std::map<const ObjectModel*, std::vector<Vec3>> loss_pts;
    for (size_t i = 0; i < data.size(); ++i) {
        const ObjectModel* m = &data.model_of(data.sample(i));
        if (!loss_pts.count(m)) loss_pts[m] = sample_loss_points(*m, lcfg);
    }

    std::vector<size_t> val_idx = data.indices(Split::Val);
    if (int(val_idx.size()) > tcfg.val_max_samples) val_idx.resize(size_t(tcfg.val_max_samples));

    AdamW<S> opt(model.params, tcfg);
    Rng order_rng(Rng(tcfg.seed).fork(0xDA7A).next_u64());
    std::vector<size_t> order;
    size_t cursor = 0;
    auto next_index = [&]() {
        if (cursor >= order.size()) {
            order = train_idx;
            for (size_t i = order.size() - 1; i > 0; --i)
                std::swap(order[i], order[size_t(order_rng.uniform_int(0, int64_t(i)))]);
            cursor = 0;
        }
        return order[cursor++];
    };

    TrainResult result;
    const int threads = worker_threads();
    for (int step = 0; step < tcfg.total_steps; ++step) {
        std::vector<size_t> batch(size_t(tcfg.batch_size));
        for (auto& b : batch) b = next_index();

        std::vector<std::vector<Tensor<S>>> grads(batch.size());
        std::vector<double> losses(batch.size(), 0.0);
        parallel_for(int64_t(batch.size()), threads, [&](int64_t bi) {
            auto ps = detail::prepare_sample<S>(data, batch[size_t(bi)]);
            grads[size_t(bi)].resize(model.params.count());
            losses[size_t(bi)] = detail::sample_loss_and_grads(
                model, ps, rcfg, lcfg, loss_pts.at(ps.model), &grads[size_t(bi)]);
        });

        double batch_loss = 0;
        for (double l : losses) batch_loss += l;
        batch_loss /= double(batch.size());
        if (!std::isfinite(batch_loss)) {
            std::ostringstream os;
            os << "non-finite loss at step " << step << "; batch =";
            for (size_t b : batch) os << " " << b;
            os << "; lr = " << onecycle_lr(step, tcfg);
            throw NonFiniteLoss(os.str());
        }

        model.params.zero_grads();
        const S inv_b = S(1.0 / double(batch.size()));
        for (size_t bi = 0; bi < batch.size(); ++bi) {  // fixed merge order
            for (size_t pi = 0; pi < model.params.count(); ++pi) {
                if (grads[bi][pi].v.empty()) continue;
                S* dst = model.params[pi].grad.data();
                const S* src = grads[bi][pi].data();
                for (int64_t k = 0, e = grads[bi][pi].size(); k < e; ++k)
                    dst[k] += src[k] * inv_b;
            }
        }

        double gnorm = clip_gradients(model.params, tcfg.grad_clip_norm);
        double lr = onecycle_lr(step, tcfg);
        opt.step(lr);
        result.log.push_back({step, lr, batch_loss, gnorm});

        bool val_now = (step + 1 == 100) || ((step + 1) % tcfg.val_interval == 0) ||
                       (step + 1 == tcfg.total_steps);
        if (val_now && !val_idx.empty()) {
            result.val_log.push_back(validate(model, data, val_idx, rcfg, lcfg, step + 1));
            if (!quiet) {
                const auto& v = result.val_log.back();
                std::cerr << "[train] step " << step + 1 << " loss " << batch_loss
                          << " val_loss " << v.total_loss << " val_epe " << v.mean_epe
                          << " val_add01 " << v.add_recall_01d << "\n";
            }
        }
        if (!checkpoint_dir.empty() &&
            ((step + 1) % tcfg.checkpoint_interval == 0 || step + 1 == tcfg.total_steps))
            save_checkpoint(model, checkpoint_dir);
    }
    return result;
}

inline void write_train_log_csv(const std::vector<TrainLogRow>& log, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f.precision(17);
    f << "step,lr,loss,grad_norm\n";
    for (const auto& r : log) f << r.step << "," << r.lr << "," << r.loss << "," << r.grad_norm << "\n";
}

inline void write_val_log_csv(const std::vector<ValLogRow>& log, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f.precision(17);
    f << "step,total_loss,mean_epe,add_recall_01d\n";
    for (const auto& r : log)
        f << r.step << "," << r.total_loss << "," << r.mean_epe << "," << r.add_recall_01d << "\n";
}

}  // namespace gmflow
