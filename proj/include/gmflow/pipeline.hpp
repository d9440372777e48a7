#pragma once

// The iterative pose update operator: correlation lookup -> motion encoding
// -> global motion capture -> GRU flow regression -> learned pose correction
// -> shape-constrained pose-induced flow, repeated N times. The pose chain
// is differentiable end to end; rendering happens once, outside the loop.

#include <ostream>
#include <type_traits>
#include <utility>

#include "gmflow/correlation.hpp"
#include "gmflow/geometry.hpp"
#include "gmflow/nn.hpp"

namespace gmflow {

struct RefinementConfig {
    int iterations = 4;
    bool use_gmc = true;
    bool use_shape_constraint = true;

    void validate() const {
        if (iterations < 1 || iterations > 16)
            throw Error("refinement iterations must be in [1,16]");
    }
};

// Per-iteration snapshots: intermediate flow, pose-induced flow, the pose
// itself, and end-point error against ground truth when it was supplied.
template <class S>
struct IterationTrace {
    std::vector<Pose> poses;
    std::vector<PoseDelta> deltas;
    std::vector<Tensor<S>> f_inter;  // (2,h,w), base-resolution pixel units
    std::vector<Tensor<S>> f_k;      // (2,h,w); equals f_inter when the shape constraint is off
    std::vector<double> mean_epe;    // base-grid units; -1 when no ground truth
    int h = 0, w = 0;

    size_t size() const { return poses.size(); }
};

// Ground-truth flow prepared at base resolution for EPE traces and the
// training flow loss.
template <class S>
struct GtFlowBase {
    Tensor<S> flow;              // (2,h,w)
    std::vector<uint8_t> mask;   // h*w, pixels within the rendered mask
};

template <class S>
GtFlowBase<S> make_gt_flow_base(const FlowField& full, int factor) {
    FlowField base = downsample_flow(full, factor);
    GtFlowBase<S> out;
    out.flow = Tensor<S>({2, base.h, base.w});
    out.mask.assign(base.valid.begin(), base.valid.end());
    const int64_t n = int64_t(base.h) * base.w;
    for (int64_t i = 0; i < n; ++i) {
        out.flow[i] = S(base.du[size_t(i)]);
        out.flow[n + i] = S(base.dv[size_t(i)]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// differentiable pose-chain ops
// ---------------------------------------------------------------------------

// omega = raw * (c * tanh(|raw|) / |raw|), keeping |omega| < pi smoothly.
template <class S>
Var<S> norm_tanh_clamp_op(Tape<S>& t, Var<S> raw) {
    if (t.val(raw).size() != 3) throw ShapeMismatch("norm_tanh_clamp_op expects a 3-vector");
    const double cap = M_PI * (1.0 - 1e-6);
    const auto& v = t.val(raw);
    const double n2 = double(v[0]) * v[0] + double(v[1]) * v[1] + double(v[2]) * v[2];
    const double n = std::sqrt(n2);
    double s, k;  // scale and d(scale)/dn / n
    if (n < 1e-4) {
        s = cap * (1.0 - n2 / 3.0 + 2.0 * n2 * n2 / 15.0);
        k = cap * (-2.0 / 3.0 + 8.0 * n2 / 15.0);
    } else {
        double th = std::tanh(n);
        s = cap * th / n;
        double sech2 = 1.0 - th * th;
        k = cap * (sech2 * n - th) / (n2 * n);
    }
    Tensor<S> out({3});
    for (int i = 0; i < 3; ++i) out[i] = S(s * double(v[i]));
    return t.push(std::move(out), {raw}, [raw, s, k](Tape<S>& tp, const Tensor<S>& g) {
        const auto& r = tp.val(raw);
        double dot = double(g[0]) * r[0] + double(g[1]) * r[1] + double(g[2]) * r[2];
        Tensor<S> dr({3});
        for (int i = 0; i < 3; ++i) dr[i] = S(s * double(g[i]) + k * double(r[i]) * dot);
        tp.accum(raw, dr);
    });
}

// Rodrigues map as a graph op; forward runs in double regardless of S.
template <class S>
Var<S> so3_exp_op(Tape<S>& t, Var<S> omega) {
    if (t.val(omega).size() != 3) throw ShapeMismatch("so3_exp_op expects a 3-vector");
    const auto& v = t.val(omega);
    Vec3 w{double(v[0]), double(v[1]), double(v[2])};
    Mat3 R = exp_so3(w);
    Tensor<S> out({3, 3});
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) out[r * 3 + c] = S(R(r, c));
    return t.push(std::move(out), {omega}, [omega, w](Tape<S>& tp, const Tensor<S>& g) {
        auto J = exp_so3_jacobian(w);
        Tensor<S> dw({3});
        for (int i = 0; i < 3; ++i) {
            double acc = 0;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) acc += double(g[r * 3 + c]) * J[size_t(i)](r, c);
            dw[i] = S(acc);
        }
        tp.accum(omega, dw);
    });
}

// Pose-induced flow at base resolution: pose_to_flow(model, P0, pose) on the
// full grid, valid-average downsampled and divided by `factor`. The forward
// value is byte-identical to re-deriving it from the trace pose; gradients
// reach the pose through the projection Jacobians of the z-buffer winners.
template <class S>
Var<S> shape_flow_op(Tape<S>& t, Var<S> R_var, Var<S> t_var, const Pose& pose_value,
                     const ObjectModel& model, const Pose& pose_init, const CameraIntrinsics& K,
                     int factor) {
    std::vector<int32_t> winners;
    FlowField full = pose_to_flow(model, pose_init, pose_value, K, &winners);
    FlowField base = downsample_flow(full, factor);

    const int bh = base.h, bw = base.w;
    Tensor<S> out({2, bh, bw});
    const int64_t n = int64_t(bh) * bw;
    for (int64_t i = 0; i < n; ++i) {
        out[i] = S(base.du[size_t(i)]);
        out[n + i] = S(base.dv[size_t(i)]);
    }

    // per base pixel: winning point indices of its valid full-res pixels
    auto groups = std::make_shared<std::vector<std::vector<int32_t>>>(size_t(n));
    for (int y = 0; y < full.h; ++y) {
        for (int x = 0; x < full.w; ++x) {
            size_t at = full.idx(y, x);
            if (!full.valid[at]) continue;
            (*groups)[size_t((y / factor) * bw + x / factor)].push_back(
                winners[at]);
        }
    }

    Pose pose = pose_value;
    const ObjectModel* modelp = &model;
    return t.push(
        std::move(out), {R_var, t_var},
        [R_var, t_var, groups, pose, modelp, K, factor, n](Tape<S>& tp, const Tensor<S>& g) {
            Mat3 dR = Mat3::Zero();
            Vec3 dt = Vec3::Zero();
            for (int64_t b = 0; b < n; ++b) {
                const auto& pts = (*groups)[size_t(b)];
                if (pts.empty()) continue;
                const double wgt = 1.0 / (double(pts.size()) * double(factor));
                const double gu = double(g[b]) * wgt;
                const double gv = double(g[n + b]) * wgt;
                if (gu == 0.0 && gv == 0.0) continue;
                for (int32_t pi : pts) {
                    const Vec3& p = modelp->points[size_t(pi)];
                    Vec3 X = pose.R * p + pose.t;
                    const double z = X.z();
                    if (z <= kDepthEpsilon) continue;
                    const double iz = 1.0 / z;
                    // dL/dX = duv/dX^T * (gu, gv)
                    Vec3 dX(K.fx * iz * gu, K.fy * iz * gv,
                            -iz * iz * (K.fx * X.x() * gu + K.fy * X.y() * gv));
                    dR += dX * p.transpose();
                    dt += dX;
                }
            }
            Tensor<S> dRt({3, 3}), dtt({3});
            for (int r = 0; r < 3; ++r) {
                for (int c = 0; c < 3; ++c) dRt[r * 3 + c] = S(dR(r, c));
                dtt[r] = S(dt(r));
            }
            tp.accum(R_var, dRt);
            tp.accum(t_var, dtt);
        });
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

template <class S>
struct GmflowModel {
    ModelConfig cfg;
    uint64_t seed = 0;
    ParamStore<S> params;
    ResidualEncoder<S> fnet;  // matching features (weights shared across both images)
    ResidualEncoder<S> cnet;  // context encoder
    MotionEncoder<S> menc;
    Gmc<S> gmc;
    ConvGru<S> gru;
    FlowHead<S> flow_head;
    PoseHead<S> pose_head;

    GmflowModel(const ModelConfig& c, uint64_t seed_) : cfg(c), seed(seed_) {
        Rng rng(seed_);
        fnet = ResidualEncoder<S>::create(params, rng, "fnet", cfg, cfg.feat_dim);
        cnet = ResidualEncoder<S>::create(params, rng, "cnet", cfg, 2 * cfg.ctx_dim);
        const int side = 2 * cfg.corr_radius + 1;
        menc = MotionEncoder<S>::create(params, rng, "menc", cfg.corr_levels * side * side,
                                        cfg.ctx_dim);
        gmc = Gmc<S>::create(params, rng, "gmc", cfg);
        gru = ConvGru<S>::create(params, rng, "gru", cfg.ctx_dim, 3 * cfg.ctx_dim + 2);
        flow_head = FlowHead<S>::create(params, rng, "flow_head", cfg.ctx_dim);
        pose_head = PoseHead<S>::create(params, rng, "pose_head", cfg.ctx_dim);
    }

    GmflowModel(const GmflowModel&) = delete;
    GmflowModel& operator=(const GmflowModel&) = delete;
    GmflowModel(GmflowModel&&) = default;
    GmflowModel& operator=(GmflowModel&&) = default;

    // GRU step plus flow decoding; delta_flow comes from the updated state.
    std::pair<Var<S>, Var<S>> regress_flow(Tape<S>& t, Var<S> state, Var<S> context,
                                           Var<S> flow_k, Var<S> motion_local,
                                           Var<S> motion_global) const {
        Var<S> x = t.concat_c({context, flow_k, motion_local, motion_global});
        Var<S> state2 = gru(t, state, x);
        Var<S> delta_flow = flow_head(t, state2);
        return {state2, delta_flow};
    }

    // Raw 6-vector (omega before clamping, tau).
    Var<S> regress_pose_delta(Tape<S>& t, Var<S> f_inter, Var<S> context) const {
        return pose_head(t, f_inter, context);
    }
};

// ---------------------------------------------------------------------------
// refinement loop
// ---------------------------------------------------------------------------

// Graph view of one refinement: everything the training loss needs.
template <class S>
struct RefineGraph {
    std::vector<Var<S>> f_inter;                     // per iteration
    std::vector<std::pair<Var<S>, Var<S>>> pose_rt;  // (R, t) vars per iteration
    IterationTrace<S> trace;
    Pose final_pose;
};

template <class S>
RefineGraph<S> refine_record(Tape<S>& t, GmflowModel<S>& model, const Tensor<S>& image_target,
                             const Tensor<S>& image_rendered, const ObjectModel& object,
                             const Pose& pose_init, const CameraIntrinsics& K,
                             const RefinementConfig& rc,
                             const std::type_identity_t<GtFlowBase<S>>* gt = nullptr) {
    rc.validate();
    if (image_target.shape.nd != 3 || image_target.shape[0] != 3)
        throw ShapeMismatch("refine: target image must be (3,H,W)");
    check_same_shape(image_target.shape, image_rendered.shape, "refine images");
    if (!pose_init.is_valid(1e-7)) throw Error("refine: invalid initial pose");
    const int H = image_target.shape[1], W = image_target.shape[2];
    if (H % 8 != 0 || W % 8 != 0) throw ShapeMismatch("refine: image dims must be divisible by 8");
    if (H != K.height || W != K.width) throw ShapeMismatch("refine: intrinsics grid mismatch");
    const int bh = H / 8, bw = W / 8;

    Var<S> ft = encode_features(t, model.fnet, t.constant(image_target));
    Var<S> fr = encode_features(t, model.fnet, t.constant(image_rendered));
    CorrPyramidVars<S> pyr = build_pyramid_op(t, fr, ft, model.cfg.corr_levels);
    auto [ctx, state] = encode_context(t, model.cnet, t.constant(image_rendered));

    RefineGraph<S> out;
    out.trace.h = bh;
    out.trace.w = bw;

    Var<S> flow = t.constant(Tensor<S>({2, bh, bw}));
    Var<S> R_var = t.constant([&] {
        Tensor<S> r({3, 3});
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r[i * 3 + j] = S(pose_init.R(i, j));
        return r;
    }());
    Var<S> t_var = t.constant([&] {
        Tensor<S> v({3});
        for (int i = 0; i < 3; ++i) v[i] = S(pose_init.t(i));
        return v;
    }());
    Pose pose = pose_init;

    for (int k = 0; k < rc.iterations; ++k) {
        Var<S> corr = lookup_op(t, pyr, flow, model.cfg.corr_radius);
        Var<S> motion_local = model.menc(t, corr, flow);
        Var<S> motion_global = rc.use_gmc
                                   ? model.gmc(t, ctx, motion_local)
                                   : t.constant(Tensor<S>({model.cfg.ctx_dim, bh, bw}));
        auto [state2, delta_flow] =
            model.regress_flow(t, state, ctx, flow, motion_local, motion_global);
        state = state2;
        Var<S> f_inter = t.add(flow, delta_flow);

        Var<S> head6 = model.regress_pose_delta(t, f_inter, ctx);
        Var<S> omega = norm_tanh_clamp_op(t, t.slice_flat(head6, 0, 3));
        Var<S> tau = t.slice_flat(head6, 3, 6);
        R_var = t.matmul(so3_exp_op(t, omega), R_var);
        t_var = t.add(t_var, tau);

        PoseDelta delta;
        for (int i = 0; i < 3; ++i) {
            delta.omega(i) = double(t.val(omega)[i]);
            delta.tau(i) = double(t.val(tau)[i]);
        }
        pose = apply_pose_delta(pose, delta);

        Var<S> flow_next =
            rc.use_shape_constraint
                ? shape_flow_op(t, R_var, t_var, pose, object, pose_init, K, 8)
                : f_inter;

        out.f_inter.push_back(f_inter);
        out.pose_rt.emplace_back(R_var, t_var);
        out.trace.poses.push_back(pose);
        out.trace.deltas.push_back(delta);
        out.trace.f_inter.push_back(t.val(f_inter));
        out.trace.f_k.push_back(t.val(flow_next));

        double epe = -1.0;
        if (gt != nullptr) {
            const auto& fi = t.val(f_inter);
            const int64_t nn = int64_t(bh) * bw;
            double acc = 0;
            int64_t cnt = 0;
            for (int64_t i = 0; i < nn; ++i) {
                if (!gt->mask[size_t(i)]) continue;
                double du = double(fi[i]) - double(gt->flow[i]);
                double dv = double(fi[nn + i]) - double(gt->flow[nn + i]);
                acc += std::sqrt(du * du + dv * dv);
                ++cnt;
            }
            epe = cnt > 0 ? acc / double(cnt) : -1.0;
        }
        out.trace.mean_epe.push_back(epe);

        flow = flow_next;
    }
    out.final_pose = pose;
    return out;
}

// Inference entry point: runs the loop on a local tape without recording
// gradients and returns the refined pose plus the trace.
template <class S>
std::pair<Pose, IterationTrace<S>> refine(GmflowModel<S>& model, const Tensor<S>& image_target,
                                          const Tensor<S>& image_rendered,
                                          const ObjectModel& object, const Pose& pose_init,
                                          const CameraIntrinsics& K, const RefinementConfig& rc,
                                          const std::type_identity_t<GtFlowBase<S>>* gt = nullptr) {
    Tape<S> t(false);
    RefineGraph<S> g =
        refine_record(t, model, image_target, image_rendered, object, pose_init, K, rc, gt);
    return {g.final_pose, std::move(g.trace)};
}

// JSON-lines trace export: one line per iteration with the pose (12 floats,
// row-major [R|t]), mean EPE and the delta norms.
template <class S>
void write_trace_jsonl(const IterationTrace<S>& trace, std::ostream& os) {
    os.precision(17);
    for (size_t k = 0; k < trace.size(); ++k) {
        auto a = trace.poses[k].to_array();
        os << "{\"iteration\":" << k << ",\"pose\":[";
        for (size_t i = 0; i < a.size(); ++i) os << (i ? "," : "") << a[i];
        os << "],\"mean_epe\":" << trace.mean_epe[k]
           << ",\"omega_norm\":" << trace.deltas[k].omega.norm()
           << ",\"tau_norm\":" << trace.deltas[k].tau.norm() << "}\n";
    }
}

}  // namespace gmflow
