#pragma once

// Loss functions: masked L1 flow loss, point-matching pose loss (plain ADD
// style and nearest-neighbor for symmetric objects), and the discounted
// per-iteration total. Each has a plain scalar form and a tape op whose
// forward value matches it.

#include <vector>

#include "gmflow/autodiff.hpp"
#include "gmflow/geometry.hpp"
#include "gmflow/pipeline.hpp"

namespace gmflow {

struct LossConfig {
    double gamma = 0.8;   // per-iteration discount
    double k_flow = 0.1;  // flow-loss weight
    int n_points = 1000;  // sampled model points for the pose loss

    void validate() const {
        if (!(gamma > 0.0 && gamma <= 1.0)) throw Error("loss: gamma must be in (0,1]");
        if (k_flow < 0.0) throw Error("loss: k must be non-negative");
        if (n_points < 4) throw Error("loss: n_points must be at least 4");
    }
};

// The pose-loss point subset is sampled once per object and reused across
// steps; a fixed salt keeps it stable across processes.
inline std::vector<Vec3> sample_loss_points(const ObjectModel& model, const LossConfig& cfg) {
    cfg.validate();
    Rng rng(0x10057ull + uint64_t(cfg.n_points));
    std::vector<Vec3> out;
    out.reserve(size_t(cfg.n_points));
    for (int i = 0; i < cfg.n_points; ++i)
        out.push_back(model.points[size_t(rng.uniform_int(0, int64_t(model.points.size()) - 1))]);
    return out;
}

// ---------------------------------------------------------------------------
// flow loss
// ---------------------------------------------------------------------------

// Mean over masked pixels of |d(du)| + |d(dv)|. An empty mask yields 0 and
// raises the warning flag instead of dividing by zero.
template <class S>
double flow_loss(const Tensor<S>& f_pred, const Tensor<S>& f_gt,
                 const std::vector<uint8_t>& mask, bool* zero_mask_warning = nullptr) {
    check_same_shape(f_pred.shape, f_gt.shape, "flow_loss");
    if (f_pred.shape.nd != 3 || f_pred.shape[0] != 2)
        throw ShapeMismatch("flow_loss expects (2,h,w)");
    const int64_t n = int64_t(f_pred.shape[1]) * f_pred.shape[2];
    if (int64_t(mask.size()) != n) throw ShapeMismatch("flow_loss: mask size");
    double acc = 0;
    int64_t cnt = 0;
    for (int64_t i = 0; i < n; ++i) {
        if (!mask[size_t(i)]) continue;
        acc += std::abs(double(f_pred[i]) - double(f_gt[i])) +
               std::abs(double(f_pred[n + i]) - double(f_gt[n + i]));
        ++cnt;
    }
    if (zero_mask_warning) *zero_mask_warning = (cnt == 0);
    return cnt == 0 ? 0.0 : acc / double(cnt);
}

template <class S>
Var<S> flow_loss_op(Tape<S>& t, Var<S> f_pred, const GtFlowBase<S>& gt) {
    const Tensor<S>& pred = t.val(f_pred);
    check_same_shape(pred.shape, gt.flow.shape, "flow_loss");
    const int64_t n = int64_t(pred.shape[1]) * pred.shape[2];
    double acc = 0;
    int64_t cnt = 0;
    for (int64_t i = 0; i < n; ++i) {
        if (!gt.mask[size_t(i)]) continue;
        acc += std::abs(double(pred[i]) - double(gt.flow[i])) +
               std::abs(double(pred[n + i]) - double(gt.flow[n + i]));
        ++cnt;
    }
    Tensor<S> out({1});
    out[0] = S(cnt == 0 ? 0.0 : acc / double(cnt));
    const GtFlowBase<S>* gtp = &gt;
    return t.push(std::move(out), {f_pred}, [f_pred, gtp, n, cnt](Tape<S>& tp, const Tensor<S>& g) {
        if (cnt == 0) return;
        const Tensor<S>& pred2 = tp.val(f_pred);
        Tensor<S> dx(pred2.shape);
        const S go = S(double(g[0]) / double(cnt));
        for (int64_t i = 0; i < n; ++i) {
            if (!gtp->mask[size_t(i)]) continue;
            double a = double(pred2[i]) - double(gtp->flow[i]);
            double b = double(pred2[n + i]) - double(gtp->flow[n + i]);
            dx[i] = a > 0 ? go : (a < 0 ? -go : S(0));
            dx[n + i] = b > 0 ? go : (b < 0 ? -go : S(0));
        }
        tp.accum(f_pred, dx);
    });
}

// ---------------------------------------------------------------------------
// point-matching pose loss
// ---------------------------------------------------------------------------

namespace detail {
constexpr double kDistEps = 1e-18;  // keeps the sqrt gradient finite at zero
}

// Paired mean distance over one point set (the ADD form).
inline double add_paired(const Pose& pred, const Pose& gt, const std::vector<Vec3>& pts) {
    if (pts.empty()) throw Error("point_matching_loss: empty point set");
    double acc = 0;
    for (const auto& x : pts) acc += ((pred.R * x + pred.t) - (gt.R * x + gt.t)).norm();
    return acc / double(pts.size());
}

// Mean nearest-neighbor distance from the predicted-transformed set to the
// ground-truth-transformed cloud (the ADD-S form); brute force.
inline double add_nearest(const Pose& pred, const Pose& gt, const std::vector<Vec3>& pts,
                          const std::vector<Vec3>& gt_cloud) {
    if (pts.empty() || gt_cloud.empty()) throw Error("point_matching_loss: empty point set");
    std::vector<Vec3> gtp;
    gtp.reserve(gt_cloud.size());
    for (const auto& x : gt_cloud) gtp.push_back(gt.R * x + gt.t);
    double acc = 0;
    for (const auto& x : pts) {
        Vec3 p = pred.R * x + pred.t;
        double best = std::numeric_limits<double>::max();
        for (const auto& y : gtp) best = std::min(best, (p - y).squaredNorm());
        acc += std::sqrt(best);
    }
    return acc / double(pts.size());
}

inline double point_matching_loss_points(const Pose& pred, const Pose& gt,
                                         const std::vector<Vec3>& pts,
                                         const std::vector<Vec3>& gt_cloud, bool symmetric) {
    return symmetric ? add_nearest(pred, gt, pts, gt_cloud) : add_paired(pred, gt, pts);
}

// Spec-facing form: the predicted side is the stable per-object subset; the
// nearest-neighbor search for symmetric objects runs against the full cloud.
inline double point_matching_loss(const Pose& pred, const Pose& gt, const ObjectModel& model,
                                  const LossConfig& cfg, bool symmetric) {
    return point_matching_loss_points(pred, gt, sample_loss_points(model, cfg), model.points,
                                      symmetric);
}

// Tape op on the differentiable pose (R, t). For the symmetric variant the
// nearest-neighbor assignment (against the full transformed cloud) is treated
// as fixed during backward.
template <class S>
Var<S> point_matching_loss_op(Tape<S>& t, Var<S> R_var, Var<S> t_var,
                              const std::vector<Vec3>& pts, const std::vector<Vec3>& gt_cloud,
                              const Pose& gt, bool symmetric) {
    if (t.val(R_var).shape != Shape{3, 3} || t.val(t_var).shape != Shape{3})
        throw ShapeMismatch("point_matching_loss_op expects (3,3) and (3)");
    const auto& rv = t.val(R_var);
    const auto& tv = t.val(t_var);
    Mat3 R;
    Vec3 tr;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) R(i, j) = double(rv[i * 3 + j]);
        tr(i) = double(tv[i]);
    }

    const size_t n = pts.size();
    auto matched = std::make_shared<std::vector<Vec3>>(n);  // target point per source point
    std::vector<Vec3> gtp;
    if (symmetric) {
        gtp.reserve(gt_cloud.size());
        for (const auto& x : gt_cloud) gtp.push_back(gt.R * x + gt.t);
    }
    double acc = 0;
    for (size_t i = 0; i < n; ++i) {
        Vec3 p = R * pts[i] + tr;
        if (!symmetric) {
            (*matched)[i] = gt.R * pts[i] + gt.t;
        } else {
            double best = std::numeric_limits<double>::max();
            size_t bi = 0;
            for (size_t j = 0; j < gtp.size(); ++j) {
                double d = (p - gtp[j]).squaredNorm();
                if (d < best) {
                    best = d;
                    bi = j;
                }
            }
            (*matched)[i] = gtp[bi];
        }
        acc += std::sqrt(((p - (*matched)[i]).squaredNorm()) + detail::kDistEps);
    }
    Tensor<S> out({1});
    out[0] = S(acc / double(n));

    const std::vector<Vec3>* ptsp = &pts;
    return t.push(std::move(out), {R_var, t_var},
                  [R_var, t_var, ptsp, matched, n](Tape<S>& tp, const Tensor<S>& g) {
                      const auto& rv2 = tp.val(R_var);
                      const auto& tv2 = tp.val(t_var);
                      Mat3 R2;
                      Vec3 tr2;
                      for (int i = 0; i < 3; ++i) {
                          for (int j = 0; j < 3; ++j) R2(i, j) = double(rv2[i * 3 + j]);
                          tr2(i) = double(tv2[i]);
                      }
                      Mat3 dR = Mat3::Zero();
                      Vec3 dt = Vec3::Zero();
                      const double go = double(g[0]) / double(n);
                      for (size_t i = 0; i < n; ++i) {
                          const Vec3& x = (*ptsp)[i];
                          Vec3 diff = (R2 * x + tr2) - (*matched)[i];
                          double dist = std::sqrt(diff.squaredNorm() + detail::kDistEps);
                          Vec3 dp = diff * (go / dist);
                          dR += dp * x.transpose();
                          dt += dp;
                      }
                      Tensor<S> dRt({3, 3}), dtt({3});
                      for (int i = 0; i < 3; ++i) {
                          for (int j = 0; j < 3; ++j) dRt[i * 3 + j] = S(dR(i, j));
                          dtt[i] = S(dt(i));
                      }
                      tp.accum(R_var, dRt);
                      tp.accum(t_var, dtt);
                  });
}

// ---------------------------------------------------------------------------
// total loss
// ---------------------------------------------------------------------------

// sum_{j=1..N} gamma^{N-j} * (L_pose_j + k * L_flow_j)
inline double total_loss(const std::vector<double>& pose_losses,
                         const std::vector<double>& flow_losses, const LossConfig& cfg) {
    cfg.validate();
    if (pose_losses.size() != flow_losses.size()) throw ShapeMismatch("total_loss: length mismatch");
    const int N = int(pose_losses.size());
    double acc = 0;
    for (int j = 1; j <= N; ++j) {
        double w = std::pow(cfg.gamma, double(N - j));
        acc += w * (pose_losses[size_t(j - 1)] + cfg.k_flow * flow_losses[size_t(j - 1)]);
    }
    return acc;
}

template <class S>
Var<S> total_loss_op(Tape<S>& t, const std::vector<Var<S>>& pose_losses,
                     const std::vector<Var<S>>& flow_losses, const LossConfig& cfg) {
    cfg.validate();
    if (pose_losses.size() != flow_losses.size()) throw ShapeMismatch("total_loss: length mismatch");
    const int N = int(pose_losses.size());
    std::vector<Var<S>> terms;
    std::vector<S> coeffs;
    for (int j = 1; j <= N; ++j) {
        S w = S(std::pow(cfg.gamma, double(N - j)));
        terms.push_back(pose_losses[size_t(j - 1)]);
        coeffs.push_back(w);
        terms.push_back(flow_losses[size_t(j - 1)]);
        coeffs.push_back(S(double(w) * cfg.k_flow));
    }
    return t.weighted_sum_scalars(terms, coeffs);
}

}  // namespace gmflow
