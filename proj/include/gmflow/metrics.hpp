#pragma once

// Pose-error metrics: ADD / ADD-S recalls at diameter fractions, and the
// BOP-style MSSD / MSPD averaged recalls over threshold sweeps.

#include <string>
#include <vector>

#include "gmflow/geometry.hpp"
#include "gmflow/losses.hpp"

namespace gmflow {

// Mean 3D distance between model points under two poses; nearest-neighbor
// matching for symmetric objects. ADD uses every model point; ADD-S runs on
// the stable loss subset to keep the N^2 search tractable.
inline double add_error(const Pose& pred, const Pose& gt, const ObjectModel& model,
                        bool symmetric, const LossConfig& cfg = LossConfig{}) {
    if (!symmetric) return add_paired(pred, gt, model.points);
    return add_nearest(pred, gt, sample_loss_points(model, cfg), model.points);
}

// Discrete symmetry set by object identity: 36 axial steps for the
// cylinder, the three 180-degree flips for the box, identity otherwise.
inline std::vector<Mat3> symmetry_set(const std::string& model_id) {
    std::vector<Mat3> out{Mat3::Identity()};
    if (model_id.rfind("cylinder", 0) == 0) {
        for (int k = 1; k < 36; ++k)
            out.push_back(exp_so3(Vec3(0, 0, 2.0 * M_PI * k / 36.0)));
    } else if (model_id.rfind("box", 0) == 0) {
        for (int axis = 0; axis < 3; ++axis)
            out.push_back(exp_so3(Vec3::Unit(axis) * M_PI));
    }
    return out;
}

// Maximum symmetry-aware surface distance: min over symmetries of the max
// point distance.
inline double mssd_error(const Pose& pred, const Pose& gt, const ObjectModel& model,
                         const std::vector<Mat3>& symmetries) {
    double best = std::numeric_limits<double>::max();
    for (const Mat3& T : symmetries) {
        Mat3 Rg = gt.R * T;
        double worst = 0;
        for (const auto& x : model.points) {
            double d = ((pred.R * x + pred.t) - (Rg * x + gt.t)).norm();
            worst = std::max(worst, d);
        }
        best = std::min(best, worst);
    }
    return best;
}

// Maximum symmetry-aware projected distance (pixels).
inline double mspd_error(const Pose& pred, const Pose& gt, const ObjectModel& model,
                         const std::vector<Mat3>& symmetries, const CameraIntrinsics& K) {
    auto project = [&](const Mat3& R, const Vec3& t, const Vec3& x) {
        Vec3 X = R * x + t;
        double z = std::max(X.z(), kDepthEpsilon);
        return Vec2(K.fx * X.x() / z + K.cx, K.fy * X.y() / z + K.cy);
    };
    double best = std::numeric_limits<double>::max();
    for (const Mat3& T : symmetries) {
        Mat3 Rg = gt.R * T;
        double worst = 0;
        for (const auto& x : model.points) {
            double d = (project(pred.R, pred.t, x) - project(Rg, gt.t, x)).norm();
            worst = std::max(worst, d);
        }
        best = std::min(best, worst);
    }
    return best;
}

// Averaged recall over the BOP threshold sweeps.
inline double mssd_auc_of(double err, double diameter) {
    int hits = 0;
    for (int i = 1; i <= 10; ++i)
        if (err < 0.05 * i * diameter) ++hits;
    return hits / 10.0;
}

inline double mspd_auc_of(double err, int image_width) {
    const double r = double(image_width) / 640.0;
    int hits = 0;
    for (int i = 1; i <= 10; ++i)
        if (err < r * 5.0 * i) ++hits;
    return hits / 10.0;
}

}  // namespace gmflow
