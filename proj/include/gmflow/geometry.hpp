#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cstdint>
#include <string>
#include <vector>

#include "gmflow/errors.hpp"

namespace gmflow {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

// Frustum depth cutoff in scene units; points at or behind it are flagged,
// never projected to NaN.
constexpr double kDepthEpsilon = 1e-6;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

// Rigid transform [R|t] from object frame to camera frame.
struct Pose {
    Mat3 R = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    bool is_valid(double tol = 1e-9) const;

    // Row-major [R|t]: 12 numbers, 3 rows of (r r r t).
    std::array<double, 12> to_array() const;
    static Pose from_array(const std::array<double, 12>& a);
};

struct CameraIntrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;

    void validate() const;
};

struct ObjectModel {
    std::vector<Vec3> points;   // model-frame surface samples
    std::vector<Vec3> colors;   // per-point RGB in [0,1]
    double diameter = 0;        // max pairwise point distance
    bool symmetric = false;     // selects ADD-S in evaluation

    size_t count() const { return points.size(); }
    void validate() const;
};

double compute_diameter(const std::vector<Vec3>& points);

// Dense 2-channel displacement grid with validity mask.
struct FlowField {
    int h = 0, w = 0;
    std::vector<double> du, dv;
    std::vector<uint8_t> valid;

    FlowField() = default;
    FlowField(int h_, int w_)
        : h(h_), w(w_), du(size_t(h_) * w_, 0.0), dv(size_t(h_) * w_, 0.0),
          valid(size_t(h_) * w_, 0) {}

    size_t idx(int y, int x) const { return size_t(y) * w + x; }
    int64_t valid_count() const;
};

struct PixelProjection {
    std::vector<Vec2> uv;
    std::vector<double> depth;
    std::vector<uint8_t> in_frustum;

    size_t count() const { return uv.size(); }
};

// Left-multiplicative pose increment: axis-angle rotation composed on the
// left, additive camera-frame translation.
struct PoseDelta {
    Vec3 omega = Vec3::Zero();
    Vec3 tau = Vec3::Zero();

    bool is_finite() const;
};

// ---------------------------------------------------------------------------
// SO(3) helpers
// ---------------------------------------------------------------------------

Mat3 skew(const Vec3& v);
Mat3 exp_so3(const Vec3& omega);
// d(exp_so3(omega)) / d(omega_i) for i = 0..2.
std::array<Mat3, 3> exp_so3_jacobian(const Vec3& omega);
// Nearest rotation matrix (polar factor with det +1).
Mat3 orthonormalize(const Mat3& m);

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

PixelProjection project_points(const ObjectModel& model, const Pose& pose,
                               const CameraIntrinsics& K);

// Per-pixel winner of the z-buffer pass under `pose`: index of the nearest
// model point whose rounded projection lands on the pixel, -1 elsewhere.
// Shared by pose_to_flow, rendering and PnP correspondence tracing.
std::vector<int32_t> rasterize_winners(const PixelProjection& proj, const CameraIntrinsics& K);

// Flow induced by moving the object from pose_from to pose_to: projects the
// model under both poses and writes (uv_to - uv_from) at the z-buffer winner
// pixels of pose_from. Throws DegenerateProjection if nothing is visible
// under pose_from.
FlowField pose_to_flow(const ObjectModel& model, const Pose& pose_from, const Pose& pose_to,
                       const CameraIntrinsics& K, std::vector<int32_t>* winners_out = nullptr);

// Flow-loss target; same computation with (initial, ground-truth) roles.
FlowField ground_truth_flow(const ObjectModel& model, const Pose& pose_init, const Pose& pose_gt,
                            const CameraIntrinsics& K);

// Valid-pixel average over factor x factor blocks, displacements divided by
// `factor` so the result lives on the coarse grid's pixel scale.
FlowField downsample_flow(const FlowField& flow, int factor);

Pose apply_pose_delta(const Pose& pose, const PoseDelta& delta);

// Gauss-Newton reprojection refinement seeded at pose_init; the correspondences
// are model points traced through the flow's z-buffer pixels. The non-learned
// oracle counterpart of the trained flow-to-pose head.
Pose pnp_refine(const ObjectModel& model, const FlowField& flow, const Pose& pose_init,
                const CameraIntrinsics& K);

double geodesic_rotation_error(const Pose& a, const Pose& b);

// ---------------------------------------------------------------------------
// ObjectModel JSON file format
// ---------------------------------------------------------------------------

void save_object(const ObjectModel& model, const std::string& path);
ObjectModel load_object(const std::string& path);

}  // namespace gmflow
