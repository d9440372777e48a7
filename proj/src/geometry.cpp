#include "gmflow/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace gmflow {

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

bool Pose::is_valid(double tol) const {
    if (!R.allFinite() || !t.allFinite()) return false;
    Mat3 err = R.transpose() * R - Mat3::Identity();
    if (err.cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(R.determinant() - 1.0) <= tol;
}

std::array<double, 12> Pose::to_array() const {
    std::array<double, 12> a{};
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) a[r * 4 + c] = R(r, c);
        a[r * 4 + 3] = t(r);
    }
    return a;
}

Pose Pose::from_array(const std::array<double, 12>& a) {
    Pose p;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) p.R(r, c) = a[r * 4 + c];
        p.t(r) = a[r * 4 + 3];
    }
    return p;
}

void CameraIntrinsics::validate() const {
    if (!(fx > 0) || !(fy > 0)) throw Error("intrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw Error("intrinsics: empty image");
    if (cx < 0 || cx >= width || cy < 0 || cy >= height)
        throw Error("intrinsics: principal point outside image");
}

void ObjectModel::validate() const {
    if (points.size() < 4) throw Error("object model: needs at least 4 points");
    if (colors.size() != points.size()) throw Error("object model: colors/points mismatch");
    // non-coplanarity: centered point matrix must have rank 3
    Vec3 mean = Vec3::Zero();
    for (const auto& p : points) mean += p;
    mean /= double(points.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& p : points) cov += (p - mean) * (p - mean).transpose();
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    if (es.eigenvalues()(0) <= 1e-12 * std::max(1.0, es.eigenvalues()(2)))
        throw Error("object model: points are coplanar");
    double d = compute_diameter(points);
    if (!(diameter > 0) || std::abs(d - diameter) > 1e-6 * std::max(1.0, diameter))
        throw Error("object model: stored diameter inconsistent with points");
}

double compute_diameter(const std::vector<Vec3>& points) {
    double best = 0;
    for (size_t i = 0; i < points.size(); ++i) {
        for (size_t j = i + 1; j < points.size(); ++j) {
            best = std::max(best, (points[i] - points[j]).squaredNorm());
        }
    }
    return std::sqrt(best);
}

int64_t FlowField::valid_count() const {
    int64_t n = 0;
    for (uint8_t v : valid) n += v != 0;
    return n;
}

bool PoseDelta::is_finite() const { return omega.allFinite() && tau.allFinite(); }

// ---------------------------------------------------------------------------
// SO(3)
// ---------------------------------------------------------------------------

Mat3 skew(const Vec3& v) {
    Mat3 m;
    m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return m;
}

Mat3 exp_so3(const Vec3& omega) {
    double theta2 = omega.squaredNorm();
    double theta = std::sqrt(theta2);
    double a, b;
    if (theta < 1e-4) {
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0;
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
    } else {
        a = std::sin(theta) / theta;
        b = (1.0 - std::cos(theta)) / theta2;
    }
    Mat3 w = skew(omega);
    return Mat3::Identity() + a * w + b * (w * w);
}

std::array<Mat3, 3> exp_so3_jacobian(const Vec3& omega) {
    std::array<Mat3, 3> out;
    double theta2 = omega.squaredNorm();
    if (theta2 < 1e-14) {
        for (int i = 0; i < 3; ++i) out[i] = skew(Vec3::Unit(i));
        return out;
    }
    Mat3 R = exp_so3(omega);
    Mat3 w = skew(omega);
    Mat3 ImR = Mat3::Identity() - R;
    for (int i = 0; i < 3; ++i) {
        Vec3 cross = omega.cross(ImR.col(i));
        out[i] = ((omega(i) * w + skew(cross)) / theta2) * R;
    }
    return out;
}

Mat3 orthonormalize(const Mat3& m) {
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0) {
        Mat3 flip = Mat3::Identity();
        flip(2, 2) = -1;
        r = svd.matrixU() * flip * svd.matrixV().transpose();
    }
    return r;
}

// ---------------------------------------------------------------------------
// Projection and flow
// ---------------------------------------------------------------------------

PixelProjection project_points(const ObjectModel& model, const Pose& pose,
                               const CameraIntrinsics& K) {
    PixelProjection out;
    size_t n = model.points.size();
    out.uv.resize(n);
    out.depth.resize(n);
    out.in_frustum.resize(n);
    for (size_t i = 0; i < n; ++i) {
        Vec3 X = pose.R * model.points[i] + pose.t;
        double z = X.z();
        out.depth[i] = z;
        if (z > kDepthEpsilon) {
            double u = K.fx * X.x() / z + K.cx;
            double v = K.fy * X.y() / z + K.cy;
            out.uv[i] = Vec2(u, v);
            out.in_frustum[i] =
                (u >= 0.0 && u < double(K.width) && v >= 0.0 && v < double(K.height)) ? 1 : 0;
        } else {
            out.uv[i] = Vec2(0, 0);
            out.in_frustum[i] = 0;
        }
    }
    return out;
}

std::vector<int32_t> rasterize_winners(const PixelProjection& proj, const CameraIntrinsics& K) {
    std::vector<int32_t> winner(size_t(K.width) * K.height, -1);
    std::vector<double> zbuf(size_t(K.width) * K.height, 0.0);
    for (size_t i = 0; i < proj.count(); ++i) {
        if (!proj.in_frustum[i]) continue;
        int px = int(std::lround(proj.uv[i].x()));
        int py = int(std::lround(proj.uv[i].y()));
        if (px < 0 || px >= K.width || py < 0 || py >= K.height) continue;
        size_t at = size_t(py) * K.width + px;
        if (winner[at] < 0 || proj.depth[i] < zbuf[at]) {
            winner[at] = int32_t(i);
            zbuf[at] = proj.depth[i];
        }
    }
    return winner;
}

FlowField pose_to_flow(const ObjectModel& model, const Pose& pose_from, const Pose& pose_to,
                       const CameraIntrinsics& K, std::vector<int32_t>* winners_out) {
    PixelProjection from = project_points(model, pose_from, K);
    bool any = false;
    for (uint8_t f : from.in_frustum) {
        if (f) {
            any = true;
            break;
        }
    }
    if (!any) throw DegenerateProjection("no model point visible under source pose");

    std::vector<int32_t> winner = rasterize_winners(from, K);

    // destination projections: no frustum gating, displaced points may leave
    // the image and still carry a well-defined flow value
    FlowField flow(K.height, K.width);
    for (int y = 0; y < K.height; ++y) {
        for (int x = 0; x < K.width; ++x) {
            int32_t i = winner[size_t(y) * K.width + x];
            if (i < 0) continue;
            Vec3 X = pose_to.R * model.points[size_t(i)] + pose_to.t;
            double z = X.z();
            if (z <= kDepthEpsilon) continue;
            double u = K.fx * X.x() / z + K.cx;
            double v = K.fy * X.y() / z + K.cy;
            size_t at = flow.idx(y, x);
            flow.du[at] = u - from.uv[size_t(i)].x();
            flow.dv[at] = v - from.uv[size_t(i)].y();
            flow.valid[at] = 1;
        }
    }
    if (winners_out) *winners_out = std::move(winner);
    return flow;
}

FlowField ground_truth_flow(const ObjectModel& model, const Pose& pose_init, const Pose& pose_gt,
                            const CameraIntrinsics& K) {
    return pose_to_flow(model, pose_init, pose_gt, K);
}

FlowField downsample_flow(const FlowField& flow, int factor) {
    if (factor <= 0 || flow.h % factor != 0 || flow.w % factor != 0)
        throw ShapeMismatch("downsample_flow: grid not divisible by factor");
    FlowField out(flow.h / factor, flow.w / factor);
    double scale = 1.0 / double(factor);
    for (int by = 0; by < out.h; ++by) {
        for (int bx = 0; bx < out.w; ++bx) {
            double su = 0, sv = 0;
            int n = 0;
            for (int y = by * factor; y < (by + 1) * factor; ++y) {
                for (int x = bx * factor; x < (bx + 1) * factor; ++x) {
                    size_t at = flow.idx(y, x);
                    if (!flow.valid[at]) continue;
                    su += flow.du[at];
                    sv += flow.dv[at];
                    ++n;
                }
            }
            size_t at = out.idx(by, bx);
            if (n > 0) {
                out.du[at] = su / n * scale;
                out.dv[at] = sv / n * scale;
                out.valid[at] = 1;
            }
        }
    }
    return out;
}

Pose apply_pose_delta(const Pose& pose, const PoseDelta& delta) {
    if (!delta.is_finite()) throw Error("apply_pose_delta: non-finite delta");
    Pose out;
    out.R = exp_so3(delta.omega) * pose.R;
    out.t = pose.t + delta.tau;
    Mat3 err = out.R.transpose() * out.R - Mat3::Identity();
    if (err.cwiseAbs().maxCoeff() > 1e-9) out.R = orthonormalize(out.R);
    return out;
}

double geodesic_rotation_error(const Pose& a, const Pose& b) {
    double c = ((a.R * b.R.transpose()).trace() - 1.0) * 0.5;
    c = std::clamp(c, -1.0, 1.0);
    return std::acos(c);
}

// ---------------------------------------------------------------------------
// PnP (Gauss-Newton on reprojection error)
// ---------------------------------------------------------------------------

namespace {

double reprojection_cost(const std::vector<Vec3>& pts, const std::vector<Vec2>& obs,
                         const Pose& pose, const CameraIntrinsics& K) {
    double cost = 0;
    for (size_t i = 0; i < pts.size(); ++i) {
        Vec3 X = pose.R * pts[i] + pose.t;
        if (X.z() <= kDepthEpsilon) continue;
        double u = K.fx * X.x() / X.z() + K.cx;
        double v = K.fy * X.y() / X.z() + K.cy;
        cost += (Vec2(u, v) - obs[i]).squaredNorm();
    }
    return cost;
}

}  // namespace

Pose pnp_refine(const ObjectModel& model, const FlowField& flow, const Pose& pose_init,
                const CameraIntrinsics& K) {
    if (flow.h != K.height || flow.w != K.width)
        throw ShapeMismatch("pnp_refine: flow grid does not match intrinsics");
    PixelProjection from = project_points(model, pose_init, K);
    std::vector<int32_t> winner = rasterize_winners(from, K);

    std::vector<Vec3> pts;
    std::vector<Vec2> obs;
    for (int y = 0; y < K.height; ++y) {
        for (int x = 0; x < K.width; ++x) {
            size_t at = size_t(y) * K.width + x;
            int32_t i = winner[at];
            if (i < 0 || !flow.valid[at]) continue;
            pts.push_back(model.points[size_t(i)]);
            obs.emplace_back(from.uv[size_t(i)].x() + flow.du[at],
                             from.uv[size_t(i)].y() + flow.dv[at]);
        }
    }
    if (pts.size() < 6)
        throw InsufficientCorrespondences("pnp_refine: " + std::to_string(pts.size()) +
                                          " correspondences, need 6");

    Pose pose = pose_init;
    double cost = reprojection_cost(pts, obs, pose, K);
    for (int iter = 0; iter < 50; ++iter) {
        Eigen::Matrix<double, 6, 6> JtJ = Eigen::Matrix<double, 6, 6>::Zero();
        Eigen::Matrix<double, 6, 1> Jtr = Eigen::Matrix<double, 6, 1>::Zero();
        for (size_t i = 0; i < pts.size(); ++i) {
            Vec3 X = pose.R * pts[i] + pose.t;
            double z = X.z();
            if (z <= kDepthEpsilon) continue;
            double iz = 1.0 / z;
            Vec2 pred(K.fx * X.x() * iz + K.cx, K.fy * X.y() * iz + K.cy);
            Vec2 r = pred - obs[i];
            Eigen::Matrix<double, 2, 3> duvdX;
            duvdX << K.fx * iz, 0, -K.fx * X.x() * iz * iz, 0, K.fy * iz, -K.fy * X.y() * iz * iz;
            Eigen::Matrix<double, 3, 6> dXd;
            dXd.block<3, 3>(0, 0) = -skew(X - pose.t);  // left-composed axis-angle
            dXd.block<3, 3>(0, 3) = Mat3::Identity();
            Eigen::Matrix<double, 2, 6> J = duvdX * dXd;
            JtJ += J.transpose() * J;
            Jtr += J.transpose() * r;
        }

        Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>> es(JtJ);
        double lmin = es.eigenvalues()(0), lmax = es.eigenvalues()(5);
        if (!(lmin > 0) || lmax / lmin > 1e12)
            throw SingularNormalEquations("pnp_refine: condition estimate exceeds 1e12");

        Eigen::Matrix<double, 6, 1> step = JtJ.ldlt().solve(-Jtr);
        if (step.norm() < 1e-10) break;

        // step halving keeps the accepted cost non-increasing
        double scale = 1.0;
        bool accepted = false;
        for (int h = 0; h <= 20; ++h) {
            PoseDelta d;
            d.omega = scale * step.head<3>();
            d.tau = scale * step.tail<3>();
            Pose trial = apply_pose_delta(pose, d);
            double trial_cost = reprojection_cost(pts, obs, trial, K);
            if (trial_cost <= cost) {
                pose = trial;
                cost = trial_cost;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if (!accepted) break;
        if (scale * step.norm() < 1e-10) break;
    }
    return pose;
}

// ---------------------------------------------------------------------------
// ObjectModel JSON IO
// ---------------------------------------------------------------------------

void save_object(const ObjectModel& model, const std::string& path) {
    nlohmann::json j;
    auto& pts = j["points"] = nlohmann::json::array();
    for (const auto& p : model.points) pts.push_back({p.x(), p.y(), p.z()});
    auto& cols = j["colors"] = nlohmann::json::array();
    for (const auto& c : model.colors) cols.push_back({c.x(), c.y(), c.z()});
    j["diameter"] = model.diameter;
    j["symmetric"] = model.symmetric;
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << j.dump();
    if (!f) throw IoError("short write: " + path);
}

ObjectModel load_object(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw IoError("bad object JSON in " + path + ": " + e.what());
    }
    ObjectModel m;
    for (const auto& p : j.at("points")) m.points.emplace_back(p[0], p[1], p[2]);
    for (const auto& c : j.at("colors")) m.colors.emplace_back(c[0], c[1], c[2]);
    m.diameter = j.at("diameter");
    m.symmetric = j.at("symmetric");
    return m;
}

}  // namespace gmflow
