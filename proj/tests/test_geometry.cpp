#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <Eigen/Dense>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "gmflow/geometry.hpp"
#include "gmflow/rng.hpp"

using namespace gmflow;

namespace {

Mat3 random_rotation(Rng& rng) {
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    return q.toRotationMatrix();
}

// Independent Rodrigues evaluation, kept separate from exp_so3 on purpose.
Mat3 rodrigues_oracle(const Vec3& w) {
    double th = w.norm();
    if (th < 1e-300) return Mat3::Identity();
    Vec3 k = w / th;
    Mat3 kx = skew(k);
    return Mat3::Identity() + std::sin(th) * kx + (1 - std::cos(th)) * kx * kx;
}

ObjectModel random_cloud(Rng& rng, int n, double radius = 0.5) {
    ObjectModel m;
    for (int i = 0; i < n; ++i) {
        m.points.emplace_back(rng.uniform(-radius, radius), rng.uniform(-radius, radius),
                              rng.uniform(-radius, radius));
        m.colors.emplace_back(rng.uniform(0.25, 1.0), rng.uniform(0.25, 1.0),
                              rng.uniform(0.25, 1.0));
    }
    m.diameter = compute_diameter(m.points);
    return m;
}

CameraIntrinsics test_K(int wh = 64, double f = 100.0) {
    CameraIntrinsics K;
    K.fx = K.fy = f;
    K.cx = K.cy = wh / 2.0;
    K.width = K.height = wh;
    return K;
}

Pose look_at_pose(Rng& rng, double dist) {
    Pose p;
    p.R = random_rotation(rng);
    p.t = Vec3(rng.uniform(-0.08, 0.08) * dist, rng.uniform(-0.08, 0.08) * dist, dist);
    return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// project_points
// ---------------------------------------------------------------------------

TEST_CASE("project_points: optical axis point maps to the principal point") {
    ObjectModel m;
    m.points = {Vec3(0, 0, 0), Vec3(0.1, 0, 0)};
    m.colors = {Vec3(1, 1, 1), Vec3(1, 1, 1)};
    Pose pose;
    pose.t = Vec3(0, 0, 2);
    auto proj = project_points(m, pose, test_K());
    CHECK(proj.uv[0].x() == doctest::Approx(32.0).epsilon(1e-12));
    CHECK(proj.uv[0].y() == doctest::Approx(32.0).epsilon(1e-12));
    CHECK(proj.depth[0] == doctest::Approx(2.0));
    CHECK(proj.in_frustum[0] == 1);
    // u = 100 * 0.1 / 2 + 32
    CHECK(proj.uv[1].x() == doctest::Approx(37.0).epsilon(1e-12));
    CHECK(proj.uv[1].y() == doctest::Approx(32.0).epsilon(1e-12));
}

TEST_CASE("project_points matches the homogeneous 4x4 oracle") {
    Rng rng(71);
    int checked = 0;
    for (int trial = 0; trial < 200; ++trial) {
        auto K = test_K(64, rng.uniform(60, 140));
        ObjectModel m = random_cloud(rng, 50);
        Pose pose = look_at_pose(rng, rng.uniform(2.0, 6.0));
        auto proj = project_points(m, pose, K);

        Eigen::Matrix4d T = Eigen::Matrix4d::Identity();
        T.block<3, 3>(0, 0) = pose.R;
        T.block<3, 1>(0, 3) = pose.t;
        Eigen::Matrix<double, 3, 4> P = Eigen::Matrix<double, 3, 4>::Zero();
        P(0, 0) = K.fx;
        P(1, 1) = K.fy;
        P(0, 2) = K.cx;
        P(1, 2) = K.cy;
        P(2, 2) = 1.0;
        Eigen::Matrix<double, 3, 4> M = P * T;

        for (size_t i = 0; i < m.points.size(); ++i) {
            Eigen::Vector4d ph(m.points[i].x(), m.points[i].y(), m.points[i].z(), 1.0);
            Vec3 uvw = M * ph;
            if (uvw.z() <= kDepthEpsilon) {
                CHECK(proj.in_frustum[i] == 0);
                continue;
            }
            CHECK(proj.uv[i].x() == doctest::Approx(uvw.x() / uvw.z()).epsilon(1e-9));
            CHECK(proj.uv[i].y() == doctest::Approx(uvw.y() / uvw.z()).epsilon(1e-9));
            CHECK(proj.depth[i] == doctest::Approx(uvw.z()).epsilon(1e-12));
            ++checked;
        }
    }
    CHECK(checked > 5000);
}

TEST_CASE("project_points flags points behind the camera instead of throwing") {
    ObjectModel m;
    m.points = {Vec3(0, 0, 0)};
    m.colors = {Vec3(1, 1, 1)};
    Pose pose;
    pose.t = Vec3(0, 0, -3);
    auto proj = project_points(m, pose, test_K());
    CHECK(proj.in_frustum[0] == 0);
    CHECK(std::isfinite(proj.uv[0].x()));
}

// ---------------------------------------------------------------------------
// pose_to_flow
// ---------------------------------------------------------------------------

TEST_CASE("pose_to_flow: identity motion gives exactly zero flow") {
    Rng rng(5);
    ObjectModel m = random_cloud(rng, 400);
    Pose pose = look_at_pose(rng, 3.0);
    auto flow = pose_to_flow(m, pose, pose, test_K());
    CHECK(flow.valid_count() > 20);
    for (size_t i = 0; i < flow.valid.size(); ++i) {
        if (!flow.valid[i]) continue;
        CHECK(flow.du[i] == 0.0);
        CHECK(flow.dv[i] == 0.0);
    }
}

TEST_CASE("pose_to_flow: lateral translation at constant depth is fx*dx/Z") {
    // planar cloud at constant camera depth
    Rng rng(6);
    ObjectModel m;
    for (int i = 0; i < 300; ++i) {
        m.points.emplace_back(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 0.0);
        m.colors.emplace_back(1, 1, 1);
    }
    Pose a;
    a.t = Vec3(0, 0, 2.5);
    Pose b = a;
    b.t += Vec3(0.1, 0, 0);
    auto flow = pose_to_flow(m, a, b, test_K());
    double expected = 100.0 * 0.1 / 2.5;
    CHECK(flow.valid_count() > 50);
    for (size_t i = 0; i < flow.valid.size(); ++i) {
        if (!flow.valid[i]) continue;
        CHECK(flow.du[i] == doctest::Approx(expected).epsilon(1e-6));
        CHECK(std::abs(flow.dv[i]) < 1e-9);
    }
}

TEST_CASE("pose_to_flow: in-plane rotation about the optical axis rotates pixel offsets") {
    Rng rng(7);
    ObjectModel m = random_cloud(rng, 600);
    auto K = test_K();
    Pose a = look_at_pose(rng, 3.0);
    double th = 10.0 * M_PI / 180.0;
    Mat3 Rz = exp_so3(Vec3(0, 0, th));
    Pose b;
    b.R = Rz * a.R;
    b.t = Rz * a.t;

    std::vector<int32_t> winners;
    auto flow = pose_to_flow(m, a, b, K, &winners);
    auto proj_a = project_points(m, a, K);
    Eigen::Rotation2Dd rot2(th);

    int checked = 0;
    for (int y = 0; y < K.height; ++y) {
        for (int x = 0; x < K.width; ++x) {
            size_t at = size_t(y) * K.width + x;
            if (!flow.valid[at]) continue;
            int32_t i = winners[at];
            REQUIRE(i >= 0);
            Vec2 off = proj_a.uv[size_t(i)] - Vec2(K.cx, K.cy);
            Vec2 expected = rot2 * off - off;
            CHECK(flow.du[at] == doctest::Approx(expected.x()).epsilon(1e-6));
            CHECK(flow.dv[at] == doctest::Approx(expected.y()).epsilon(1e-6));
            ++checked;
        }
    }
    CHECK(checked > 50);
}

TEST_CASE("pose_to_flow throws DegenerateProjection when nothing is visible") {
    Rng rng(8);
    ObjectModel m = random_cloud(rng, 50);
    Pose behind;
    behind.t = Vec3(0, 0, -4);
    CHECK_THROWS_AS(pose_to_flow(m, behind, behind, test_K()), DegenerateProjection);
}

TEST_CASE("pose_to_flow antisymmetry at corresponding points") {
    Rng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        ObjectModel m = random_cloud(rng, 500);
        auto K = test_K();
        Pose a = look_at_pose(rng, 3.0);
        PoseDelta d;
        d.omega = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.05;
        d.tau = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.03;
        Pose b = apply_pose_delta(a, d);

        std::vector<int32_t> wab, wba;
        auto fab = pose_to_flow(m, a, b, K, &wab);
        auto fba = pose_to_flow(m, b, a, K, &wba);
        auto pb = project_points(m, b, K);

        int checked = 0;
        for (int y = 0; y < K.height; ++y) {
            for (int x = 0; x < K.width; ++x) {
                size_t at = size_t(y) * K.width + x;
                if (!fab.valid[at]) continue;
                int32_t i = wab[at];
                // displaced location: the same point's pixel under pose b
                if (!pb.in_frustum[size_t(i)]) continue;
                int bx = int(std::lround(pb.uv[size_t(i)].x()));
                int by = int(std::lround(pb.uv[size_t(i)].y()));
                if (bx < 0 || bx >= K.width || by < 0 || by >= K.height) continue;
                size_t bat = size_t(by) * K.width + bx;
                if (wba[bat] != i || !fba.valid[bat]) continue;  // a different point won there
                CHECK(fab.du[at] == doctest::Approx(-fba.du[bat]).epsilon(1e-12));
                CHECK(fab.dv[at] == doctest::Approx(-fba.dv[bat]).epsilon(1e-12));
                ++checked;
            }
        }
        CHECK(checked > 10);
    }
}

TEST_CASE("downsample_flow averages valid pixels and rescales displacements") {
    FlowField f(16, 16);
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
            size_t at = f.idx(y, x);
            f.du[at] = 8.0;
            f.dv[at] = 16.0;
            f.valid[at] = (x % 2 == 0);  // half the pixels valid
        }
    }
    auto base = downsample_flow(f, 8);
    CHECK(base.h == 2);
    CHECK(base.w == 2);
    for (size_t i = 0; i < base.valid.size(); ++i) {
        CHECK(base.valid[i] == 1);
        CHECK(base.du[i] == doctest::Approx(1.0));
        CHECK(base.dv[i] == doctest::Approx(2.0));
    }
}

// ---------------------------------------------------------------------------
// apply_pose_delta
// ---------------------------------------------------------------------------

TEST_CASE("apply_pose_delta: zero delta leaves the pose unchanged") {
    Rng rng(11);
    Pose p = look_at_pose(rng, 4.0);
    Pose q = apply_pose_delta(p, PoseDelta{});
    CHECK((q.R - p.R).cwiseAbs().maxCoeff() == 0.0);
    CHECK((q.t - p.t).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("apply_pose_delta: quarter-turn about z from identity") {
    PoseDelta d;
    d.omega = Vec3(0, 0, M_PI / 2);
    Pose q = apply_pose_delta(Pose{}, d);
    Mat3 expected;
    expected << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    CHECK((q.R - expected).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("apply_pose_delta composition matches the Rodrigues product oracle") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        Pose p;
        p.R = random_rotation(rng);
        p.t = Vec3(rng.normal(), rng.normal(), rng.normal());
        PoseDelta d1, d2;
        d1.omega = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.1;
        d1.tau = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.1;
        d2.omega = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.1;
        d2.tau = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.1;

        Pose got = apply_pose_delta(apply_pose_delta(p, d1), d2);
        Mat3 expected_R = rodrigues_oracle(d2.omega) * rodrigues_oracle(d1.omega) * p.R;
        Vec3 expected_t = p.t + d1.tau + d2.tau;
        CHECK((got.R - expected_R).cwiseAbs().maxCoeff() < 1e-9);
        CHECK((got.t - expected_t).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("apply_pose_delta output stays orthonormal under long chains") {
    Rng rng(13);
    Pose p;
    for (int i = 0; i < 2000; ++i) {
        PoseDelta d;
        d.omega = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.5;
        d.tau = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.01;
        p = apply_pose_delta(p, d);
        REQUIRE(p.is_valid(1e-9));
    }
}

// ---------------------------------------------------------------------------
// exp_so3 jacobian (used by the differentiable pose chain)
// ---------------------------------------------------------------------------

TEST_CASE("exp_so3_jacobian matches central finite differences") {
    Rng rng(14);
    for (int trial = 0; trial < 30; ++trial) {
        Vec3 w(rng.normal(), rng.normal(), rng.normal());
        if (trial < 5) w *= 1e-6;  // near-identity branch
        auto J = exp_so3_jacobian(w);
        double h = 1e-6;
        for (int i = 0; i < 3; ++i) {
            Vec3 wp = w, wm = w;
            wp(i) += h;
            wm(i) -= h;
            Mat3 fd = (exp_so3(wp) - exp_so3(wm)) / (2 * h);
            CHECK((J[i] - fd).cwiseAbs().maxCoeff() < 1e-6);
        }
    }
}

// ---------------------------------------------------------------------------
// pnp_refine
// ---------------------------------------------------------------------------

TEST_CASE("pnp_refine recovers the target pose from noiseless ground-truth flow") {
    Rng rng(15);
    int scenes = 0;
    while (scenes < 30) {
        ObjectModel m = random_cloud(rng, 800);
        auto K = test_K();
        Pose init = look_at_pose(rng, rng.uniform(2.5, 5.0));
        PoseDelta d;
        d.omega = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.1;
        d.tau = Vec3(rng.normal(), rng.normal(), rng.normal()) * (0.02 * init.t.z());
        Pose gt = apply_pose_delta(init, d);

        FlowField flow;
        try {
            flow = pose_to_flow(m, init, gt, K);
        } catch (const DegenerateProjection&) {
            continue;
        }
        if (flow.valid_count() < 20) continue;
        Pose refined = pnp_refine(m, flow, init, K);
        CHECK(geodesic_rotation_error(refined, gt) < 1e-3);
        CHECK((refined.t - gt.t).norm() < 1e-3);
        ++scenes;
    }
}

TEST_CASE("pnp_refine with a zero flow field returns the initial pose") {
    Rng rng(16);
    ObjectModel m = random_cloud(rng, 500);
    auto K = test_K();
    Pose init = look_at_pose(rng, 3.0);
    auto flow = pose_to_flow(m, init, init, K);
    Pose refined = pnp_refine(m, flow, init, K);
    CHECK(geodesic_rotation_error(refined, init) < 1e-12);
    CHECK((refined.t - init.t).norm() < 1e-12);
}

TEST_CASE("pnp_refine under 0.5 px flow noise: median errors stay small") {
    Rng rng(17);
    std::vector<double> rot_errs, trans_errs;
    while (rot_errs.size() < 100) {
        ObjectModel m = random_cloud(rng, 800);
        auto K = test_K();
        Pose init = look_at_pose(rng, rng.uniform(2.5, 5.0));
        PoseDelta d;
        d.omega = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.08;
        d.tau = Vec3(rng.normal(), rng.normal(), rng.normal()) * (0.02 * init.t.z());
        Pose gt = apply_pose_delta(init, d);
        FlowField flow;
        try {
            flow = pose_to_flow(m, init, gt, K);
        } catch (const DegenerateProjection&) {
            continue;
        }
        if (flow.valid_count() < 40) continue;
        for (size_t i = 0; i < flow.valid.size(); ++i) {
            if (!flow.valid[i]) continue;
            flow.du[i] += rng.normal(0, 0.5);
            flow.dv[i] += rng.normal(0, 0.5);
        }
        Pose refined = pnp_refine(m, flow, init, K);
        rot_errs.push_back(geodesic_rotation_error(refined, gt));
        trans_errs.push_back((refined.t - gt.t).norm() / gt.t.z());
    }
    std::sort(rot_errs.begin(), rot_errs.end());
    std::sort(trans_errs.begin(), trans_errs.end());
    CHECK(rot_errs[50] < 2.0 * M_PI / 180.0);
    CHECK(trans_errs[50] < 0.02);
}

TEST_CASE("pnp_refine error paths") {
    Rng rng(18);
    ObjectModel m = random_cloud(rng, 500);
    auto K = test_K();
    Pose init = look_at_pose(rng, 3.0);
    auto flow = pose_to_flow(m, init, init, K);

    SUBCASE("fewer than 6 correspondences") {
        int kept = 0;
        for (size_t i = 0; i < flow.valid.size(); ++i) {
            if (flow.valid[i] && kept < 4) {
                ++kept;
                continue;
            }
            flow.valid[i] = 0;
        }
        CHECK_THROWS_AS(pnp_refine(m, flow, init, K), InsufficientCorrespondences);
    }

    SUBCASE("collinear points make the normal equations singular") {
        ObjectModel line;
        for (int i = 0; i < 40; ++i) {
            line.points.emplace_back(0.0, 0.0, -0.45 + 0.02 * i);
            line.colors.emplace_back(1, 1, 1);
        }
        Pose p;
        p.t = Vec3(0, 0, 3);
        auto lf = pose_to_flow(line, p, p, K);
        if (lf.valid_count() >= 6) {
            CHECK_THROWS_AS(pnp_refine(line, lf, p, K), SingularNormalEquations);
        }
    }
}

// ---------------------------------------------------------------------------
// geodesic_rotation_error
// ---------------------------------------------------------------------------

TEST_CASE("geodesic_rotation_error basics and axis-angle round trip") {
    CHECK(geodesic_rotation_error(Pose{}, Pose{}) == 0.0);

    Pose z90;
    z90.R = exp_so3(Vec3(0, 0, M_PI / 2));
    CHECK(geodesic_rotation_error(z90, Pose{}) == doctest::Approx(M_PI / 2).epsilon(1e-12));

    Rng rng(19);
    for (int i = 0; i < 200; ++i) {
        Vec3 axis(rng.normal(), rng.normal(), rng.normal());
        axis.normalize();
        double theta = rng.uniform(1e-6, M_PI - 1e-6);
        Pose p;
        p.R = exp_so3(axis * theta);
        CHECK(geodesic_rotation_error(p, Pose{}) == doctest::Approx(theta).epsilon(1e-9));
    }
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

TEST_CASE("pose array round trip is row-major [R|t]") {
    Rng rng(20);
    Pose p = look_at_pose(rng, 3.0);
    auto a = p.to_array();
    CHECK(a[0] == p.R(0, 0));
    CHECK(a[3] == p.t(0));
    CHECK(a[7] == p.t(1));
    Pose q = Pose::from_array(a);
    CHECK((q.R - p.R).cwiseAbs().maxCoeff() == 0.0);
    CHECK((q.t - p.t).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("object model JSON round trip") {
    Rng rng(21);
    ObjectModel m = random_cloud(rng, 60);
    m.symmetric = true;
    auto path = std::filesystem::temp_directory_path() / "gmflow_test_object.json";
    save_object(m, path.string());
    ObjectModel r = load_object(path.string());
    REQUIRE(r.points.size() == m.points.size());
    CHECK(r.symmetric == m.symmetric);
    CHECK(r.diameter == doctest::Approx(m.diameter).epsilon(1e-12));
    for (size_t i = 0; i < m.points.size(); ++i) {
        CHECK((r.points[i] - m.points[i]).norm() < 1e-12);
        CHECK((r.colors[i] - m.colors[i]).norm() < 1e-12);
    }
    std::filesystem::remove(path);
}
