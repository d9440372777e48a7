#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "gmflow/checkpoint.hpp"
#include "gmflow/training.hpp"

using namespace gmflow;
namespace fs = std::filesystem;

namespace {

Pose random_pose(Rng& rng, double dist) {
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    Pose p;
    p.R = q.toRotationMatrix();
    p.t = Vec3(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), dist);
    return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// loss arithmetic
// ---------------------------------------------------------------------------

TEST_CASE("total_loss discounting: unit terms with N=4 match the geometric sum") {
    LossConfig cfg;  // gamma = 0.8, k = 0.1
    std::vector<double> ones(4, 1.0);
    // (0.8^3 + 0.8^2 + 0.8 + 1) * (1 + 0.1) = 2.952 * 1.1
    double expect = (0.8 * 0.8 * 0.8 + 0.8 * 0.8 + 0.8 + 1.0) * 1.1;
    CHECK(expect == doctest::Approx(3.2472).epsilon(1e-12));
    CHECK(total_loss(ones, ones, cfg) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("total_loss with N=1 is L_pose + 0.1 L_flow; gamma=1 is a plain sum") {
    LossConfig cfg;
    CHECK(total_loss({0.7}, {0.3}, cfg) == doctest::Approx(0.7 + 0.1 * 0.3).epsilon(1e-12));
    cfg.gamma = 1.0;
    CHECK(total_loss({1, 2, 3}, {0, 0, 0}, cfg) == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("total_loss is monotone in each per-iteration term") {
    LossConfig cfg;
    Rng rng(1);
    std::vector<double> pl = {0.5, 0.4, 0.3, 0.2}, fl = {1.0, 0.8, 0.6, 0.4};
    double base = total_loss(pl, fl, cfg);
    for (size_t j = 0; j < 4; ++j) {
        auto pl2 = pl, fl2 = fl;
        pl2[j] += 0.1;
        CHECK(total_loss(pl2, fl, cfg) > base);
        fl2[j] += 0.1;
        CHECK(total_loss(pl, fl2, cfg) > base);
    }
}

TEST_CASE("flow_loss basics and the scalar re-computation oracle") {
    const int h = 4, w = 4;
    const int64_t n = h * w;
    Tensor<double> gt({2, h, w});
    Rng rng(2);
    for (auto& v : gt.v) v = rng.normal(0, 2.0);
    std::vector<uint8_t> mask(size_t(n), 1);

    CHECK(flow_loss(gt, gt, mask) == 0.0);

    Tensor<double> shifted = gt;
    for (int64_t i = 0; i < 2 * n; ++i) shifted[i] += 1.0;
    CHECK(flow_loss(shifted, gt, mask) == doctest::Approx(2.0).epsilon(1e-12));

    Tensor<double> pred({2, h, w});
    for (auto& v : pred.v) v = rng.normal(0, 2.0);
    std::vector<uint8_t> partial(size_t(n), 0);
    for (int64_t i = 0; i < n; i += 3) partial[size_t(i)] = 1;
    double expect = 0;
    int64_t cnt = 0;
    for (int64_t i = 0; i < n; ++i) {
        if (!partial[size_t(i)]) continue;
        expect += std::abs(pred[i] - gt[i]) + std::abs(pred[n + i] - gt[n + i]);
        ++cnt;
    }
    expect /= double(cnt);
    CHECK(flow_loss(pred, gt, partial) == doctest::Approx(expect).epsilon(1e-9));

    bool warn = false;
    std::vector<uint8_t> empty(size_t(n), 0);
    CHECK(flow_loss(pred, gt, empty, &warn) == 0.0);
    CHECK(warn);
}

TEST_CASE("point_matching_loss: identity, pure translation, cylinder symmetry") {
    LossConfig cfg;
    Rng rng(3);
    ObjectModel cyl = make_object(ObjectKind::Cylinder, 5);

    Pose gt = random_pose(rng, 4.0);
    CHECK(point_matching_loss(gt, gt, cyl, cfg, false) == doctest::Approx(0.0).epsilon(1e-12));

    Pose shifted = gt;
    Vec3 d(0.03, -0.02, 0.05);
    shifted.t += d;
    CHECK(point_matching_loss(shifted, gt, cyl, cfg, false) ==
          doctest::Approx(d.norm()).epsilon(1e-12));

    // rotation about the cylinder's own axis
    Pose spun = gt;
    spun.R = gt.R * exp_so3(Vec3(0, 0, M_PI / 4));
    double sym = point_matching_loss(spun, gt, cyl, cfg, true);
    double asym = point_matching_loss(spun, gt, cyl, cfg, false);
    CHECK(sym < 0.02 * cyl.diameter);
    CHECK(asym > 0.1 * cyl.diameter);
}

TEST_CASE("symmetric loss never exceeds the asymmetric loss") {
    LossConfig cfg;
    cfg.n_points = 200;
    ObjectModel box = make_object(ObjectKind::Box, 6);
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        Pose gt = random_pose(rng, 3.0);
        PoseDelta d;
        d.omega = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.3;
        d.tau = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.2;
        Pose pred = apply_pose_delta(gt, d);
        double sym = point_matching_loss(pred, gt, box, cfg, true);
        double asym = point_matching_loss(pred, gt, box, cfg, false);
        CHECK(sym <= asym + 1e-12);
    }
}

TEST_CASE("loss point sampling is stable across calls") {
    LossConfig cfg;
    ObjectModel box = make_object(ObjectKind::Box, 8);
    auto a = sample_loss_points(box, cfg);
    auto b = sample_loss_points(box, cfg);
    REQUIRE(a.size() == 1000);
    for (size_t i = 0; i < a.size(); ++i) CHECK((a[i] - b[i]).norm() == 0.0);
}

TEST_CASE("graph losses match their plain forms and differentiate") {
    Rng rng(9);
    ObjectModel box = make_object(ObjectKind::Box, 10);
    LossConfig cfg;
    cfg.n_points = 128;
    auto pts = sample_loss_points(box, cfg);
    Pose gt = random_pose(rng, 4.0);
    PoseDelta d;
    d.omega = Vec3(0.1, -0.2, 0.05);
    d.tau = Vec3(0.02, 0.01, -0.03);
    Pose pred = apply_pose_delta(gt, d);

    for (bool symmetric : {false, true}) {
        Tape<double> t;
        ParamStore<double> ps;
        Tensor<double> rv({3, 3}), tv({3});
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) rv[i * 3 + j] = pred.R(i, j);
            tv[i] = pred.t(i);
        }
        auto& rp = ps.create("R", rv);
        auto& tp = ps.create("t", tv);
        Var<double> loss =
            point_matching_loss_op(t, t.leaf(rp), t.leaf(tp), pts, box.points, gt, symmetric);
        double plain = point_matching_loss_points(pred, gt, pts, box.points, symmetric);
        CHECK(t.val(loss)[0] == doctest::Approx(plain).epsilon(1e-9));

        ps.zero_grads();
        t.backward(loss);
        // finite-difference check on the translation (smooth for both modes)
        for (int i = 0; i < 3; ++i) {
            double orig = tp.value[i];
            double h = 1e-6;
            tp.value[i] = orig + h;
            Tape<double> t1;
            double up = t1.val(point_matching_loss_op(t1, t1.leaf(rp), t1.leaf(tp), pts,
                                                      box.points, gt, symmetric))[0];
            tp.value[i] = orig - h;
            Tape<double> t2;
            double dn = t2.val(point_matching_loss_op(t2, t2.leaf(rp), t2.leaf(tp), pts,
                                                      box.points, gt, symmetric))[0];
            tp.value[i] = orig;
            double fd = (up - dn) / (2 * h);
            CHECK(std::abs(fd - tp.grad[i]) / std::max(1e-8, std::abs(fd)) < 1e-4);
        }
    }
}

// ---------------------------------------------------------------------------
// schedule / optimizer
// ---------------------------------------------------------------------------

TEST_CASE("onecycle peaks at the warmup boundary and anneals to lr_max/25") {
    TrainConfig cfg;
    cfg.total_steps = 1000;
    cfg.warmup_frac = 0.05;
    cfg.lr_max = 4e-4;
    CHECK(onecycle_lr(0, cfg) == doctest::Approx(4e-4 / 25).epsilon(1e-12));
    CHECK(onecycle_lr(50, cfg) == doctest::Approx(4e-4).epsilon(1e-12));
    CHECK(onecycle_lr(1000, cfg) == doctest::Approx(4e-4 / 25).epsilon(1e-9));
    CHECK(onecycle_lr(525, cfg) < 4e-4);
    CHECK(onecycle_lr(525, cfg) > 4e-4 / 25);
}

TEST_CASE("gradient clipping rescales a norm-100 gradient to exactly 10") {
    ParamStore<double> ps;
    auto& p = ps.create("p", Tensor<double>({100}));
    ps.zero_grads();
    for (auto& g : p.grad.v) g = 10.0;  // norm = sqrt(100 * 100) = 100
    double pre = clip_gradients(ps, 10.0);
    CHECK(pre == doctest::Approx(100.0).epsilon(1e-12));
    double post = 0;
    for (double g : p.grad.v) post += g * g;
    CHECK(std::sqrt(post) == doctest::Approx(10.0).epsilon(1e-6));
}

TEST_CASE("adamw steps are deterministic across same-seed models") {
    TrainConfig cfg;
    GmflowModel<float> a(ModelConfig::tiny(), 3), b(ModelConfig::tiny(), 3);
    AdamW<float> oa(a.params, cfg), ob(b.params, cfg);
    for (size_t i = 0; i < a.params.count(); ++i) {
        for (int64_t k = 0; k < a.params[i].value.size(); ++k) {
            float g = float(0.01 * std::sin(double(k + i)));
            a.params[i].grad[k] = g;
            b.params[i].grad[k] = g;
        }
    }
    oa.step(1e-3);
    ob.step(1e-3);
    for (size_t i = 0; i < a.params.count(); ++i)
        CHECK(std::memcmp(a.params[i].value.v.data(), b.params[i].value.v.data(),
                          a.params[i].value.v.size() * sizeof(float)) == 0);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("checkpoint round trip preserves every float32 parameter byte") {
    auto dir = fs::temp_directory_path() / "gmflow_ckpt_test";
    fs::remove_all(dir);
    GmflowModel<float> model(ModelConfig::tiny(), 21);
    Rng rng(22);
    for (size_t i = 0; i < model.params.count(); ++i)
        for (auto& v : model.params[i].value.v) v = float(rng.normal(0, 0.3));
    save_checkpoint(model, dir.string());
    CHECK(checkpoint_weights_hash(dir.string()).size() == 64);

    GmflowModel<float> loaded = load_checkpoint<float>(dir.string());
    CHECK(loaded.seed == model.seed);
    CHECK(loaded.cfg.feat_dim == model.cfg.feat_dim);
    REQUIRE(loaded.params.count() == model.params.count());
    for (size_t i = 0; i < model.params.count(); ++i)
        CHECK(std::memcmp(loaded.params[i].value.v.data(), model.params[i].value.v.data(),
                          model.params[i].value.v.size() * sizeof(float)) == 0);
    fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// train / evaluate smoke
// ---------------------------------------------------------------------------

namespace {

std::string smoke_dataset(int count, double rot_noise, double trans_noise, double occ_max,
                          uint64_t seed) {
    static int counter = 0;
    auto dir = fs::temp_directory_path() / ("gmflow_train_smoke_" + std::to_string(counter++));
    fs::remove_all(dir);
    DatasetConfig cfg;
    cfg.count = count;
    cfg.resolution = 64;
    cfg.noise = {rot_noise, trans_noise};
    cfg.occlusion_min = 0.0;
    cfg.occlusion_max = occ_max;
    cfg.seed = seed;
    generate_dataset(cfg, dir.string());
    return dir.string();
}

}  // namespace

TEST_CASE("a short training run is finite, logged, and bit-reproducible") {
    std::string dir = smoke_dataset(30, 8.0, 0.03, 0.2, 31);
    Dataset data = Dataset::load(dir);

    RefinementConfig rcfg;
    rcfg.iterations = 2;
    TrainConfig tcfg;
    tcfg.total_steps = 8;
    tcfg.batch_size = 2;
    tcfg.seed = 5;
    tcfg.val_interval = 4;
    tcfg.val_max_samples = 2;
    LossConfig lcfg;
    lcfg.n_points = 128;

    GmflowModel<float> m1(ModelConfig::tiny(), 77);
    TrainResult r1 = train(m1, data, rcfg, tcfg, lcfg, "", true);
    REQUIRE(r1.log.size() == 8);
    for (const auto& row : r1.log) {
        CHECK(std::isfinite(row.loss));
        CHECK(row.lr == onecycle_lr(row.step, tcfg));
        CHECK(row.grad_norm >= 0.0);
    }
    CHECK(!r1.val_log.empty());

    GmflowModel<float> m2(ModelConfig::tiny(), 77);
    TrainResult r2 = train(m2, data, rcfg, tcfg, lcfg, "", true);
    for (size_t i = 0; i < r1.log.size(); ++i) {
        CHECK(std::memcmp(&r1.log[i].loss, &r2.log[i].loss, 8) == 0);
        CHECK(std::memcmp(&r1.log[i].grad_norm, &r2.log[i].grad_norm, 8) == 0);
    }
    for (size_t i = 0; i < m1.params.count(); ++i)
        CHECK(std::memcmp(m1.params[i].value.v.data(), m2.params[i].value.v.data(),
                          m1.params[i].value.v.size() * sizeof(float)) == 0);
    fs::remove_all(dir);
}

TEST_CASE("evaluate: zero-noise dataset scores perfect initial recalls") {
    std::string dir = smoke_dataset(12, 0.0, 0.0, 0.0, 41);
    Dataset data = Dataset::load(dir);
    GmflowModel<float> model(ModelConfig::tiny(), 50);  // untrained: pose stays at init
    RefinementConfig rcfg;
    rcfg.iterations = 2;
    MetricReport rep = evaluate(model, data, Split::Train, rcfg, 9);

    CHECK(rep.init_add_recall_005d == 1.0);
    CHECK(rep.init_add_recall_01d == 1.0);
    // untrained heads leave the pose at P_init = P_gt
    CHECK(rep.add_recall_005d == 1.0);
    CHECK(rep.add_recall_01d == 1.0);
    CHECK(rep.mssd_auc == 1.0);
    CHECK(rep.mspd_auc == 1.0);
    CHECK(rep.occlusion_buckets.size() == 9);

    auto j = rep.to_json();
    CHECK(j.at("add_recall_01d").get<double>() == 1.0);
    CHECK(j.at("initial").at("add_recall_01d").get<double>() == 1.0);
    fs::remove_all(dir);
}

TEST_CASE("evaluate: recalls are ordered and bounded on a noisy dataset") {
    std::string dir = smoke_dataset(16, 12.0, 0.05, 0.3, 51);
    Dataset data = Dataset::load(dir);
    GmflowModel<float> model(ModelConfig::tiny(), 52);
    RefinementConfig rcfg;
    rcfg.iterations = 2;
    MetricReport rep = evaluate(model, data, Split::Train, rcfg, 0);
    CHECK(rep.add_recall_005d >= 0.0);
    CHECK(rep.add_recall_005d <= rep.add_recall_01d);
    CHECK(rep.add_recall_01d <= 1.0);
    CHECK(rep.init_add_recall_005d <= rep.init_add_recall_01d);
    CHECK(rep.mean_epe >= 0.0);
    CHECK(rep.samples == int(data.indices(Split::Train).size()));
    fs::remove_all(dir);
}

TEST_CASE("metric helpers: exact pose gives zero errors and full AUCs") {
    ObjectModel cyl = make_object(ObjectKind::Cylinder, 60);
    Rng rng(61);
    Pose gt = random_pose(rng, 4.0);
    auto syms = symmetry_set("cylinder");
    CHECK(syms.size() == 36);
    CHECK(mssd_error(gt, gt, cyl, syms) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(mssd_auc_of(0.0, cyl.diameter) == 1.0);
    CHECK(mspd_auc_of(0.0, 640) == 1.0);

    // a 10-degree spin about the axis is inside the 36-step symmetry set
    Pose spun = gt;
    spun.R = gt.R * exp_so3(Vec3(0, 0, 2.0 * M_PI / 36.0));
    CHECK(mssd_error(spun, gt, cyl, syms) < 1e-9);

    auto Kd = default_intrinsics(128);
    CHECK(mspd_error(spun, gt, cyl, syms, Kd) < 1e-6);

    auto box_syms = symmetry_set("box");
    CHECK(box_syms.size() == 4);
    CHECK(symmetry_set("icosphere").size() == 1);

    // ADD threshold semantics: an error of exactly 0.07 d counts for 0.1d only
    ObjectModel box = make_object(ObjectKind::Box, 62);
    Pose p = gt;
    p.t += Vec3(0.07 * box.diameter, 0, 0);
    double add = add_error(p, gt, box, false);
    CHECK(add == doctest::Approx(0.07 * box.diameter).epsilon(1e-9));
    CHECK((add < 0.05 * box.diameter) == false);
    CHECK((add < 0.1 * box.diameter) == true);
}
