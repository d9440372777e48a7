#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "gmflow/correlation.hpp"
#include "gmflow/rng.hpp"

using namespace gmflow;

namespace {

Tensor<double> random_tensor(Rng& rng, Shape s, double scale = 1.0) {
    Tensor<double> t(s);
    for (auto& v : t.v) v = rng.normal(0, scale);
    return t;
}

// Scalar bilinear sampler with zero padding, independent of the library one.
double oracle_bilinear(const Tensor<double>& level, int64_t i, double x, double y) {
    const int hl = level.shape[1], wl = level.shape[2];
    int x0 = int(std::floor(x)), y0 = int(std::floor(y));
    double ax = x - x0, ay = y - y0;
    double acc = 0;
    for (int cy = 0; cy <= 1; ++cy) {
        for (int cx = 0; cx <= 1; ++cx) {
            int xx = x0 + cx, yy = y0 + cy;
            if (xx < 0 || xx >= wl || yy < 0 || yy >= hl) continue;
            double wgt = (cy ? ay : 1 - ay) * (cx ? ax : 1 - ax);
            acc += wgt * level.v[size_t((i * hl + yy) * wl + xx)];
        }
    }
    return acc;
}

}  // namespace

TEST_CASE("one-hot channel-basis features give a 1/sqrt(D) diagonal volume") {
    const int D = 4, h = 2, w = 2;  // each position holds a distinct basis vector
    Tensor<double> f({D, h, w});
    for (int i = 0; i < h * w; ++i) f.v[size_t(i) * (h * w) + i] = 1.0;
    auto pyr = build_pyramid(f, f, 2);
    const auto& c0 = pyr.levels[0];
    REQUIRE(c0.shape == Shape{4, 2, 2});
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            CHECK(c0.v[size_t(i) * 4 + j] == doctest::Approx(i == j ? 0.5 : 0.0).epsilon(1e-15));
}

TEST_CASE("sampled volume entries match brute-force dot products") {
    Rng rng(1);
    const int D = 16, h = 8, w = 8;
    Tensor<double> fr = random_tensor(rng, {D, h, w});
    Tensor<double> ft = random_tensor(rng, {D, h, w});
    auto pyr = build_pyramid(fr, ft, 4);
    REQUIRE(pyr.levels.size() == 4);
    REQUIRE(pyr.levels[3].shape == Shape{64, 1, 1});

    const int64_t N = h * w;
    for (int probe = 0; probe < 50; ++probe) {
        int64_t i = rng.uniform_int(0, N - 1);
        int64_t j = rng.uniform_int(0, N - 1);
        double dot = 0;
        for (int d = 0; d < D; ++d) dot += fr.v[size_t(d) * N + i] * ft.v[size_t(d) * N + j];
        dot /= std::sqrt(double(D));
        CHECK(pyr.levels[0].v[size_t(i) * N + j] == doctest::Approx(dot).epsilon(1e-6));
    }
}

TEST_CASE("pooled level entries equal the mean of their four children") {
    Rng rng(2);
    Tensor<double> fr = random_tensor(rng, {8, 8, 8});
    Tensor<double> ft = random_tensor(rng, {8, 8, 8});
    auto pyr = build_pyramid(fr, ft, 2);
    const auto& c0 = pyr.levels[0];
    const auto& c1 = pyr.levels[1];
    for (int i = 0; i < 64; ++i) {
        for (int y = 0; y < 4; ++y) {
            for (int x = 0; x < 4; ++x) {
                double mean = 0.25 * (c0.at(i, 2 * y, 2 * x) + c0.at(i, 2 * y, 2 * x + 1) +
                                      c0.at(i, 2 * y + 1, 2 * x) + c0.at(i, 2 * y + 1, 2 * x + 1));
                CHECK(c1.at(i, y, x) == doctest::Approx(mean).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("lookup with zero flow: the center channel is the self-correlation") {
    Rng rng(3);
    const int D = 8, h = 8, w = 8;
    Tensor<double> fr = random_tensor(rng, {D, h, w});
    auto pyr = build_pyramid(fr, fr, 4);
    Tensor<double> flow({2, h, w});
    auto out = lookup(pyr, flow, 4);
    REQUIRE(out.shape == Shape{4 * 81, h, w});
    const int center = 4 * 9 + 4;  // dy=0, dx=0 at level 0
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int64_t i = int64_t(y) * w + x;
            CHECK(out.at(center, y, x) == doctest::Approx(pyr.levels[0].at(int(i), y, x)).epsilon(1e-12));
        }
}

TEST_CASE("integer flow landing in bounds equals direct volume indexing") {
    Rng rng(4);
    const int D = 8, h = 8, w = 8;
    Tensor<double> fr = random_tensor(rng, {D, h, w});
    Tensor<double> ft = random_tensor(rng, {D, h, w});
    auto pyr = build_pyramid(fr, ft, 1);
    Tensor<double> flow({2, h, w});
    for (int64_t i = 0; i < h * w; ++i) {
        flow[i] = double(rng.uniform_int(-2, 2));
        flow[h * w + i] = double(rng.uniform_int(-2, 2));
    }
    auto out = lookup(pyr, flow, 4);
    const int side = 9;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int64_t i = int64_t(y) * w + x;
            for (int dy = -4; dy <= 4; ++dy) {
                for (int dx = -4; dx <= 4; ++dx) {
                    int tx = x + int(flow[i]) + dx;
                    int ty = y + int(flow[h * w + i]) + dy;
                    double expect = (tx >= 0 && tx < w && ty >= 0 && ty < h)
                                        ? pyr.levels[0].at(int(i), ty, tx)
                                        : 0.0;
                    int ch = (dy + 4) * side + (dx + 4);
                    CHECK(out.at(ch, y, x) == doctest::Approx(expect).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("fractional flow matches the scalar bilinear oracle") {
    Rng rng(5);
    const int D = 8, h = 8, w = 8;
    Tensor<double> fr = random_tensor(rng, {D, h, w});
    Tensor<double> ft = random_tensor(rng, {D, h, w});
    auto pyr = build_pyramid(fr, ft, 4);
    Tensor<double> flow({2, h, w});
    for (auto& v : flow.v) v = rng.uniform(-3.0, 3.0);
    auto out = lookup(pyr, flow, 4);

    const int side = 9;
    const int64_t N = h * w;
    for (int probe = 0; probe < 100; ++probe) {
        int y = int(rng.uniform_int(0, h - 1)), x = int(rng.uniform_int(0, w - 1));
        int l = int(rng.uniform_int(0, 3));
        int dy = int(rng.uniform_int(-4, 4)), dx = int(rng.uniform_int(-4, 4));
        int64_t i = int64_t(y) * w + x;
        double sx = (x + flow[i]) / double(1 << l) + dx;
        double sy = (y + flow[N + i]) / double(1 << l) + dy;
        double expect = oracle_bilinear(pyr.levels[size_t(l)], i, sx, sy);
        int ch = l * 81 + (dy + 4) * side + (dx + 4);
        CHECK(out.at(ch, y, x) == doctest::Approx(expect).epsilon(1e-6));
    }
}

TEST_CASE("samples far outside the volume are exactly zero") {
    Rng rng(6);
    Tensor<double> fr = random_tensor(rng, {4, 8, 8});
    auto pyr = build_pyramid(fr, fr, 2);
    Tensor<double> flow({2, 8, 8}, 500.0);
    auto out = lookup(pyr, flow, 4);
    for (double v : out.v) CHECK(v == 0.0);
}

TEST_CASE("lookup is linear in the pyramid values for fixed flow") {
    Rng rng(7);
    const int h = 8, w = 8;
    CorrelationPyramid<double> A, B, AB;
    A.h = B.h = AB.h = h;
    A.w = B.w = AB.w = w;
    int hl = h, wl = w;
    for (int l = 0; l < 4; ++l) {
        A.levels.push_back(random_tensor(rng, {h * w, hl, wl}));
        B.levels.push_back(random_tensor(rng, {h * w, hl, wl}));
        Tensor<double> sum = A.levels.back();
        for (int64_t i = 0; i < sum.size(); ++i) sum[i] += B.levels.back()[i];
        AB.levels.push_back(std::move(sum));
        hl /= 2;
        wl /= 2;
    }
    Tensor<double> flow({2, h, w});
    for (auto& v : flow.v) v = rng.uniform(-2.0, 2.0);

    auto la = lookup(A, flow, 4);
    auto lb = lookup(B, flow, 4);
    auto lab = lookup(AB, flow, 4);
    for (int64_t i = 0; i < lab.size(); ++i)
        CHECK(lab[i] == doctest::Approx(la[i] + lb[i]).epsilon(1e-6));
}

TEST_CASE("lookup gradients match finite differences") {
    Rng rng(8);
    const int D = 6, h = 4, w = 4;
    ParamStore<double> ps;
    auto& fr = ps.create("fr", random_tensor(rng, {D, h, w}));
    auto& ft = ps.create("ft", random_tensor(rng, {D, h, w}));
    auto& fl = ps.create("flow", Tensor<double>({2, h, w}));
    // fractional flow away from integer grid lines
    for (auto& v : fl.value.v) v = rng.uniform(-1.5, 1.5) + 0.3;
    Tensor<double> coeff = random_tensor(rng, {4 * 81, h, w});

    auto eval = [&]() {
        Tape<double> t;
        auto pyr = build_pyramid_op(t, t.leaf(fr), t.leaf(ft), 4);
        auto out = lookup_op(t, pyr, t.leaf(fl), 4);
        return t.val(t.sum(t.mul(out, t.constant(coeff))))[0];
    };

    Tape<double> t;
    auto pyr = build_pyramid_op(t, t.leaf(fr), t.leaf(ft), 4);
    auto out = lookup_op(t, pyr, t.leaf(fl), 4);
    ps.zero_grads();
    t.backward(t.sum(t.mul(out, t.constant(coeff))));

    auto fd_check = [&](Parameter<double>& p, int probes, double tol) {
        Rng pick(9 + uint64_t(&p == &fl));
        for (int k = 0; k < probes; ++k) {
            int64_t idx = pick.uniform_int(0, p.value.size() - 1);
            double orig = p.value[idx];
            double hstep = 1e-6;
            p.value[idx] = orig + hstep;
            double up = eval();
            p.value[idx] = orig - hstep;
            double dn = eval();
            p.value[idx] = orig;
            double fd = (up - dn) / (2 * hstep);
            double denom = std::max({std::abs(fd), std::abs(p.grad[idx]), 1e-6});
            CHECK(std::abs(fd - p.grad[idx]) / denom < tol);
        }
    };
    fd_check(fr, 10, 1e-4);
    fd_check(ft, 10, 1e-4);
    fd_check(fl, 10, 1e-3);
}
