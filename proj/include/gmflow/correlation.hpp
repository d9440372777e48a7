#pragma once

// All-pairs correlation volume between rendered and target matching
// features, its 2x2-average-pooled pyramid, and the flow-guided bilinear
// neighborhood lookup. Level 0 stores <F_r[i], F_t[j]> / sqrt(D); deeper
// levels pool over the target dimensions only.

#include <Eigen/Core>
#include <vector>

#include "gmflow/autodiff.hpp"

namespace gmflow {

template <class S>
struct CorrelationPyramid {
    // levels[l]: (h*w, h >> l, w >> l); source pixel index is the channel.
    std::vector<Tensor<S>> levels;
    int h = 0, w = 0;
};

namespace detail {

template <class S>
Tensor<S> corr_base_values(const Tensor<S>& fr, const Tensor<S>& ft) {
    check_same_shape(fr.shape, ft.shape, "build_pyramid");
    if (fr.shape.nd != 3) throw ShapeMismatch("build_pyramid expects (D,h,w)");
    const int D = fr.shape[0], h = fr.shape[1], w = fr.shape[2];
    const int64_t N = int64_t(h) * w;
    Tensor<S> out({int(N), h, w});
    using M = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const M> A(fr.data(), D, N), B(ft.data(), D, N);
    Eigen::Map<M> C(out.data(), N, N);
    C.noalias() = A.transpose() * B;
    const S scale = S(1.0 / std::sqrt(double(D)));
    for (auto& v : out.v) v *= scale;
    return out;
}

template <class S>
Tensor<S> pool2_values(const Tensor<S>& x) {
    const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
    Tensor<S> out({C, H / 2, W / 2});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H / 2; ++y)
            for (int xo = 0; xo < W / 2; ++xo)
                out.at(c, y, xo) =
                    S(0.25) * (x.at(c, 2 * y, 2 * xo) + x.at(c, 2 * y, 2 * xo + 1) +
                               x.at(c, 2 * y + 1, 2 * xo) + x.at(c, 2 * y + 1, 2 * xo + 1));
    return out;
}

// Bilinear read of plane `i` of a level at continuous (x, y); zero outside.
template <class S>
inline S bilinear_zero(const Tensor<S>& level, int64_t i, double x, double y) {
    const int hl = level.shape[1], wl = level.shape[2];
    const int x0 = int(std::floor(x)), y0 = int(std::floor(y));
    const double ax = x - x0, ay = y - y0;
    const S* plane = level.data() + i * int64_t(hl) * wl;
    auto tap = [&](int yy, int xx) -> double {
        if (xx < 0 || xx >= wl || yy < 0 || yy >= hl) return 0.0;
        return double(plane[int64_t(yy) * wl + xx]);
    };
    double v00 = tap(y0, x0), v01 = tap(y0, x0 + 1);
    double v10 = tap(y0 + 1, x0), v11 = tap(y0 + 1, x0 + 1);
    return S((1 - ay) * ((1 - ax) * v00 + ax * v01) + ay * ((1 - ax) * v10 + ax * v11));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// plain-value API
// ---------------------------------------------------------------------------

template <class S>
CorrelationPyramid<S> build_pyramid(const Tensor<S>& feat_rendered, const Tensor<S>& feat_target,
                                    int num_levels = 4) {
    CorrelationPyramid<S> pyr;
    pyr.h = feat_rendered.shape[1];
    pyr.w = feat_rendered.shape[2];
    pyr.levels.push_back(detail::corr_base_values(feat_rendered, feat_target));
    for (int l = 1; l < num_levels; ++l)
        pyr.levels.push_back(detail::pool2_values(pyr.levels.back()));
    return pyr;
}

// Neighborhood sample around the flow-displaced position at every level.
// Channels are level-major, then row-major offsets; zeros outside bounds.
template <class S>
Tensor<S> lookup(const CorrelationPyramid<S>& pyr, const Tensor<S>& flow, int radius = 4) {
    if (flow.shape.nd != 3 || flow.shape[0] != 2 || flow.shape[1] != pyr.h ||
        flow.shape[2] != pyr.w)
        throw ShapeMismatch("lookup: flow grid " + flow.shape.str() + " does not match pyramid");
    const int h = pyr.h, w = pyr.w;
    const int side = 2 * radius + 1;
    const int L = int(pyr.levels.size());
    const int64_t N = int64_t(h) * w;
    Tensor<S> out({L * side * side, h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int64_t i = int64_t(y) * w + x;
            const double tx = x + double(flow[0 * N + i]);
            const double ty = y + double(flow[1 * N + i]);
            for (int l = 0; l < L; ++l) {
                const double lx = tx / double(1 << l), ly = ty / double(1 << l);
                for (int dy = -radius; dy <= radius; ++dy) {
                    for (int dx = -radius; dx <= radius; ++dx) {
                        int ch = l * side * side + (dy + radius) * side + (dx + radius);
                        out[int64_t(ch) * N + i] =
                            detail::bilinear_zero(pyr.levels[size_t(l)], i, lx + dx, ly + dy);
                    }
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// graph ops
// ---------------------------------------------------------------------------

template <class S>
struct CorrPyramidVars {
    std::vector<Var<S>> levels;
    int h = 0, w = 0;
};

template <class S>
CorrPyramidVars<S> build_pyramid_op(Tape<S>& t, Var<S> feat_rendered, Var<S> feat_target,
                                    int num_levels = 4) {
    const Shape& s = t.val(feat_rendered).shape;
    check_same_shape(s, t.val(feat_target).shape, "build_pyramid");
    const int D = s[0];
    CorrPyramidVars<S> pyr;
    pyr.h = s[1];
    pyr.w = s[2];
    Tensor<S> base = detail::corr_base_values(t.val(feat_rendered), t.val(feat_target));
    Var<S> fr = feat_rendered, ft = feat_target;
    const int64_t N = int64_t(pyr.h) * pyr.w;
    Var<S> level0 =
        t.push(std::move(base), {fr, ft}, [fr, ft, D, N](Tape<S>& tp, const Tensor<S>& g) {
            using M = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
            const S scale = S(1.0 / std::sqrt(double(D)));
            Eigen::Map<const M> G(g.data(), N, N);
            if (tp.needs_grad(fr)) {
                Tensor<S> dfr(tp.val(fr).shape);
                Eigen::Map<const M> B(tp.val(ft).data(), D, N);
                Eigen::Map<M> DA(dfr.data(), D, N);
                DA.noalias() = B * G.transpose();
                for (auto& v : dfr.v) v *= scale;
                tp.accum(fr, dfr);
            }
            if (tp.needs_grad(ft)) {
                Tensor<S> dft(tp.val(ft).shape);
                Eigen::Map<const M> A(tp.val(fr).data(), D, N);
                Eigen::Map<M> DB(dft.data(), D, N);
                DB.noalias() = A * G;
                for (auto& v : dft.v) v *= scale;
                tp.accum(ft, dft);
            }
        });
    pyr.levels.push_back(level0);
    for (int l = 1; l < num_levels; ++l) pyr.levels.push_back(t.avg_pool2(pyr.levels.back()));
    return pyr;
}

template <class S>
Var<S> lookup_op(Tape<S>& t, const CorrPyramidVars<S>& pyr, Var<S> flow, int radius = 4) {
    CorrelationPyramid<S> values;
    values.h = pyr.h;
    values.w = pyr.w;
    for (auto lv : pyr.levels) values.levels.push_back(t.val(lv));
    Tensor<S> out = lookup(values, t.val(flow), radius);

    std::vector<Var<S>> parents = pyr.levels;
    parents.push_back(flow);
    std::vector<Var<S>> levels = pyr.levels;
    const int h = pyr.h, w = pyr.w;
    return t.push(
        std::move(out), parents, [levels, flow, h, w, radius](Tape<S>& tp, const Tensor<S>& g) {
            const int side = 2 * radius + 1;
            const int L = int(levels.size());
            const int64_t N = int64_t(h) * w;
            const Tensor<S>& fv = tp.val(flow);
            std::vector<Tensor<S>> dlevels(L);
            std::vector<bool> need_level(L);
            for (int l = 0; l < L; ++l) {
                need_level[size_t(l)] = tp.needs_grad(levels[size_t(l)]);
                if (need_level[size_t(l)]) dlevels[size_t(l)] = Tensor<S>(tp.val(levels[size_t(l)]).shape);
            }
            const bool need_flow = tp.needs_grad(flow);
            Tensor<S> dflow;
            if (need_flow) dflow = Tensor<S>(fv.shape);

            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const int64_t i = int64_t(y) * w + x;
                    const double tx = x + double(fv[0 * N + i]);
                    const double ty = y + double(fv[1 * N + i]);
                    double gdx = 0, gdy = 0;
                    for (int l = 0; l < L; ++l) {
                        const Tensor<S>& lev = tp.val(levels[size_t(l)]);
                        const int hl = lev.shape[1], wl = lev.shape[2];
                        const S* plane = lev.data() + i * int64_t(hl) * wl;
                        S* dplane = need_level[size_t(l)]
                                        ? dlevels[size_t(l)].data() + i * int64_t(hl) * wl
                                        : nullptr;
                        const double inv = 1.0 / double(1 << l);
                        const double lx0 = tx * inv, ly0 = ty * inv;
                        for (int dy = -radius; dy <= radius; ++dy) {
                            for (int dx = -radius; dx <= radius; ++dx) {
                                const int ch = l * side * side + (dy + radius) * side +
                                               (dx + radius);
                                const double go = double(g[int64_t(ch) * N + i]);
                                if (go == 0.0) continue;
                                const double sx = lx0 + dx, sy = ly0 + dy;
                                const int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
                                const double ax = sx - x0, ay = sy - y0;
                                double v[2][2];
                                for (int cy = 0; cy < 2; ++cy)
                                    for (int cx2 = 0; cx2 < 2; ++cx2) {
                                        int yy = y0 + cy, xx = x0 + cx2;
                                        bool in = xx >= 0 && xx < wl && yy >= 0 && yy < hl;
                                        v[cy][cx2] = in ? double(plane[int64_t(yy) * wl + xx]) : 0.0;
                                        if (in && dplane) {
                                            double wgt = (cy ? ay : 1 - ay) * (cx2 ? ax : 1 - ax);
                                            dplane[int64_t(yy) * wl + xx] += S(go * wgt);
                                        }
                                    }
                                if (need_flow) {
                                    double dvdx = (1 - ay) * (v[0][1] - v[0][0]) +
                                                  ay * (v[1][1] - v[1][0]);
                                    double dvdy = (1 - ax) * (v[1][0] - v[0][0]) +
                                                  ax * (v[1][1] - v[0][1]);
                                    gdx += go * dvdx * inv;
                                    gdy += go * dvdy * inv;
                                }
                            }
                        }
                    }
                    if (need_flow) {
                        dflow[0 * N + i] = S(gdx);
                        dflow[1 * N + i] = S(gdy);
                    }
                }
            }
            for (int l = 0; l < L; ++l)
                if (need_level[size_t(l)]) tp.accum(levels[size_t(l)], dlevels[size_t(l)]);
            if (need_flow) tp.accum(flow, dflow);
        });
}

}  // namespace gmflow
