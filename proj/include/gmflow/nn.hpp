#pragma once

// Layer wrappers over the autodiff tape: residual feature/context encoders,
// the convolutional GRU update cell, and the global motion capture (GMC)
// attention block. Parameters are created once in a ParamStore; forward
// passes record onto caller-owned tapes, so one weight set can serve many
// concurrent graphs.

#include <cmath>
#include <string>

#include "gmflow/autodiff.hpp"
#include "gmflow/rng.hpp"

namespace gmflow {

struct ModelConfig {
    // residual trunk widths at 1/2, 1/4, 1/8 resolution
    int enc_c1 = 64;
    int enc_c2 = 96;
    int enc_c3 = 128;
    int feat_dim = 256;  // matching feature channels D
    int ctx_dim = 128;   // context = GRU hidden = motion/global-motion channels
    int norm_groups = 8;
    int corr_levels = 4;
    int corr_radius = 4;
    bool q_softmax = true;           // attention normalization: softmax vs sum-division
    bool gmc_project_motion = true;  // apply the motion projection before gating

    // Slim widths that keep CPU training runs short; the architecture is
    // unchanged.
    static ModelConfig desk() {
        ModelConfig c;
        c.enc_c1 = 8;
        c.enc_c2 = 16;
        c.enc_c3 = 24;
        c.feat_dim = 24;
        c.ctx_dim = 24;
        return c;
    }
    // Tiny widths for gradient-check tests.
    static ModelConfig tiny() {
        ModelConfig c;
        c.enc_c1 = 8;
        c.enc_c2 = 8;
        c.enc_c3 = 8;
        c.feat_dim = 8;
        c.ctx_dim = 8;
        return c;
    }
};

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> init_normal(Rng& rng, Shape shape, double stddev) {
    Tensor<S> t(shape);
    for (auto& v : t.v) v = S(rng.normal(0.0, stddev));
    return t;
}

// Kaiming fan-in scaling for convolution / linear weights.
template <class S>
Tensor<S> init_kaiming(Rng& rng, Shape shape, int fan_in) {
    return init_normal<S>(rng, shape, std::sqrt(2.0 / double(fan_in)));
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <class S>
struct Conv2d {
    Parameter<S>* w = nullptr;
    Parameter<S>* b = nullptr;
    int stride = 1;
    int pad = 1;

    static Conv2d create(ParamStore<S>& ps, Rng& rng, const std::string& name, int ci, int co,
                         int k, int stride, bool bias = true, bool zero_init = false) {
        Conv2d c;
        c.stride = stride;
        c.pad = (k - 1) / 2;
        Shape ws{co, ci, k, k};
        c.w = &ps.create(name + ".w",
                         zero_init ? Tensor<S>(ws) : init_kaiming<S>(rng, ws, ci * k * k));
        if (bias) c.b = &ps.create(name + ".b", Tensor<S>({co}));
        return c;
    }

    Var<S> operator()(Tape<S>& t, Var<S> x) const {
        return t.conv2d(x, t.leaf(*w), b ? t.leaf(*b) : Var<S>{}, stride, pad);
    }
};

template <class S>
struct GroupNorm {
    Parameter<S>* gamma = nullptr;
    Parameter<S>* beta = nullptr;
    int groups = 8;

    static GroupNorm create(ParamStore<S>& ps, const std::string& name, int channels,
                            int groups) {
        GroupNorm g;
        g.groups = groups;
        g.gamma = &ps.create(name + ".gamma", Tensor<S>({channels}, S(1)));
        g.beta = &ps.create(name + ".beta", Tensor<S>({channels}));
        return g;
    }

    Var<S> operator()(Tape<S>& t, Var<S> x) const {
        return t.group_norm(x, t.leaf(*gamma), t.leaf(*beta), groups);
    }
};

template <class S>
struct Linear {
    Parameter<S>* w = nullptr;
    Parameter<S>* b = nullptr;

    static Linear create(ParamStore<S>& ps, Rng& rng, const std::string& name, int in, int out,
                         bool zero_init = false) {
        Linear l;
        Shape ws{out, in};
        l.w = &ps.create(name + ".w", zero_init ? Tensor<S>(ws) : init_kaiming<S>(rng, ws, in));
        l.b = &ps.create(name + ".b", Tensor<S>({out}));
        return l;
    }

    Var<S> operator()(Tape<S>& t, Var<S> x) const {
        return t.linear(x, t.leaf(*w), t.leaf(*b));
    }
};

// Pre-activation style residual block: conv-GN-relu, conv-GN, skip, relu.
// stride 2 on the first conv downsamples; the skip then runs through a
// strided 1x1 projection.
template <class S>
struct ResBlock {
    Conv2d<S> conv1, conv2;
    GroupNorm<S> gn1, gn2;
    Conv2d<S> down;
    GroupNorm<S> gn_down;
    bool has_down = false;

    static ResBlock create(ParamStore<S>& ps, Rng& rng, const std::string& name, int ci, int co,
                           int stride, int groups) {
        ResBlock b;
        b.conv1 = Conv2d<S>::create(ps, rng, name + ".conv1", ci, co, 3, stride);
        b.gn1 = GroupNorm<S>::create(ps, name + ".gn1", co, groups);
        b.conv2 = Conv2d<S>::create(ps, rng, name + ".conv2", co, co, 3, 1);
        b.gn2 = GroupNorm<S>::create(ps, name + ".gn2", co, groups);
        if (stride != 1 || ci != co) {
            b.has_down = true;
            b.down = Conv2d<S>::create(ps, rng, name + ".down", ci, co, 1, stride);
            b.down.pad = 0;
            b.gn_down = GroupNorm<S>::create(ps, name + ".gn_down", co, groups);
        }
        return b;
    }

    Var<S> operator()(Tape<S>& t, Var<S> x) const {
        Var<S> y = t.relu(gn1(t, conv1(t, x)));
        y = gn2(t, conv2(t, y));
        Var<S> skip = has_down ? gn_down(t, down(t, x)) : x;
        return t.relu(t.add(y, skip));
    }
};

// Six residual blocks, two per resolution level (1/2, 1/4, 1/8), behind a
// strided stem and in front of a 1x1 projection to the requested width.
template <class S>
struct ResidualEncoder {
    Conv2d<S> stem;
    GroupNorm<S> gn_stem;
    ResBlock<S> blocks[6];
    Conv2d<S> proj;
    int out_channels = 0;

    static ResidualEncoder create(ParamStore<S>& ps, Rng& rng, const std::string& name,
                                  const ModelConfig& cfg, int out_channels) {
        ResidualEncoder e;
        e.out_channels = out_channels;
        e.stem = Conv2d<S>::create(ps, rng, name + ".stem", 3, cfg.enc_c1, 3, 2);
        e.gn_stem = GroupNorm<S>::create(ps, name + ".gn_stem", cfg.enc_c1, cfg.norm_groups);
        e.blocks[0] = ResBlock<S>::create(ps, rng, name + ".b1", cfg.enc_c1, cfg.enc_c1, 1,
                                          cfg.norm_groups);
        e.blocks[1] = ResBlock<S>::create(ps, rng, name + ".b2", cfg.enc_c1, cfg.enc_c1, 1,
                                          cfg.norm_groups);
        e.blocks[2] = ResBlock<S>::create(ps, rng, name + ".b3", cfg.enc_c1, cfg.enc_c2, 2,
                                          cfg.norm_groups);
        e.blocks[3] = ResBlock<S>::create(ps, rng, name + ".b4", cfg.enc_c2, cfg.enc_c2, 1,
                                          cfg.norm_groups);
        e.blocks[4] = ResBlock<S>::create(ps, rng, name + ".b5", cfg.enc_c2, cfg.enc_c3, 2,
                                          cfg.norm_groups);
        e.blocks[5] = ResBlock<S>::create(ps, rng, name + ".b6", cfg.enc_c3, cfg.enc_c3, 1,
                                          cfg.norm_groups);
        e.proj = Conv2d<S>::create(ps, rng, name + ".proj", cfg.enc_c3, out_channels, 1, 1);
        e.proj.pad = 0;
        return e;
    }

    Var<S> operator()(Tape<S>& t, Var<S> image) const {
        const Shape& s = image.shape();
        if (s.nd != 3 || s[0] != 3) throw ShapeMismatch("encoder expects (3,H,W)");
        if (s[1] % 8 != 0 || s[2] % 8 != 0)
            throw ShapeMismatch("encoder: H and W must be divisible by 8, got " + s.str());
        Var<S> x = t.relu(gn_stem(t, stem(t, image)));
        for (const auto& b : blocks) x = b(t, x);
        return proj(t, x);
    }
};

// Matching features for render/target images; the same encoder instance
// must be called for both (weight sharing is the caller's contract).
template <class S>
Var<S> encode_features(Tape<S>& t, const ResidualEncoder<S>& enc, Var<S> image) {
    return enc(t, image);
}

// Context encoding of the rendered image: 2*ctx channels split into a
// tanh-bounded initial hidden state and a ReLU-positive context map.
template <class S>
std::pair<Var<S>, Var<S>> encode_context(Tape<S>& t, const ResidualEncoder<S>& enc,
                                         Var<S> image) {
    Var<S> both = enc(t, image);
    int half = enc.out_channels / 2;
    Var<S> h0 = t.tanh_(t.slice_c(both, 0, half));
    Var<S> ctx = t.relu(t.slice_c(both, half, enc.out_channels));
    return {ctx, h0};
}

// ---------------------------------------------------------------------------
// Global Motion Capture
// ---------------------------------------------------------------------------

// Linear-attention aggregation: a global context vector, pooled from the
// per-position context features with a learned query, gates the motion
// features; a learnable scalar alpha modulates the whole output.
template <class S>
struct Gmc {
    Conv2d<S> theta;   // context projection, 1x1, no bias
    Conv2d<S> phi_m;   // motion projection before gating, 1x1, no bias
    Conv2d<S> varphi;  // output transformation, 1x1, no bias
    Parameter<S>* w_a = nullptr;
    Parameter<S>* alpha = nullptr;
    int dim = 0;
    bool softmax_norm = true;
    bool project_motion = true;

    static Gmc create(ParamStore<S>& ps, Rng& rng, const std::string& name,
                      const ModelConfig& cfg) {
        Gmc g;
        g.dim = cfg.ctx_dim;
        g.softmax_norm = cfg.q_softmax;
        g.project_motion = cfg.gmc_project_motion;
        g.theta = Conv2d<S>::create(ps, rng, name + ".theta", g.dim, g.dim, 1, 1, false);
        g.theta.pad = 0;
        g.phi_m = Conv2d<S>::create(ps, rng, name + ".phi_m", g.dim, g.dim, 1, 1, false);
        g.phi_m.pad = 0;
        g.varphi = Conv2d<S>::create(ps, rng, name + ".varphi", g.dim, g.dim, 1, 1, false);
        g.varphi.pad = 0;
        g.w_a = &ps.create(name + ".w_a",
                           init_normal<S>(rng, Shape{g.dim}, 1.0 / std::sqrt(double(g.dim))));
        g.alpha = &ps.create(name + ".alpha", Tensor<S>({1}, S(1)));
        return g;
    }

    // context, motion: (D,H,W) with matching shapes.
    Var<S> operator()(Tape<S>& t, Var<S> context, Var<S> motion) const {
        check_same_shape(context.shape(), motion.shape(), "gmc");
        if (context.shape()[0] != dim) throw ShapeMismatch("gmc: channel dim mismatch");
        Var<S> C = theta(t, context);
        Var<S> M = project_motion ? phi_m(t, motion) : motion;
        Var<S> logits = t.scale(t.channel_dot(C, t.leaf(*w_a)), S(1.0 / std::sqrt(double(dim))));
        Var<S> q = softmax_norm ? t.softmax(logits) : t.normalize_sum(logits);
        Var<S> g = t.weighted_sum_positions(C, q);
        Var<S> gated = varphi(t, t.broadcast_mul_channel(M, g));
        return t.mul_scalar(t.add(C, gated), t.leaf(*alpha));
    }

    // The attention weights alone (for tests / diagnostics).
    Var<S> attention(Tape<S>& t, Var<S> context) const {
        Var<S> C = theta(t, context);
        Var<S> logits = t.scale(t.channel_dot(C, t.leaf(*w_a)), S(1.0 / std::sqrt(double(dim))));
        return softmax_norm ? t.softmax(logits) : t.normalize_sum(logits);
    }
};

// ---------------------------------------------------------------------------
// Convolutional GRU
// ---------------------------------------------------------------------------

template <class S>
struct ConvGru {
    Conv2d<S> wz, wr, wq;
    int hidden = 0;

    static ConvGru create(ParamStore<S>& ps, Rng& rng, const std::string& name, int hidden,
                          int input) {
        ConvGru g;
        g.hidden = hidden;
        g.wz = Conv2d<S>::create(ps, rng, name + ".wz", hidden + input, hidden, 3, 1);
        g.wr = Conv2d<S>::create(ps, rng, name + ".wr", hidden + input, hidden, 3, 1);
        g.wq = Conv2d<S>::create(ps, rng, name + ".wq", hidden + input, hidden, 3, 1);
        return g;
    }

    // h' = (1 - z) * h + z * tanh(candidate)
    Var<S> operator()(Tape<S>& t, Var<S> h, Var<S> x) const {
        if (h.shape()[1] != x.shape()[1] || h.shape()[2] != x.shape()[2])
            throw ShapeMismatch("gru: state/input grids differ");
        Var<S> hx = t.concat_c({h, x});
        Var<S> z = t.sigmoid(wz(t, hx));
        Var<S> r = t.sigmoid(wr(t, hx));
        Var<S> q = t.tanh_(wq(t, t.concat_c({t.mul(r, h), x})));
        Var<S> keep = t.sub(h, t.mul(z, h));
        return t.add(keep, t.mul(z, q));
    }
};

// ---------------------------------------------------------------------------
// Motion encoder and prediction heads
// ---------------------------------------------------------------------------

// Compresses raw correlation lookups plus the current flow into D-channel
// local motion features (the last two channels carry the flow itself).
template <class S>
struct MotionEncoder {
    Conv2d<S> corr1, corr2, flow1, flow2, merge;
    int out = 0;

    static MotionEncoder create(ParamStore<S>& ps, Rng& rng, const std::string& name,
                                int corr_channels, int dim) {
        MotionEncoder m;
        m.out = dim;
        int half = std::max(4, dim / 2);
        m.corr1 = Conv2d<S>::create(ps, rng, name + ".corr1", corr_channels, dim, 1, 1);
        m.corr1.pad = 0;
        m.corr2 = Conv2d<S>::create(ps, rng, name + ".corr2", dim, dim, 3, 1);
        m.flow1 = Conv2d<S>::create(ps, rng, name + ".flow1", 2, half, 3, 1);
        m.flow2 = Conv2d<S>::create(ps, rng, name + ".flow2", half, half, 3, 1);
        m.merge = Conv2d<S>::create(ps, rng, name + ".merge", dim + half, dim - 2, 3, 1);
        return m;
    }

    Var<S> operator()(Tape<S>& t, Var<S> corr, Var<S> flow) const {
        Var<S> c = t.relu(corr2(t, t.relu(corr1(t, corr))));
        Var<S> f = t.relu(flow2(t, t.relu(flow1(t, flow))));
        Var<S> merged = t.relu(merge(t, t.concat_c({c, f})));
        return t.concat_c({merged, flow});
    }
};

// Two 3x3 convolutions decoding the GRU state into a flow correction.
template <class S>
struct FlowHead {
    Conv2d<S> c1, c2;

    static FlowHead create(ParamStore<S>& ps, Rng& rng, const std::string& name, int hidden) {
        FlowHead f;
        f.c1 = Conv2d<S>::create(ps, rng, name + ".c1", hidden, hidden, 3, 1);
        f.c2 = Conv2d<S>::create(ps, rng, name + ".c2", hidden, 2, 3, 1, true, true);
        return f;
    }

    Var<S> operator()(Tape<S>& t, Var<S> h) const { return c2(t, t.relu(c1(t, h))); }
};

// Two stride-2 convolutions over [f_inter, context], global average pooling,
// then a two-layer perceptron to the 6-vector (omega, tau). The final layer
// starts at zero so early iterations leave the pose untouched.
template <class S>
struct PoseHead {
    Conv2d<S> c1, c2;
    Linear<S> fc1, fc2;

    static PoseHead create(ParamStore<S>& ps, Rng& rng, const std::string& name, int ctx_dim) {
        PoseHead p;
        int c = std::max(16, ctx_dim);
        p.c1 = Conv2d<S>::create(ps, rng, name + ".c1", 2 + ctx_dim, c, 3, 2);
        p.c2 = Conv2d<S>::create(ps, rng, name + ".c2", c, 2 * c, 3, 2);
        p.fc1 = Linear<S>::create(ps, rng, name + ".fc1", 2 * c, 2 * c);
        p.fc2 = Linear<S>::create(ps, rng, name + ".fc2", 2 * c, 6, true);
        return p;
    }

    // Raw 6-vector; the pose chain applies the norm clamp to omega.
    Var<S> operator()(Tape<S>& t, Var<S> f_inter, Var<S> context) const {
        Var<S> x = t.concat_c({f_inter, context});
        x = t.relu(c1(t, x));
        x = t.relu(c2(t, x));
        Var<S> pooled = t.global_avg_pool(x);
        return fc2(t, t.relu(fc1(t, pooled)));
    }
};

}  // namespace gmflow
