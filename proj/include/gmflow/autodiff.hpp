#pragma once

// Reverse-mode automatic differentiation on a per-call tape.
// Graphs are built eagerly (define-by-run); creation order is the
// topological order used by backward(). A tape owns its intermediate
// values; parameters live outside in a ParamStore so one set of weights
// can serve many concurrent forward graphs.

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "gmflow/errors.hpp"
#include "gmflow/tensor.hpp"

namespace gmflow {

template <class S>
struct Parameter {
    std::string name;
    Tensor<S> value;
    Tensor<S> grad;
    bool trainable = true;
};

template <class S>
class ParamStore {
public:
    Parameter<S>& create(const std::string& name, Tensor<S> init) {
        if (index_.count(name)) throw Error("duplicate parameter: " + name);
        auto p = std::make_unique<Parameter<S>>();
        p->name = name;
        p->grad = Tensor<S>(init.shape);
        p->value = std::move(init);
        index_[name] = items_.size();
        items_.push_back(std::move(p));
        return *items_.back();
    }
    Parameter<S>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : items_[it->second].get();
    }
    size_t count() const { return items_.size(); }
    Parameter<S>& operator[](size_t i) { return *items_[i]; }
    const Parameter<S>& operator[](size_t i) const { return *items_[i]; }

    int64_t total_size() const {
        int64_t n = 0;
        for (auto& p : items_) n += p->value.size();
        return n;
    }
    void zero_grads() {
        for (auto& p : items_) std::fill(p->grad.v.begin(), p->grad.v.end(), S(0));
    }

private:
    std::vector<std::unique_ptr<Parameter<S>>> items_;
    std::unordered_map<std::string, size_t> index_;
};

template <class S>
class Tape;

template <class S>
struct Var {
    Tape<S>* tape = nullptr;
    int32_t id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
    const Shape& shape() const;
};

template <class S>
class Tape {
public:
    using Grad = Tensor<S>;
    using BackFn = std::function<void(Tape&, const Grad&)>;

    // A non-recording tape runs forward passes only; leaves are treated as
    // constants and no backward closures are kept.
    explicit Tape(bool record = true) : record_(record) {}

    // Var handles store the tape's address; pinning the object keeps them valid.
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = delete;
    Tape& operator=(Tape&&) = delete;

    // ---- node construction ------------------------------------------------

    Var<S> leaf(Parameter<S>& p) {
        auto it = leaf_cache_.find(&p);
        if (it != leaf_cache_.end()) return Var<S>{this, it->second};
        Var<S> v = push_raw(p.value, record_ && p.trainable, nullptr);
        nodes_[v.id].param = &p;
        leaf_cache_[&p] = v.id;
        return v;
    }

    Var<S> constant(Tensor<S> t) { return push_raw(std::move(t), false, nullptr); }

    // Generic node for custom ops defined in other headers. `back` receives
    // d(loss)/d(out) and must route it to parents via accum()/param grads.
    Var<S> push(Tensor<S> value, const std::vector<Var<S>>& parents, BackFn back) {
        bool need = false;
        for (const auto& p : parents) {
            check_owned(p);
            need = need || nodes_[p.id].need;
        }
        return push_raw(std::move(value), need, need ? std::move(back) : nullptr);
    }

    // ---- access -----------------------------------------------------------

    const Tensor<S>& val(Var<S> v) const {
        check_owned(v);
        return nodes_[v.id].val;
    }
    bool needs_grad(Var<S> v) const {
        check_owned(v);
        return nodes_[v.id].need;
    }
    // Gradient buffer of a node, allocated on first use.
    Tensor<S>& grad_buf(Var<S> v) {
        check_owned(v);
        Node& n = nodes_[v.id];
        if (!n.has_grad) {
            n.grad = Tensor<S>(n.val.shape);
            n.has_grad = true;
        }
        return n.grad;
    }
    // Adds t into v's gradient if v participates in differentiation.
    void accum(Var<S> v, const Tensor<S>& t) {
        Node& n = nodes_[v.id];
        if (!n.need) return;
        Tensor<S>& g = grad_buf(v);
        const S* src = t.data();
        S* dst = g.data();
        for (int64_t i = 0, e = g.size(); i < e; ++i) dst[i] += src[i];
    }

    size_t node_count() const { return nodes_.size(); }

    // ---- backward ---------------------------------------------------------

    // Reverse sweep from a scalar loss. When accumulate_params is true the
    // leaf gradients are added into Parameter::grad (single-threaded use);
    // otherwise collect them afterwards with leaf_grads().
    void backward(Var<S> loss, bool accumulate_params = true) {
        if (nodes_.empty()) throw GraphNotRecorded("backward() on an empty tape");
        if (!loss.valid() || loss.tape != this || loss.id >= int32_t(nodes_.size()))
            throw GraphNotRecorded("loss is not a node of this tape");
        if (nodes_[loss.id].val.size() != 1)
            throw ShapeMismatch("backward() expects a scalar loss, got " +
                                nodes_[loss.id].val.shape.str());
        grad_buf(loss).v[0] += S(1);
        for (int32_t id = loss.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.has_grad || !n.need) continue;
            if (n.back) n.back(*this, n.grad);
        }
        ran_backward_ = true;
        if (accumulate_params) {
            for (auto& [param, t] : leaf_grads()) {
                S* dst = param->grad.data();
                const S* src = t->data();
                for (int64_t i = 0, e = t->size(); i < e; ++i) dst[i] += src[i];
            }
        }
    }

    // (parameter, gradient) pairs in deterministic leaf-creation order.
    std::vector<std::pair<Parameter<S>*, const Tensor<S>*>> leaf_grads() {
        std::vector<std::pair<Parameter<S>*, const Tensor<S>*>> out;
        for (auto& n : nodes_) {
            if (n.param && n.need && n.has_grad) out.emplace_back(n.param, &n.grad);
        }
        return out;
    }

    // ---- elementwise & arithmetic ops --------------------------------------

    Var<S> add(Var<S> a, Var<S> b) {
        check_same_shape(shp(a), shp(b), "add");
        Tensor<S> out = nodes_[a.id].val;
        const S* pb = nodes_[b.id].val.data();
        for (int64_t i = 0; i < out.size(); ++i) out[i] += pb[i];
        return push(std::move(out), {a, b}, [a, b](Tape& t, const Grad& g) {
            t.accum(a, g);
            t.accum(b, g);
        });
    }

    Var<S> sub(Var<S> a, Var<S> b) {
        check_same_shape(shp(a), shp(b), "sub");
        Tensor<S> out = nodes_[a.id].val;
        const S* pb = nodes_[b.id].val.data();
        for (int64_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
        return push(std::move(out), {a, b}, [a, b](Tape& t, const Grad& g) {
            t.accum(a, g);
            if (t.needs_grad(b)) {
                Tensor<S> neg = g;
                for (auto& x : neg.v) x = -x;
                t.accum(b, neg);
            }
        });
    }

    Var<S> mul(Var<S> a, Var<S> b) {
        check_same_shape(shp(a), shp(b), "mul");
        Tensor<S> out = nodes_[a.id].val;
        const S* pb = nodes_[b.id].val.data();
        for (int64_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
        return push(std::move(out), {a, b}, [a, b](Tape& t, const Grad& g) {
            if (t.needs_grad(a)) {
                Tensor<S> da(g.shape);
                const S* pb2 = t.val(b).data();
                for (int64_t i = 0; i < da.size(); ++i) da[i] = g[i] * pb2[i];
                t.accum(a, da);
            }
            if (t.needs_grad(b)) {
                Tensor<S> db(g.shape);
                const S* pa = t.val(a).data();
                for (int64_t i = 0; i < db.size(); ++i) db[i] = g[i] * pa[i];
                t.accum(b, db);
            }
        });
    }

    Var<S> scale(Var<S> x, S c) {
        Tensor<S> out = nodes_[x.id].val;
        for (auto& v : out.v) v *= c;
        return push(std::move(out), {x}, [x, c](Tape& t, const Grad& g) {
            Tensor<S> dx(g.shape);
            for (int64_t i = 0; i < dx.size(); ++i) dx[i] = g[i] * c;
            t.accum(x, dx);
        });
    }

    // out = alpha * x with a learnable scalar alpha of shape (1)
    Var<S> mul_scalar(Var<S> x, Var<S> alpha) {
        if (shp(alpha).size() != 1) throw ShapeMismatch("mul_scalar: alpha must be scalar");
        S a = nodes_[alpha.id].val[0];
        Tensor<S> out = nodes_[x.id].val;
        for (auto& v : out.v) v *= a;
        return push(std::move(out), {x, alpha}, [x, alpha](Tape& t, const Grad& g) {
            S a2 = t.val(alpha)[0];
            if (t.needs_grad(x)) {
                Tensor<S> dx(g.shape);
                for (int64_t i = 0; i < dx.size(); ++i) dx[i] = g[i] * a2;
                t.accum(x, dx);
            }
            if (t.needs_grad(alpha)) {
                const S* px = t.val(x).data();
                S da = 0;
                for (int64_t i = 0; i < g.size(); ++i) da += g[i] * px[i];
                Tensor<S> d({1});
                d[0] = da;
                t.accum(alpha, d);
            }
        });
    }

    Var<S> relu(Var<S> x) {
        Tensor<S> out = nodes_[x.id].val;
        for (auto& v : out.v) v = v > S(0) ? v : S(0);
        Var<S> o = push_unary(std::move(out), x);
        set_back(o, [x, o](Tape& t, const Grad& g) {
            const S* y = t.val(o).data();
            Tensor<S> dx(g.shape);
            for (int64_t i = 0; i < dx.size(); ++i) dx[i] = y[i] > S(0) ? g[i] : S(0);
            t.accum(x, dx);
        });
        return o;
    }

    Var<S> tanh_(Var<S> x) {
        Tensor<S> out = nodes_[x.id].val;
        for (auto& v : out.v) v = std::tanh(v);
        Var<S> o = push_unary(std::move(out), x);
        set_back(o, [x, o](Tape& t, const Grad& g) {
            const S* y = t.val(o).data();
            Tensor<S> dx(g.shape);
            for (int64_t i = 0; i < dx.size(); ++i) dx[i] = g[i] * (S(1) - y[i] * y[i]);
            t.accum(x, dx);
        });
        return o;
    }

    Var<S> sigmoid(Var<S> x) {
        Tensor<S> out = nodes_[x.id].val;
        for (auto& v : out.v) v = S(1) / (S(1) + std::exp(-v));
        Var<S> o = push_unary(std::move(out), x);
        set_back(o, [x, o](Tape& t, const Grad& g) {
            const S* y = t.val(o).data();
            Tensor<S> dx(g.shape);
            for (int64_t i = 0; i < dx.size(); ++i) dx[i] = g[i] * y[i] * (S(1) - y[i]);
            t.accum(x, dx);
        });
        return o;
    }

    Var<S> square(Var<S> x) {
        Tensor<S> out = nodes_[x.id].val;
        for (auto& v : out.v) v = v * v;
        return push(std::move(out), {x}, [x](Tape& t, const Grad& g) {
            const S* px = t.val(x).data();
            Tensor<S> dx(g.shape);
            for (int64_t i = 0; i < dx.size(); ++i) dx[i] = S(2) * px[i] * g[i];
            t.accum(x, dx);
        });
    }

    Var<S> sum(Var<S> x) {
        S acc = 0;
        for (S v : nodes_[x.id].val.v) acc += v;
        Tensor<S> out({1});
        out[0] = acc;
        return push(std::move(out), {x}, [x](Tape& t, const Grad& g) {
            Tensor<S> dx(t.val(x).shape, g[0]);
            t.accum(x, dx);
        });
    }

    Var<S> mean(Var<S> x) {
        int64_t n = nodes_[x.id].val.size();
        S acc = 0;
        for (S v : nodes_[x.id].val.v) acc += v;
        Tensor<S> out({1});
        out[0] = acc / S(n);
        return push(std::move(out), {x}, [x, n](Tape& t, const Grad& g) {
            Tensor<S> dx(t.val(x).shape, g[0] / S(n));
            t.accum(x, dx);
        });
    }

    // loss = sum_j coeff_j * scalar_j
    Var<S> weighted_sum_scalars(const std::vector<Var<S>>& xs, const std::vector<S>& coeff) {
        if (xs.size() != coeff.size()) throw ShapeMismatch("weighted_sum_scalars");
        S acc = 0;
        for (size_t j = 0; j < xs.size(); ++j) acc += coeff[j] * nodes_[xs[j].id].val[0];
        Tensor<S> out({1});
        out[0] = acc;
        std::vector<Var<S>> parents = xs;
        std::vector<S> c = coeff;
        return push(std::move(out), parents, [parents, c](Tape& t, const Grad& g) {
            for (size_t j = 0; j < parents.size(); ++j) {
                Tensor<S> d({1});
                d[0] = g[0] * c[j];
                t.accum(parents[j], d);
            }
        });
    }

    // ---- structural ops -----------------------------------------------------

    Var<S> concat_c(const std::vector<Var<S>>& xs) {
        if (xs.empty()) throw ShapeMismatch("concat_c: empty");
        int H = shp(xs[0])[1], W = shp(xs[0])[2];
        int C = 0;
        for (auto& x : xs) {
            if (shp(x).nd != 3 || shp(x)[1] != H || shp(x)[2] != W)
                throw ShapeMismatch("concat_c: incompatible " + shp(x).str());
            C += shp(x)[0];
        }
        Tensor<S> out({C, H, W});
        int64_t off = 0;
        for (auto& x : xs) {
            const auto& v = nodes_[x.id].val;
            std::copy(v.v.begin(), v.v.end(), out.v.begin() + off);
            off += v.size();
        }
        std::vector<Var<S>> parents = xs;
        return push(std::move(out), parents, [parents](Tape& t, const Grad& g) {
            int64_t off2 = 0;
            for (auto& x : parents) {
                int64_t n = t.val(x).size();
                if (t.needs_grad(x)) {
                    Tensor<S> dx(t.val(x).shape);
                    std::copy(g.v.begin() + off2, g.v.begin() + off2 + n, dx.v.begin());
                    t.accum(x, dx);
                }
                off2 += n;
            }
        });
    }

    Var<S> slice_c(Var<S> x, int c0, int c1) {
        const Shape& s = shp(x);
        if (s.nd != 3 || c0 < 0 || c1 > s[0] || c0 >= c1)
            throw ShapeMismatch("slice_c: bad range for " + s.str());
        int H = s[1], W = s[2];
        Tensor<S> out({c1 - c0, H, W});
        const auto& v = nodes_[x.id].val;
        std::copy(v.v.begin() + int64_t(c0) * H * W, v.v.begin() + int64_t(c1) * H * W,
                  out.v.begin());
        return push(std::move(out), {x}, [x, c0, H, W](Tape& t, const Grad& g) {
            Tensor<S> dx(t.val(x).shape);
            std::copy(g.v.begin(), g.v.end(), dx.v.begin() + int64_t(c0) * H * W);
            t.accum(x, dx);
        });
    }

    Var<S> slice_flat(Var<S> x, int i0, int i1) {
        if (i0 < 0 || i1 > shp(x).size() || i0 >= i1) throw ShapeMismatch("slice_flat");
        Tensor<S> out({i1 - i0});
        const auto& v = nodes_[x.id].val;
        std::copy(v.v.begin() + i0, v.v.begin() + i1, out.v.begin());
        return push(std::move(out), {x}, [x, i0](Tape& t, const Grad& g) {
            Tensor<S> dx(t.val(x).shape);
            std::copy(g.v.begin(), g.v.end(), dx.v.begin() + i0);
            t.accum(x, dx);
        });
    }

    Var<S> reshape(Var<S> x, Shape s) {
        if (s.size() != shp(x).size()) throw ShapeMismatch("reshape: size mismatch");
        Tensor<S> out(s);
        out.v = nodes_[x.id].val.v;
        return push(std::move(out), {x}, [x](Tape& t, const Grad& g) {
            Tensor<S> dx(t.val(x).shape);
            dx.v = g.v;
            t.accum(x, dx);
        });
    }

    // ---- reductions over maps ------------------------------------------------

    // 2x2 average pooling, stride 2, floor semantics.
    Var<S> avg_pool2(Var<S> x) {
        const Shape& s = shp(x);
        if (s.nd != 3) throw ShapeMismatch("avg_pool2 expects (C,H,W)");
        int C = s[0], H = s[1], W = s[2], Ho = H / 2, Wo = W / 2;
        Tensor<S> out({C, Ho, Wo});
        const auto& v = nodes_[x.id].val;
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < Ho; ++y)
                for (int xo = 0; xo < Wo; ++xo)
                    out.at(c, y, xo) = S(0.25) * (v.at(c, 2 * y, 2 * xo) + v.at(c, 2 * y, 2 * xo + 1) +
                                                  v.at(c, 2 * y + 1, 2 * xo) +
                                                  v.at(c, 2 * y + 1, 2 * xo + 1));
        return push(std::move(out), {x}, [x, C, Ho, Wo](Tape& t, const Grad& g) {
            Tensor<S> dx(t.val(x).shape);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < Ho; ++y)
                    for (int xo = 0; xo < Wo; ++xo) {
                        S d = S(0.25) * g.at(c, y, xo);
                        dx.at(c, 2 * y, 2 * xo) += d;
                        dx.at(c, 2 * y, 2 * xo + 1) += d;
                        dx.at(c, 2 * y + 1, 2 * xo) += d;
                        dx.at(c, 2 * y + 1, 2 * xo + 1) += d;
                    }
            t.accum(x, dx);
        });
    }

    Var<S> global_avg_pool(Var<S> x) {
        const Shape& s = shp(x);
        if (s.nd != 3) throw ShapeMismatch("global_avg_pool expects (C,H,W)");
        int C = s[0];
        int64_t hw = int64_t(s[1]) * s[2];
        Tensor<S> out({C});
        const auto& v = nodes_[x.id].val;
        for (int c = 0; c < C; ++c) {
            S acc = 0;
            for (int64_t i = 0; i < hw; ++i) acc += v[c * hw + i];
            out[c] = acc / S(hw);
        }
        return push(std::move(out), {x}, [x, C, hw](Tape& t, const Grad& g) {
            Tensor<S> dx(t.val(x).shape);
            for (int c = 0; c < C; ++c) {
                S d = g[c] / S(hw);
                for (int64_t i = 0; i < hw; ++i) dx[c * hw + i] = d;
            }
            t.accum(x, dx);
        });
    }

    // ---- dense / attention helpers -------------------------------------------

    Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
        const Shape& sx = shp(x);
        const Shape& sw = shp(w);
        if (sx.nd != 1 || sw.nd != 2 || sw[1] != sx[0])
            throw ShapeMismatch("linear: " + sx.str() + " vs " + sw.str());
        int m = sw[0], n = sw[1];
        Tensor<S> out({m});
        const S* px = nodes_[x.id].val.data();
        const S* pw = nodes_[w.id].val.data();
        for (int i = 0; i < m; ++i) {
            S acc = 0;
            for (int j = 0; j < n; ++j) acc += pw[i * n + j] * px[j];
            out[i] = acc;
        }
        if (b.valid()) {
            const S* pb = nodes_[b.id].val.data();
            for (int i = 0; i < m; ++i) out[i] += pb[i];
        }
        std::vector<Var<S>> parents = {x, w};
        if (b.valid()) parents.push_back(b);
        return push(std::move(out), parents, [x, w, b, m, n](Tape& t, const Grad& g) {
            const S* px2 = t.val(x).data();
            const S* pw2 = t.val(w).data();
            if (t.needs_grad(x)) {
                Tensor<S> dx({n});
                for (int j = 0; j < n; ++j) {
                    S acc = 0;
                    for (int i = 0; i < m; ++i) acc += pw2[i * n + j] * g[i];
                    dx[j] = acc;
                }
                t.accum(x, dx);
            }
            if (t.needs_grad(w)) {
                Tensor<S> dw({m, n});
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) dw[i * n + j] = g[i] * px2[j];
                t.accum(w, dw);
            }
            if (b.valid() && t.needs_grad(b)) t.accum(b, g);
        });
    }

    // General small-matrix product (used for SO(3) composition).
    Var<S> matmul(Var<S> a, Var<S> b) {
        const Shape& sa = shp(a);
        const Shape& sb = shp(b);
        if (sa.nd != 2 || sb.nd != 2 || sa[1] != sb[0])
            throw ShapeMismatch("matmul: " + sa.str() + " vs " + sb.str());
        int r = sa[0], k = sa[1], c = sb[1];
        Tensor<S> out({r, c});
        const S* pa = nodes_[a.id].val.data();
        const S* pb = nodes_[b.id].val.data();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) {
                S acc = 0;
                for (int l = 0; l < k; ++l) acc += pa[i * k + l] * pb[l * c + j];
                out[i * c + j] = acc;
            }
        return push(std::move(out), {a, b}, [a, b, r, k, c](Tape& t, const Grad& g) {
            const S* pa2 = t.val(a).data();
            const S* pb2 = t.val(b).data();
            if (t.needs_grad(a)) {
                Tensor<S> da({r, k});
                for (int i = 0; i < r; ++i)
                    for (int l = 0; l < k; ++l) {
                        S acc = 0;
                        for (int j = 0; j < c; ++j) acc += g[i * c + j] * pb2[l * c + j];
                        da[i * k + l] = acc;
                    }
                t.accum(a, da);
            }
            if (t.needs_grad(b)) {
                Tensor<S> db({k, c});
                for (int l = 0; l < k; ++l)
                    for (int j = 0; j < c; ++j) {
                        S acc = 0;
                        for (int i = 0; i < r; ++i) acc += pa2[i * k + l] * g[i * c + j];
                        db[l * c + j] = acc;
                    }
                t.accum(b, db);
            }
        });
    }

    // Softmax over a flat vector.
    Var<S> softmax(Var<S> x) {
        const auto& v = nodes_[x.id].val;
        Tensor<S> out(v.shape);
        S mx = v[0];
        for (S u : v.v) mx = std::max(mx, u);
        S denom = 0;
        for (int64_t i = 0; i < v.size(); ++i) {
            out[i] = std::exp(v[i] - mx);
            denom += out[i];
        }
        for (auto& u : out.v) u /= denom;
        Var<S> o = push_unary(std::move(out), x);
        set_back(o, [x, o](Tape& t, const Grad& g) {
            const S* y = t.val(o).data();
            S dot = 0;
            for (int64_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
            Tensor<S> dx(g.shape);
            for (int64_t i = 0; i < g.size(); ++i) dx[i] = y[i] * (g[i] - dot);
            t.accum(x, dx);
        });
        return o;
    }

    // Normalize a vector by the sum of its entries (ablation alternative to
    // softmax; caller must keep the sum away from zero).
    Var<S> normalize_sum(Var<S> x) {
        const auto& v = nodes_[x.id].val;
        S total = 0;
        for (S u : v.v) total += u;
        Tensor<S> out(v.shape);
        for (int64_t i = 0; i < v.size(); ++i) out[i] = v[i] / total;
        return push(std::move(out), {x}, [x, total](Tape& t, const Grad& g) {
            const S* px = t.val(x).data();
            S dot = 0;
            for (int64_t i = 0; i < g.size(); ++i) dot += g[i] * px[i];
            Tensor<S> dx(g.shape);
            for (int64_t i = 0; i < g.size(); ++i)
                dx[i] = g[i] / total - dot / (total * total);
            t.accum(x, dx);
        });
    }

    // y_i = sum_d x[d,i] * w[d]  for maps (D,H,W) -> flat (H*W)
    Var<S> channel_dot(Var<S> x, Var<S> w) {
        const Shape& s = shp(x);
        if (s.nd != 3 || shp(w).nd != 1 || shp(w)[0] != s[0])
            throw ShapeMismatch("channel_dot: " + s.str() + " vs " + shp(w).str());
        int D = s[0];
        int64_t N = int64_t(s[1]) * s[2];
        Tensor<S> out({int(N)});
        const S* px = nodes_[x.id].val.data();
        const S* pw = nodes_[w.id].val.data();
        for (int64_t i = 0; i < N; ++i) {
            S acc = 0;
            for (int d = 0; d < D; ++d) acc += px[d * N + i] * pw[d];
            out[i] = acc;
        }
        return push(std::move(out), {x, w}, [x, w, D, N](Tape& t, const Grad& g) {
            const S* px2 = t.val(x).data();
            const S* pw2 = t.val(w).data();
            if (t.needs_grad(x)) {
                Tensor<S> dx(t.val(x).shape);
                for (int d = 0; d < D; ++d)
                    for (int64_t i = 0; i < N; ++i) dx[d * N + i] = pw2[d] * g[i];
                t.accum(x, dx);
            }
            if (t.needs_grad(w)) {
                Tensor<S> dw({D});
                for (int d = 0; d < D; ++d) {
                    S acc = 0;
                    for (int64_t i = 0; i < N; ++i) acc += px2[d * N + i] * g[i];
                    dw[d] = acc;
                }
                t.accum(w, dw);
            }
        });
    }

    // g_d = sum_i q_i * x[d,i]  for maps (D,H,W), q flat (H*W) -> (D)
    Var<S> weighted_sum_positions(Var<S> x, Var<S> q) {
        const Shape& s = shp(x);
        int64_t N = int64_t(s[1]) * s[2];
        if (s.nd != 3 || shp(q).size() != N)
            throw ShapeMismatch("weighted_sum_positions: " + s.str() + " vs " + shp(q).str());
        int D = s[0];
        Tensor<S> out({D});
        const S* px = nodes_[x.id].val.data();
        const S* pq = nodes_[q.id].val.data();
        for (int d = 0; d < D; ++d) {
            S acc = 0;
            for (int64_t i = 0; i < N; ++i) acc += px[d * N + i] * pq[i];
            out[d] = acc;
        }
        return push(std::move(out), {x, q}, [x, q, D, N](Tape& t, const Grad& g) {
            const S* px2 = t.val(x).data();
            const S* pq2 = t.val(q).data();
            if (t.needs_grad(x)) {
                Tensor<S> dx(t.val(x).shape);
                for (int d = 0; d < D; ++d)
                    for (int64_t i = 0; i < N; ++i) dx[d * N + i] = pq2[i] * g[d];
                t.accum(x, dx);
            }
            if (t.needs_grad(q)) {
                Tensor<S> dq(t.val(q).shape);
                for (int64_t i = 0; i < N; ++i) {
                    S acc = 0;
                    for (int d = 0; d < D; ++d) acc += px2[d * N + i] * g[d];
                    dq[i] = acc;
                }
                t.accum(q, dq);
            }
        });
    }

    // y[d,i] = x[d,i] * v[d]
    Var<S> broadcast_mul_channel(Var<S> x, Var<S> vch) {
        const Shape& s = shp(x);
        if (s.nd != 3 || shp(vch).nd != 1 || shp(vch)[0] != s[0])
            throw ShapeMismatch("broadcast_mul_channel");
        int D = s[0];
        int64_t N = int64_t(s[1]) * s[2];
        Tensor<S> out = nodes_[x.id].val;
        const S* pv = nodes_[vch.id].val.data();
        for (int d = 0; d < D; ++d)
            for (int64_t i = 0; i < N; ++i) out[d * N + i] *= pv[d];
        return push(std::move(out), {x, vch}, [x, vch, D, N](Tape& t, const Grad& g) {
            const S* pv2 = t.val(vch).data();
            const S* px2 = t.val(x).data();
            if (t.needs_grad(x)) {
                Tensor<S> dx(t.val(x).shape);
                for (int d = 0; d < D; ++d)
                    for (int64_t i = 0; i < N; ++i) dx[d * N + i] = g[d * N + i] * pv2[d];
                t.accum(x, dx);
            }
            if (t.needs_grad(vch)) {
                Tensor<S> dv({D});
                for (int d = 0; d < D; ++d) {
                    S acc = 0;
                    for (int64_t i = 0; i < N; ++i) acc += g[d * N + i] * px2[d * N + i];
                    dv[d] = acc;
                }
                t.accum(vch, dv);
            }
        });
    }

    // ---- convolution / normalization ----------------------------------------

    Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, int stride, int pad) {
        const Shape& sx = shp(x);
        const Shape& sw = shp(w);
        if (sx.nd != 3 || sw.nd != 4 || sw[1] != sx[0])
            throw ShapeMismatch("conv2d: input " + sx.str() + " weight " + sw.str());
        const int Ci = sx[0], H = sx[1], W = sx[2];
        const int Co = sw[0], kh = sw[2], kw = sw[3];
        const int Ho = (H + 2 * pad - kh) / stride + 1;
        const int Wo = (W + 2 * pad - kw) / stride + 1;
        if (Ho <= 0 || Wo <= 0) throw ShapeMismatch("conv2d: empty output");
        const int K = Ci * kh * kw;
        const int64_t M = int64_t(Ho) * Wo;

        const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && pad == 0);
        std::shared_ptr<Tensor<S>> col;
        const S* colp = nullptr;
        if (pointwise) {
            colp = nodes_[x.id].val.data();
        } else {
            col = std::make_shared<Tensor<S>>(Shape{K, int(M)});
            im2col(nodes_[x.id].val, kh, kw, stride, pad, Ho, Wo, col->data());
            colp = col->data();
        }

        Tensor<S> out({Co, Ho, Wo});
        gemm_rm(nodes_[w.id].val.data(), colp, out.data(), Co, K, M);
        if (b.valid()) {
            const S* pb = nodes_[b.id].val.data();
            for (int co = 0; co < Co; ++co)
                for (int64_t i = 0; i < M; ++i) out[co * M + i] += pb[co];
        }

        std::vector<Var<S>> parents = {x, w};
        if (b.valid()) parents.push_back(b);
        auto backfn = [x, w, b, col, stride, pad, Ci, H, W, Co, kh, kw, Ho, Wo, K,
                       M](Tape& t, const Grad& g) {
            const bool pw1 = (kh == 1 && kw == 1 && stride == 1 && pad == 0);
            const S* colp2 = pw1 ? t.val(x).data() : col->data();
            if (t.needs_grad(w)) {
                Tensor<S> dw({Co, Ci, kh, kw});
                // dW (Co x K) = G (Co x M) * col^T (M x K)
                gemm_rm_bt(g.data(), colp2, dw.data(), Co, M, K);
                t.accum(w, dw);
            }
            if (b.valid() && t.needs_grad(b)) {
                Tensor<S> db({Co});
                for (int co = 0; co < Co; ++co) {
                    S acc = 0;
                    for (int64_t i = 0; i < M; ++i) acc += g[co * M + i];
                    db[co] = acc;
                }
                t.accum(b, db);
            }
            if (t.needs_grad(x)) {
                // dcol (K x M) = W^T (K x Co) * G (Co x M)
                Tensor<S> dcol({K, int(M)});
                gemm_rm_at(t.val(w).data(), g.data(), dcol.data(), K, Co, M);
                if (pw1) {
                    t.accum(x, dcol);
                } else {
                    Tensor<S> dx({Ci, H, W});
                    col2im(dcol.data(), kh, kw, stride, pad, Ho, Wo, dx);
                    t.accum(x, dx);
                }
            }
        };
        return push(std::move(out), parents, backfn);
    }

    // Group normalization over (C,H,W); per-group statistics across
    // channels and positions, affine per channel.
    Var<S> group_norm(Var<S> x, Var<S> gamma, Var<S> beta, int groups, S eps = S(1e-5)) {
        const Shape& s = shp(x);
        if (s.nd != 3) throw ShapeMismatch("group_norm expects (C,H,W)");
        const int C = s[0];
        if (C % groups != 0) throw ShapeMismatch("group_norm: channels not divisible by groups");
        if (shp(gamma)[0] != C || shp(beta)[0] != C) throw ShapeMismatch("group_norm affine");
        const int64_t hw = int64_t(s[1]) * s[2];
        const int cg = C / groups;
        const int64_t m = cg * hw;

        auto stats = std::make_shared<Tensor<S>>(Shape{2, groups, 1});
        const auto& v = nodes_[x.id].val;
        Tensor<S> out(s);
        const S* pg = nodes_[gamma.id].val.data();
        const S* pb = nodes_[beta.id].val.data();
        for (int gi = 0; gi < groups; ++gi) {
            const S* base = v.data() + int64_t(gi) * m;
            S mu = 0;
            for (int64_t i = 0; i < m; ++i) mu += base[i];
            mu /= S(m);
            S var = 0;
            for (int64_t i = 0; i < m; ++i) {
                S d = base[i] - mu;
                var += d * d;
            }
            var /= S(m);
            S inv = S(1) / std::sqrt(var + eps);
            stats->v[gi] = mu;
            stats->v[groups + gi] = inv;
            for (int c = 0; c < cg; ++c) {
                int ch = gi * cg + c;
                const S* src = v.data() + int64_t(ch) * hw;
                S* dst = out.data() + int64_t(ch) * hw;
                S gsc = pg[ch], bsc = pb[ch];
                for (int64_t i = 0; i < hw; ++i) dst[i] = gsc * ((src[i] - mu) * inv) + bsc;
            }
        }
        return push(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, stats, groups, cg, hw, m](Tape& t, const Grad& g) {
                        const auto& xv = t.val(x);
                        const S* pg2 = t.val(gamma).data();
                        Tensor<S> dgamma({groups * cg}), dbeta({groups * cg});
                        bool needx = t.needs_grad(x);
                        Tensor<S> dx;
                        if (needx) dx = Tensor<S>(xv.shape);
                        for (int gi = 0; gi < groups; ++gi) {
                            S mu = stats->v[gi];
                            S inv = stats->v[groups + gi];
                            for (int c = 0; c < cg; ++c) {
                                int ch = gi * cg + c;
                                const S* xr = xv.data() + int64_t(ch) * hw;
                                const S* gr = g.data() + int64_t(ch) * hw;
                                S sg = 0, sgx = 0;
                                for (int64_t i = 0; i < hw; ++i) {
                                    S xhat = (xr[i] - mu) * inv;
                                    sg += gr[i];
                                    sgx += gr[i] * xhat;
                                }
                                dbeta[ch] = sg;
                                dgamma[ch] = sgx;
                            }
                            if (needx) {
                                S sdy = 0, sdyx = 0;
                                for (int c = 0; c < cg; ++c) {
                                    int ch = gi * cg + c;
                                    const S* xr = xv.data() + int64_t(ch) * hw;
                                    const S* gr = g.data() + int64_t(ch) * hw;
                                    S gsc = pg2[ch];
                                    for (int64_t i = 0; i < hw; ++i) {
                                        S xhat = (xr[i] - mu) * inv;
                                        S dyh = gr[i] * gsc;
                                        sdy += dyh;
                                        sdyx += dyh * xhat;
                                    }
                                }
                                sdy /= S(m);
                                sdyx /= S(m);
                                for (int c = 0; c < cg; ++c) {
                                    int ch = gi * cg + c;
                                    const S* xr = xv.data() + int64_t(ch) * hw;
                                    const S* gr = g.data() + int64_t(ch) * hw;
                                    S* dr = dx.data() + int64_t(ch) * hw;
                                    S gsc = pg2[ch];
                                    for (int64_t i = 0; i < hw; ++i) {
                                        S xhat = (xr[i] - mu) * inv;
                                        S dyh = gr[i] * gsc;
                                        dr[i] = (dyh - sdy - xhat * sdyx) * inv;
                                    }
                                }
                            }
                        }
                        if (t.needs_grad(gamma)) t.accum(gamma, dgamma);
                        if (t.needs_grad(beta)) t.accum(beta, dbeta);
                        if (needx) t.accum(x, dx);
                    });
    }

private:
    struct Node {
        Tensor<S> val;
        Tensor<S> grad;
        BackFn back;
        Parameter<S>* param = nullptr;
        bool need = false;
        bool has_grad = false;
    };

    const Shape& shp(Var<S> v) const { return nodes_[v.id].val.shape; }

    void check_owned(Var<S> v) const {
        if (!v.valid() || v.tape != this || v.id >= int32_t(nodes_.size()))
            throw GraphNotRecorded("variable does not belong to this tape");
    }

    Var<S> push_raw(Tensor<S> value, bool need, BackFn back) {
#ifndef NDEBUG
        for (S u : value.v) {
            if (!std::isfinite(double(u))) throw Error("non-finite value recorded on tape");
        }
#endif
        Node n;
        n.val = std::move(value);
        n.need = need;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var<S>{this, int32_t(nodes_.size() - 1)};
    }

    // push with parents but defer setting back (for closures capturing the out var)
    Var<S> push_unary(Tensor<S> value, Var<S> x) {
        check_owned(x);
        return push_raw(std::move(value), nodes_[x.id].need, nullptr);
    }
    void set_back(Var<S> o, BackFn fn) {
        if (nodes_[o.id].need) nodes_[o.id].back = std::move(fn);
    }

    // ---- dense kernels (Eigen) ----
    // C (r x c, row-major) = A (r x k, row-major) * B (k x c, row-major)
    static void gemm_rm(const S* a, const S* b, S* c, int64_t r, int64_t k, int64_t cc) {
        using M = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<const M> A(a, r, k), B(b, k, cc);
        Eigen::Map<M> C(c, r, cc);
        C.noalias() = A * B;
    }
    // C (r x c) = A (r x m) * B^T where B is (c x m) row-major
    static void gemm_rm_bt(const S* a, const S* b, S* c, int64_t r, int64_t m, int64_t cc) {
        using M = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<const M> A(a, r, m), B(b, cc, m);
        Eigen::Map<M> C(c, r, cc);
        C.noalias() = A * B.transpose();
    }
    // C (r x c) = A^T * B where A is (m x r) row-major, B is (m x c) row-major
    static void gemm_rm_at(const S* a, const S* b, S* c, int64_t r, int64_t m, int64_t cc) {
        using M = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<const M> A(a, m, r), B(b, m, cc);
        Eigen::Map<M> C(c, r, cc);
        C.noalias() = A.transpose() * B;
    }

    static void im2col(const Tensor<S>& x, int kh, int kw, int stride, int pad, int Ho, int Wo,
                       S* col) {
        const int Ci = x.shape[0], H = x.shape[1], W = x.shape[2];
        const int64_t M = int64_t(Ho) * Wo;
        int64_t k = 0;
        for (int ci = 0; ci < Ci; ++ci) {
            const S* plane = x.data() + int64_t(ci) * H * W;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx, ++k) {
                    S* row = col + k * M;
                    for (int oy = 0; oy < Ho; ++oy) {
                        int iy = oy * stride - pad + ky;
                        S* dst = row + int64_t(oy) * Wo;
                        if (iy < 0 || iy >= H) {
                            std::fill(dst, dst + Wo, S(0));
                            continue;
                        }
                        const S* srow = plane + int64_t(iy) * W;
                        for (int ox = 0; ox < Wo; ++ox) {
                            int ix = ox * stride - pad + kx;
                            dst[ox] = (ix >= 0 && ix < W) ? srow[ix] : S(0);
                        }
                    }
                }
            }
        }
    }

    static void col2im(const S* dcol, int kh, int kw, int stride, int pad, int Ho, int Wo,
                       Tensor<S>& dx) {
        const int Ci = dx.shape[0], H = dx.shape[1], W = dx.shape[2];
        const int64_t M = int64_t(Ho) * Wo;
        int64_t k = 0;
        for (int ci = 0; ci < Ci; ++ci) {
            S* plane = dx.data() + int64_t(ci) * H * W;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx, ++k) {
                    const S* row = dcol + k * M;
                    for (int oy = 0; oy < Ho; ++oy) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        S* drow = plane + int64_t(iy) * W;
                        const S* srow = row + int64_t(oy) * Wo;
                        for (int ox = 0; ox < Wo; ++ox) {
                            int ix = ox * stride - pad + kx;
                            if (ix >= 0 && ix < W) drow[ix] += srow[ox];
                        }
                    }
                }
            }
        }
    }

    std::vector<Node> nodes_;
    std::unordered_map<Parameter<S>*, int32_t> leaf_cache_;
    bool record_ = true;
    bool ran_backward_ = false;
};

template <class S>
const Shape& Var<S>::shape() const {
    return tape->val(*this).shape;
}

}  // namespace gmflow
