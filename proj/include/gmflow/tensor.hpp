#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gmflow/errors.hpp"

namespace gmflow {

// Dense shape, up to 4 dims. Feature maps are channels-first (C, H, W).
struct Shape {
    std::array<int, 4> d{1, 1, 1, 1};
    int nd = 0;

    Shape() = default;
    Shape(std::initializer_list<int> dims) {
        if (dims.size() > 4) throw ShapeMismatch("rank > 4");
        nd = int(dims.size());
        int i = 0;
        for (int v : dims) d[i++] = v;
    }

    int64_t size() const {
        int64_t n = 1;
        for (int i = 0; i < nd; ++i) n *= d[i];
        return nd == 0 ? 0 : n;
    }
    int operator[](int i) const { return d[i]; }
    bool operator==(const Shape& o) const { return nd == o.nd && d == o.d; }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << '(';
        for (int i = 0; i < nd; ++i) os << (i ? "," : "") << d[i];
        os << ')';
        return os.str();
    }
};

template <class S>
struct Tensor {
    Shape shape;
    std::vector<S> v;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(s), v(size_t(s.size()), S(0)) {}
    Tensor(Shape s, S fill) : shape(s), v(size_t(s.size()), fill) {}

    static Tensor zeros(Shape s) { return Tensor(s); }

    int64_t size() const { return int64_t(v.size()); }
    S* data() { return v.data(); }
    const S* data() const { return v.data(); }

    // (c, y, x) accessor for 3-D maps
    S& at(int c, int y, int x) {
        return v[size_t((c * shape.d[1] + y) * shape.d[2] + x)];
    }
    S at(int c, int y, int x) const {
        return v[size_t((c * shape.d[1] + y) * shape.d[2] + x)];
    }
    S& operator[](int64_t i) { return v[size_t(i)]; }
    S operator[](int64_t i) const { return v[size_t(i)]; }

    template <class T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = T(v[i]);
        return out;
    }
};

inline void check_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b) throw ShapeMismatch(std::string(what) + ": " + a.str() + " vs " + b.str());
}

}  // namespace gmflow
