#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmflow/geometry.hpp"
#include "gmflow/tensor.hpp"

namespace gmflow {

// Interleaved 8-bit image, row-major; channels is 1 (gray) or 3 (RGB).
struct ImageU8 {
    int w = 0, h = 0, channels = 0;
    std::vector<uint8_t> pix;

    ImageU8() = default;
    ImageU8(int h_, int w_, int c) : w(w_), h(h_), channels(c), pix(size_t(w_) * h_ * c, 0) {}

    uint8_t& at(int y, int x, int c) { return pix[(size_t(y) * w + x) * channels + c]; }
    uint8_t at(int y, int x, int c) const { return pix[(size_t(y) * w + x) * channels + c]; }
};

// Minimal PNG writer/reader (8-bit gray and RGB, non-interlaced, zlib
// streams). Covers exactly the files this project produces.
void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

// (3,H,W) float map in [0,1] <-> interleaved bytes.
template <class S>
ImageU8 tensor_to_image(const Tensor<S>& t) {
    if (t.shape.nd != 3 || t.shape[0] != 3) throw ShapeMismatch("tensor_to_image expects (3,H,W)");
    ImageU8 img(t.shape[1], t.shape[2], 3);
    const int64_t n = int64_t(t.shape[1]) * t.shape[2];
    for (int64_t i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) {
            double v = double(t[c * n + i]);
            v = v < 0 ? 0 : (v > 1 ? 1 : v);
            img.pix[size_t(i) * 3 + c] = uint8_t(std::lround(v * 255.0));
        }
    }
    return img;
}

template <class S>
Tensor<S> image_to_tensor(const ImageU8& img) {
    if (img.channels != 3) throw ShapeMismatch("image_to_tensor expects RGB");
    Tensor<S> t({3, img.h, img.w});
    const int64_t n = int64_t(img.h) * img.w;
    for (int64_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) t[c * n + i] = S(img.pix[size_t(i) * 3 + c] / 255.0);
    return t;
}

ImageU8 mask_to_image(const std::vector<uint8_t>& mask, int h, int w);

// Optical-flow color wheel: hue encodes direction, saturation magnitude
// (normalized per image); invalid pixels are black, zero motion is white.
ImageU8 flow_to_color(const FlowField& flow);

}  // namespace gmflow
