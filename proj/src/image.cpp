#include "gmflow/image.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "gmflow/errors.hpp"

namespace gmflow {

namespace {

void put_u32(std::string& s, uint32_t v) {
    s.push_back(char(v >> 24));
    s.push_back(char(v >> 16));
    s.push_back(char(v >> 8));
    s.push_back(char(v));
}

uint32_t get_u32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void write_chunk(std::string& out, const char type[4], const std::string& data) {
    put_u32(out, uint32_t(data.size()));
    size_t crc_start = out.size();
    out.append(type, 4);
    out.append(data);
    uint32_t crc = crc32(0, reinterpret_cast<const Bytef*>(out.data() + crc_start),
                         uInt(out.size() - crc_start));
    put_u32(out, crc);
}

}  // namespace

void write_png(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3) throw IoError("png: channels must be 1 or 3");
    if (img.w <= 0 || img.h <= 0) throw IoError("png: empty image");

    // filter 0 on every scanline
    const size_t stride = size_t(img.w) * img.channels;
    std::vector<uint8_t> raw(size_t(img.h) * (stride + 1));
    for (int y = 0; y < img.h; ++y) {
        raw[size_t(y) * (stride + 1)] = 0;
        std::memcpy(raw.data() + size_t(y) * (stride + 1) + 1, img.pix.data() + size_t(y) * stride,
                    stride);
    }
    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<uint8_t> packed(bound);
    if (compress2(packed.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK)
        throw IoError("png: deflate failed");
    packed.resize(bound);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    put_u32(ihdr, uint32_t(img.w));
    put_u32(ihdr, uint32_t(img.h));
    ihdr.push_back(8);                               // bit depth
    ihdr.push_back(img.channels == 3 ? char(2) : char(0));  // color type
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    write_chunk(out, "IHDR", ihdr);
    write_chunk(out, "IDAT", std::string(packed.begin(), packed.end()));
    write_chunk(out, "IEND", "");

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw IoError("short write: " + path);
}

ImageU8 read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 8 || std::memcmp(buf.data(), "\x89PNG\r\n\x1a\n", 8) != 0)
        throw IoError("not a png: " + path);

    ImageU8 img;
    std::vector<uint8_t> idat;
    size_t off = 8;
    int bit_depth = 0, color_type = 0;
    while (off + 8 <= buf.size()) {
        uint32_t len = get_u32(buf.data() + off);
        if (off + 12 + len > buf.size()) throw IoError("truncated png: " + path);
        const char* type = reinterpret_cast<const char*>(buf.data() + off + 4);
        const uint8_t* data = buf.data() + off + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            img.w = int(get_u32(data));
            img.h = int(get_u32(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            if (bit_depth != 8 || (color_type != 0 && color_type != 2) || data[12] != 0)
                throw IoError("unsupported png variant: " + path);
            img.channels = color_type == 2 ? 3 : 1;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        off += 12 + len;
    }
    if (img.w <= 0 || img.h <= 0 || idat.empty()) throw IoError("malformed png: " + path);

    const size_t stride = size_t(img.w) * img.channels;
    std::vector<uint8_t> raw(size_t(img.h) * (stride + 1));
    uLongf raw_len = uLongf(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw IoError("png inflate failed: " + path);

    img.pix.assign(size_t(img.h) * stride, 0);
    const int bpp = img.channels;
    for (int y = 0; y < img.h; ++y) {
        const uint8_t filter = raw[size_t(y) * (stride + 1)];
        const uint8_t* src = raw.data() + size_t(y) * (stride + 1) + 1;
        uint8_t* dst = img.pix.data() + size_t(y) * stride;
        const uint8_t* up = y > 0 ? img.pix.data() + size_t(y - 1) * stride : nullptr;
        for (size_t x = 0; x < stride; ++x) {
            int a = x >= size_t(bpp) ? dst[x - bpp] : 0;
            int b = up ? up[x] : 0;
            int c = (up && x >= size_t(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: {
                    int p = a + b - c;
                    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
                    v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
                default: throw IoError("png: unknown filter");
            }
            dst[x] = uint8_t(v);
        }
    }
    return img;
}

ImageU8 mask_to_image(const std::vector<uint8_t>& mask, int h, int w) {
    if (mask.size() != size_t(h) * w) throw ShapeMismatch("mask_to_image: size mismatch");
    ImageU8 img(h, w, 1);
    for (size_t i = 0; i < mask.size(); ++i) img.pix[i] = mask[i] ? 255 : 0;
    return img;
}

ImageU8 flow_to_color(const FlowField& flow) {
    ImageU8 img(flow.h, flow.w, 3);
    double max_mag = 1e-9;
    for (size_t i = 0; i < flow.valid.size(); ++i) {
        if (!flow.valid[i]) continue;
        max_mag = std::max(max_mag, std::hypot(flow.du[i], flow.dv[i]));
    }
    for (size_t i = 0; i < flow.valid.size(); ++i) {
        if (!flow.valid[i]) continue;
        double mag = std::hypot(flow.du[i], flow.dv[i]) / max_mag;
        double ang = std::atan2(flow.dv[i], flow.du[i]);  // [-pi, pi]
        double hue = (ang / (2 * M_PI) + 0.5) * 6.0;      // [0, 6)
        int sector = int(hue) % 6;
        double frac = hue - std::floor(hue);
        // HSV -> RGB with V=1, S=mag
        double p = 1.0 - mag;
        double q = 1.0 - mag * frac;
        double t = 1.0 - mag * (1.0 - frac);
        double r, g, b;
        switch (sector) {
            case 0: r = 1, g = t, b = p; break;
            case 1: r = q, g = 1, b = p; break;
            case 2: r = p, g = 1, b = t; break;
            case 3: r = p, g = q, b = 1; break;
            case 4: r = t, g = p, b = 1; break;
            default: r = 1, g = p, b = q; break;
        }
        img.pix[i * 3 + 0] = uint8_t(std::lround(r * 255));
        img.pix[i * 3 + 1] = uint8_t(std::lround(g * 255));
        img.pix[i * 3 + 2] = uint8_t(std::lround(b * 255));
    }
    return img;
}

}  // namespace gmflow
