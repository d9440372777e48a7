#include "gmflow/synthetic.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "gmflow/parallel.hpp"
#include "gmflow/sha256.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gmflow {

// ---------------------------------------------------------------------------
// procedural objects
// ---------------------------------------------------------------------------

const char* object_kind_name(ObjectKind kind) {
    switch (kind) {
        case ObjectKind::Box: return "box";
        case ObjectKind::Cylinder: return "cylinder";
        default: return "icosphere";
    }
}

ObjectKind object_kind_from_name(const std::string& name) {
    if (name == "box") return ObjectKind::Box;
    if (name == "cylinder") return ObjectKind::Cylinder;
    if (name == "icosphere") return ObjectKind::Icosphere;
    throw Error("unknown object kind: " + name);
}

namespace {

// Smooth seeded color field in [0.25, 1]; occluders must not be darker than
// the render floor, and black stays reserved for background.
struct ColorField {
    double a[3][4];
    explicit ColorField(Rng& rng) {
        for (auto& row : a)
            for (double& v : row) v = rng.uniform(-6.0, 6.0);
    }
    Vec3 operator()(const Vec3& p) const {
        Vec3 c;
        for (int ch = 0; ch < 3; ++ch) {
            double s = std::sin(a[ch][0] * p.x() + a[ch][1] * p.y() + a[ch][2] * p.z() + a[ch][3]);
            c(ch) = 0.25 + 0.75 * (0.5 + 0.5 * s);
        }
        return c;
    }
};

ObjectModel make_box(uint64_t seed) {
    ObjectModel m;
    Rng rng(seed);
    ColorField field(rng);
    const int k = 37;  // per-face lattice, borders included so corners exist
    for (int face = 0; face < 6; ++face) {
        int axis = face / 2;
        double sign = face % 2 == 0 ? 0.5 : -0.5;
        for (int i = 0; i < k; ++i) {
            for (int j = 0; j < k; ++j) {
                double u = -0.5 + double(i) / (k - 1);
                double v = -0.5 + double(j) / (k - 1);
                Vec3 p;
                p(axis) = sign;
                p((axis + 1) % 3) = u;
                p((axis + 2) % 3) = v;
                m.points.push_back(p);
                Vec3 c = field(p);
                c(face % 3) = std::min(1.0, c(face % 3) * 0.7 + 0.3);  // face tint
                m.colors.push_back(c);
            }
        }
    }
    m.symmetric = false;
    m.diameter = compute_diameter(m.points);
    return m;
}

ObjectModel make_cylinder(uint64_t seed) {
    ObjectModel m;
    Rng rng(seed);
    ColorField field(rng);
    const double radius = 0.35, half_h = 0.45;
    const int na = 96, nh = 41, nr = 13;
    // colors depend on height and radial distance only, so the appearance is
    // genuinely invariant under rotations about the axis
    auto band_color = [&](double z, double r) { return field(Vec3(r, 0.0, z)); };
    for (int hi = 0; hi < nh; ++hi) {
        double z = -half_h + double(hi) / (nh - 1) * 2 * half_h;
        for (int ai = 0; ai < na; ++ai) {
            double ang = 2 * M_PI * ai / na;
            m.points.emplace_back(radius * std::cos(ang), radius * std::sin(ang), z);
            m.colors.push_back(band_color(z, radius));
        }
    }
    for (int cap = 0; cap < 2; ++cap) {
        double z = cap == 0 ? half_h : -half_h;
        for (int ri = 0; ri < nr; ++ri) {
            double r = radius * double(ri) / (nr - 1);
            int n = std::max(1, int(std::lround(double(na) * ri / (nr - 1))));
            for (int ai = 0; ai < n; ++ai) {
                double ang = 2 * M_PI * ai / n;
                m.points.emplace_back(r * std::cos(ang), r * std::sin(ang), z);
                m.colors.push_back(band_color(z, r));
            }
        }
    }
    m.symmetric = true;
    m.diameter = compute_diameter(m.points);
    return m;
}

ObjectModel make_icosphere(uint64_t seed) {
    const double radius = 0.5;
    const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Vec3> verts = {{-1, phi, 0}, {1, phi, 0},   {-1, -phi, 0}, {1, -phi, 0},
                               {0, -1, phi}, {0, 1, phi},   {0, -1, -phi}, {0, 1, -phi},
                               {phi, 0, -1}, {phi, 0, 1},   {-phi, 0, -1}, {-phi, 0, 1}};
    for (auto& v : verts) v.normalize();
    std::vector<std::array<int, 3>> faces = {
        {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9},  {5, 11, 4},
        {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6},  {3, 6, 8},
        {3, 8, 9},   {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};

    for (int level = 0; level < 4; ++level) {
        std::map<std::pair<int, int>, int> midpoint;
        auto mid = [&](int a, int b) {
            auto key = std::minmax(a, b);
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            Vec3 v = (verts[size_t(a)] + verts[size_t(b)]).normalized();
            verts.push_back(v);
            int idx = int(verts.size()) - 1;
            midpoint[key] = idx;
            return idx;
        };
        std::vector<std::array<int, 3>> next;
        next.reserve(faces.size() * 4);
        for (auto& f : faces) {
            int ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
            next.push_back({f[0], ab, ca});
            next.push_back({f[1], bc, ab});
            next.push_back({f[2], ca, bc});
            next.push_back({ab, bc, ca});
        }
        faces = std::move(next);
    }

    ObjectModel m;
    Rng rng(seed);
    ColorField field(rng);
    for (const auto& v : verts) {
        m.points.push_back(v * radius);
        m.colors.push_back(field(v));
    }
    for (const auto& f : faces) {
        Vec3 c = (verts[size_t(f[0])] + verts[size_t(f[1])] + verts[size_t(f[2])]).normalized();
        m.points.push_back(c * radius);
        m.colors.push_back(field(c));
    }
    m.symmetric = false;
    m.diameter = compute_diameter(m.points);
    return m;
}

}  // namespace

ObjectModel make_object(ObjectKind kind, uint64_t seed) {
    switch (kind) {
        case ObjectKind::Box: return make_box(seed);
        case ObjectKind::Cylinder: return make_cylinder(seed);
        default: return make_icosphere(seed);
    }
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

CameraIntrinsics default_intrinsics(int resolution) {
    CameraIntrinsics K;
    K.fx = K.fy = 2.5 * resolution;
    K.cx = K.cy = resolution / 2.0;
    K.width = K.height = resolution;
    return K;
}

RenderResult render(const ObjectModel& model, const Pose& pose, const CameraIntrinsics& K) {
    PixelProjection proj = project_points(model, pose, K);
    bool any = false;
    for (uint8_t f : proj.in_frustum)
        if (f) {
            any = true;
            break;
        }
    if (!any) throw DegenerateProjection("render: no model point in frustum");

    std::vector<int32_t> winner = rasterize_winners(proj, K);
    const Vec3 light = Vec3(-0.3, -0.45, -0.84).normalized();

    RenderResult out;
    out.image = ImageU8(K.height, K.width, 3);
    out.mask.assign(size_t(K.height) * K.width, 0);
    for (int y = 0; y < K.height; ++y) {
        for (int x = 0; x < K.width; ++x) {
            size_t at = size_t(y) * K.width + x;
            int32_t i = winner[at];
            if (i < 0) continue;
            out.mask[at] = 1;
            Vec3 n = model.points[size_t(i)];
            double nn = n.norm();
            n = nn > 1e-12 ? Vec3(pose.R * (n / nn)) : Vec3(0, 0, -1);
            double shade = 0.3 + 0.7 * std::max(0.0, n.dot(light));
            const Vec3& c = model.colors[size_t(i)];
            for (int ch = 0; ch < 3; ++ch) {
                double v = std::clamp(c(ch) * shade, 0.0, 1.0);
                out.image.pix[at * 3 + ch] = uint8_t(std::lround(v * 255.0));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// corruption
// ---------------------------------------------------------------------------

SceneSample corrupt(const SceneSample& sample, double occlusion_ratio, bool truncation,
                    uint64_t seed) {
    if (occlusion_ratio >= 0.95) throw UnreachableRatio("occlusion ratio must be below 0.95");
    if (occlusion_ratio < 0.0) occlusion_ratio = 0.0;
    SceneSample out = sample;
    Rng rng(seed);
    const int W = out.image_target.w, H = out.image_target.h;

    std::vector<size_t> object_px;
    for (size_t i = 0; i < out.mask_target.size(); ++i)
        if (out.mask_target[i]) object_px.push_back(i);
    const int64_t O = int64_t(object_px.size());

    if (occlusion_ratio > 0.0 && O > 0) {
        std::vector<uint8_t> covered(size_t(H) * W, 0);
        int64_t covered_count = 0;
        const int64_t want = int64_t(std::lround(occlusion_ratio * double(O)));
        const int64_t tol = std::max<int64_t>(1, int64_t(0.015 * double(O)));

        auto count_new = [&](int x0, int y0, int x1, int y1) {
            int64_t n = 0;
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) {
                    size_t at = size_t(y) * W + x;
                    if (out.mask_target[at] && !covered[at]) ++n;
                }
            return n;
        };
        auto draw_rect = [&](int x0, int y0, int x1, int y1) {
            // 3x3 color blocks; the texture keeps occluders from being a
            // trivially detectable flat patch
            for (int by = y0; by < y1; by += 3) {
                for (int bx = x0; bx < x1; bx += 3) {
                    uint8_t rcol[3];
                    for (auto& c : rcol) c = uint8_t(std::lround(rng.uniform(0.12, 0.95) * 255));
                    for (int y = by; y < std::min(by + 3, y1); ++y)
                        for (int x = bx; x < std::min(bx + 3, x1); ++x) {
                            size_t at = size_t(y) * W + x;
                            for (int ch = 0; ch < 3; ++ch) out.image_target.pix[at * 3 + ch] = rcol[ch];
                            if (out.mask_target[at] && !covered[at]) {
                                covered[at] = 1;
                                ++covered_count;
                            }
                        }
                }
            }
        };

        int attempts = 0;
        while (covered_count < want - tol && attempts < 2000) {
            ++attempts;
            size_t center = object_px[size_t(rng.uniform_int(0, O - 1))];
            if (covered[center]) continue;
            int cx = int(center % size_t(W)), cy = int(center / size_t(W));
            int64_t remaining = want - covered_count;
            int side = std::clamp(int(std::lround(std::sqrt(double(remaining)) *
                                                  rng.uniform(0.8, 1.6))),
                                  3, std::max(3, W / 2));
            // shrink until the rectangle no longer overshoots the target
            while (side > 3) {
                int x0 = std::clamp(cx - side / 2, 0, W - 1), y0 = std::clamp(cy - side / 2, 0, H - 1);
                int x1 = std::min(W, x0 + side), y1 = std::min(H, y0 + side);
                if (covered_count + count_new(x0, y0, x1, y1) <= want + tol) break;
                side = side * 3 / 4;
            }
            int x0 = std::clamp(cx - side / 2, 0, W - 1), y0 = std::clamp(cy - side / 2, 0, H - 1);
            int x1 = std::min(W, x0 + side), y1 = std::min(H, y0 + side);
            if (covered_count + count_new(x0, y0, x1, y1) > want + tol) continue;
            draw_rect(x0, y0, x1, y1);
        }
        out.occlusion_ratio = double(covered_count) / double(O);
    } else {
        out.occlusion_ratio = 0.0;
    }

    if (truncation && O > 0) {
        double frac = rng.uniform(0.10, 0.40);
        int side_pick = int(rng.uniform_int(0, 3));  // 0=left,1=right,2=top,3=bottom
        const int64_t cut_target = int64_t(std::lround(frac * double(O)));
        auto erase_cols = [&](bool from_left) {
            std::vector<int64_t> per_col(size_t(W), 0);
            for (size_t i : object_px) ++per_col[i % size_t(W)];
            int64_t acc = 0;
            int cut = from_left ? 0 : W - 1;
            while (acc < cut_target && cut >= 0 && cut < W) {
                acc += per_col[size_t(cut)];
                cut += from_left ? 1 : -1;
            }
            int x_lo = from_left ? 0 : cut + 1;
            int x_hi = from_left ? cut : W;
            for (int y = 0; y < H; ++y)
                for (int x = x_lo; x < x_hi; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        out.image_target.pix[(size_t(y) * W + x) * 3 + ch] = 0;
        };
        auto erase_rows = [&](bool from_top) {
            std::vector<int64_t> per_row(size_t(H), 0);
            for (size_t i : object_px) ++per_row[i / size_t(W)];
            int64_t acc = 0;
            int cut = from_top ? 0 : H - 1;
            while (acc < cut_target && cut >= 0 && cut < H) {
                acc += per_row[size_t(cut)];
                cut += from_top ? 1 : -1;
            }
            int y_lo = from_top ? 0 : cut + 1;
            int y_hi = from_top ? cut : H;
            for (int y = y_lo; y < y_hi; ++y)
                for (int x = 0; x < W; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        out.image_target.pix[(size_t(y) * W + x) * 3 + ch] = 0;
        };
        switch (side_pick) {
            case 0: erase_cols(true); break;
            case 1: erase_cols(false); break;
            case 2: erase_rows(true); break;
            default: erase_rows(false); break;
        }
        out.truncated = true;
    }
    return out;
}

// ---------------------------------------------------------------------------
// pose noise
// ---------------------------------------------------------------------------

Pose perturb_pose(const Pose& pose_gt, const NoiseSpec& spec, uint64_t seed) {
    if (spec.rot_std_deg < 0 || spec.trans_std_frac < 0)
        throw Error("noise spec must be non-negative");
    Rng rng(seed);
    // rot_std_deg is the total angular std; per-axis draws get std/sqrt(3)
    const double s = spec.rot_std_deg * M_PI / 180.0 / std::sqrt(3.0);
    const double ex = rng.normal(0, s), ey = rng.normal(0, s), ez = rng.normal(0, s);
    Pose out;
    out.R = exp_so3(Vec3(ex, 0, 0)) * exp_so3(Vec3(0, ey, 0)) * exp_so3(Vec3(0, 0, ez)) * pose_gt.R;
    const double ts = spec.trans_std_frac * pose_gt.t.norm();
    out.t = pose_gt.t + Vec3(rng.normal(0, ts), rng.normal(0, ts), rng.normal(0, ts));
    return out;
}

// ---------------------------------------------------------------------------
// scene synthesis
// ---------------------------------------------------------------------------

namespace {

void paint_background(ImageU8& img, const std::vector<uint8_t>& keep_mask, Rng& rng) {
    // dim smooth gradient with per-pixel jitter, capped well below object
    // brightness
    double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0), base = rng.uniform(0.02, 0.05);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            size_t at = size_t(y) * img.w + x;
            if (keep_mask[at]) continue;
            double u = double(x) / img.w - 0.5, v = double(y) / img.h - 0.5;
            double g = base + 0.05 * (gx * u + gy * v + 1.0);
            for (int ch = 0; ch < 3; ++ch) {
                double val = std::clamp(g + rng.uniform(0.0, 0.02), 0.0, 0.12);
                img.pix[at * 3 + ch] = uint8_t(std::lround(val * 255));
            }
        }
    }
}

}  // namespace

SceneSample make_scene_sample(const ObjectModel& model, const std::string& model_id,
                              const DatasetConfig& cfg, uint64_t sample_seed) {
    Rng rng(sample_seed);
    CameraIntrinsics K = default_intrinsics(cfg.resolution);

    for (int attempt = 0; attempt < 64; ++attempt) {
        Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        if (q.norm() < 1e-9) continue;
        q.normalize();
        Pose gt;
        gt.R = q.toRotationMatrix();
        double dist = rng.uniform(3.0, 6.0) * model.diameter;
        double u = K.cx + rng.uniform(-0.06, 0.06) * K.width;
        double v = K.cy + rng.uniform(-0.06, 0.06) * K.height;
        gt.t = Vec3((u - K.cx) / K.fx * dist, (v - K.cy) / K.fy * dist, dist);

        Pose init = perturb_pose(gt, cfg.noise, rng.next_u64());

        RenderResult target_r, rendered_r;
        try {
            target_r = render(model, gt, K);
            rendered_r = render(model, init, K);
        } catch (const DegenerateProjection&) {
            continue;
        }
        int64_t target_px = 0, rendered_px = 0;
        for (uint8_t m : target_r.mask) target_px += m;
        for (uint8_t m : rendered_r.mask) rendered_px += m;
        if (target_px < 40 || rendered_px < 40) continue;

        SceneSample s;
        s.image_target = std::move(target_r.image);
        s.mask_target = std::move(target_r.mask);
        s.image_rendered = std::move(rendered_r.image);
        s.mask_rendered = std::move(rendered_r.mask);
        s.pose_gt = gt;
        s.pose_init = init;
        s.K = K;
        s.model_id = model_id;
        paint_background(s.image_target, s.mask_target, rng);

        double ratio = cfg.occlusion_max > 0.0 ? rng.uniform(cfg.occlusion_min, cfg.occlusion_max)
                                               : 0.0;
        bool trunc = rng.uniform() < cfg.truncation_prob;
        if (ratio > 0.0 || trunc) s = corrupt(s, ratio, trunc, rng.next_u64());
        return s;
    }
    throw DegenerateProjection("make_scene_sample: could not place the object after 64 attempts");
}

// ---------------------------------------------------------------------------
// dataset IO
// ---------------------------------------------------------------------------

Split split_of_index(int64_t index) {
    uint64_t h = Rng::splitmix(0x5351C0DEull ^ uint64_t(index)) % 10;
    if (h < 8) return Split::Train;
    return h == 8 ? Split::Val : Split::Test;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        default: return "test";
    }
}

namespace {

json pose_to_json(const Pose& p) {
    auto a = p.to_array();
    return json(std::vector<double>(a.begin(), a.end()));
}

Pose pose_from_json(const json& j) {
    std::array<double, 12> a{};
    for (int i = 0; i < 12; ++i) a[size_t(i)] = j.at(size_t(i));
    return Pose::from_array(a);
}

json intrinsics_to_json(const CameraIntrinsics& K) {
    return json{{"fx", K.fx},       {"fy", K.fy},         {"cx", K.cx},
                {"cy", K.cy},       {"width", K.width},   {"height", K.height}};
}

CameraIntrinsics intrinsics_from_json(const json& j) {
    CameraIntrinsics K;
    K.fx = j.at("fx");
    K.fy = j.at("fy");
    K.cx = j.at("cx");
    K.cy = j.at("cy");
    K.width = j.at("width");
    K.height = j.at("height");
    return K;
}

json config_to_json(const DatasetConfig& cfg) {
    std::vector<std::string> kinds;
    for (auto k : cfg.kinds) kinds.emplace_back(object_kind_name(k));
    return json{{"count", cfg.count},
                {"resolution", cfg.resolution},
                {"rot_std_deg", cfg.noise.rot_std_deg},
                {"trans_std_frac", cfg.noise.trans_std_frac},
                {"occlusion_min", cfg.occlusion_min},
                {"occlusion_max", cfg.occlusion_max},
                {"truncation_prob", cfg.truncation_prob},
                {"kinds", kinds},
                {"seed", cfg.seed}};
}

DatasetConfig config_from_json(const json& j) {
    DatasetConfig cfg;
    cfg.count = j.at("count");
    cfg.resolution = j.at("resolution");
    cfg.noise.rot_std_deg = j.at("rot_std_deg");
    cfg.noise.trans_std_frac = j.at("trans_std_frac");
    cfg.occlusion_min = j.at("occlusion_min");
    cfg.occlusion_max = j.at("occlusion_max");
    cfg.truncation_prob = j.at("truncation_prob");
    cfg.kinds.clear();
    for (const auto& k : j.at("kinds")) cfg.kinds.push_back(object_kind_from_name(k));
    cfg.seed = j.at("seed");
    return cfg;
}

std::string sample_dir_name(int64_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(i));
    return buf;
}

}  // namespace

std::string generate_dataset(const DatasetConfig& cfg, const std::string& out_dir) {
    if (cfg.count <= 0) throw Error("dataset: count must be positive");
    if (cfg.resolution % 8 != 0 || cfg.resolution < 32)
        throw Error("dataset: resolution must be a multiple of 8 and at least 32");
    if (cfg.occlusion_min < 0 || cfg.occlusion_max >= 0.95 || cfg.occlusion_min > cfg.occlusion_max)
        throw Error("dataset: occlusion range must satisfy 0 <= min <= max < 0.95");
    if (cfg.kinds.empty()) throw Error("dataset: needs at least one object kind");

    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "samples", ec);
    fs::create_directories(fs::path(out_dir) / "objects", ec);
    if (ec) throw IoError("cannot create dataset directories under " + out_dir);

    std::map<std::string, ObjectModel> models;
    for (size_t k = 0; k < cfg.kinds.size(); ++k) {
        std::string id = object_kind_name(cfg.kinds[k]);
        models.emplace(id, make_object(cfg.kinds[k], Rng::splitmix(cfg.seed ^ (0xB0B0 + k))));
        save_object(models.at(id), (fs::path(out_dir) / "objects" / (id + ".json")).string());
    }

    struct Row {
        std::string model_id;
        double occlusion = 0;
        bool truncated = false;
        std::string hash;
    };
    std::vector<Row> rows(size_t(cfg.count));

    parallel_for(cfg.count, worker_threads(), [&](int64_t i) {
        const std::string id = object_kind_name(cfg.kinds[size_t(i) % cfg.kinds.size()]);
        uint64_t sample_seed = Rng::splitmix(cfg.seed * 0x9e3779b97f4a7c15ull + uint64_t(i) + 1);
        SceneSample s = make_scene_sample(models.at(id), id, cfg, sample_seed);

        fs::path dir = fs::path(out_dir) / "samples" / sample_dir_name(i);
        fs::create_directories(dir);
        write_png((dir / "target.png").string(), s.image_target);
        write_png((dir / "rendered.png").string(), s.image_rendered);
        write_png((dir / "mask.png").string(),
                  mask_to_image(s.mask_rendered, s.image_rendered.h, s.image_rendered.w));

        json meta{{"P_gt", pose_to_json(s.pose_gt)},
                  {"P_init", pose_to_json(s.pose_init)},
                  {"K", intrinsics_to_json(s.K)},
                  {"occlusion_ratio", s.occlusion_ratio},
                  {"truncated", s.truncated},
                  {"model_id", s.model_id},
                  {"split", split_name(split_of_index(i))}};
        {
            std::ofstream f(dir / "meta.json");
            if (!f) throw IoError("cannot write sample meta under " + dir.string());
            f << meta.dump(2);
        }

        Sha256 h;
        for (const char* name : {"target.png", "rendered.png", "mask.png"})
            h.update(Sha256::of_file((dir / name).string()));
        h.update(meta.dump());
        rows[size_t(i)] = Row{s.model_id, s.occlusion_ratio, s.truncated, h.hex_digest()};
    });

    json samples = json::array();
    for (int64_t i = 0; i < cfg.count; ++i) {
        const Row& r = rows[size_t(i)];
        samples.push_back(json{{"id", sample_dir_name(i)},
                               {"model_id", r.model_id},
                               {"split", split_name(split_of_index(i))},
                               {"occlusion_ratio", r.occlusion},
                               {"truncated", r.truncated},
                               {"sha256", r.hash}});
    }
    json content{{"format", "gmflow-dataset-v1"},
                 {"config", config_to_json(cfg)},
                 {"samples", samples}};
    std::string content_hash = Sha256::of(content.dump());
    json manifest{{"content", content},
                  {"content_hash", content_hash},
                  {"created_unix_ms",
                   std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count()}};
    std::ofstream f(fs::path(out_dir) / "manifest.json");
    if (!f) throw IoError("cannot write manifest under " + out_dir);
    f << manifest.dump(2);
    return content_hash;
}

Dataset Dataset::load(const std::string& dir) {
    Dataset d;
    d.dir_ = dir;
    json manifest;
    {
        std::ifstream f(fs::path(dir) / "manifest.json");
        if (!f) throw IoError("cannot read manifest in " + dir);
        try {
            f >> manifest;
        } catch (const std::exception& e) {
            throw IoError(std::string("bad manifest: ") + e.what());
        }
    }
    const json& content = manifest.at("content");
    d.cfg_ = config_from_json(content.at("config"));
    d.content_hash_ = manifest.at("content_hash");

    for (const auto& kind : d.cfg_.kinds) {
        std::string id = object_kind_name(kind);
        d.models_.emplace(id, load_object((fs::path(dir) / "objects" / (id + ".json")).string()));
    }

    const auto& sample_rows = content.at("samples");
    d.samples_.resize(sample_rows.size());
    parallel_for(int64_t(sample_rows.size()), worker_threads(), [&](int64_t i) {
        const auto& row = sample_rows.at(size_t(i));
        fs::path sdir = fs::path(dir) / "samples" / row.at("id").get<std::string>();
        SceneSample s;
        s.image_target = read_png((sdir / "target.png").string());
        s.image_rendered = read_png((sdir / "rendered.png").string());
        ImageU8 mask = read_png((sdir / "mask.png").string());
        s.mask_rendered.resize(mask.pix.size());
        for (size_t k = 0; k < mask.pix.size(); ++k) s.mask_rendered[k] = mask.pix[k] ? 1 : 0;
        json meta;
        {
            std::ifstream f(sdir / "meta.json");
            if (!f) throw IoError("cannot read " + (sdir / "meta.json").string());
            f >> meta;
        }
        s.pose_gt = pose_from_json(meta.at("P_gt"));
        s.pose_init = pose_from_json(meta.at("P_init"));
        s.K = intrinsics_from_json(meta.at("K"));
        s.occlusion_ratio = meta.at("occlusion_ratio");
        s.truncated = meta.at("truncated");
        s.model_id = meta.at("model_id");
        d.samples_[size_t(i)] = std::move(s);
    });

    for (size_t i = 0; i < d.samples_.size(); ++i) {
        switch (split_of_index(int64_t(i))) {
            case Split::Train: d.train_.push_back(i); break;
            case Split::Val: d.val_.push_back(i); break;
            case Split::Test: d.test_.push_back(i); break;
        }
    }
    return d;
}

const std::vector<size_t>& Dataset::indices(Split s) const {
    switch (s) {
        case Split::Train: return train_;
        case Split::Val: return val_;
        default: return test_;
    }
}

}  // namespace gmflow
