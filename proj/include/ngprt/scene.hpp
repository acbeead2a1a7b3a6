#pragma once

#include "ngprt/image.hpp"
#include "ngprt/occupancy.hpp"

#include <json.hpp>

namespace ngprt {

// Axis-aligned homogeneous box: constant density, diffuse color, and a view
// tint that scales with dir.z. A handful of boxes form the desk-scale ground
// truth generator standing in for captured scenes.
struct SynthBox {
    Vec3d lo, hi;
    double sigma = 0;
    Vec3f diffuse{};
    Vec3f view_tint{};
};

struct SynthScene {
    std::vector<SynthBox> boxes;

    void validate() const {
        for (const auto& b : boxes) {
            if (!(b.sigma >= 0)) throw std::invalid_argument("SynthScene: sigma must be >= 0");
            for (int a = 0; a < 3; ++a) {
                if (!(b.lo[a] < b.hi[a]))
                    throw std::invalid_argument("SynthScene: degenerate box");
                if (b.lo[a] < Roi::lo || b.hi[a] > Roi::hi)
                    throw std::invalid_argument("SynthScene: box outside ROI");
            }
        }
    }
};

inline bool ray_box(const Vec3d& o, const Vec3d& d, const Vec3d& lo, const Vec3d& hi,
                    double& t0, double& t1) {
    t0 = -std::numeric_limits<double>::max();
    t1 = std::numeric_limits<double>::max();
    for (int a = 0; a < 3; ++a) {
        if (d[a] == 0) {
            if (o[a] < lo[a] || o[a] > hi[a]) return false;
            continue;
        }
        double ta = (lo[a] - o[a]) / d[a];
        double tb = (hi[a] - o[a]) / d[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    return t0 < t1;
}

// Exact rendering of the piecewise-constant medium: between box boundaries
// the density is constant, so per-segment transmittance is e^(-sigma*len) in
// closed form. In overlaps, densities add and emission is density-weighted.
// The final color is clamp01(C_d + Tint * dir.z).
inline Vec3f oracle_render(const SynthScene& scene, const Vec3d& origin, const Vec3d& dir) {
    std::vector<double> cuts;
    std::vector<std::pair<double, double>> spans(scene.boxes.size(), {0, 0});
    for (size_t b = 0; b < scene.boxes.size(); ++b) {
        double t0, t1;
        if (ray_box(origin, dir, scene.boxes[b].lo, scene.boxes[b].hi, t0, t1) && t1 > 0) {
            t0 = std::max(t0, 0.0);
            spans[b] = {t0, t1};
            cuts.push_back(t0);
            cuts.push_back(t1);
        } else {
            spans[b] = {1, 0}; // empty
        }
    }
    Vec3d c_acc{}, tint_acc{};
    if (!cuts.empty()) {
        std::sort(cuts.begin(), cuts.end());
        double trans = 1.0;
        for (size_t s = 0; s + 1 < cuts.size(); ++s) {
            double a = cuts[s], b = cuts[s + 1];
            if (!(b > a)) continue;
            double mid = 0.5 * (a + b);
            double sigma = 0;
            Vec3d c{}, tint{};
            for (size_t k = 0; k < scene.boxes.size(); ++k) {
                if (mid < spans[k].first || mid > spans[k].second) continue;
                const auto& box = scene.boxes[k];
                sigma += box.sigma;
                for (int ch = 0; ch < 3; ++ch) {
                    c[ch] += box.sigma * double(box.diffuse[ch]);
                    tint[ch] += box.sigma * double(box.view_tint[ch]);
                }
            }
            if (sigma <= 0) continue;
            double w = trans * (1.0 - std::exp(-sigma * (b - a)));
            for (int ch = 0; ch < 3; ++ch) {
                c_acc[ch] += w * c[ch] / sigma;
                tint_acc[ch] += w * tint[ch] / sigma;
            }
            trans *= std::exp(-sigma * (b - a));
        }
    }
    Vec3f out;
    for (int ch = 0; ch < 3; ++ch)
        out[ch] = float(clamp(c_acc[ch] + tint_acc[ch] * dir.z, 0.0, 1.0));
    return out;
}

// Independent numeric route: fixed-step midpoint quadrature of the same
// integral. Converges to the closed form as n grows; used as the oracle's
// own cross-check.
inline Vec3f oracle_render_quadrature(const SynthScene& scene, const Vec3d& origin,
                                      const Vec3d& dir, int n) {
    if (n < 1024) throw std::invalid_argument("oracle_render_quadrature: n must be >= 1024");
    double t0 = std::numeric_limits<double>::max(), t1 = -std::numeric_limits<double>::max();
    for (const auto& box : scene.boxes) {
        double a, b;
        if (ray_box(origin, dir, box.lo, box.hi, a, b) && b > 0) {
            t0 = std::min(t0, std::max(a, 0.0));
            t1 = std::max(t1, b);
        }
    }
    Vec3d c_acc{}, tint_acc{};
    if (t1 > t0) {
        double dt = (t1 - t0) / n;
        double trans = 1.0;
        for (int i = 0; i < n; ++i) {
            double mid = t0 + (i + 0.5) * dt;
            Vec3d p = origin + dir * mid;
            double sigma = 0;
            Vec3d c{}, tint{};
            for (const auto& box : scene.boxes) {
                bool inside = true;
                for (int a = 0; a < 3; ++a)
                    inside = inside && p[a] >= box.lo[a] && p[a] <= box.hi[a];
                if (!inside) continue;
                sigma += box.sigma;
                for (int ch = 0; ch < 3; ++ch) {
                    c[ch] += box.sigma * double(box.diffuse[ch]);
                    tint[ch] += box.sigma * double(box.view_tint[ch]);
                }
            }
            if (sigma <= 0) continue;
            double w = trans * (1.0 - std::exp(-sigma * dt));
            for (int ch = 0; ch < 3; ++ch) {
                c_acc[ch] += w * c[ch] / sigma;
                tint_acc[ch] += w * tint[ch] / sigma;
            }
            trans *= std::exp(-sigma * dt);
        }
    }
    Vec3f out;
    for (int ch = 0; ch < 3; ++ch)
        out[ch] = float(clamp(c_acc[ch] + tint_acc[ch] * dir.z, 0.0, 1.0));
    return out;
}

// Density and pre-activation deferred feature of the synthetic medium at a
// point; procedural feature source for marcher benchmarks (no training).
inline double scene_density(const SynthScene& scene, const Vec3d& p) {
    double sigma = 0;
    for (const auto& box : scene.boxes) {
        bool inside = true;
        for (int a = 0; a < 3; ++a) inside = inside && p[a] >= box.lo[a] && p[a] <= box.hi[a];
        if (inside) sigma += box.sigma;
    }
    return sigma;
}

// Occupancy of the boxes at a given grid resolution (voxel overlaps any box).
inline BitGrid scene_occupancy(const SynthScene& scene, int res) {
    BitGrid g(res);
    double vsz = Roi::extent / res;
    for (const auto& box : scene.boxes) {
        if (box.sigma <= 0) continue;
        int lo[3], hi[3];
        for (int a = 0; a < 3; ++a) {
            lo[a] = clamp(int(std::floor((box.lo[a] - Roi::lo) / vsz)), 0, res - 1);
            hi[a] = clamp(int(std::floor((box.hi[a] - Roi::lo) / vsz - 1e-12)), 0, res - 1);
        }
        for (int z = lo[2]; z <= hi[2]; ++z)
            for (int y = lo[1]; y <= hi[1]; ++y)
                for (int x = lo[0]; x <= hi[0]; ++x) g.set(x, y, z);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Posed datasets: pinhole cameras, row-major 4x4 camera-to-world matrices.
// Camera convention: x right, y down, z forward (pixel (u,v) maps to camera
// direction ((u-cx)/fx, (v-cy)/fy, 1)).
// ---------------------------------------------------------------------------

struct Frame {
    std::string image_file;
    std::array<double, 16> c2w; // row-major
};

struct PosedDataset {
    int width = 0, height = 0;
    double fx = 0, fy = 0, cx = 0, cy = 0;
    std::vector<Frame> frames;
    std::vector<Image> images; // parallel to frames when loaded
};

inline Vec3d c2w_rotate(const std::array<double, 16>& m, const Vec3d& v) {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[4] * v.x + m[5] * v.y + m[6] * v.z,
            m[8] * v.x + m[9] * v.y + m[10] * v.z};
}
inline Vec3d c2w_origin(const std::array<double, 16>& m) { return {m[3], m[7], m[11]}; }

// Pinhole ray through continuous pixel coordinates (u, v). The parametric
// range is clipped to the ROI; returns false if the ray misses it.
template <class T>
bool generate_rays(const PosedDataset& ds, size_t frame, double u, double v, Ray<T>& out) {
    if (frame >= ds.frames.size()) throw std::out_of_range("generate_rays: bad frame index");
    if (u < 0 || v < 0 || u > ds.width || v > ds.height)
        throw std::out_of_range("generate_rays: pixel out of bounds");
    const auto& m = ds.frames[frame].c2w;
    Vec3d dc{(u - ds.cx) / ds.fx, (v - ds.cy) / ds.fy, 1.0};
    Vec3d dw = c2w_rotate(m, dc).normalized();
    Vec3d o = c2w_origin(m);
    Ray<double> r{Vec3d{o.x, o.y, o.z}, dw, 0.0, 1e9};
    double t0, t1;
    if (!clip_to_roi(r, t0, t1)) return false;
    out.origin = o.cast<T>();
    out.dir = dw.cast<T>();
    out.t_near = T(std::max(t0, 0.0));
    out.t_far = T(t1);
    return out.t_near < out.t_far;
}

// Projects a world point into pixel coordinates of a frame (round-trip tests).
inline bool project(const PosedDataset& ds, size_t frame, const Vec3d& p, double& u, double& v) {
    const auto& m = ds.frames[frame].c2w;
    Vec3d rel = p - c2w_origin(m);
    // rows of R^T are columns of R
    Vec3d cam{m[0] * rel.x + m[4] * rel.y + m[8] * rel.z,
              m[1] * rel.x + m[5] * rel.y + m[9] * rel.z,
              m[2] * rel.x + m[6] * rel.y + m[10] * rel.z};
    if (cam.z <= 0) return false;
    u = ds.fx * cam.x / cam.z + ds.cx;
    v = ds.fy * cam.y / cam.z + ds.cy;
    return true;
}

inline std::array<double, 16> look_at(const Vec3d& eye, const Vec3d& target, const Vec3d& up) {
    Vec3d z = (target - eye).normalized();
    Vec3d x{z.y * up.z - z.z * up.y, z.z * up.x - z.x * up.z, z.x * up.y - z.y * up.x};
    x = x.normalized();
    Vec3d y{z.y * x.z - z.z * x.y, z.z * x.x - z.x * x.z, z.x * x.y - z.y * x.x};
    return {x.x, y.x, z.x, eye.x, x.y, y.y, z.y, eye.y, x.z, y.z, z.z, eye.z, 0, 0, 0, 1};
}

// Deterministic view ring: golden-angle azimuths at a ladder of elevations,
// all looking at the origin from `radius`.
inline std::vector<std::array<double, 16>> sphere_views(int n, double radius) {
    std::vector<std::array<double, 16>> out;
    const double golden = 2.39996322972865332;
    for (int i = 0; i < n; ++i) {
        double zfrac = -0.35 + 1.05 * (i + 0.5) / n; // mostly above the horizon
        double phi = golden * i;
        double r = std::sqrt(std::max(0.0, 1.0 - zfrac * zfrac));
        Vec3d eye{radius * r * std::cos(phi), radius * r * std::sin(phi), radius * zfrac};
        out.push_back(look_at(eye, Vec3d{0, 0, 0}, Vec3d{0, 0, 1}));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset serialization: images as PPM next to a versioned, human-readable
// transforms.json holding intrinsics and per-frame row-major c2w matrices.
// ---------------------------------------------------------------------------

inline void save_dataset(const std::string& dir, const PosedDataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json j;
    j["schema_version"] = 1;
    j["width"] = ds.width;
    j["height"] = ds.height;
    j["fx"] = ds.fx;
    j["fy"] = ds.fy;
    j["cx"] = ds.cx;
    j["cy"] = ds.cy;
    auto frames = nlohmann::json::array();
    for (size_t i = 0; i < ds.frames.size(); ++i) {
        nlohmann::json fj;
        fj["image"] = ds.frames[i].image_file;
        fj["c2w"] = ds.frames[i].c2w;
        frames.push_back(fj);
        if (i < ds.images.size())
            write_ppm((fs::path(dir) / ds.frames[i].image_file).string(), ds.images[i]);
    }
    j["frames"] = frames;
    std::ofstream f(fs::path(dir) / "transforms.json");
    f << j.dump(2) << "\n";
    if (!f) throw std::runtime_error("save_dataset: cannot write transforms.json");
}

inline PosedDataset load_dataset(const std::string& dir, bool load_images = true) {
    namespace fs = std::filesystem;
    std::ifstream f(fs::path(dir) / "transforms.json");
    if (!f) throw std::runtime_error("load_dataset: missing transforms.json in " + dir);
    nlohmann::json j = nlohmann::json::parse(f);
    if (j.value("schema_version", 0) != 1)
        throw std::runtime_error("load_dataset: unsupported schema version");
    PosedDataset ds;
    ds.width = j.at("width");
    ds.height = j.at("height");
    ds.fx = j.at("fx");
    ds.fy = j.at("fy");
    ds.cx = j.at("cx");
    ds.cy = j.at("cy");
    for (const auto& fj : j.at("frames")) {
        Frame fr;
        fr.image_file = fj.at("image");
        auto arr = fj.at("c2w");
        if (arr.size() != 16) throw std::runtime_error("load_dataset: c2w must have 16 entries");
        for (int i = 0; i < 16; ++i) fr.c2w[i] = arr[i];
        ds.frames.push_back(fr);
        if (load_images)
            ds.images.push_back(read_ppm((fs::path(dir) / fr.image_file).string()));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Named scene presets.
// ---------------------------------------------------------------------------

inline SynthScene make_scene(const std::string& name, uint64_t seed = 41) {
    SynthScene s;
    if (name == "slab") {
        s.boxes.push_back({{-0.6, -0.6, -0.15}, {0.6, 0.6, 0.15}, 40.0,
                           {0.7f, 0.35f, 0.2f}, {0.05f, 0.05f, 0.1f}});
    } else if (name == "toy") {
        // floor + textured block wall + two tinted boxes; the checker texture
        // puts pressure on the fine hash levels.
        s.boxes.push_back({{-0.7, -0.7, -0.55}, {0.7, 0.7, -0.42}, 60.0,
                           {0.45f, 0.45f, 0.42f}, {0.0f, 0.0f, 0.06f}});
        Rng rng(seed);
        const int n = 6;
        const double x0 = -0.48, ywall = -0.05, cell = 0.16;
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < 3; ++k) {
                bool odd = (i + k) & 1;
                Vec3f col = odd ? Vec3f{0.85f, 0.25f, 0.2f} : Vec3f{0.15f, 0.5f, 0.8f};
                double jx = rng.uniform(-0.012, 0.012);
                double jz = rng.uniform(-0.012, 0.012);
                s.boxes.push_back({{x0 + i * cell + jx, ywall, -0.42 + k * cell + jz},
                                   {x0 + (i + 1) * cell + jx, ywall + 0.1,
                                    -0.42 + (k + 1) * cell + jz},
                                   55.0,
                                   col,
                                   {0.04f, 0.02f, 0.0f}});
            }
        s.boxes.push_back({{-0.45, -0.5, -0.42}, {-0.15, -0.2, -0.12}, 45.0,
                           {0.9f, 0.75f, 0.2f}, {0.1f, 0.1f, 0.05f}});
        s.boxes.push_back({{0.12, -0.52, -0.42}, {0.44, -0.24, -0.2}, 45.0,
                           {0.3f, 0.8f, 0.4f}, {0.0f, 0.08f, 0.12f}});
    } else if (name == "bench") {
        // scattered blocks targeting ~2% occupancy of the fine grid
        Rng rng(seed);
        for (int i = 0; i < 140; ++i) {
            Vec3d c{rng.uniform(-0.85, 0.85), rng.uniform(-0.85, 0.85),
                    rng.uniform(-0.85, 0.85)};
            Vec3d half{rng.uniform(0.02, 0.09), rng.uniform(0.02, 0.09),
                       rng.uniform(0.02, 0.09)};
            Vec3f col{float(rng.uniform(0.15, 0.9)), float(rng.uniform(0.15, 0.9)),
                      float(rng.uniform(0.15, 0.9))};
            SynthBox b{{c.x - half.x, c.y - half.y, c.z - half.z},
                       {c.x + half.x, c.y + half.y, c.z + half.z},
                       rng.uniform(20.0, 80.0),
                       col,
                       {0.02f, 0.02f, 0.02f}};
            for (int a = 0; a < 3; ++a) {
                b.lo[a] = std::max(b.lo[a], Roi::lo + 0.01);
                b.hi[a] = std::min(b.hi[a], Roi::hi - 0.01);
            }
            s.boxes.push_back(b);
        }
    } else {
        throw std::invalid_argument("make_scene: unknown scene " + name);
    }
    s.validate();
    return s;
}

// Renders the ground-truth dataset for a synthetic scene.
inline PosedDataset synth_dataset(const SynthScene& scene, int n_views, int width, int height) {
    PosedDataset ds;
    ds.width = width;
    ds.height = height;
    ds.fx = ds.fy = 1.1 * width;
    ds.cx = 0.5 * width;
    ds.cy = 0.5 * height;
    auto poses = sphere_views(n_views, 2.9);
    char buf[64];
    for (int i = 0; i < n_views; ++i) {
        std::snprintf(buf, sizeof buf, "frame_%04d.ppm", i);
        ds.frames.push_back({buf, poses[i]});
        Image img(width, height);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                Vec3d dc{(x + 0.5 - ds.cx) / ds.fx, (y + 0.5 - ds.cy) / ds.fy, 1.0};
                Vec3d dw = c2w_rotate(poses[i], dc).normalized();
                Vec3f c = oracle_render(scene, c2w_origin(poses[i]), dw);
                float* px = img.pixel(x, y);
                px[0] = c[0];
                px[1] = c[1];
                px[2] = c[2];
            }
        ds.images.push_back(std::move(img));
    }
    return ds;
}

} // namespace ngprt
