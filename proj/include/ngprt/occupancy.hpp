#pragma once

#include "ngprt/volume.hpp"

#include <bit>

namespace ngprt {

// Dense bit grid, one bit per voxel, packed into 64-bit words x-fastest
// (bit index = x + y*res + z*res^2). The packing doubles as the serialized
// layout of the baked format.
struct BitGrid {
    int res = 0;
    std::vector<uint64_t> words;

    BitGrid() = default;
    explicit BitGrid(int r) : res(r), words((size_t(r) * r * r + 63) / 64, 0) {}

    size_t index(int x, int y, int z) const {
        return size_t(x) + size_t(res) * (size_t(y) + size_t(res) * size_t(z));
    }
    bool get(int x, int y, int z) const {
        size_t i = index(x, y, z);
        return (words[i >> 6] >> (i & 63)) & 1;
    }
    void set(int x, int y, int z, bool v = true) {
        size_t i = index(x, y, z);
        if (v)
            words[i >> 6] |= uint64_t(1) << (i & 63);
        else
            words[i >> 6] &= ~(uint64_t(1) << (i & 63));
    }
    size_t count() const {
        size_t n = 0;
        for (uint64_t w : words) n += size_t(std::popcount(w));
        return n;
    }

    // OR-reduction by 2x per axis: a parent voxel is set iff any child is.
    BitGrid downsampled2() const {
        BitGrid out(res / 2);
        for (int z = 0; z < out.res; ++z)
            for (int y = 0; y < out.res; ++y)
                for (int x = 0; x < out.res; ++x) {
                    bool v = false;
                    for (int k = 0; k < 8 && !v; ++k)
                        v = get(2 * x + (k & 1), 2 * y + ((k >> 1) & 1), 2 * z + (k >> 2));
                    if (v) out.set(x, y, z);
                }
        return out;
    }

    // 3^3 window OR (one-voxel dilation).
    BitGrid dilated() const {
        BitGrid out(res);
        for (int z = 0; z < res; ++z)
            for (int y = 0; y < res; ++y)
                for (int x = 0; x < res; ++x) {
                    if (!get(x, y, z)) continue;
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                int nx = x + dx, ny = y + dy, nz = z + dz;
                                if (nx < 0 || ny < 0 || nz < 0 || nx >= res || ny >= res ||
                                    nz >= res)
                                    continue;
                                out.set(nx, ny, nz);
                            }
                }
        return out;
    }

    // Bit replication to factor x resolution.
    BitGrid upsampled(int factor) const {
        if (factor == 1) return *this;
        BitGrid out(res * factor);
        for (int z = 0; z < res; ++z)
            for (int y = 0; y < res; ++y)
                for (int x = 0; x < res; ++x) {
                    if (!get(x, y, z)) continue;
                    for (int dz = 0; dz < factor; ++dz)
                        for (int dy = 0; dy < factor; ++dy)
                            for (int dx = 0; dx < factor; ++dx)
                                out.set(x * factor + dx, y * factor + dy, z * factor + dz);
                }
        return out;
    }

    bool operator==(const BitGrid& o) const { return res == o.res && words == o.words; }
};

// Voxel index of a point at grid resolution `res`; points exactly on the high
// ROI face map into the last voxel.
template <class T>
inline std::array<int, 3> voxel_of(const Vec3<T>& x, int res) {
    std::array<int, 3> v;
    for (int a = 0; a < 3; ++a) {
        T u = to_grid_coord(x[a], res);
        v[a] = ngprt::clamp(int(std::floor(u)), 0, res - 1);
    }
    return v;
}

constexpr int kPyramidLevels = 5;

// Binary occupancy at resolutions base, base/2, ..., base/16 (512..32 in the
// production configuration). levels[0] is the finest.
struct OccupancyPyramid {
    std::array<BitGrid, kPyramidLevels> levels;

    int base_res() const { return levels[0].res; }
};

inline OccupancyPyramid build_pyramid(const BitGrid& fine_bits) {
    OccupancyPyramid p;
    p.levels[0] = fine_bits;
    for (int k = 1; k < kPyramidLevels; ++k) p.levels[k] = p.levels[k - 1].downsampled2();
    return p;
}

// Conservative skip distances: values[p] = min(255, max(0, D_cheb(p) - 1))
// where D_cheb is the Chebyshev distance in voxels to the nearest occupied
// voxel (0 on occupied voxels). An all-empty grid saturates at 255.
struct DistanceGrid {
    int resolution = 0;
    double voxel_size = 0;
    std::vector<uint8_t> values;

    uint8_t at(int x, int y, int z) const {
        return values[size_t(x) + size_t(resolution) * (size_t(y) + size_t(resolution) * z)];
    }
};

// Two-pass chamfer transform over the 26-neighborhood with unit weights,
// which is exact for the Chebyshev metric.
inline DistanceGrid build_distance_grid(const BitGrid& occ) {
    const int r = occ.res;
    DistanceGrid g;
    g.resolution = r;
    g.voxel_size = Roi::extent / r;
    const uint32_t inf = 0x3FFFFFFF;
    std::vector<uint32_t> d(size_t(r) * r * r);
    auto idx = [r](int x, int y, int z) {
        return size_t(x) + size_t(r) * (size_t(y) + size_t(r) * z);
    };
    for (int z = 0; z < r; ++z)
        for (int y = 0; y < r; ++y)
            for (int x = 0; x < r; ++x) d[idx(x, y, z)] = occ.get(x, y, z) ? 0 : inf;

    auto relax = [&](int x, int y, int z, int dx, int dy, int dz, uint32_t& best) {
        int nx = x + dx, ny = y + dy, nz = z + dz;
        if (nx < 0 || ny < 0 || nz < 0 || nx >= r || ny >= r || nz >= r) return;
        uint32_t c = d[idx(nx, ny, nz)] + 1;
        if (c < best) best = c;
    };
    // forward: preceding half of the 26-neighborhood in scan order
    for (int z = 0; z < r; ++z)
        for (int y = 0; y < r; ++y)
            for (int x = 0; x < r; ++x) {
                uint32_t& cur = d[idx(x, y, z)];
                if (cur == 0) continue;
                uint32_t best = cur;
                for (int dz = -1; dz <= 0; ++dz)
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            if (dz == 0 && (dy > 0 || (dy == 0 && dx >= 0))) continue;
                            relax(x, y, z, dx, dy, dz, best);
                        }
                cur = best;
            }
    // backward: the mirrored half
    for (int z = r - 1; z >= 0; --z)
        for (int y = r - 1; y >= 0; --y)
            for (int x = r - 1; x >= 0; --x) {
                uint32_t& cur = d[idx(x, y, z)];
                if (cur == 0) continue;
                uint32_t best = cur;
                for (int dz = 0; dz <= 1; ++dz)
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            if (dz == 0 && (dy < 0 || (dy == 0 && dx <= 0))) continue;
                            relax(x, y, z, dx, dy, dz, best);
                        }
                cur = best;
            }

    g.values.resize(d.size());
    for (size_t i = 0; i < d.size(); ++i) {
        uint32_t dist = d[i];
        uint32_t v = dist == 0 ? 0 : dist - 1;
        g.values[i] = uint8_t(std::min<uint32_t>(v, 255));
    }
    return g;
}

// Traversal statistics; the Table-4-style counters exported by the bench CLI.
struct MarchCounters {
    int64_t marching_points = 0;
    int64_t occupied_points = 0;
    int64_t occ_grid_accesses = 0;
    int64_t dist_grid_accesses = 0;

    MarchCounters& operator+=(const MarchCounters& o) {
        marching_points += o.marching_points;
        occupied_points += o.occupied_points;
        occ_grid_accesses += o.occ_grid_accesses;
        dist_grid_accesses += o.dist_grid_accesses;
        return *this;
    }
};

struct ProbeResult {
    bool occupied = false;
    int exit_level_res = 0; // resolution of the first level reporting empty
};

// Coarse-to-fine occupancy check; one grid access is counted per bit read.
template <class T>
ProbeResult occupancy_probe(const OccupancyPyramid& pyr, const Vec3<T>& x,
                            MarchCounters& counters) {
    for (int a = 0; a < 3; ++a)
        if (x[a] < T(Roi::lo) - T(1e-9) || x[a] > T(Roi::hi) + T(1e-9))
            throw std::domain_error("occupancy_probe: point outside ROI");
    for (int k = kPyramidLevels - 1; k >= 0; --k) {
        const BitGrid& g = pyr.levels[k];
        auto v = voxel_of(x, g.res);
        ++counters.occ_grid_accesses;
        if (!g.get(v[0], v[1], v[2])) return {false, g.res};
    }
    return {true, pyr.levels[0].res};
}

// Ray-parametric distance to leave the voxel (at resolution `res`) containing
// x(t), plus a small nudge past the face so the next probe lands in the
// neighbor voxel.
constexpr double kVoxelExitEps = 1e-6;

template <class T>
T voxel_exit_step(const Ray<T>& ray, T t, int res) {
    Vec3<T> x = ray.at(t);
    auto v = voxel_of(x, res);
    T t_exit = std::numeric_limits<T>::max();
    for (int a = 0; a < 3; ++a) {
        T d = ray.dir[a];
        if (d == T(0)) continue;
        T lo = T(Roi::lo) + T(Roi::extent) * T(v[a]) / T(res);
        T hi = lo + T(Roi::extent) / T(res);
        T bound = d > T(0) ? hi : lo;
        T tc = (bound - ray.origin[a]) / d;
        t_exit = std::min(t_exit, tc);
    }
    T s = t_exit - t;
    if (!(s > T(0))) s = T(0);
    return s + T(kVoxelExitEps);
}

// Step rule at an empty marching point. The distance grid is consulted only
// when the exiting occupancy level is coarser than the grid resolution; a
// positive stored distance then replaces the voxel-exit step (or, under the
// max_step_rule flag, takes the larger of the two).
template <class T>
T next_step(const ProbeResult& probe, const Ray<T>& ray, T t, const DistanceGrid* grid,
            bool max_step_rule, MarchCounters& counters) {
    T s_occ = voxel_exit_step(ray, t, probe.exit_level_res);
    if (grid && probe.exit_level_res < grid->resolution) {
        Vec3<T> x = ray.at(t);
        auto v = voxel_of(x, grid->resolution);
        ++counters.dist_grid_accesses;
        uint8_t gval = grid->at(v[0], v[1], v[2]);
        if (gval > 0) {
            T s_dist = T(grid->voxel_size) * T(gval);
            return max_step_rule ? std::max(s_dist, s_occ) : s_dist;
        }
    }
    return s_occ;
}

// Intersection of a ray with the ROI cube; returns false if it misses.
template <class T>
bool clip_to_roi(const Ray<T>& ray, T& t0, T& t1) {
    t0 = ray.t_near;
    t1 = ray.t_far;
    for (int a = 0; a < 3; ++a) {
        T d = ray.dir[a];
        T o = ray.origin[a];
        if (d == T(0)) {
            if (o < T(Roi::lo) || o > T(Roi::hi)) return false;
            continue;
        }
        T ta = (T(Roi::lo) - o) / d;
        T tb = (T(Roi::hi) - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    return t0 < t1;
}

// Pyramid marcher. Emits occupied probe points through `emit(t)`; emit may
// return false to request early termination (the compositor's transmittance
// signal). Empty-skip segments are optionally recorded for the safety oracle.
template <class T, class OnSample>
MarchCounters march(const Ray<T>& ray, const OccupancyPyramid& pyr, const DistanceGrid* grid,
                    T step, bool max_step_rule, OnSample&& emit,
                    std::vector<std::pair<T, T>>* skip_segments = nullptr) {
    MarchCounters counters;
    T t0, t1;
    if (!clip_to_roi(ray, t0, t1)) return counters;
    T t = t0;
    while (t < t1) {
        Vec3<T> x = ray.at(t);
        for (int a = 0; a < 3; ++a) x[a] = ngprt::clamp(x[a], T(Roi::lo), T(Roi::hi));
        ++counters.marching_points;
        ProbeResult p = occupancy_probe(pyr, x, counters);
        if (p.occupied) {
            ++counters.occupied_points;
            if (!emit(t)) break;
            t += step;
        } else {
            T s = next_step(p, ray, t, grid, max_step_rule, counters);
            if (skip_segments) skip_segments->emplace_back(t, t + s);
            t += s;
        }
    }
    return counters;
}

// Single-level marcher over the training occupancy grid: no pyramid, no
// distance grid.
template <class T, class OnSample>
MarchCounters march_train_grid(const Ray<T>& ray, const BitGrid& grid, T step, OnSample&& emit,
                               std::vector<std::pair<T, T>>* skip_segments = nullptr) {
    MarchCounters counters;
    T t0, t1;
    if (!clip_to_roi(ray, t0, t1)) return counters;
    T t = t0;
    while (t < t1) {
        Vec3<T> x = ray.at(t);
        for (int a = 0; a < 3; ++a) x[a] = ngprt::clamp(x[a], T(Roi::lo), T(Roi::hi));
        ++counters.marching_points;
        auto v = voxel_of(x, grid.res);
        ++counters.occ_grid_accesses;
        if (grid.get(v[0], v[1], v[2])) {
            ++counters.occupied_points;
            if (!emit(t)) break;
            t += step;
        } else {
            T s = voxel_exit_step(ray, t, grid.res);
            if (skip_segments) skip_segments->emplace_back(t, t + s);
            t += s;
        }
    }
    return counters;
}

// Exact amortized voxel walk (Amanatides-Woo) of the segment (t0, t1),
// reporting every occupied voxel intersected together with its parametric
// interval. Safety oracle for the skip rules: a correct marcher never skips
// across an occupied voxel.
struct DdaHit {
    std::array<int, 3> voxel;
    double t_entry;
    double t_exit;
};

template <class T>
std::vector<DdaHit> dda_oracle(const Ray<T>& ray, const BitGrid& occ, T t0, T t1) {
    std::vector<DdaHit> hits;
    if (!(t0 < t1)) return hits;
    Ray<T> clipped = ray;
    clipped.t_near = t0;
    clipped.t_far = t1;
    T c0, c1;
    if (!clip_to_roi(clipped, c0, c1)) return hits;

    const int r = occ.res;
    const double vsz = Roi::extent / r;
    Vec3<double> o = ray.origin.template cast<double>();
    Vec3<double> d = ray.dir.template cast<double>();
    Vec3<double> x0 = o + d * double(c0);
    std::array<int, 3> v = voxel_of(Vec3<T>(T(x0.x), T(x0.y), T(x0.z)), r);

    std::array<double, 3> t_max, t_delta;
    std::array<int, 3> dir_step;
    for (int a = 0; a < 3; ++a) {
        if (d[a] > 0) {
            dir_step[a] = 1;
            double bound = Roi::lo + vsz * (v[a] + 1);
            t_max[a] = (bound - o[a]) / d[a];
            t_delta[a] = vsz / d[a];
        } else if (d[a] < 0) {
            dir_step[a] = -1;
            double bound = Roi::lo + vsz * v[a];
            t_max[a] = (bound - o[a]) / d[a];
            t_delta[a] = -vsz / d[a];
        } else {
            dir_step[a] = 0;
            t_max[a] = std::numeric_limits<double>::max();
            t_delta[a] = std::numeric_limits<double>::max();
        }
    }
    double t_cur = double(c0);
    const double t_end = double(c1);
    while (true) {
        int axis = 0;
        if (t_max[1] < t_max[axis]) axis = 1;
        if (t_max[2] < t_max[axis]) axis = 2;
        double t_next = std::min(t_max[axis], t_end);
        if (occ.get(v[0], v[1], v[2])) hits.push_back({v, t_cur, t_next});
        if (t_max[axis] >= t_end) break;
        t_cur = t_max[axis];
        t_max[axis] += t_delta[axis];
        v[axis] += dir_step[axis];
        if (v[axis] < 0 || v[axis] >= r) break;
    }
    return hits;
}

} // namespace ngprt
