#pragma once

#include "ngprt/nn.hpp"

namespace ngprt {

// Spatial hash primes, Instant-NGP convention; frozen into the file formats.
constexpr uint64_t kHashPrimeX = 1ull;
constexpr uint64_t kHashPrimeY = 2654435761ull;
constexpr uint64_t kHashPrimeZ = 805459861ull;

enum class Addressing : uint8_t { Direct = 0, Hashed = 1 };

// Trilinear interpolation stencil: the 8 enclosing corners of a point and
// their weights (products of fractional offsets; nonnegative, sum to 1).
template <class T>
struct InterpStencil {
    std::array<std::array<int32_t, 3>, 8> corners;
    std::array<T, 8> weights;
};

// Maps x in [-1,1] to continuous grid coordinates [0, resolution].
template <class T>
inline T to_grid_coord(T x, int resolution) {
    return (x - T(Roi::lo)) * (T(resolution) / T(Roi::extent));
}

template <class T>
inline T corner_to_world(int32_t c, int resolution) {
    return T(Roi::lo) + T(Roi::extent) * (T(c) / T(resolution));
}

template <class T>
InterpStencil<T> stencil(const Vec3<T>& x, int resolution) {
    if (!Roi::contains(x)) throw std::domain_error("stencil: point outside [-1,1]^3");
    int32_t base[3];
    T frac[3];
    for (int a = 0; a < 3; ++a) {
        T u = to_grid_coord(x[a], resolution);
        // half-open voxels [i, i+1); the high face belongs to the last voxel
        int32_t i = std::min(int32_t(std::floor(u)), int32_t(resolution - 1));
        i = std::max(i, int32_t(0));
        base[a] = i;
        frac[a] = u - T(i);
    }
    InterpStencil<T> s;
    for (int k = 0; k < 8; ++k) {
        int dx = k & 1, dy = (k >> 1) & 1, dz = (k >> 2) & 1;
        s.corners[k] = {base[0] + dx, base[1] + dy, base[2] + dz};
        T wx = dx ? frac[0] : T(1) - frac[0];
        T wy = dy ? frac[1] : T(1) - frac[1];
        T wz = dz ? frac[2] : T(1) - frac[2];
        s.weights[k] = wx * wy * wz;
    }
    return s;
}

// One resolution tier of a multiresolution encoding. Corner features live in
// a fixed-length table; levels whose full corner grid fits use collision-free
// direct (row-major, x-fastest) addressing, the rest spatial hashing.
template <class T>
struct HashLevel {
    int resolution = 0;
    size_t table_len = 0;
    int feature_dim = 0;
    Addressing addressing = Addressing::Direct;
    ParamGroup<T> entries; // table_len x feature_dim, row-major

    void init(const std::string& name, int res, size_t max_table_len, int fdim) {
        resolution = res;
        feature_dim = fdim;
        size_t corners = size_t(res + 1) * (res + 1) * (res + 1);
        if (corners <= max_table_len) {
            addressing = Addressing::Direct;
            table_len = corners;
        } else {
            addressing = Addressing::Hashed;
            table_len = max_table_len;
        }
        entries.init(name, table_len * fdim, /*dense=*/false);
    }

    size_t hash_index(const std::array<int32_t, 3>& c) const {
        for (int a = 0; a < 3; ++a)
            if (c[a] < 0 || c[a] > resolution)
                throw std::out_of_range("hash_index: corner coordinate out of range");
        if (addressing == Addressing::Direct) {
            size_t r1 = size_t(resolution) + 1;
            return size_t(c[0]) + r1 * (size_t(c[1]) + r1 * size_t(c[2]));
        }
        uint64_t h = uint64_t(c[0]) * kHashPrimeX ^ uint64_t(c[1]) * kHashPrimeY ^
                     uint64_t(c[2]) * kHashPrimeZ;
        return size_t(h % uint64_t(table_len));
    }

    // out[0..feature_dim) += not used; plain write of the interpolated feature.
    void interp(const InterpStencil<T>& s, T* out) const {
        for (int f = 0; f < feature_dim; ++f) out[f] = T(0);
        for (int k = 0; k < 8; ++k) {
            const T* row = entries.value.data() + hash_index(s.corners[k]) * feature_dim;
            T w = s.weights[k];
            for (int f = 0; f < feature_dim; ++f) out[f] += w * row[f];
        }
    }

    void interp_at(const Vec3<T>& x, T* out) const { interp(stencil(x, resolution), out); }

    // Scatters w_k * upstream into the 8 corner rows. Colliding rows
    // legitimately receive multiple contributions.
    void interp_backward(const InterpStencil<T>& s, const T* upstream) {
        for (int k = 0; k < 8; ++k) {
            size_t base = hash_index(s.corners[k]) * feature_dim;
            T w = s.weights[k];
            for (int f = 0; f < feature_dim; ++f)
                entries.add_grad(uint32_t(base + f), w * upstream[f]);
        }
    }
};

// Geometry of the multi-level encoding. The six coarse levels back the
// auxiliary model (implicit features, width 4, concatenated to 24); the L
// fine levels store explicit 8-wide deferred features
// (1 density + 3 diffuse + 4 specular channels).
struct EncodingConfig {
    std::array<int, 6> coarse_resolutions{16, 32, 64, 128, 256, 512};
    size_t coarse_table_len = size_t(1) << 21;
    int fine_levels = 2; // L in {2,3,4}
    size_t fine_table_len = size_t(1) << 22;
    int corner_grid_res = 512; // L_C

    int fine_resolution(int level) const { return 1024 << level; } // 1024, 2048, ...
    int deferred_width() const { return 8; }
    int attention_width() const { return 2 * fine_levels; }
    int decoder_out_width() const { return 8 + 2 * fine_levels; }
};

constexpr int kCoarseLevels = 6;
constexpr int kCoarseFeatureDim = 4;
constexpr int kCoarseConcatWidth = kCoarseLevels * kCoarseFeatureDim; // 24
constexpr int kFineFeatureDim = 8;

template <class T>
struct MultiLevelEncoding {
    EncodingConfig cfg;
    std::array<HashLevel<T>, kCoarseLevels> coarse;
    std::vector<HashLevel<T>> fine;

    void init(const EncodingConfig& c, Rng& rng, GradTape<T>* tape = nullptr) {
        cfg = c;
        if (cfg.fine_levels < 2 || cfg.fine_levels > 4)
            throw std::invalid_argument("MultiLevelEncoding: L must be in {2,3,4}");
        for (int k = 0; k < kCoarseLevels; ++k) {
            coarse[k].init("coarse_l" + std::to_string(k), cfg.coarse_resolutions[k],
                           cfg.coarse_table_len, kCoarseFeatureDim);
            // small random init; the coarse branch carries the scene at start
            for (auto& v : coarse[k].entries.value) v = T(rng.uniform(-1e-4, 1e-4));
            if (tape) tape->add(&coarse[k].entries);
        }
        fine.resize(cfg.fine_levels);
        for (int l = 0; l < cfg.fine_levels; ++l) {
            fine[l].init("fine_l" + std::to_string(l + 1), cfg.fine_resolution(l),
                         cfg.fine_table_len, kFineFeatureDim);
            // fine tables start at exact zero: additive residuals on the coarse field
            if (tape) tape->add(&fine[l].entries);
        }
        for (int k = 1; k < kCoarseLevels; ++k)
            if (cfg.coarse_resolutions[k] <= cfg.coarse_resolutions[k - 1])
                throw std::invalid_argument("coarse resolutions must strictly increase");
    }

    // Concatenation of the six coarse-level interpolations, in resolution order.
    void encode_coarse(const Vec3<T>& x, T* out24) const {
        for (int k = 0; k < kCoarseLevels; ++k)
            coarse[k].interp_at(x, out24 + k * kCoarseFeatureDim);
    }

    // Per-level fine features, returned separately; fusion happens downstream.
    void encode_fine(const Vec3<T>& x, T* outL8) const {
        for (size_t l = 0; l < fine.size(); ++l)
            fine[l].interp_at(x, outL8 + l * kFineFeatureDim);
    }
};

} // namespace ngprt
