#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ngprt {

template <class T>
struct Vec3 {
    T x = 0, y = 0, z = 0;

    Vec3() = default;
    Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(T s) const { return {x * s, y * s, z * s}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    T operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
    T& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }

    T dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    T norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        T n = norm();
        return {x / n, y / n, z / n};
    }
    template <class U>
    Vec3<U> cast() const { return {static_cast<U>(x), static_cast<U>(y), static_cast<U>(z)}; }
};

using Vec3f = Vec3<float>;
using Vec3d = Vec3<double>;

// Deterministic RNG: splitmix64 core, identical streams on every platform.
// std::mt19937 + <random> distributions are implementation-defined, which
// would break the byte-identical reproducibility contract.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed = 0x9e3779b97f4a7c15ull) : state(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }
    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    uint64_t below(uint64_t n) { return next_u64() % n; }
    double normal() {
        // Box-Muller, one value per call; u1 bounded away from 0.
        double u1 = std::max(uniform(), 1e-300);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }
    Vec3d unit_vector() {
        // rejection-free: z uniform in [-1,1], azimuth uniform
        double z = uniform(-1.0, 1.0);
        double phi = uniform(0.0, 2.0 * 3.14159265358979323846);
        double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        return {r * std::cos(phi), r * std::sin(phi), z};
    }
};

// CRC-32 (IEEE 802.3, reflected, poly 0xEDB88320); used by the file formats.
inline uint32_t crc32(const void* data, size_t len, uint32_t seed = 0) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = ~seed;
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xFF] ^ (c >> 8);
    return ~c;
}

template <class T>
T clamp(T v, T lo, T hi) {
    return v < lo ? lo : (v > hi ? hi : v);
}

inline bool almost_unit(double len2) { return std::abs(std::sqrt(len2) - 1.0) <= 1e-6; }

// [-1,1]^3 region of interest; all grids and step sizes are defined inside it.
struct Roi {
    static constexpr double lo = -1.0;
    static constexpr double hi = 1.0;
    static constexpr double extent = 2.0;

    template <class T>
    static bool contains(const Vec3<T>& p) {
        return p.x >= T(lo) && p.x <= T(hi) && p.y >= T(lo) && p.y <= T(hi) && p.z >= T(lo) &&
               p.z <= T(hi);
    }
};

} // namespace ngprt
