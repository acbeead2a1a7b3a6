#pragma once

#include "ngprt/common.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace ngprt {

// Row-major RGB float image in [0,1] (PFM dumps may exceed the range).
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> rgb; // 3 * width * height

    Image() = default;
    Image(int w, int h) : width(w), height(h), rgb(size_t(3) * w * h, 0.f) {}

    float* pixel(int x, int y) { return rgb.data() + 3 * (size_t(y) * width + x); }
    const float* pixel(int x, int y) const { return rgb.data() + 3 * (size_t(y) * width + x); }
};

// Binary PPM (P6), 8 bits per channel. Lossless for the quantized values and
// byte-deterministic, which the reproducibility tests rely on.
inline void write_ppm(const std::string& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> row(size_t(3) * img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < 3 * img.width; ++x) {
            float v = img.rgb[size_t(y) * img.width * 3 + x];
            int q = int(std::lround(double(clamp(v, 0.f, 1.f)) * 255.0));
            row[x] = static_cast<unsigned char>(clamp(q, 0, 255));
        }
        f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!f) throw std::runtime_error("write_ppm: write failed for " + path);
}

inline Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    f >> magic >> w >> h >> maxv;
    if (magic != "P6" || w <= 0 || h <= 0 || maxv != 255)
        throw std::runtime_error("read_ppm: unsupported header in " + path);
    f.get(); // single whitespace after header
    Image img(w, h);
    std::vector<unsigned char> buf(size_t(3) * w * h);
    f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (!f) throw std::runtime_error("read_ppm: truncated file " + path);
    for (size_t i = 0; i < buf.size(); ++i) img.rgb[i] = float(buf[i]) / 255.f;
    return img;
}

// Portable FloatMap (PFM), 32-bit float RGB, little-endian (negative scale),
// bottom-to-top scanlines per the format. Used for tolerance-critical dumps.
inline void write_pfm(const std::string& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_pfm: cannot open " + path);
    f << "PF\n" << img.width << " " << img.height << "\n-1.0\n";
    for (int y = img.height - 1; y >= 0; --y)
        f.write(reinterpret_cast<const char*>(img.rgb.data() + size_t(3) * y * img.width),
                std::streamsize(sizeof(float) * 3 * img.width));
    if (!f) throw std::runtime_error("write_pfm: write failed for " + path);
}

inline Image read_pfm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_pfm: cannot open " + path);
    std::string magic;
    int w = 0, h = 0;
    double scale = 0;
    f >> magic >> w >> h >> scale;
    if (magic != "PF" || w <= 0 || h <= 0 || scale >= 0)
        throw std::runtime_error("read_pfm: unsupported header in " + path);
    f.get();
    Image img(w, h);
    for (int y = h - 1; y >= 0; --y)
        f.read(reinterpret_cast<char*>(img.rgb.data() + size_t(3) * y * w),
               std::streamsize(sizeof(float) * 3 * w));
    if (!f) throw std::runtime_error("read_pfm: truncated file " + path);
    return img;
}

// 10*log10(1/mse) over [0,1] floats; identical images report the 99 dB cap.
inline double psnr(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument("psnr: image dimensions differ");
    double mse = 0;
    for (size_t i = 0; i < a.rgb.size(); ++i) {
        double d = double(a.rgb[i]) - double(b.rgb[i]);
        mse += d * d;
    }
    mse /= double(a.rgb.size());
    if (mse <= 0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

inline double max_abs_diff(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument("max_abs_diff: image dimensions differ");
    double m = 0;
    for (size_t i = 0; i < a.rgb.size(); ++i)
        m = std::max(m, std::abs(double(a.rgb[i]) - double(b.rgb[i])));
    return m;
}

} // namespace ngprt
