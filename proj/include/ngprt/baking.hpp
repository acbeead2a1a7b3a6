#pragma once

#include "ngprt/model.hpp"
#include "ngprt/training.hpp"

namespace ngprt {

// Sparse corner storage for the baked coarse features and attention logits:
// an ordered-by-key map from linearized (L_C+1)^3 corner index to a
// (8+2L)-wide f32 row. Absent corners read as exact zero.
struct SparseCoarseGrid {
    int resolution = 0; // L_C
    int levels = 0;     // L
    int row_width = 0;  // 8 + 2L
    std::unordered_map<uint64_t, uint32_t> index;
    std::vector<float> rows;
    std::vector<float> zero_row;

    void init(int l_c, int l) {
        resolution = l_c;
        levels = l;
        row_width = 8 + 2 * l;
        index.clear();
        rows.clear();
        zero_row.assign(size_t(row_width), 0.f);
    }

    uint64_t key_of(const std::array<int32_t, 3>& c) const {
        uint64_t r1 = uint64_t(resolution) + 1;
        return uint64_t(c[0]) + r1 * (uint64_t(c[1]) + r1 * uint64_t(c[2]));
    }

    float* add_row(uint64_t key) {
        uint32_t r = uint32_t(index.size());
        index.emplace(key, r);
        rows.resize(rows.size() + row_width, 0.f);
        return rows.data() + size_t(r) * row_width;
    }

    const float* row(uint64_t key) const {
        auto it = index.find(key);
        return it == index.end() ? zero_row.data() : rows.data() + size_t(it->second) * row_width;
    }

    size_t count() const { return index.size(); }
    double occupancy_fraction() const {
        double corners = std::pow(double(resolution) + 1.0, 3.0);
        return double(count()) / corners;
    }
};

// Self-contained render-time scene: sparse coarse grid, fine hash tables,
// occupancy pyramid, distance grid, the view network, and the fusion mode.
// Rendering from it needs no auxiliary model.
struct BakedScene {
    EncodingConfig cfg;
    FusionTag tag = FusionTag::SeparateAttV;
    SparseCoarseGrid coarse;
    std::vector<HashLevel<float>> fine;
    TinyMlp<float> psi;
    FusionMode<float> fusion;
    OccupancyPyramid pyramid;
    DistanceGrid distance;
};

// Baked decode at a point: the same stencil, interpolation, sigmoid split and
// fusion as the live path, with corner rows read from the sparse grid.
inline void decode_point_baked_raw(const BakedScene& s, const Vec3f& x,
                                   DeferredFeature<float>& coarse, AttentionParams<float>& a,
                                   std::array<DeferredFeature<float>, kMaxFineLevels>& fine) {
    const int w = s.coarse.row_width;
    auto st = stencil(x, s.cfg.corner_grid_res);
    std::array<float, 8 + 2 * kMaxFineLevels> dec{};
    for (int k = 0; k < 8; ++k) {
        const float* row = s.coarse.row(s.coarse.key_of(st.corners[k]));
        float wk = st.weights[k];
        for (int i = 0; i < w; ++i) dec[i] += wk * row[i];
    }
    split_decoder_output(dec.data(), s.cfg.fine_levels, coarse, a);
    for (int l = 0; l < s.cfg.fine_levels; ++l) fine[l].v.fill(0.f);
    for (int l = 0; l < s.cfg.fine_levels; ++l) s.fine[l].interp_at(x, fine[l].v.data());
}

inline DeferredFeature<float> decode_point_baked(const BakedScene& s, const Vec3f& x) {
    DeferredFeature<float> coarse;
    AttentionParams<float> a;
    std::array<DeferredFeature<float>, kMaxFineLevels> fine;
    decode_point_baked_raw(s, x, coarse, a, fine);
    return fuse(coarse, std::span<const DeferredFeature<float>>(fine.data(), s.cfg.fine_levels),
                a, s.fusion);
}

struct BakeOptions {
    double cull_step = kBaseStep;      // step length for the alpha threshold
    double cull_alpha_thresh = 0.005;  // alpha(sigma, cull_step) must exceed this
    int dilate_voxels = 1;
};

// Converts the trained model plus its training occupancy into render-time
// assets:
//  1) cull training-occupied voxels by density threshold, dilate, upsample to
//     the 512-base render grid, build the pyramid;
//  2) retain corner rows only where adjacent to an occupied voxel and
//     evaluate the auxiliary model there (pre-activation rows);
//  3) 256-downsample the render occupancy and build the distance grid;
//  4) carry over fine tables, the view MLP and the fusion mode verbatim.
inline BakedScene bake(const NgpRtModel<float>& model, const BitGrid& train_grid,
                       const BakeOptions& opt = {}) {
    for (const auto* g : model.tape.groups)
        for (float v : g->value)
            if (!std::isfinite(v))
                throw std::runtime_error("bake: non-finite parameter in group " + g->name);

    BakedScene out;
    out.cfg = model.cfg;
    out.tag = model.fusion_tag;

    // (1) density cull at the training resolution
    const int tres = train_grid.res;
    BitGrid culled(tres);
    {
        CornerCache<float> cache(model, /*keep_scratch=*/false);
        double vsz = Roi::extent / tres;
        for (int z = 0; z < tres; ++z)
            for (int y = 0; y < tres; ++y)
                for (int x = 0; x < tres; ++x) {
                    if (!train_grid.get(x, y, z)) continue;
                    Vec3f c{float(Roi::lo + (x + 0.5) * vsz), float(Roi::lo + (y + 0.5) * vsz),
                            float(Roi::lo + (z + 0.5) * vsz)};
                    float sigma = activate_density(decode_point(model, cache, c).sigma_pre());
                    if (1.0 - std::exp(-double(sigma) * opt.cull_step) > opt.cull_alpha_thresh)
                        culled.set(x, y, z);
                }
    }
    for (int i = 0; i < opt.dilate_voxels; ++i) culled = culled.dilated();

    const int render_res = 512;
    if (render_res % tres != 0)
        throw std::invalid_argument("bake: training grid must divide the 512 render grid");
    BitGrid render_occ = culled.upsampled(render_res / tres);
    out.pyramid = build_pyramid(render_occ);

    // (3) distance grid from the 256-level occupancy
    out.distance = build_distance_grid(out.pyramid.levels[1]);

    // (2) corner retention and evaluation on the L_C grid
    const int lc = model.corner_res();
    if (lc % tres != 0 && tres % lc != 0)
        throw std::invalid_argument("bake: L_C and the training grid must nest");
    BitGrid occ_lc = lc >= tres ? culled.upsampled(lc / tres) : [&] {
        BitGrid g = culled;
        while (g.res > lc) g = g.downsampled2();
        return g;
    }();
    out.coarse.init(lc, model.cfg.fine_levels);
    BitGrid corner_marks(lc + 1);
    for (int z = 0; z < lc; ++z)
        for (int y = 0; y < lc; ++y)
            for (int x = 0; x < lc; ++x) {
                if (!occ_lc.get(x, y, z)) continue;
                for (int k = 0; k < 8; ++k)
                    corner_marks.set(x + (k & 1), y + ((k >> 1) & 1), z + (k >> 2));
            }
    const int w = model.decoder_width();
    std::vector<float> row(w);
    for (int z = 0; z <= lc; ++z)
        for (int y = 0; y <= lc; ++y)
            for (int x = 0; x <= lc; ++x) {
                if (!corner_marks.get(x, y, z)) continue;
                std::array<int32_t, 3> corner{x, y, z};
                model.evaluate_corner(corner, row.data());
                float* dst = out.coarse.add_row(out.coarse.key_of(corner));
                std::copy(row.begin(), row.end(), dst);
            }

    // (4) verbatim carry-over
    out.fine.resize(model.cfg.fine_levels);
    for (int l = 0; l < model.cfg.fine_levels; ++l) {
        out.fine[l].resolution = model.encoding.fine[l].resolution;
        out.fine[l].table_len = model.encoding.fine[l].table_len;
        out.fine[l].feature_dim = model.encoding.fine[l].feature_dim;
        out.fine[l].addressing = model.encoding.fine[l].addressing;
        out.fine[l].entries.init("fine_l" + std::to_string(l + 1),
                                 model.encoding.fine[l].entries.size(), false);
        out.fine[l].entries.value = model.encoding.fine[l].entries.value;
    }
    Rng dummy(0);
    out.psi.init({kShadeInWidth, 64, 64, 3}, "psi", dummy, nullptr);
    for (int k = 0; k < out.psi.num_layers(); ++k) {
        out.psi.weight[k].value = model.psi.weight[k].value;
        out.psi.bias[k].value = model.psi.bias[k].value;
    }
    out.fusion.init(model.fusion_tag, model.cfg.fine_levels, dummy, nullptr);
    if (fusion_is_invariant(model.fusion_tag))
        out.fusion.global_pre.value = model.fusion.global_pre.value;
    if (model.fusion_tag == FusionTag::Mlp)
        for (int k = 0; k < out.fusion.mlp.num_layers(); ++k) {
            out.fusion.mlp.weight[k].value = model.fusion.mlp.weight[k].value;
            out.fusion.mlp.bias[k].value = model.fusion.mlp.bias[k].value;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Feature parameter accounting.
// nominal: (8+2L) * 0.02 * L_C^3 + 8 * L * 2^22  (the published formula)
// measured: substitutes the baked corner occupancy and configured table size.
// ---------------------------------------------------------------------------

inline double report_params(int levels, int l_c, double sparsity, size_t fine_table_len) {
    return (8.0 + 2.0 * levels) * sparsity * std::pow(double(l_c), 3.0) +
           8.0 * levels * double(fine_table_len);
}

inline double report_params_nominal(int levels, int l_c = 512) {
    return report_params(levels, l_c, 0.02, size_t(1) << 22);
}

inline double report_params_measured(const BakedScene& s) {
    return report_params(s.cfg.fine_levels, s.cfg.corner_grid_res,
                         s.coarse.occupancy_fraction(), s.cfg.fine_table_len);
}

// MERF comparator: 8 * (0.02 * 512^3 + 3 * 2048^2).
inline double merf_comparator_params() {
    return 8.0 * (0.02 * std::pow(512.0, 3.0) + 3.0 * 2048.0 * 2048.0);
}

// ---------------------------------------------------------------------------
// Baked file format (little-endian):
//   magic "NGRT", u32 version=1,
//   header { u32 L_C, u32 L, u32 fine_res[L], u64 table_lens[6+L],
//            u8 fusion_tag, zero pad to 8-byte multiple },
//   sections { u32 id, u64 byte_len, payload, u32 crc32(payload) }:
//     1 coarse corner map: u64 count, then { u64 linear index, f32 x (8+2L) }
//       sorted by index,
//     2 fine tables: f32 rows per level in order,
//     3 view MLP: u32 ndims, u32 dims[], per layer f32 weights row-major then
//       f32 biases,
//     4 pyramid: five bit-grids (512..32), 64-bit words, x-fastest,
//     5 distance grid: u8 x 256^3,
//     6 invariant attention logits: f32 x 2L (invariant modes only).
// ---------------------------------------------------------------------------

constexpr uint32_t kBakedVersion = 1;
enum : uint32_t {
    kSecCoarseMap = 1,
    kSecFineTables = 2,
    kSecViewMlp = 3,
    kSecPyramid = 4,
    kSecDistanceGrid = 5,
    kSecAttGlobals = 6,
    kSecFusionMlp = 7,
};

namespace detail {
inline void put_section(std::vector<unsigned char>& out, uint32_t id,
                        const std::vector<unsigned char>& payload) {
    put_pod(out, id);
    put_pod(out, uint64_t(payload.size()));
    put_bytes(out, payload.data(), payload.size());
    put_pod(out, crc32(payload.data(), payload.size()));
}
} // namespace detail

inline void save_baked(const BakedScene& s, const std::string& path) {
    using detail::put_bytes;
    using detail::put_pod;
    std::vector<unsigned char> out;
    put_bytes(out, "NGRT", 4);
    put_pod(out, kBakedVersion);
    size_t header_start = out.size();
    put_pod(out, uint32_t(s.cfg.corner_grid_res));
    put_pod(out, uint32_t(s.cfg.fine_levels));
    for (int l = 0; l < s.cfg.fine_levels; ++l) put_pod(out, uint32_t(s.fine[l].resolution));
    for (int k = 0; k < kCoarseLevels; ++k) {
        size_t corners = size_t(s.cfg.coarse_resolutions[k] + 1) *
                         (s.cfg.coarse_resolutions[k] + 1) * (s.cfg.coarse_resolutions[k] + 1);
        put_pod(out, uint64_t(std::min(corners, s.cfg.coarse_table_len)));
    }
    for (int l = 0; l < s.cfg.fine_levels; ++l) put_pod(out, uint64_t(s.fine[l].table_len));
    put_pod(out, uint8_t(s.tag));
    while ((out.size() - header_start) % 8 != 0) out.push_back(0);

    {
        std::vector<unsigned char> p;
        put_pod(p, uint64_t(s.coarse.count()));
        std::vector<uint64_t> keys;
        keys.reserve(s.coarse.count());
        for (const auto& kv : s.coarse.index) keys.push_back(kv.first);
        std::sort(keys.begin(), keys.end());
        for (uint64_t k : keys) {
            put_pod(p, k);
            const float* r = s.coarse.row(k);
            put_bytes(p, r, sizeof(float) * s.coarse.row_width);
        }
        detail::put_section(out, kSecCoarseMap, p);
    }
    {
        std::vector<unsigned char> p;
        for (const auto& lvl : s.fine)
            put_bytes(p, lvl.entries.value.data(), lvl.entries.value.size() * sizeof(float));
        detail::put_section(out, kSecFineTables, p);
    }
    {
        std::vector<unsigned char> p;
        put_pod(p, uint32_t(s.psi.widths.size()));
        for (int wdim : s.psi.widths) put_pod(p, uint32_t(wdim));
        for (int k = 0; k < s.psi.num_layers(); ++k) {
            put_bytes(p, s.psi.weight[k].value.data(),
                      s.psi.weight[k].value.size() * sizeof(float));
            put_bytes(p, s.psi.bias[k].value.data(), s.psi.bias[k].value.size() * sizeof(float));
        }
        detail::put_section(out, kSecViewMlp, p);
    }
    {
        std::vector<unsigned char> p;
        for (const auto& g : s.pyramid.levels)
            put_bytes(p, g.words.data(), g.words.size() * sizeof(uint64_t));
        detail::put_section(out, kSecPyramid, p);
    }
    {
        std::vector<unsigned char> p;
        put_bytes(p, s.distance.values.data(), s.distance.values.size());
        detail::put_section(out, kSecDistanceGrid, p);
    }
    if (fusion_is_invariant(s.tag)) {
        std::vector<unsigned char> p;
        put_bytes(p, s.fusion.global_pre.value.data(),
                  s.fusion.global_pre.value.size() * sizeof(float));
        detail::put_section(out, kSecAttGlobals, p);
    }
    if (s.tag == FusionTag::Mlp) {
        std::vector<unsigned char> p;
        put_pod(p, uint32_t(s.fusion.mlp.widths.size()));
        for (int wdim : s.fusion.mlp.widths) put_pod(p, uint32_t(wdim));
        for (int k = 0; k < s.fusion.mlp.num_layers(); ++k) {
            put_bytes(p, s.fusion.mlp.weight[k].value.data(),
                      s.fusion.mlp.weight[k].value.size() * sizeof(float));
            put_bytes(p, s.fusion.mlp.bias[k].value.data(),
                      s.fusion.mlp.bias[k].value.size() * sizeof(float));
        }
        detail::put_section(out, kSecFusionMlp, p);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_baked: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
    if (!f) throw std::runtime_error("save_baked: write failed");
}

inline BakedScene load_baked(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_baked: cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 8 || std::memcmp(buf.data(), "NGRT", 4) != 0)
        throw std::runtime_error("load_baked: bad magic at offset 0");
    detail::ByteReader r{buf.data() + 4, buf.size() - 4};
    if (r.pod<uint32_t>("version") != kBakedVersion)
        throw std::runtime_error("load_baked: unsupported version at offset 4");

    BakedScene s;
    size_t header_start = r.off;
    uint32_t lc = r.pod<uint32_t>("L_C");
    uint32_t L = r.pod<uint32_t>("L");
    if (L < 2 || L > 4) throw std::runtime_error("load_baked: L out of range");
    s.cfg.corner_grid_res = int(lc);
    s.cfg.fine_levels = int(L);
    std::vector<uint32_t> fine_res(L);
    for (auto& v : fine_res) v = r.pod<uint32_t>("fine resolution");
    std::vector<uint64_t> lens(kCoarseLevels + L);
    for (auto& v : lens) v = r.pod<uint64_t>("table length");
    s.cfg.coarse_table_len = *std::max_element(lens.begin(), lens.begin() + kCoarseLevels);
    s.cfg.fine_table_len = lens[kCoarseLevels];
    s.tag = FusionTag(r.pod<uint8_t>("fusion tag"));
    while ((r.off - header_start) % 8 != 0) r.pod<uint8_t>("pad");

    s.coarse.init(int(lc), int(L));
    s.fine.resize(L);
    for (uint32_t l = 0; l < L; ++l) {
        s.fine[l].resolution = int(fine_res[l]);
        s.fine[l].table_len = lens[kCoarseLevels + l];
        s.fine[l].feature_dim = kFineFeatureDim;
        s.fine[l].addressing = Addressing::Hashed;
        s.fine[l].entries.init("fine_l" + std::to_string(l + 1),
                               s.fine[l].table_len * kFineFeatureDim, false);
    }
    Rng dummy(0);
    s.fusion.init(s.tag, int(L), dummy, nullptr);

    bool saw[8] = {};
    while (r.off < r.len) {
        size_t sec_off = r.off;
        uint32_t id = r.pod<uint32_t>("section id");
        uint64_t len = r.pod<uint64_t>("section length");
        if (r.off + len + 4 > r.len)
            throw std::runtime_error("load_baked: truncated section " + std::to_string(id) +
                                     " at offset " + std::to_string(sec_off));
        const unsigned char* payload = r.p + r.off;
        r.off += len;
        uint32_t crc = r.pod<uint32_t>("section crc");
        if (crc32(payload, len) != crc)
            throw std::runtime_error("load_baked: checksum failure in section " +
                                     std::to_string(id) + " at offset " +
                                     std::to_string(sec_off));
        detail::ByteReader pr{payload, len};
        switch (id) {
            case kSecCoarseMap: {
                uint64_t count = pr.pod<uint64_t>("corner count");
                for (uint64_t i = 0; i < count; ++i) {
                    uint64_t key = pr.pod<uint64_t>("corner index");
                    float* dst = s.coarse.add_row(key);
                    pr.read(dst, sizeof(float) * s.coarse.row_width, "corner row");
                }
                break;
            }
            case kSecFineTables:
                for (auto& lvl : s.fine)
                    pr.read(lvl.entries.value.data(), lvl.entries.value.size() * sizeof(float),
                            "fine table");
                break;
            case kSecViewMlp: {
                uint32_t nd = pr.pod<uint32_t>("mlp ndims");
                std::vector<int> dims(nd);
                for (auto& d : dims) d = int(pr.pod<uint32_t>("mlp dim"));
                s.psi.init(dims, "psi", dummy, nullptr);
                for (int k = 0; k < s.psi.num_layers(); ++k) {
                    pr.read(s.psi.weight[k].value.data(),
                            s.psi.weight[k].value.size() * sizeof(float), "mlp weights");
                    pr.read(s.psi.bias[k].value.data(),
                            s.psi.bias[k].value.size() * sizeof(float), "mlp biases");
                }
                break;
            }
            case kSecPyramid:
                for (int k = 0; k < kPyramidLevels; ++k) {
                    s.pyramid.levels[k] = BitGrid(512 >> k);
                    pr.read(s.pyramid.levels[k].words.data(),
                            s.pyramid.levels[k].words.size() * sizeof(uint64_t), "pyramid");
                }
                break;
            case kSecDistanceGrid:
                s.distance.resolution = 256;
                s.distance.voxel_size = Roi::extent / 256;
                s.distance.values.resize(size_t(256) * 256 * 256);
                pr.read(s.distance.values.data(), s.distance.values.size(), "distance grid");
                break;
            case kSecAttGlobals:
                pr.read(s.fusion.global_pre.value.data(),
                        s.fusion.global_pre.value.size() * sizeof(float), "attention globals");
                break;
            case kSecFusionMlp: {
                uint32_t nd = pr.pod<uint32_t>("fusion mlp ndims");
                std::vector<int> dims(nd);
                for (auto& d : dims) d = int(pr.pod<uint32_t>("fusion mlp dim"));
                s.fusion.mlp.init(dims, "fusion_mlp", dummy, nullptr);
                for (int k = 0; k < s.fusion.mlp.num_layers(); ++k) {
                    pr.read(s.fusion.mlp.weight[k].value.data(),
                            s.fusion.mlp.weight[k].value.size() * sizeof(float),
                            "fusion mlp weights");
                    pr.read(s.fusion.mlp.bias[k].value.data(),
                            s.fusion.mlp.bias[k].value.size() * sizeof(float),
                            "fusion mlp biases");
                }
                break;
            }
            default:
                throw std::runtime_error("load_baked: unknown section id " + std::to_string(id) +
                                         " at offset " + std::to_string(sec_off));
        }
        if (pr.off != pr.len)
            throw std::runtime_error("load_baked: section " + std::to_string(id) +
                                     " length mismatch at offset " + std::to_string(sec_off));
        if (id <= 7) saw[id] = true;
    }
    for (uint32_t id : {kSecCoarseMap, kSecFineTables, kSecViewMlp, kSecPyramid,
                        kSecDistanceGrid})
        if (!saw[id])
            throw std::runtime_error("load_baked: missing section " + std::to_string(id));
    if (fusion_is_invariant(s.tag) && !saw[kSecAttGlobals])
        throw std::runtime_error("load_baked: missing attention globals section");
    if (s.tag == FusionTag::Mlp && !saw[kSecFusionMlp])
        throw std::runtime_error("load_baked: missing fusion MLP section");
    return s;
}

} // namespace ngprt
