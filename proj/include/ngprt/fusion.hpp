#pragma once

#include "ngprt/nn.hpp"

namespace ngprt {

// The (sigma, c_d, v_s) triple flowing through the deferred pipeline, stored
// pre-activation: density before exp, diffuse color before sigmoid, specular
// feature raw. Layout: [sigma, c_d.rgb, v_s x4].
template <class T>
struct DeferredFeature {
    std::array<T, 8> v{};

    T& sigma_pre() { return v[0]; }
    T sigma_pre() const { return v[0]; }
    std::span<T, 3> c_d() { return std::span<T, 3>(v.data() + 1, 3); }
    std::span<const T, 3> c_d() const { return std::span<const T, 3>(v.data() + 1, 3); }
    std::span<T, 4> v_s() { return std::span<T, 4>(v.data() + 4, 4); }
    std::span<const T, 4> v_s() const { return std::span<const T, 4>(v.data() + 4, 4); }

    DeferredFeature operator+(const DeferredFeature& o) const {
        DeferredFeature r;
        for (int i = 0; i < 8; ++i) r.v[i] = v[i] + o.v[i];
        return r;
    }
    bool all_finite() const {
        for (T x : v)
            if (!std::isfinite(double(x))) return false;
        return true;
    }
};

constexpr int kMaxFineLevels = 4;

// Post-sigmoid per-level attention pairs: omega weights densities, beta
// weights the color modality (diffuse + specular).
template <class T>
struct AttentionParams {
    int levels = 0;
    std::array<T, kMaxFineLevels> omega{};
    std::array<T, kMaxFineLevels> beta{};
};

enum class FusionTag : uint8_t {
    Sum = 0,
    SharedAttInv = 1,
    SeparateAttInv = 2,
    SharedAttV = 3,
    SeparateAttV = 4,
    Mlp = 5,
};

inline const char* fusion_tag_name(FusionTag t) {
    switch (t) {
        case FusionTag::Sum: return "sum";
        case FusionTag::SharedAttInv: return "shared_att_inv";
        case FusionTag::SeparateAttInv: return "separate_att_inv";
        case FusionTag::SharedAttV: return "shared_att_v";
        case FusionTag::SeparateAttV: return "separate_att_v";
        case FusionTag::Mlp: return "mlp";
    }
    return "?";
}

inline FusionTag fusion_tag_from_name(const std::string& s) {
    for (uint8_t i = 0; i <= 5; ++i)
        if (s == fusion_tag_name(FusionTag(i))) return FusionTag(i);
    throw std::invalid_argument("unknown fusion mode: " + s);
}

inline bool fusion_is_variant(FusionTag t) {
    return t == FusionTag::SharedAttV || t == FusionTag::SeparateAttV;
}
inline bool fusion_is_invariant(FusionTag t) {
    return t == FusionTag::SharedAttInv || t == FusionTag::SeparateAttInv;
}
inline bool fusion_is_shared(FusionTag t) {
    return t == FusionTag::SharedAttInv || t == FusionTag::SharedAttV;
}

// Aggregation mode for the fine levels. Invariant attention modes carry a
// global pre-sigmoid parameter vector (2L wide, omega/beta interleaved; the
// beta slots exist but are unused in shared mode so the decoder width stays
// 8+2L across modes). The MLP ablation consumes the concatenated raw fine
// features through one 64-neuron hidden layer.
template <class T>
struct FusionMode {
    FusionTag tag = FusionTag::SeparateAttV;
    int levels = 0;
    ParamGroup<T> global_pre; // 2L, invariant modes only
    TinyMlp<T> mlp;           // MLP mode only, {8L, 64, 8}

    void init(FusionTag t, int L, Rng& rng, GradTape<T>* tape = nullptr) {
        tag = t;
        levels = L;
        if (fusion_is_invariant(tag)) {
            global_pre.init("att_global", size_t(2) * L, true);
            // pre-sigmoid 0 => post-sigmoid 0.5
            if (tape) tape->add(&global_pre);
        }
        if (tag == FusionTag::Mlp) mlp.init({8 * L, 64, 8}, "fusion_mlp", rng, tape);
    }

    // Materializes the effective post-sigmoid weights for this mode.
    // Spatially variant modes read them from the per-point decode `a`;
    // invariant modes ignore `a`; SUM pins every weight to one.
    AttentionParams<T> effective_weights(const AttentionParams<T>& a) const {
        AttentionParams<T> w;
        w.levels = levels;
        switch (tag) {
            case FusionTag::Sum:
                for (int l = 0; l < levels; ++l) w.omega[l] = w.beta[l] = T(1);
                break;
            case FusionTag::SharedAttV:
                for (int l = 0; l < levels; ++l) w.omega[l] = w.beta[l] = a.omega[l];
                break;
            case FusionTag::SeparateAttV:
                for (int l = 0; l < levels; ++l) {
                    w.omega[l] = a.omega[l];
                    w.beta[l] = a.beta[l];
                }
                break;
            case FusionTag::SharedAttInv:
                for (int l = 0; l < levels; ++l)
                    w.omega[l] = w.beta[l] = activate_sigmoid(global_pre.value[size_t(2) * l]);
                break;
            case FusionTag::SeparateAttInv:
                for (int l = 0; l < levels; ++l) {
                    w.omega[l] = activate_sigmoid(global_pre.value[size_t(2) * l]);
                    w.beta[l] = activate_sigmoid(global_pre.value[size_t(2) * l + 1]);
                }
                break;
            case FusionTag::Mlp:
                break;
        }
        return w;
    }
};

// Channel-wise weighted sum of the fine levels followed by the residual add
// onto the coarse feature: f = f~ + [sum_l w.omega_l sigma_l,
// sum_l w.beta_l c_l, sum_l w.beta_l v_l].
template <class T>
DeferredFeature<T> weighted_fuse(const DeferredFeature<T>& coarse,
                                 std::span<const DeferredFeature<T>> fine,
                                 const AttentionParams<T>& w) {
    DeferredFeature<T> out = coarse;
    for (size_t l = 0; l < fine.size(); ++l) {
        out.v[0] += w.omega[l] * fine[l].v[0];
        for (int c = 1; c < 4; ++c) out.v[c] += w.beta[l] * fine[l].v[c];
        for (int c = 4; c < 8; ++c) out.v[c] += w.beta[l] * fine[l].v[c];
    }
    return out;
}

template <class T>
DeferredFeature<T> fuse(const DeferredFeature<T>& coarse,
                        std::span<const DeferredFeature<T>> fine,
                        const AttentionParams<T>& a, const FusionMode<T>& mode) {
    if (int(fine.size()) != mode.levels)
        throw std::invalid_argument("fuse: fine level count mismatch");
    if (mode.tag == FusionTag::Mlp) {
        std::vector<T> in(size_t(8) * mode.levels);
        for (int l = 0; l < mode.levels; ++l)
            std::copy(fine[l].v.begin(), fine[l].v.end(), in.begin() + size_t(8) * l);
        std::vector<T> scratch(mode.mlp.scratch_size());
        auto hat = mode.mlp.forward(in, scratch);
        DeferredFeature<T> out = coarse;
        for (int i = 0; i < 8; ++i) out.v[i] += hat[i];
        return out;
    }
    return weighted_fuse(coarse, fine, mode.effective_weights(a));
}

// Gradients of the weighted fuse. `up` is dLoss/d(fused feature); outputs are
// accumulated into dfine (per level, 8 channels) and dw (post-sigmoid space).
// The coarse upstream is `up` itself (identity path), handled by the caller.
template <class T>
void weighted_fuse_backward(std::span<const DeferredFeature<T>> fine,
                            const AttentionParams<T>& w, const DeferredFeature<T>& up,
                            DeferredFeature<T>* dfine, AttentionParams<T>& dw) {
    dw.levels = int(fine.size());
    for (size_t l = 0; l < fine.size(); ++l) {
        dfine[l].v[0] += w.omega[l] * up.v[0];
        T db = T(0);
        for (int c = 1; c < 8; ++c) {
            dfine[l].v[c] += w.beta[l] * up.v[c];
            db += up.v[c] * fine[l].v[c];
        }
        dw.omega[l] += up.v[0] * fine[l].v[0];
        dw.beta[l] += db;
    }
}

// Color channels (c_d, v_s) of every fine level except keep_level (1-based)
// are zeroed; density channels stay untouched so the geometry is unchanged.
// Used for per-level decomposition renders.
template <class T>
std::vector<DeferredFeature<T>> level_masked_fine(std::span<const DeferredFeature<T>> fine,
                                                  int keep_level) {
    if (keep_level < 1 || keep_level > int(fine.size()))
        throw std::out_of_range("level_masked_fine: keep_level out of range");
    std::vector<DeferredFeature<T>> out(fine.begin(), fine.end());
    for (size_t l = 0; l < out.size(); ++l) {
        if (int(l) + 1 == keep_level) continue;
        for (int c = 1; c < 8; ++c) out[l].v[c] = T(0);
    }
    return out;
}

// Analytic multiply-accumulate count of the aggregation stage only.
struct AggregationDesc {
    enum class Kind { Attention, Mlp } kind = Kind::Attention;
    int levels = 2;
    std::vector<int> mlp_widths; // for Kind::Mlp
};

inline int64_t count_macs(const AggregationDesc& d) {
    if (d.kind == AggregationDesc::Kind::Attention) return int64_t(8) * d.levels;
    int64_t n = 0;
    for (size_t k = 0; k + 1 < d.mlp_widths.size(); ++k)
        n += int64_t(d.mlp_widths[k]) * d.mlp_widths[k + 1];
    return n;
}

// The Instant-NGP-style per-point decode this pipeline replaces:
// 24 -> 64 -> (8+2L).
inline AggregationDesc ngp_decoder_desc(int levels) {
    AggregationDesc d;
    d.kind = AggregationDesc::Kind::Mlp;
    d.levels = levels;
    d.mlp_widths = {24, 64, 8 + 2 * levels};
    return d;
}

} // namespace ngprt
