#pragma once

#include "ngprt/hash_grid.hpp"
#include "ngprt/volume.hpp"

#include <unordered_map>

namespace ngprt {

// Splits a decoder output row into the pre-activation deferred feature and
// the post-sigmoid attention pairs. Shared by the live (corner-evaluated) and
// baked decode paths so both produce bit-identical results from equal rows.
template <class T>
void split_decoder_output(const T* dec, int levels, DeferredFeature<T>& coarse,
                          AttentionParams<T>& a) {
    for (int i = 0; i < 8; ++i) coarse.v[i] = dec[i];
    a.levels = levels;
    for (int l = 0; l < levels; ++l) {
        a.omega[l] = activate_sigmoid(dec[8 + 2 * l]);
        a.beta[l] = activate_sigmoid(dec[8 + 2 * l + 1]);
    }
}

// The trainable NGP-RT model: auxiliary multi-level hash encoding with its
// shallow decoder (evaluated at corner-grid corners only), explicit fine hash
// levels, the fusion mode, and the per-ray view network.
template <class T>
struct NgpRtModel {
    EncodingConfig cfg;
    FusionTag fusion_tag = FusionTag::SeparateAttV;
    GradTape<T> tape;
    MultiLevelEncoding<T> encoding;
    TinyMlp<T> aux; // 24 -> 64 -> (8+2L)
    TinyMlp<T> psi; // 23 -> 64 -> 64 -> 3
    FusionMode<T> fusion;

    NgpRtModel() = default;
    NgpRtModel(const NgpRtModel&) = delete;
    NgpRtModel& operator=(const NgpRtModel&) = delete;

    void init(const EncodingConfig& c, FusionTag tag, uint64_t seed) {
        cfg = c;
        fusion_tag = tag;
        Rng rng(seed);
        encoding.init(cfg, rng, &tape);
        aux.init({kCoarseConcatWidth, 64, cfg.decoder_out_width()}, "aux", rng, &tape);
        psi.init({kShadeInWidth, 64, 64, 3}, "psi", rng, &tape);
        fusion.init(tag, cfg.fine_levels, rng, &tape);
    }

    int corner_res() const { return cfg.corner_grid_res; }
    int decoder_width() const { return cfg.decoder_out_width(); }

    uint64_t corner_key(const std::array<int32_t, 3>& c) const {
        uint64_t r1 = uint64_t(corner_res()) + 1;
        return uint64_t(c[0]) + r1 * (uint64_t(c[1]) + r1 * uint64_t(c[2]));
    }
    std::array<int32_t, 3> corner_from_key(uint64_t key) const {
        uint64_t r1 = uint64_t(corner_res()) + 1;
        return {int32_t(key % r1), int32_t((key / r1) % r1), int32_t(key / (r1 * r1))};
    }
    Vec3<T> corner_position(const std::array<int32_t, 3>& c) const {
        return {corner_to_world<T>(c[0], corner_res()), corner_to_world<T>(c[1], corner_res()),
                corner_to_world<T>(c[2], corner_res())};
    }

    // Auxiliary model at one corner of the L_C grid: coarse encoding of the
    // corner position through the shallow decoder. Output is the
    // (8+2L)-wide pre-activation row; `scratch`, when given, must hold
    // kCoarseConcatWidth + aux.scratch_size() and retains what backward needs.
    void evaluate_corner(const std::array<int32_t, 3>& corner, T* out,
                         std::span<T> scratch = {}) const {
        for (int a = 0; a < 3; ++a)
            if (corner[a] < 0 || corner[a] > corner_res())
                throw std::out_of_range("evaluate_corner: corner off the L_C grid");
        std::vector<T> local;
        std::span<T> s = scratch;
        if (s.empty()) {
            local.assign(corner_eval_scratch_size(), T(0));
            s = local;
        }
        T* feat = s.data(); // 24-wide concat
        encoding.encode_coarse(corner_position(corner), feat);
        auto mlp_scratch = s.subspan(kCoarseConcatWidth);
        auto o = aux.forward(std::span<const T>(feat, kCoarseConcatWidth), mlp_scratch);
        std::copy(o.begin(), o.end(), out);
    }

    size_t corner_eval_scratch_size() const {
        return kCoarseConcatWidth + aux.scratch_size();
    }

    // Backward through one corner evaluation: aux MLP gradients plus the
    // scatter into the six coarse tables. `scratch` is the forward scratch.
    void evaluate_corner_backward(const std::array<int32_t, 3>& corner,
                                  std::span<const T> scratch, const T* upstream) {
        std::array<T, kCoarseConcatWidth> din{};
        aux.backward(scratch.subspan(kCoarseConcatWidth),
                     std::span<const T>(upstream, size_t(decoder_width())),
                     std::span<T>(din.data(), kCoarseConcatWidth));
        Vec3<T> pos = corner_position(corner);
        for (int k = 0; k < kCoarseLevels; ++k) {
            auto st = stencil(pos, encoding.coarse[k].resolution);
            encoding.coarse[k].interp_backward(st, din.data() + k * kCoarseFeatureDim);
        }
    }
};

// Memoizes corner evaluations within a batch or frame. Slots are assigned in
// first-encounter order, which fixes the backward traversal order and keeps
// training byte-reproducible.
template <class T>
class CornerCache {
public:
    CornerCache(const NgpRtModel<T>& model, bool keep_scratch)
        : model_(&model), keep_scratch_(keep_scratch), width_(model.decoder_width()) {}

    uint32_t lookup(const std::array<int32_t, 3>& corner) {
        uint64_t key = model_->corner_key(corner);
        auto it = slot_of_.find(key);
        if (it != slot_of_.end()) return it->second;
        uint32_t slot = uint32_t(corners_.size());
        slot_of_.emplace(key, slot);
        corners_.push_back(corner);
        size_t off = outputs_.size();
        outputs_.resize(off + width_);
        if (keep_scratch_) {
            size_t soff = scratch_.size();
            scratch_.resize(soff + model_->corner_eval_scratch_size());
            upstream_.resize(upstream_.size() + width_, T(0));
            model_->evaluate_corner(corner, outputs_.data() + off,
                                    std::span<T>(scratch_.data() + soff,
                                                 model_->corner_eval_scratch_size()));
        } else {
            model_->evaluate_corner(corner, outputs_.data() + off);
        }
        return slot;
    }

    const T* output(uint32_t slot) const { return outputs_.data() + size_t(slot) * width_; }

    void add_upstream(uint32_t slot, const T* du, T w) {
        T* acc = upstream_.data() + size_t(slot) * width_;
        for (int i = 0; i < width_; ++i) acc[i] += w * du[i];
    }

    // Runs the decoder/encoding backward for every cached corner, in slot
    // order. Model gradients accumulate on its tape.
    void backward_flush(NgpRtModel<T>& model) {
        size_t ssz = model.corner_eval_scratch_size();
        for (size_t s = 0; s < corners_.size(); ++s)
            model.evaluate_corner_backward(
                corners_[s], std::span<const T>(scratch_.data() + s * ssz, ssz),
                upstream_.data() + s * width_);
    }

    void clear() {
        slot_of_.clear();
        corners_.clear();
        outputs_.clear();
        scratch_.clear();
        upstream_.clear();
    }
    size_t size() const { return corners_.size(); }

private:
    const NgpRtModel<T>* model_;
    bool keep_scratch_;
    int width_;
    std::unordered_map<uint64_t, uint32_t> slot_of_;
    std::vector<std::array<int32_t, 3>> corners_;
    std::vector<T> outputs_;
    std::vector<T> scratch_;
    std::vector<T> upstream_;
};

// Per-sample record of a live point decode, retaining exactly what the
// backward pass consumes.
template <class T>
struct PointDecodeRecord {
    std::array<uint32_t, 8> slots{};
    std::array<T, 8> slot_weights{};
    DeferredFeature<T> coarse;
    AttentionParams<T> a; // post-sigmoid, variant modes
    std::array<DeferredFeature<T>, kMaxFineLevels> fine;
    std::array<InterpStencil<T>, kMaxFineLevels> fine_stencils;
    std::vector<T> fuse_mlp_scratch; // MLP fusion mode only
    DeferredFeature<T> fused;
};

// Live decode at a point: trilinear interpolation of the 8 enclosing corner
// evaluations, sigmoid on the attention channels, fine-level fetch, fusion.
// This is the training-time and pre-bake rendering path; the baked path
// differs only in where the corner rows come from.
template <class T>
DeferredFeature<T> decode_point(const NgpRtModel<T>& model, CornerCache<T>& cache,
                                const Vec3<T>& x, PointDecodeRecord<T>* rec = nullptr) {
    const int w = model.decoder_width();
    auto st = stencil(x, model.corner_res());
    std::array<T, 8 + 2 * kMaxFineLevels> dec{};
    std::array<uint32_t, 8> slots;
    for (int k = 0; k < 8; ++k) {
        slots[k] = cache.lookup(st.corners[k]);
        const T* row = cache.output(slots[k]);
        T wk = st.weights[k];
        for (int i = 0; i < w; ++i) dec[i] += wk * row[i];
    }
    DeferredFeature<T> coarse;
    AttentionParams<T> a;
    split_decoder_output(dec.data(), model.cfg.fine_levels, coarse, a);

    std::array<DeferredFeature<T>, kMaxFineLevels> fine;
    std::array<InterpStencil<T>, kMaxFineLevels> fst;
    for (int l = 0; l < model.cfg.fine_levels; ++l) {
        fst[l] = stencil(x, model.encoding.fine[l].resolution);
        model.encoding.fine[l].interp(fst[l], fine[l].v.data());
    }
    DeferredFeature<T> fused =
        fuse(coarse, std::span<const DeferredFeature<T>>(fine.data(), model.cfg.fine_levels), a,
             model.fusion);
    if (rec) {
        rec->slots = slots;
        rec->slot_weights = st.weights;
        rec->coarse = coarse;
        rec->a = a;
        rec->fine = fine;
        rec->fine_stencils = fst;
        rec->fused = fused;
        if (model.fusion.tag == FusionTag::Mlp) {
            // re-run the fusion MLP keeping activations for backward
            std::vector<T> in(size_t(8) * model.cfg.fine_levels);
            for (int l = 0; l < model.cfg.fine_levels; ++l)
                std::copy(fine[l].v.begin(), fine[l].v.end(), in.begin() + size_t(8) * l);
            rec->fuse_mlp_scratch.assign(model.fusion.mlp.scratch_size(), T(0));
            model.fusion.mlp.forward(in, rec->fuse_mlp_scratch);
        }
    }
    return fused;
}

// Backward of decode_point from the upstream gradient on the fused feature.
// Scatters into fine tables, attention parameters (per mode), and accumulates
// per-corner upstreams into the cache for a later backward_flush.
template <class T>
void decode_point_backward(NgpRtModel<T>& model, CornerCache<T>& cache,
                           const PointDecodeRecord<T>& rec, const DeferredFeature<T>& up) {
    const int L = model.cfg.fine_levels;
    std::array<T, 8 + 2 * kMaxFineLevels> du{}; // upstream on the decoder output row
    for (int i = 0; i < 8; ++i) du[i] = up.v[i]; // residual/coarse path

    if (model.fusion.tag == FusionTag::Mlp) {
        std::array<T, 8 * kMaxFineLevels> din{};
        model.fusion.mlp.backward(rec.fuse_mlp_scratch, std::span<const T>(up.v.data(), 8),
                                  std::span<T>(din.data(), size_t(8) * L));
        for (int l = 0; l < L; ++l)
            model.encoding.fine[l].interp_backward(rec.fine_stencils[l], din.data() + 8 * l);
    } else {
        AttentionParams<T> w = model.fusion.effective_weights(rec.a);
        std::array<DeferredFeature<T>, kMaxFineLevels> dfine{};
        AttentionParams<T> dw{};
        weighted_fuse_backward(std::span<const DeferredFeature<T>>(rec.fine.data(), L), w, up,
                               dfine.data(), dw);
        for (int l = 0; l < L; ++l)
            model.encoding.fine[l].interp_backward(rec.fine_stencils[l], dfine[l].v.data());
        switch (model.fusion.tag) {
            case FusionTag::SeparateAttV:
                for (int l = 0; l < L; ++l) {
                    du[8 + 2 * l] = dw.omega[l] * sigmoid_grad_from_value(w.omega[l]);
                    du[8 + 2 * l + 1] = dw.beta[l] * sigmoid_grad_from_value(w.beta[l]);
                }
                break;
            case FusionTag::SharedAttV:
                for (int l = 0; l < L; ++l)
                    du[8 + 2 * l] =
                        (dw.omega[l] + dw.beta[l]) * sigmoid_grad_from_value(w.omega[l]);
                break;
            case FusionTag::SeparateAttInv:
                for (int l = 0; l < L; ++l) {
                    model.fusion.global_pre.add_grad(
                        uint32_t(2 * l), dw.omega[l] * sigmoid_grad_from_value(w.omega[l]));
                    model.fusion.global_pre.add_grad(
                        uint32_t(2 * l + 1), dw.beta[l] * sigmoid_grad_from_value(w.beta[l]));
                }
                break;
            case FusionTag::SharedAttInv:
                for (int l = 0; l < L; ++l)
                    model.fusion.global_pre.add_grad(
                        uint32_t(2 * l),
                        (dw.omega[l] + dw.beta[l]) * sigmoid_grad_from_value(w.omega[l]));
                break;
            case FusionTag::Sum:
            case FusionTag::Mlp:
                break;
        }
    }
    for (int k = 0; k < 8; ++k)
        cache.add_upstream(rec.slots[k], du.data(), rec.slot_weights[k]);
}

} // namespace ngprt
