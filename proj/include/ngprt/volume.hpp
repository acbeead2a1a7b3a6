#pragma once

#include "ngprt/fusion.hpp"

namespace ngprt {

template <class T>
struct Ray {
    Vec3<T> origin;
    Vec3<T> dir; // unit length
    T t_near = 0;
    T t_far = 0;

    void validate() const {
        double l2 = double(dir.x) * dir.x + double(dir.y) * dir.y + double(dir.z) * dir.z;
        if (!almost_unit(l2)) throw std::invalid_argument("Ray: direction must be unit length");
        if (!(t_near < t_far)) throw std::invalid_argument("Ray: t_near must be < t_far");
    }
    Vec3<T> at(T t) const { return origin + dir * t; }
};

template <class T>
struct RaySample {
    T t = 0;
    T delta = 0; // marching interval assigned to this sample
    DeferredFeature<T> feature;
};

// alpha_i = 1 - exp(-sigma_i * delta_i)
template <class T>
T alpha_from_sigma(T sigma, T delta) {
    return T(1) - std::exp(-sigma * delta);
}

// Ray marching stops once transmittance falls below this in render mode.
constexpr double kEarlyStopTransmittance = 2e-3;

// Front-to-back accumulation of the deferred quantities:
// C_d = sum alpha_i T_i c_d_i, F = sum alpha_i T_i v_s_i, T_i = prod (1-alpha_j).
// Density activation is applied to the stored pre-activations here.
template <class T>
struct CompositeResult {
    Vec3<T> c_d{};        // pre-sigmoid accumulated diffuse color
    std::array<T, 4> f{}; // accumulated specular feature
    std::vector<T> weights;
    std::vector<T> trans; // trans[i] = T before sample i; trans[n] = final transmittance
    T final_t = T(1);
    size_t composited = 0; // samples actually composited (early stop may cut short)
};

template <class T>
CompositeResult<T> composite(std::span<const RaySample<T>> samples, bool early_stop) {
    CompositeResult<T> res;
    for (size_t i = 1; i < samples.size(); ++i)
        if (!(samples[i].t > samples[i - 1].t))
            throw std::invalid_argument("composite: samples must be ordered by t");
    res.weights.reserve(samples.size());
    res.trans.reserve(samples.size() + 1);
    T trans = T(1);
    for (const auto& s : samples) {
        res.trans.push_back(trans);
        T sigma = activate_density(s.feature.sigma_pre());
        T a = alpha_from_sigma(sigma, s.delta);
        T w = a * trans;
        res.weights.push_back(w);
        for (int c = 0; c < 3; ++c) res.c_d[c] += w * s.feature.v[1 + c];
        for (int c = 0; c < 4; ++c) res.f[c] += w * s.feature.v[4 + c];
        trans = trans * (T(1) - a);
        ++res.composited;
        if (early_stop && trans < T(kEarlyStopTransmittance)) break;
    }
    res.trans.push_back(trans);
    res.final_t = trans;
    return res;
}

// Reverse pass of composite over all composited samples. Upstreams:
// d_cd/d_f on the accumulated quantities plus an optional direct per-sample
// weight gradient (the distortion loss). Per-sample feature gradients are
// accumulated into dfeatures. Uses the suffix formulation
//   dL/dsigma_i = delta_i * (u_i * T_{i+1} - sum_{j>i} u_j w_j),
// with u_i = dL/dw_i, which avoids dividing by (1 - alpha_i).
template <class T>
void composite_backward(std::span<const RaySample<T>> samples, const CompositeResult<T>& res,
                        const Vec3<T>& d_cd, const std::array<T, 4>& d_f,
                        std::span<const T> d_weights_extra,
                        std::span<DeferredFeature<T>> dfeatures) {
    size_t n = res.composited;
    T suffix = T(0);
    for (size_t ii = n; ii-- > 0;) {
        const auto& s = samples[ii];
        T w = res.weights[ii];
        T u = T(0);
        for (int c = 0; c < 3; ++c) u += d_cd[c] * s.feature.v[1 + c];
        for (int c = 0; c < 4; ++c) u += d_f[c] * s.feature.v[4 + c];
        if (!d_weights_extra.empty()) u += d_weights_extra[ii];
        for (int c = 0; c < 3; ++c) dfeatures[ii].v[1 + c] += w * d_cd[c];
        for (int c = 0; c < 4; ++c) dfeatures[ii].v[4 + c] += w * d_f[c];
        T trans_next = res.trans[ii + 1];
        T dsigma = s.delta * (u * trans_next - suffix);
        dfeatures[ii].v[0] += dsigma * activate_density_grad(s.feature.sigma_pre());
        suffix += u * w;
    }
}

// View-dependent shading: rgb = sigmoid(C_d + MLP_psi([C_d, F, sh(dir)])).
// The sigmoid is applied after the residual add, so per-sample colors are
// unbounded pre-activations.
constexpr int kShadeInWidth = 3 + 4 + kShDim; // 23

template <class T>
struct ShadeScratch {
    std::vector<T> mlp;
    std::array<T, kShadeInWidth> input{};
    Vec3<T> pre; // C_d + psi output, before sigmoid
};

template <class T>
Vec3<T> shade(const CompositeResult<T>& acc, const Vec3<T>& dir, const TinyMlp<T>& psi,
              ShadeScratch<T>* keep = nullptr) {
    if (psi.in_width() != kShadeInWidth || psi.out_width() != 3)
        throw std::invalid_argument("shade: view MLP must map 23 -> 3");
    ShadeScratch<T> local;
    ShadeScratch<T>& s = keep ? *keep : local;
    for (int c = 0; c < 3; ++c) s.input[c] = acc.c_d[c];
    for (int c = 0; c < 4; ++c) s.input[3 + c] = acc.f[c];
    auto sh = sh_encode(dir);
    for (int c = 0; c < kShDim; ++c) s.input[7 + c] = sh[c];
    s.mlp.assign(psi.scratch_size(), T(0));
    auto out = psi.forward(std::span<const T>(s.input.data(), kShadeInWidth), s.mlp);
    Vec3<T> rgb;
    for (int c = 0; c < 3; ++c) {
        s.pre[c] = acc.c_d[c] + out[c];
        rgb[c] = activate_sigmoid(s.pre[c]);
    }
    return rgb;
}

// Backward of shade. Accumulates psi gradients, returns upstream gradients on
// the accumulated C_d / F through both the residual and the MLP input paths.
template <class T>
void shade_backward(const ShadeScratch<T>& s, TinyMlp<T>& psi, const Vec3<T>& d_rgb,
                    Vec3<T>& d_cd, std::array<T, 4>& d_f) {
    std::array<T, 3> dpre;
    for (int c = 0; c < 3; ++c) {
        T sig = activate_sigmoid(s.pre[c]);
        dpre[c] = d_rgb[c] * sigmoid_grad_from_value(sig);
    }
    std::array<T, kShadeInWidth> din{};
    psi.backward(s.mlp, std::span<const T>(dpre.data(), 3),
                 std::span<T>(din.data(), kShadeInWidth));
    for (int c = 0; c < 3; ++c) d_cd[c] += dpre[c] + din[c];
    for (int c = 0; c < 4; ++c) d_f[c] += din[3 + c];
}

} // namespace ngprt
