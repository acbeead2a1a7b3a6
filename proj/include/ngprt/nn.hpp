#pragma once

#include "ngprt/common.hpp"

#include <cassert>
#include <functional>

namespace ngprt {

// One named block of trainable parameters with its accumulated gradient.
// Sparse groups (hash tables) track which entries received a nonzero gradient
// so that clearing and optimizer updates touch only live rows; the observable
// semantics stay identical to dense accumulation because an entry whose
// gradient and moments are exactly zero is a no-op under Adam.
template <class T>
struct ParamGroup {
    std::string name;
    std::vector<T> value;
    std::vector<T> grad;
    bool dense = true;
    std::vector<uint32_t> touched; // entries written this step (sparse groups, may repeat)

    void init(std::string n, size_t count, bool dense_group) {
        name = std::move(n);
        value.assign(count, T(0));
        grad.assign(count, T(0));
        dense = dense_group;
        touched.clear();
    }

    size_t size() const { return value.size(); }

    void add_grad(uint32_t i, T g) {
        if (!dense && grad[i] == T(0) && g != T(0)) touched.push_back(i);
        grad[i] += g;
    }

    // Resets every gradient to exact zero.
    void clear_grads() {
        if (dense) {
            std::fill(grad.begin(), grad.end(), T(0));
        } else {
            for (uint32_t i : touched) grad[i] = T(0);
            touched.clear();
        }
    }
};

// Registry of parameter groups; the groups themselves are owned by the
// modules (hash levels, MLPs, global attention vectors). Registration order
// is the canonical order for checkpoints and optimizer state.
template <class T>
struct GradTape {
    std::vector<ParamGroup<T>*> groups;

    int add(ParamGroup<T>* g) {
        groups.push_back(g);
        return static_cast<int>(groups.size()) - 1;
    }
    void zero_grads() {
        for (auto* g : groups) g->clear_grads();
    }
    size_t total_params() const {
        size_t n = 0;
        for (auto* g : groups) n += g->size();
        return n;
    }
    ParamGroup<T>* find(const std::string& name) const {
        for (auto* g : groups)
            if (g->name == name) return g;
        return nullptr;
    }
};

// sigma = exp(clamp(pre, -15, 15)). The clamp realizes the truncated-gradient
// exponential: outside the window the derivative is defined as exact zero,
// which keeps densities finite in single precision.
constexpr double kDensityClamp = 15.0;

template <class T>
T activate_density(T pre) {
    return std::exp(clamp(pre, T(-kDensityClamp), T(kDensityClamp)));
}

template <class T>
T activate_density_grad(T pre) {
    if (pre < T(-kDensityClamp) || pre > T(kDensityClamp)) return T(0);
    return std::exp(pre);
}

template <class T>
T activate_sigmoid(T pre) {
    return T(1) / (T(1) + std::exp(-pre));
}

template <class T>
T sigmoid_grad_from_value(T s) {
    return s * (T(1) - s);
}

// Real spherical harmonics basis, degree 4 (l = 0..3), 16 outputs.
// Ordering is (l, m) lexicographic with m = -l..l; the constant table below is
// frozen into the checkpoint/baked formats. No Condon-Shortley phase.
constexpr int kShDegree = 4;
constexpr int kShDim = 16;

template <class T>
std::array<T, kShDim> sh_encode(const Vec3<T>& dir) {
    double len2 = double(dir.x) * dir.x + double(dir.y) * dir.y + double(dir.z) * dir.z;
    if (!almost_unit(len2))
        throw std::domain_error("sh_encode: direction must be unit length (|d|-1 > 1e-6)");
    const T x = dir.x, y = dir.y, z = dir.z;
    const T xx = x * x, yy = y * y, zz = z * z;
    std::array<T, kShDim> out;
    out[0] = T(0.28209479177387814); // 1/(2 sqrt(pi))
    out[1] = T(0.4886025119029199) * y;
    out[2] = T(0.4886025119029199) * z;
    out[3] = T(0.4886025119029199) * x;
    out[4] = T(1.0925484305920792) * x * y;
    out[5] = T(1.0925484305920792) * y * z;
    out[6] = T(0.31539156525252005) * (T(3) * zz - T(1));
    out[7] = T(1.0925484305920792) * x * z;
    out[8] = T(0.5462742152960396) * (xx - yy);
    out[9] = T(0.5900435899266435) * y * (T(3) * xx - yy);
    out[10] = T(2.890611442640554) * x * y * z;
    out[11] = T(0.4570457994644658) * y * (T(5) * zz - T(1));
    out[12] = T(0.3731763325901154) * z * (T(5) * zz - T(3));
    out[13] = T(0.4570457994644658) * x * (T(5) * zz - T(1));
    out[14] = T(1.445305721320277) * z * (xx - yy);
    out[15] = T(0.5900435899266435) * x * (xx - T(3) * yy);
    return out;
}

// Fully-connected network with ReLU hidden layers and a linear output layer.
// Output activations (exp for densities, sigmoid for colors/attention) are
// applied by the caller per modality.
template <class T>
struct TinyMlp {
    std::vector<int> widths;               // {in, hidden..., out}
    std::vector<ParamGroup<T>> weight;     // per layer, row-major (out x in)
    std::vector<ParamGroup<T>> bias;       // per layer

    int num_layers() const { return static_cast<int>(widths.size()) - 1; }
    int in_width() const { return widths.front(); }
    int out_width() const { return widths.back(); }

    // Scratch layout: activations of every layer back to back, input first.
    size_t scratch_size() const {
        size_t n = 0;
        for (int w : widths) n += static_cast<size_t>(w);
        return n;
    }

    void init(std::vector<int> layer_widths, const std::string& name, Rng& rng,
              GradTape<T>* tape = nullptr) {
        if (layer_widths.size() < 2) throw std::invalid_argument("TinyMlp: need >= 2 widths");
        widths = std::move(layer_widths);
        int n = num_layers();
        weight.resize(n);
        bias.resize(n);
        for (int k = 0; k < n; ++k) {
            int in = widths[k], out = widths[k + 1];
            weight[k].init(name + ".w" + std::to_string(k), size_t(in) * out, true);
            bias[k].init(name + ".b" + std::to_string(k), size_t(out), true);
            // He-uniform for ReLU layers, Xavier-uniform for the linear output.
            double bound = (k + 1 < n) ? std::sqrt(6.0 / in) : std::sqrt(6.0 / (in + out));
            for (auto& w : weight[k].value) w = T(rng.uniform(-bound, bound));
            if (tape) {
                tape->add(&weight[k]);
                tape->add(&bias[k]);
            }
        }
    }

    // scratch.size() == scratch_size(); returns a span over the output slice.
    std::span<T> forward(std::span<const T> in, std::span<T> scratch) const {
        if (static_cast<int>(in.size()) != in_width())
            throw std::invalid_argument("TinyMlp: input width mismatch");
        std::copy(in.begin(), in.end(), scratch.begin());
        size_t off = 0;
        for (int k = 0; k < num_layers(); ++k) {
            int wi = widths[k], wo = widths[k + 1];
            const T* a = scratch.data() + off;
            T* o = scratch.data() + off + wi;
            const T* W = weight[k].value.data();
            const T* b = bias[k].value.data();
            for (int r = 0; r < wo; ++r) {
                T acc = b[r];
                const T* wr = W + size_t(r) * wi;
                for (int c = 0; c < wi; ++c) acc += wr[c] * a[c];
                o[r] = (k + 1 < num_layers() && acc < T(0)) ? T(0) : acc;
            }
            off += wi;
        }
        return scratch.subspan(off, widths.back());
    }

    // Accumulates weight/bias gradients; optionally fills the input gradient.
    // `scratch` must hold the activations of the matching forward call.
    void backward(std::span<const T> scratch, std::span<const T> dout,
                  std::span<T> din = {}) {
        int n = num_layers();
        std::vector<size_t> offs(n + 1);
        for (int k = 0; k < n; ++k) offs[k + 1] = offs[k] + widths[k];

        std::vector<T> cur(dout.begin(), dout.end());
        std::vector<T> prev;
        for (int k = n - 1; k >= 0; --k) {
            int wi = widths[k], wo = widths[k + 1];
            const T* a = scratch.data() + offs[k];
            const T* post = scratch.data() + offs[k + 1];
            // hidden layers: kill upstream where ReLU was inactive
            if (k + 1 < n)
                for (int r = 0; r < wo; ++r)
                    if (post[r] <= T(0)) cur[r] = T(0);
            T* dW = weight[k].grad.data();
            T* db = bias[k].grad.data();
            prev.assign(size_t(wi), T(0));
            const T* W = weight[k].value.data();
            for (int r = 0; r < wo; ++r) {
                T u = cur[r];
                db[r] += u;
                T* dwr = dW + size_t(r) * wi;
                const T* wr = W + size_t(r) * wi;
                if (u != T(0)) {
                    for (int c = 0; c < wi; ++c) {
                        dwr[c] += u * a[c];
                        prev[c] += u * wr[c];
                    }
                }
            }
            cur.swap(prev);
        }
        if (!din.empty()) {
            if (din.size() != size_t(widths[0]))
                throw std::invalid_argument("TinyMlp: din width mismatch");
            for (size_t i = 0; i < din.size(); ++i) din[i] += cur[i];
        }
    }

    // Convenience for tests and one-off evaluations.
    std::vector<T> forward_alloc(std::span<const T> in) const {
        std::vector<T> scratch(scratch_size());
        auto out = forward(in, scratch);
        return std::vector<T>(out.begin(), out.end());
    }
};

// Central finite-difference check of the gradients stored in `tape` against a
// scalar function of the tape's parameter values. Checks every component of
// groups with <= max_per_group entries; larger groups are checked on a seeded
// random subset of max_per_group components biased toward entries with a
// nonzero backprop gradient. Relative error uses max(1, |bp|, |fd|) as the
// denominator so near-zero gradients are compared absolutely.
template <class T>
struct GradCheckResult {
    T max_rel_err = T(0);
    std::string worst_group;
    size_t worst_index = 0;
    T worst_bp = T(0), worst_fd = T(0);
};

template <class T, class Fn>
GradCheckResult<T> grad_check(Fn&& fn, GradTape<T>& tape, T step, Rng& rng,
                              int max_per_group = 256) {
    if (!(step > T(0))) throw std::invalid_argument("grad_check: step must be > 0");
    GradCheckResult<T> res;
    for (auto* g : tape.groups) {
        size_t n = g->size();
        std::vector<uint32_t> idx;
        if (n <= size_t(max_per_group)) {
            idx.resize(n);
            for (size_t i = 0; i < n; ++i) idx[i] = uint32_t(i);
        } else {
            std::vector<uint32_t> nz;
            for (size_t i = 0; i < n; ++i)
                if (g->grad[i] != T(0)) nz.push_back(uint32_t(i));
            int want_nz = std::min<int>(max_per_group * 7 / 8, int(nz.size()));
            for (int i = 0; i < want_nz; ++i) idx.push_back(nz[rng.below(nz.size())]);
            while (int(idx.size()) < max_per_group) idx.push_back(uint32_t(rng.below(n)));
        }
        for (uint32_t i : idx) {
            T saved = g->value[i];
            g->value[i] = saved + step;
            T fp = fn();
            g->value[i] = saved - step;
            T fm = fn();
            g->value[i] = saved;
            if (!std::isfinite(double(fp)) || !std::isfinite(double(fm)))
                throw std::runtime_error("grad_check: non-finite function value");
            T fd = (fp - fm) / (T(2) * step);
            T bp = g->grad[i];
            T denom = std::max(T(1), std::max(std::abs(bp), std::abs(fd)));
            T rel = std::abs(bp - fd) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_group = g->name;
                res.worst_index = i;
                res.worst_bp = bp;
                res.worst_fd = fd;
            }
        }
    }
    return res;
}

} // namespace ngprt
