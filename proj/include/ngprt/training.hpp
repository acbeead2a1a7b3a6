#pragma once

#include "ngprt/config.hpp"
#include "ngprt/model.hpp"
#include "ngprt/occupancy.hpp"
#include "ngprt/scene.hpp"

namespace ngprt {

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Standard Huber, per channel, summed: quadratic below delta, linear above.
template <class T>
T huber_loss(const Vec3<T>& pred, const Vec3<T>& gt, T delta) {
    T sum = T(0);
    for (int c = 0; c < 3; ++c) {
        T e = std::abs(pred[c] - gt[c]);
        sum += e <= delta ? T(0.5) * e * e : delta * (e - T(0.5) * delta);
    }
    return sum;
}

template <class T>
Vec3<T> huber_loss_grad(const Vec3<T>& pred, const Vec3<T>& gt, T delta) {
    Vec3<T> g;
    for (int c = 0; c < 3; ++c) {
        T e = pred[c] - gt[c];
        g[c] = std::abs(e) <= delta ? e : (e > T(0) ? delta : -delta);
    }
    return g;
}

// L_dist = sum_{i,j} w_i w_j |m_i - m_j| + (1/3) sum_i w_i^2 (t_{i+1} - t_i),
// with m_i the interval midpoints. Computed in O(n) via prefix sums over the
// t-ordered samples. Gradients flow to the weights only; sample positions
// come from non-differentiable marching.
template <class T>
T distortion_loss(std::span<const T> weights, std::span<const T> t0, std::span<const T> dt,
                  std::span<T> dw = {}) {
    size_t n = weights.size();
    T pair_term = T(0), self_term = T(0);
    T wsum = T(0), wmsum = T(0);
    std::vector<T> mids(n);
    for (size_t i = 0; i < n; ++i) mids[i] = t0[i] + dt[i] / T(2);
    for (size_t i = 0; i < n; ++i) {
        // m sorted ascending: sum_j<i w_i w_j (m_i - m_j)
        pair_term += weights[i] * (mids[i] * wsum - wmsum);
        wsum += weights[i];
        wmsum += weights[i] * mids[i];
        self_term += weights[i] * weights[i] * dt[i];
    }
    T loss = T(2) * pair_term + self_term / T(3);
    if (!dw.empty()) {
        // d/dw_k = 2 sum_j w_j |m_k - m_j| + (2/3) w_k dt_k
        T pre_w = T(0), pre_wm = T(0);
        std::vector<T> suf_w(n + 1, T(0)), suf_wm(n + 1, T(0));
        for (size_t i = n; i-- > 0;) {
            suf_w[i] = suf_w[i + 1] + weights[i];
            suf_wm[i] = suf_wm[i + 1] + weights[i] * mids[i];
        }
        for (size_t k = 0; k < n; ++k) {
            T lhs = mids[k] * pre_w - pre_wm;
            T rhs = suf_wm[k + 1] - mids[k] * suf_w[k + 1];
            dw[k] += T(2) * (lhs + rhs) + T(2.0 / 3.0) * weights[k] * dt[k];
            pre_w += weights[k];
            pre_wm += weights[k] * mids[k];
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Adam with the warmup/decay schedule. Sparse parameter groups are updated
// lazily over the set of entries that have ever received a nonzero gradient;
// an untouched entry has zero gradient and zero moments, for which the
// textbook update is an exact no-op, so the semantics are unchanged.
// ---------------------------------------------------------------------------

template <class T>
struct AdamOptimizer {
    T beta1 = T(0.9), beta2 = T(0.99), eps = T(1e-8);
    int64_t t = 0;

    struct GroupState {
        std::vector<T> m, v;
        std::vector<uint8_t> ever;
        std::vector<uint32_t> active;
    };
    std::vector<GroupState> state;

    void init(const GradTape<T>& tape, T b1, T b2, T e) {
        beta1 = b1;
        beta2 = b2;
        eps = e;
        t = 0;
        state.clear();
        state.resize(tape.groups.size());
        for (size_t g = 0; g < tape.groups.size(); ++g) {
            size_t n = tape.groups[g]->size();
            state[g].m.assign(n, T(0));
            state[g].v.assign(n, T(0));
            if (!tape.groups[g]->dense) state[g].ever.assign(n, 0);
        }
    }

    void update_one(ParamGroup<T>& p, GroupState& s, uint32_t i, T lr, T c1, T c2) {
        T g = p.grad[i];
        if (!std::isfinite(double(g)))
            throw std::runtime_error("adam_step: non-finite gradient in group " + p.name +
                                     " at index " + std::to_string(i));
        s.m[i] = beta1 * s.m[i] + (T(1) - beta1) * g;
        s.v[i] = beta2 * s.v[i] + (T(1) - beta2) * g * g;
        T mhat = s.m[i] / c1;
        T vhat = s.v[i] / c2;
        p.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }

    void step(GradTape<T>& tape, T lr) {
        ++t;
        T c1 = T(1) - std::pow(beta1, T(t));
        T c2 = T(1) - std::pow(beta2, T(t));
        for (size_t g = 0; g < tape.groups.size(); ++g) {
            ParamGroup<T>& p = *tape.groups[g];
            GroupState& s = state[g];
            if (p.dense) {
                for (uint32_t i = 0; i < p.size(); ++i) update_one(p, s, i, lr, c1, c2);
            } else {
                for (uint32_t i : p.touched)
                    if (!s.ever[i]) {
                        s.ever[i] = 1;
                        s.active.push_back(i);
                    }
                for (uint32_t i : s.active) update_one(p, s, i, lr, c1, c2);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Marching step auto-tuner (scaler gamma on the base step).
// ---------------------------------------------------------------------------

struct StepTuner {
    double gamma = 1.0;
    double gamma_min = 0.2217;
    double kappa = 0.001;
    double n_min = 3;
    double s0 = kBaseStep;

    // gamma <- min(1, (1+kappa) gamma) when the batch keeps enough samples
    // per ray, else max(gamma_min, (1-kappa) gamma).
    void update(double n_batch_mean) {
        if (n_batch_mean >= n_min)
            gamma = std::min(1.0, (1.0 + kappa) * gamma);
        else
            gamma = std::max(gamma_min, (1.0 - kappa) * gamma);
    }
    double step() const { return gamma * s0; }
};

// ---------------------------------------------------------------------------
// Training occupancy: a single bit grid plus an EMA density cache, refreshed
// over 1/8 of the voxels per call in round-robin order.
// ---------------------------------------------------------------------------

struct TrainOccupancy {
    int res = 0;
    BitGrid grid;
    std::vector<float> density;
    uint64_t calls = 0;

    void init(int r, double init_density) {
        res = r;
        grid = BitGrid(r);
        density.assign(size_t(r) * r * r, float(init_density));
        calls = 0;
        refresh_bits(kBaseStep, 0.005);
    }

    void refresh_bits(double s0, double alpha_thresh) {
        for (int z = 0; z < res; ++z)
            for (int y = 0; y < res; ++y)
                for (int x = 0; x < res; ++x) {
                    size_t i = grid.index(x, y, z);
                    bool occ = 1.0 - std::exp(-double(density[i]) * s0) > alpha_thresh;
                    grid.set(x, y, z, occ);
                }
    }

    // d <- max(ema * d, sigma at a jittered in-voxel point) over the voxels
    // of the current round-robin phase, then recompute all bits.
    template <class T>
    void update(const NgpRtModel<T>& model, Rng& rng, double s0, double ema,
                double alpha_thresh) {
        CornerCache<T> cache(model, /*keep_scratch=*/false);
        uint64_t phase = calls++ % 8;
        double vsz = Roi::extent / res;
        for (int z = 0; z < res; ++z)
            for (int y = 0; y < res; ++y)
                for (int x = 0; x < res; ++x) {
                    size_t i = grid.index(x, y, z);
                    if (i % 8 != phase) continue;
                    Vec3<T> p{T(Roi::lo + (x + rng.uniform()) * vsz),
                              T(Roi::lo + (y + rng.uniform()) * vsz),
                              T(Roi::lo + (z + rng.uniform()) * vsz)};
                    DeferredFeature<T> f = decode_point(model, cache, p);
                    T sigma = activate_density(f.sigma_pre());
                    density[i] = float(std::max(double(ema) * density[i], double(sigma)));
                }
        refresh_bits(s0, alpha_thresh);
    }
};

// ---------------------------------------------------------------------------
// Batch collection
// ---------------------------------------------------------------------------

template <class T>
struct BatchRay {
    Ray<T> ray;
    Vec3<T> gt;
    uint32_t first_sample = 0;
    uint32_t n_samples = 0;
};

template <class T>
struct TrainBatch {
    std::vector<BatchRay<T>> rays;
    std::vector<T> sample_t;
    std::vector<T> sample_dt;
    double n_batch_mean = 0;
};

// Draws random training pixels, marches each against the training grid at the
// tuned step, and accumulates until either the ray or the sample cap would be
// exceeded. Deterministic given the rng state.
template <class T>
TrainBatch<T> collect_batch(const PosedDataset& ds, std::span<const int> frame_ids,
                            const BitGrid& grid, T step, int ray_cap, int64_t sample_cap,
                            Rng& rng) {
    if (ds.frames.empty() || frame_ids.empty())
        throw std::invalid_argument("collect_batch: empty dataset");
    TrainBatch<T> batch;
    int64_t attempts = 0, max_attempts = int64_t(ray_cap) * 32 + 64;
    while (int(batch.rays.size()) < ray_cap && attempts++ < max_attempts) {
        int frame = frame_ids[rng.below(frame_ids.size())];
        int px = int(rng.below(uint64_t(ds.width)));
        int py = int(rng.below(uint64_t(ds.height)));
        Ray<T> ray;
        if (!generate_rays(ds, size_t(frame), px + 0.5, py + 0.5, ray)) continue; // misses ROI
        BatchRay<T> br;
        br.ray = ray;
        const float* gt = ds.images[size_t(frame)].pixel(px, py);
        br.gt = {T(gt[0]), T(gt[1]), T(gt[2])};
        br.first_sample = uint32_t(batch.sample_t.size());
        std::vector<T> ts;
        march_train_grid(ray, grid, step, [&](T t) {
            ts.push_back(t);
            return true;
        });
        if (int64_t(batch.sample_t.size() + ts.size()) > sample_cap) break;
        for (T t : ts) {
            batch.sample_t.push_back(t);
            batch.sample_dt.push_back(step);
        }
        br.n_samples = uint32_t(ts.size());
        batch.rays.push_back(br);
    }
    batch.n_batch_mean = batch.rays.empty()
                             ? 0.0
                             : double(batch.sample_t.size()) / double(batch.rays.size());
    return batch;
}

// ---------------------------------------------------------------------------
// Batch forward/backward. Marching is frozen in the batch, so the loss is a
// pure function of the parameters; the same evaluator drives training,
// finite-difference checks, and the NaN diagnostics.
// ---------------------------------------------------------------------------

template <class T>
struct BatchStats {
    double loss = 0;       // mean over rays of (huber + eta * dist)
    double color_loss = 0; // mean huber
    double dist_loss = 0;  // mean distortion
    double mse = 0;        // mean squared pixel error (for PSNR logging)
};

template <class T>
BatchStats<T> batch_forward(NgpRtModel<T>& model, const TrainBatch<T>& batch, T eta,
                            T huber_delta, bool with_grad) {
    BatchStats<T> stats;
    if (batch.rays.empty()) return stats;
    CornerCache<T> cache(model, with_grad);
    const T inv_n = T(1) / T(batch.rays.size());

    std::vector<RaySample<T>> samples;
    std::vector<PointDecodeRecord<T>> records;
    std::vector<T> dist_dw;
    std::vector<DeferredFeature<T>> dfeat;

    for (const auto& br : batch.rays) {
        size_t n = br.n_samples;
        samples.resize(n);
        if (with_grad) records.resize(n);
        for (size_t i = 0; i < n; ++i) {
            T t = batch.sample_t[br.first_sample + i];
            samples[i].t = t;
            samples[i].delta = batch.sample_dt[br.first_sample + i];
            Vec3<T> x = br.ray.at(t);
            for (int a = 0; a < 3; ++a) x[a] = ngprt::clamp(x[a], T(Roi::lo), T(Roi::hi));
            samples[i].feature =
                decode_point(model, cache, x, with_grad ? &records[i] : nullptr);
        }
        auto acc = composite(std::span<const RaySample<T>>(samples.data(), n),
                             /*early_stop=*/false);
        Vec3<T> rgb{T(0), T(0), T(0)};
        ShadeScratch<T> shade_scratch;
        bool shaded = acc.final_t < T(1);
        if (shaded)
            rgb = shade(acc, br.ray.dir, model.psi, with_grad ? &shade_scratch : nullptr);

        T closs = huber_loss(rgb, br.gt, huber_delta);
        dist_dw.assign(n, T(0));
        T dloss = distortion_loss(
            std::span<const T>(acc.weights.data(), n),
            std::span<const T>(batch.sample_t.data() + br.first_sample, n),
            std::span<const T>(batch.sample_dt.data() + br.first_sample, n),
            with_grad ? std::span<T>(dist_dw.data(), n) : std::span<T>{});
        stats.color_loss += double(closs);
        stats.dist_loss += double(dloss);
        for (int c = 0; c < 3; ++c) {
            double e = double(rgb[c]) - double(br.gt[c]);
            stats.mse += e * e;
        }

        if (with_grad) {
            Vec3<T> d_cd{T(0), T(0), T(0)};
            std::array<T, 4> d_f{};
            if (shaded) {
                Vec3<T> d_rgb = huber_loss_grad(rgb, br.gt, huber_delta);
                for (int c = 0; c < 3; ++c) d_rgb[c] *= inv_n;
                shade_backward(shade_scratch, model.psi, d_rgb, d_cd, d_f);
            }
            for (size_t i = 0; i < n; ++i) dist_dw[i] *= eta * inv_n;
            dfeat.assign(n, DeferredFeature<T>{});
            composite_backward(std::span<const RaySample<T>>(samples.data(), n), acc, d_cd,
                               d_f, std::span<const T>(dist_dw.data(), n),
                               std::span<DeferredFeature<T>>(dfeat.data(), n));
            for (size_t i = 0; i < n; ++i)
                decode_point_backward(model, cache, records[i], dfeat[i]);
        }
    }
    if (with_grad) cache.backward_flush(model);
    stats.color_loss /= double(batch.rays.size());
    stats.dist_loss /= double(batch.rays.size());
    stats.mse /= double(3 * batch.rays.size());
    stats.loss = stats.color_loss + double(eta) * stats.dist_loss;
    return stats;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainLogRow {
    int64_t iter;
    double loss, psnr, gamma, n_batch, lr, eta;
};

inline void write_train_log(const std::string& path, std::span<const TrainLogRow> rows) {
    std::ofstream f(path);
    f << "iter,loss,psnr,gamma,n_batch,lr,eta\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%lld,%.8g,%.4f,%.6f,%.3f,%.8g,%.8g\n",
                      (long long)r.iter, r.loss, r.psnr, r.gamma, r.n_batch, r.lr, r.eta);
        f << buf;
    }
}

template <class T>
class Trainer {
public:
    Trainer(NgpRtModel<T>& model, const RunConfig& cfg, const PosedDataset& dataset)
        : model_(model), cfg_(cfg), dataset_(&dataset), rng_(cfg.seed * 0x5851f42d4c957f2dull + 1) {
        occ_.init(cfg.train_grid_res, cfg.occ_init_density);
        tuner_.gamma = cfg.gamma0;
        tuner_.gamma_min = cfg.gamma_min;
        tuner_.kappa = cfg.kappa;
        tuner_.n_min = cfg.n_min;
        opt_.init(model.tape, T(cfg.adam_beta1), T(cfg.adam_beta2), T(cfg.adam_eps));
        int n_train = int(dataset.frames.size()) - cfg.n_test_views;
        if (n_train <= 0) throw std::invalid_argument("Trainer: no training views left");
        for (int i = 0; i < n_train; ++i) train_frames_.push_back(i);
    }

    // One optimization step; returns the logged row.
    TrainLogRow step() {
        ++iter_;
        auto batch = collect_batch(*dataset_, train_frames_, occ_.grid, T(tuner_.step()),
                                   cfg_.ray_cap, cfg_.sample_cap, rng_);
        T eta = T(eta_at(cfg_, iter_));
        model_.tape.zero_grads();
        auto stats =
            batch_forward(model_, batch, eta, T(cfg_.huber_delta), /*with_grad=*/true);
        if (!std::isfinite(stats.loss))
            throw std::runtime_error("train: non-finite loss at iter " + std::to_string(iter_) +
                                     "; last checkpoint is the last good state");
        double lr = lr_at(cfg_, iter_);
        opt_.step(model_.tape, T(lr));
        model_.tape.zero_grads();
        tuner_.update(batch.n_batch_mean);
        if (iter_ % cfg_.occ_update_every == 0)
            occ_.update(model_, rng_, kBaseStep, cfg_.occ_ema, cfg_.occ_alpha_thresh);
        TrainLogRow row{iter_, stats.loss,
                        stats.mse > 0 ? 10.0 * std::log10(1.0 / stats.mse) : 99.0,
                        tuner_.gamma, batch.n_batch_mean, lr, double(eta)};
        log_.push_back(row);
        return row;
    }

    int64_t iteration() const { return iter_; }
    const TrainOccupancy& occupancy() const { return occ_; }
    TrainOccupancy& occupancy() { return occ_; }
    const StepTuner& tuner() const { return tuner_; }
    StepTuner& tuner() { return tuner_; }
    Rng& rng() { return rng_; }
    const std::vector<TrainLogRow>& log() const { return log_; }
    std::span<const int> train_frames() const { return train_frames_; }

private:
    NgpRtModel<T>& model_;
    RunConfig cfg_;
    const PosedDataset* dataset_;
    Rng rng_;
    TrainOccupancy occ_;
    StepTuner tuner_;
    AdamOptimizer<T> opt_;
    std::vector<int> train_frames_;
    std::vector<TrainLogRow> log_;
    int64_t iter_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint format (magic "NGCK", version 1): config JSON, trainer state,
// every tape group by name, the training occupancy, and a trailing CRC32 of
// everything after the magic.
// ---------------------------------------------------------------------------

namespace detail {
inline void put_bytes(std::vector<unsigned char>& out, const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    out.insert(out.end(), b, b + n);
}
template <class V>
void put_pod(std::vector<unsigned char>& out, const V& v) {
    put_bytes(out, &v, sizeof v);
}
struct ByteReader {
    const unsigned char* p;
    size_t len, off = 0;
    void read(void* dst, size_t n, const char* what) {
        if (off + n > len)
            throw std::runtime_error(std::string("checkpoint: truncated reading ") + what +
                                     " at offset " + std::to_string(off));
        std::memcpy(dst, p + off, n);
        off += n;
    }
    template <class V>
    V pod(const char* what) {
        V v;
        read(&v, sizeof v, what);
        return v;
    }
};
} // namespace detail

struct CheckpointState {
    int64_t iter = 0;
    double gamma = 1.0;
    uint64_t occ_calls = 0;
    uint64_t rng_state = 0;
    int64_t adam_t = 0;
};

template <class T>
void save_checkpoint(const std::string& path, const RunConfig& cfg, const NgpRtModel<T>& model,
                     const TrainOccupancy& occ, const CheckpointState& st) {
    std::vector<unsigned char> out;
    detail::put_bytes(out, "NGCK", 4);
    detail::put_pod(out, uint32_t(1));
    std::string cfg_json = cfg.to_json().dump();
    detail::put_pod(out, uint64_t(cfg_json.size()));
    detail::put_bytes(out, cfg_json.data(), cfg_json.size());
    detail::put_pod(out, int64_t(st.iter));
    detail::put_pod(out, double(st.gamma));
    detail::put_pod(out, uint64_t(st.occ_calls));
    detail::put_pod(out, uint64_t(st.rng_state));
    detail::put_pod(out, int64_t(st.adam_t));
    detail::put_pod(out, uint64_t(model.tape.groups.size()));
    for (const auto* g : model.tape.groups) {
        detail::put_pod(out, uint64_t(g->name.size()));
        detail::put_bytes(out, g->name.data(), g->name.size());
        detail::put_pod(out, uint64_t(g->size()));
        for (T v : g->value) {
            float f = float(v);
            detail::put_pod(out, f);
        }
    }
    detail::put_pod(out, uint32_t(occ.res));
    detail::put_pod(out, uint64_t(occ.grid.words.size()));
    detail::put_bytes(out, occ.grid.words.data(), occ.grid.words.size() * 8);
    detail::put_bytes(out, occ.density.data(), occ.density.size() * 4);
    uint32_t crc = crc32(out.data() + 4, out.size() - 4);
    detail::put_pod(out, crc);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
    if (!f) throw std::runtime_error("save_checkpoint: write failed");
}

template <class T>
RunConfig load_checkpoint(const std::string& path, NgpRtModel<T>& model, TrainOccupancy& occ,
                          CheckpointState& st) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::memcmp(buf.data(), "NGCK", 4) != 0)
        throw std::runtime_error("load_checkpoint: bad magic");
    uint32_t stored_crc;
    std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
    if (crc32(buf.data() + 4, buf.size() - 8) != stored_crc)
        throw std::runtime_error("load_checkpoint: checksum mismatch");
    detail::ByteReader r{buf.data() + 4, buf.size() - 8};
    if (r.pod<uint32_t>("version") != 1)
        throw std::runtime_error("load_checkpoint: unsupported version");
    uint64_t jlen = r.pod<uint64_t>("config length");
    std::string cfg_json(jlen, '\0');
    r.read(cfg_json.data(), jlen, "config");
    RunConfig cfg = RunConfig::from_json(nlohmann::json::parse(cfg_json));
    st.iter = r.pod<int64_t>("iter");
    st.gamma = r.pod<double>("gamma");
    st.occ_calls = r.pod<uint64_t>("occ_calls");
    st.rng_state = r.pod<uint64_t>("rng_state");
    st.adam_t = r.pod<int64_t>("adam_t");

    model.init(cfg.enc, cfg.fusion_tag(), cfg.seed);
    uint64_t n_groups = r.pod<uint64_t>("group count");
    if (n_groups != model.tape.groups.size())
        throw std::runtime_error("load_checkpoint: group count mismatch");
    for (auto* g : model.tape.groups) {
        uint64_t nlen = r.pod<uint64_t>("name length");
        std::string name(nlen, '\0');
        r.read(name.data(), nlen, "group name");
        if (name != g->name)
            throw std::runtime_error("load_checkpoint: group order mismatch at " + name);
        uint64_t n = r.pod<uint64_t>("group size");
        if (n != g->size()) throw std::runtime_error("load_checkpoint: size mismatch in " + name);
        for (auto& v : g->value) v = T(r.pod<float>("value"));
    }
    uint32_t res = r.pod<uint32_t>("occupancy res");
    occ.res = int(res);
    occ.grid = BitGrid(int(res));
    uint64_t nwords = r.pod<uint64_t>("occupancy words");
    if (nwords != occ.grid.words.size())
        throw std::runtime_error("load_checkpoint: occupancy size mismatch");
    r.read(occ.grid.words.data(), nwords * 8, "occupancy bits");
    occ.density.assign(size_t(res) * res * res, 0.f);
    r.read(occ.density.data(), occ.density.size() * 4, "density cache");
    occ.calls = st.occ_calls;
    return cfg;
}

} // namespace ngprt
