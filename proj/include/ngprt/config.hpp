#pragma once

#include "ngprt/hash_grid.hpp"
#include "ngprt/fusion.hpp"

#include <json.hpp>

namespace ngprt {

// Base marching step inside the [-1,1]^3 ROI.
inline const double kBaseStep = 2.0 * std::sqrt(3.0) / 512.0;

// Full run configuration. `paper` carries the published constants; `desk` is
// the scaled profile used by the test suites (smaller tables, corner grid and
// iteration count, same structure).
struct RunConfig {
    std::string profile = "desk";
    uint64_t seed = 1;
    std::string scene = "toy";
    int n_views = 50;
    int n_test_views = 5;
    int image_width = 128;
    int image_height = 128;

    EncodingConfig enc;
    std::string fusion_mode = "separate_att_v";
    int train_grid_res = 64;

    int64_t iters = 5000;
    int ray_cap = 384;
    int64_t sample_cap = 3072;

    double lr_peak = 0.01;
    int64_t lr_warmup = 500;
    int64_t lr_total = 5000;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.99;
    double adam_eps = 1e-8;

    double eta_max = 0.01;
    int64_t eta_warmup = 2500;
    double huber_delta = 0.1;

    double gamma0 = 1.0;
    double gamma_min = 0.2217;
    double kappa = 0.001;
    double n_min = 3;

    int64_t occ_update_every = 256;
    double occ_ema = 0.95;
    double occ_alpha_thresh = 0.005;
    double occ_init_density = 1.0;

    int64_t checkpoint_every = 0; // 0: final checkpoint only

    FusionTag fusion_tag() const { return fusion_tag_from_name(fusion_mode); }

    static RunConfig desk() {
        RunConfig c;
        c.profile = "desk";
        c.enc.coarse_table_len = size_t(1) << 17;
        c.enc.fine_table_len = size_t(1) << 18;
        c.enc.fine_levels = 2;
        c.enc.corner_grid_res = 128;
        return c;
    }

    static RunConfig paper() {
        RunConfig c;
        c.profile = "paper";
        c.enc = EncodingConfig{}; // 2^21 / 2^22, L_C = 512
        c.train_grid_res = 512;
        c.iters = 100000;
        c.ray_cap = 8000;
        c.sample_cap = int64_t(1) << 21;
        c.lr_warmup = 1000;
        c.lr_total = 100000;
        c.eta_warmup = 50000;
        return c;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["profile"] = profile;
        j["seed"] = seed;
        j["scene"] = scene;
        j["n_views"] = n_views;
        j["n_test_views"] = n_test_views;
        j["image_width"] = image_width;
        j["image_height"] = image_height;
        j["fine_levels"] = enc.fine_levels;
        j["coarse_table_len"] = enc.coarse_table_len;
        j["fine_table_len"] = enc.fine_table_len;
        j["corner_grid_res"] = enc.corner_grid_res;
        j["fusion_mode"] = fusion_mode;
        j["train_grid_res"] = train_grid_res;
        j["iters"] = iters;
        j["ray_cap"] = ray_cap;
        j["sample_cap"] = sample_cap;
        j["lr_peak"] = lr_peak;
        j["lr_warmup"] = lr_warmup;
        j["lr_total"] = lr_total;
        j["adam_beta1"] = adam_beta1;
        j["adam_beta2"] = adam_beta2;
        j["adam_eps"] = adam_eps;
        j["eta_max"] = eta_max;
        j["eta_warmup"] = eta_warmup;
        j["huber_delta"] = huber_delta;
        j["gamma0"] = gamma0;
        j["gamma_min"] = gamma_min;
        j["kappa"] = kappa;
        j["n_min"] = n_min;
        j["occ_update_every"] = occ_update_every;
        j["occ_ema"] = occ_ema;
        j["occ_alpha_thresh"] = occ_alpha_thresh;
        j["occ_init_density"] = occ_init_density;
        j["checkpoint_every"] = checkpoint_every;
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        std::string profile = j.value("profile", "desk");
        c = profile == "paper" ? paper() : desk();
        auto get = [&](const char* k, auto& v) {
            if (j.contains(k)) v = j.at(k).get<std::decay_t<decltype(v)>>();
        };
        get("seed", c.seed);
        get("scene", c.scene);
        get("n_views", c.n_views);
        get("n_test_views", c.n_test_views);
        get("image_width", c.image_width);
        get("image_height", c.image_height);
        get("fine_levels", c.enc.fine_levels);
        get("coarse_table_len", c.enc.coarse_table_len);
        get("fine_table_len", c.enc.fine_table_len);
        get("corner_grid_res", c.enc.corner_grid_res);
        get("fusion_mode", c.fusion_mode);
        get("train_grid_res", c.train_grid_res);
        get("iters", c.iters);
        get("ray_cap", c.ray_cap);
        get("sample_cap", c.sample_cap);
        get("lr_peak", c.lr_peak);
        get("lr_warmup", c.lr_warmup);
        get("lr_total", c.lr_total);
        get("adam_beta1", c.adam_beta1);
        get("adam_beta2", c.adam_beta2);
        get("adam_eps", c.adam_eps);
        get("eta_max", c.eta_max);
        get("eta_warmup", c.eta_warmup);
        get("huber_delta", c.huber_delta);
        get("gamma0", c.gamma0);
        get("gamma_min", c.gamma_min);
        get("kappa", c.kappa);
        get("n_min", c.n_min);
        get("occ_update_every", c.occ_update_every);
        get("occ_ema", c.occ_ema);
        get("occ_alpha_thresh", c.occ_alpha_thresh);
        get("occ_init_density", c.occ_init_density);
        get("checkpoint_every", c.checkpoint_every);
        c.profile = profile;
        return c;
    }
};

// Learning-rate schedule: linear warmup 0 -> lr_peak over lr_warmup
// iterations, then linear decay to 0 at lr_total.
inline double lr_at(const RunConfig& c, int64_t iter) {
    if (iter <= 0) return 0;
    if (iter <= c.lr_warmup) return c.lr_peak * double(iter) / double(c.lr_warmup);
    if (iter >= c.lr_total) return 0;
    return c.lr_peak * double(c.lr_total - iter) / double(c.lr_total - c.lr_warmup);
}

// Distortion weight: linear warmup 0 -> eta_max over eta_warmup iterations.
inline double eta_at(const RunConfig& c, int64_t iter) {
    if (iter >= c.eta_warmup) return c.eta_max;
    return c.eta_max * double(iter) / double(c.eta_warmup);
}

} // namespace ngprt
