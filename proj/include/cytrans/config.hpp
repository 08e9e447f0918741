#ifndef CYTRANS_CONFIG_HPP
#define CYTRANS_CONFIG_HPP

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "serialize.hpp"
#include "tensor.hpp"

namespace cytrans {

// Eq-weight defaults; the order matches the weighted sum
// dm, adv, cyc, idt, lps, dcl.
struct LossWeights {
    float dm  = 5e-2f;
    float adv = 1.0f;
    float cyc = 10.0f;
    float idt = 5.0f;
    float lps = 0.5f;
    float dcl = 0.02f;
};

struct DCLConfig {
    int vec_dim   = 7;     // N
    float tau     = 0.1f;  // temperature
};

struct DenoiserConfig {
    int width    = 16;  // base channel count, doubled after the downsample
    int time_dim = 64;
};

struct TranslatorConfig {
    int width    = 8;  // time-attention block width; doubled per downsample
    int n_down   = 2;
    int n_res    = 6;
    int n_up     = 2;
    int heads    = 4;
    int time_dim = 64;
    bool time_conditioned = true;
};

struct DiscriminatorConfig {
    int width        = 16;
    int out_channels = 7;  // matches DCLConfig::vec_dim
};

struct ExtractorConfig {
    std::vector<int> widths{8, 16, 24, 32, 48};  // one per tap, shallow to deep
    uint64_t seed = 900;
};

enum class Ablation { None, NoJoint, NoTime };

inline std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::NoJoint: return "no-joint";
        case Ablation::NoTime: return "no-time";
        default: return "none";
    }
}

inline Ablation ablation_from_string(const std::string& s) {
    if (s == "none") return Ablation::None;
    if (s == "no-joint") return Ablation::NoJoint;
    if (s == "no-time") return Ablation::NoTime;
    throw TensorError("unknown ablation '" + s + "'");
}

struct TrainConfig {
    std::string preset = "desk";
    int total_iters  = 1600;
    int warmup_iters = 500;
    int batch_size   = 6;
    int image_size   = 32;
    int channels     = 1;

    // diffusion optimizer: AdamW with cosine-decayed lr
    float diff_lr_start     = 1e-4f;
    float diff_lr_end       = 1e-5f;
    float diff_weight_decay = 1e-2f;
    float diff_beta1        = 0.9f;

    // translator / discriminator optimizer: Adam, constant lr
    float tra_lr    = 2e-4f;
    float gan_beta1 = 0.5f;

    float beta2     = 0.999f;
    float adam_eps  = 1e-8f;
    float clip_norm = 1.0f;
    float ema_decay = 0.999f;

    uint64_t seed = 1;
    int log_every = 1;
    int ckpt_every = 0;  // 0: only final

    Ablation ablate = Ablation::None;

    LossWeights weights;
    DCLConfig dcl;
    DenoiserConfig den;
    TranslatorConfig tra;
    DiscriminatorConfig disc;
    ExtractorConfig ext;

    std::string data_dir;
    std::string run_dir;

    void validate() const {
        if (warmup_iters > total_iters) throw TensorError("warmup_iters > total_iters");
        if (batch_size < 2) throw TensorError("batch_size must be >= 2");
        if (tra.n_down != tra.n_up) throw TensorError("translator needs n_down == n_up");
        if (dcl.vec_dim < 2 || dcl.tau <= 0) throw TensorError("bad DCL config");
        if (disc.out_channels != dcl.vec_dim)
            throw TensorError("discriminator out_channels must equal the DCL vector dim");
        if (image_size % (1 << tra.n_down) != 0 || image_size % 2 != 0)
            throw TensorError("image_size incompatible with network strides");
    }
};

// CPU-sized default, tuned so a full run finishes in minutes on a single
// core while keeping roughly a 1:3 warmup:total split.
inline TrainConfig desk_preset() { return TrainConfig{}; }

// Faithful full-size settings: 100k iterations, 50k warmup, batch 24,
// AdamW 1e-4 -> 1e-5, Adam 2e-4, translator depth (3, 12, 3).
inline TrainConfig paper_preset() {
    TrainConfig c;
    c.preset       = "paper";
    c.total_iters  = 100000;
    c.warmup_iters = 50000;
    c.batch_size   = 24;
    c.tra.n_down   = 3;
    c.tra.n_res    = 12;
    c.tra.n_up     = 3;
    return c;
}

inline TrainConfig preset_by_name(const std::string& name) {
    if (name == "desk") return desk_preset();
    if (name == "paper") return paper_preset();
    throw TensorError("unknown preset '" + name + "'");
}

struct SamplerConfig {
    int steps     = 200;
    uint64_t seed = 0;
};

// 100 steps for same-modality pairs, 200 for cross-modality pairs.
inline int default_steps_for_task(const std::string& task) {
    if (task == "textures") return 100;
    return 200;
}

// ------------------------------------------------------------- kv round trip

namespace cfgio {

inline std::string fmt(float v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", (double)v);
    return buf;
}

}  // namespace cfgio

inline std::vector<std::pair<std::string, std::string>> to_kv(const TrainConfig& c) {
    using P = std::pair<std::string, std::string>;
    std::vector<P> kv;
    auto add = [&](const std::string& k, const std::string& v) { kv.emplace_back(k, v); };
    add("preset", c.preset);
    add("total_iters", std::to_string(c.total_iters));
    add("warmup_iters", std::to_string(c.warmup_iters));
    add("batch_size", std::to_string(c.batch_size));
    add("image_size", std::to_string(c.image_size));
    add("channels", std::to_string(c.channels));
    add("diff_lr_start", cfgio::fmt(c.diff_lr_start));
    add("diff_lr_end", cfgio::fmt(c.diff_lr_end));
    add("diff_weight_decay", cfgio::fmt(c.diff_weight_decay));
    add("diff_beta1", cfgio::fmt(c.diff_beta1));
    add("tra_lr", cfgio::fmt(c.tra_lr));
    add("gan_beta1", cfgio::fmt(c.gan_beta1));
    add("beta2", cfgio::fmt(c.beta2));
    add("adam_eps", cfgio::fmt(c.adam_eps));
    add("clip_norm", cfgio::fmt(c.clip_norm));
    add("ema_decay", cfgio::fmt(c.ema_decay));
    add("seed", std::to_string(c.seed));
    add("log_every", std::to_string(c.log_every));
    add("ckpt_every", std::to_string(c.ckpt_every));
    add("ablate", to_string(c.ablate));
    add("lambda_dm", cfgio::fmt(c.weights.dm));
    add("lambda_adv", cfgio::fmt(c.weights.adv));
    add("lambda_cyc", cfgio::fmt(c.weights.cyc));
    add("lambda_idt", cfgio::fmt(c.weights.idt));
    add("lambda_lps", cfgio::fmt(c.weights.lps));
    add("lambda_dcl", cfgio::fmt(c.weights.dcl));
    add("dcl_vec_dim", std::to_string(c.dcl.vec_dim));
    add("dcl_tau", cfgio::fmt(c.dcl.tau));
    add("den_width", std::to_string(c.den.width));
    add("den_time_dim", std::to_string(c.den.time_dim));
    add("tra_width", std::to_string(c.tra.width));
    add("tra_n_down", std::to_string(c.tra.n_down));
    add("tra_n_res", std::to_string(c.tra.n_res));
    add("tra_n_up", std::to_string(c.tra.n_up));
    add("tra_heads", std::to_string(c.tra.heads));
    add("tra_time_dim", std::to_string(c.tra.time_dim));
    add("disc_width", std::to_string(c.disc.width));
    add("disc_out_channels", std::to_string(c.disc.out_channels));
    add("ext_seed", std::to_string(c.ext.seed));
    add("data_dir", c.data_dir);
    add("run_dir", c.run_dir);
    return kv;
}

inline void apply_kv(TrainConfig& c, const std::map<std::string, std::string>& kv) {
    auto geti = [&](const char* k, int& dst) {
        auto it = kv.find(k);
        if (it != kv.end()) dst = std::stoi(it->second);
    };
    auto getf = [&](const char* k, float& dst) {
        auto it = kv.find(k);
        if (it != kv.end()) dst = std::stof(it->second);
    };
    auto gets = [&](const char* k, std::string& dst) {
        auto it = kv.find(k);
        if (it != kv.end()) dst = it->second;
    };
    gets("preset", c.preset);
    geti("total_iters", c.total_iters);
    geti("warmup_iters", c.warmup_iters);
    geti("batch_size", c.batch_size);
    geti("image_size", c.image_size);
    geti("channels", c.channels);
    getf("diff_lr_start", c.diff_lr_start);
    getf("diff_lr_end", c.diff_lr_end);
    getf("diff_weight_decay", c.diff_weight_decay);
    getf("diff_beta1", c.diff_beta1);
    getf("tra_lr", c.tra_lr);
    getf("gan_beta1", c.gan_beta1);
    getf("beta2", c.beta2);
    getf("adam_eps", c.adam_eps);
    getf("clip_norm", c.clip_norm);
    getf("ema_decay", c.ema_decay);
    if (auto it = kv.find("seed"); it != kv.end()) c.seed = std::stoull(it->second);
    geti("log_every", c.log_every);
    geti("ckpt_every", c.ckpt_every);
    if (auto it = kv.find("ablate"); it != kv.end()) c.ablate = ablation_from_string(it->second);
    getf("lambda_dm", c.weights.dm);
    getf("lambda_adv", c.weights.adv);
    getf("lambda_cyc", c.weights.cyc);
    getf("lambda_idt", c.weights.idt);
    getf("lambda_lps", c.weights.lps);
    getf("lambda_dcl", c.weights.dcl);
    geti("dcl_vec_dim", c.dcl.vec_dim);
    getf("dcl_tau", c.dcl.tau);
    geti("den_width", c.den.width);
    geti("den_time_dim", c.den.time_dim);
    geti("tra_width", c.tra.width);
    geti("tra_n_down", c.tra.n_down);
    geti("tra_n_res", c.tra.n_res);
    geti("tra_n_up", c.tra.n_up);
    geti("tra_heads", c.tra.heads);
    geti("tra_time_dim", c.tra.time_dim);
    geti("disc_width", c.disc.width);
    geti("disc_out_channels", c.disc.out_channels);
    if (auto it = kv.find("ext_seed"); it != kv.end()) c.ext.seed = std::stoull(it->second);
    gets("data_dir", c.data_dir);
    gets("run_dir", c.run_dir);
    c.tra.time_conditioned = (c.ablate != Ablation::NoTime);
}

}  // namespace cytrans

#endif
