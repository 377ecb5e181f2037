#pragma once

// JSON config surface: training config and synthetic task spec.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmcr/episode.hpp"
#include "pmcr/errors.hpp"

namespace pmcr {

using nlohmann::json;

inline json hyperparams_to_json(const Hyperparams& h) {
    return json{{"S", h.S},
                {"mu", h.mu},
                {"lambda1", h.lambda1},
                {"lambda2", h.lambda2},
                {"H_heads", h.H_heads},
                {"D_l", h.D_l},
                {"d", h.d},
                {"D_u", h.D_u},
                {"D_s", h.D_s},
                {"G", h.G},
                {"N_s_max", h.N_s_max},
                {"nu", h.nu},
                {"N_q", h.N_q},
                {"n1", h.n1},
                {"n2", h.n2},
                {"slic_iters", h.slic_iters},
                {"sinkhorn_iters", h.sinkhorn_iters},
                {"sinkhorn_tol", h.sinkhorn_tol},
                {"lr", h.lr},
                {"lr_decay", h.lr_decay},
                {"P_chunks", h.P_chunks}};
}

inline Hyperparams hyperparams_from_json(const json& j) {
    Hyperparams h;
    h.S = j.value("S", h.S);
    h.mu = j.value("mu", h.mu);
    h.lambda1 = j.value("lambda1", h.lambda1);
    h.lambda2 = j.value("lambda2", h.lambda2);
    h.H_heads = j.value("H_heads", h.H_heads);
    h.D_l = j.value("D_l", h.D_l);
    h.d = j.contains("d") ? j.at("d").get<std::size_t>() : h.D_l / h.H_heads;
    h.D_u = j.value("D_u", h.D_l);
    h.D_s = j.value("D_s", h.D_s);
    h.G = j.value("G", h.G);
    h.N_s_max = j.value("N_s_max", h.N_s_max);
    h.nu = j.value("nu", h.nu);
    h.N_q = j.value("N_q", h.N_q);
    h.n1 = j.value("n1", h.n1);
    h.n2 = j.value("n2", h.n2);
    h.slic_iters = j.value("slic_iters", h.slic_iters);
    h.sinkhorn_iters = j.value("sinkhorn_iters", h.sinkhorn_iters);
    h.sinkhorn_tol = j.value("sinkhorn_tol", h.sinkhorn_tol);
    h.lr = j.value("lr", h.lr);
    h.lr_decay = j.value("lr_decay", h.lr_decay);
    h.P_chunks = j.value("P_chunks", h.P_chunks);
    h.validate();
    return h;
}

struct AblationFlags {
    bool pcm_on = true;
    bool crr_on = true;
    bool dcl_on = true;
};

struct TrainConfig {
    Hyperparams hp;
    std::size_t iterations = 2000;
    std::uint64_t seed = 1;
    AblationFlags ablation;
    std::string data_dir;
    std::string out_dir;
    std::size_t k_shot = 1;
    std::string upsample = "nearest";  // or "bilinear"
    bool record_timing = false;        // wall_ms column stays 0 when false
    std::size_t checkpoint_every = 0;  // 0: final archive only

    void validate() const {
        hp.validate();
        if (iterations < 1) throw InvalidSpec("iterations must be >= 1");
        if (k_shot < 1) throw InvalidSpec("k_shot must be >= 1");
        if (upsample != "nearest" && upsample != "bilinear")
            throw InvalidSpec("upsample must be nearest or bilinear");
    }
};

inline json train_config_to_json(const TrainConfig& c) {
    return json{{"hyperparams", hyperparams_to_json(c.hp)},
                {"iterations", c.iterations},
                {"seed", c.seed},
                {"ablation",
                 json{{"pcm_on", c.ablation.pcm_on},
                      {"crr_on", c.ablation.crr_on},
                      {"dcl_on", c.ablation.dcl_on}}},
                {"data_dir", c.data_dir},
                {"out_dir", c.out_dir},
                {"k_shot", c.k_shot},
                {"upsample", c.upsample},
                {"record_timing", c.record_timing},
                {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    if (j.contains("hyperparams")) c.hp = hyperparams_from_json(j.at("hyperparams"));
    c.iterations = j.value("iterations", c.iterations);
    c.seed = j.value("seed", c.seed);
    if (j.contains("ablation")) {
        const json& a = j.at("ablation");
        c.ablation.pcm_on = a.value("pcm_on", true);
        c.ablation.crr_on = a.value("crr_on", true);
        c.ablation.dcl_on = a.value("dcl_on", true);
    }
    c.data_dir = j.value("data_dir", std::string());
    c.out_dir = j.value("out_dir", std::string());
    c.k_shot = j.value("k_shot", c.k_shot);
    c.upsample = j.value("upsample", c.upsample);
    c.record_timing = j.value("record_timing", c.record_timing);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

struct ClassSpec {
    int id = 1;
    std::string family = "ellipse";  // ellipse | blob | ring
    std::string role = "base";       // base | novel
    double intensity_lo = 0.6, intensity_hi = 0.9;
    double scale_lo = 0.18, scale_hi = 0.3;  // radius / image side
    double deform = 0.2;                     // radial harmonic amplitude
    double texture = 0.04;                   // foreground noise
};

struct SyntheticTaskSpec {
    std::size_t image_size = 64;
    std::size_t slices_per_scan = 9;
    std::size_t scans_per_class_train = 6;
    std::size_t scans_per_class_test = 4;
    double noise = 0.04;  // background noise
    double background_lo = 0.1, background_hi = 0.3;
    std::vector<ClassSpec> classes;

    void validate() const {
        if (image_size < 8 || image_size % 4 != 0)
            throw InvalidSpec("image_size must be >= 8 and divisible by 4");
        if (slices_per_scan < 1) throw InvalidSpec("slices_per_scan must be >= 1");
        if (classes.empty()) throw InvalidSpec("at least one class required");
        std::vector<int> ids;
        bool any_base = false;
        for (const auto& c : classes) {
            if (c.id <= 0 || c.id > 255) throw InvalidSpec("class ids must be in 1..255");
            for (int seen : ids)
                if (seen == c.id) throw InvalidSpec("duplicate class id");
            ids.push_back(c.id);
            if (c.family != "ellipse" && c.family != "blob" && c.family != "ring")
                throw InvalidSpec("unknown shape family " + c.family);
            if (c.role != "base" && c.role != "novel") throw InvalidSpec("role must be base|novel");
            if (c.role == "base") any_base = true;
            if (c.scale_lo <= 0 || c.scale_hi > 0.45 || c.scale_lo > c.scale_hi)
                throw InvalidSpec("scale range invalid");
        }
        if (!any_base) throw InvalidSpec("need at least one base class");
    }
};

inline json task_spec_to_json(const SyntheticTaskSpec& s) {
    json classes = json::array();
    for (const auto& c : s.classes)
        classes.push_back(json{{"id", c.id},
                               {"family", c.family},
                               {"role", c.role},
                               {"intensity", json::array({c.intensity_lo, c.intensity_hi})},
                               {"scale", json::array({c.scale_lo, c.scale_hi})},
                               {"deform", c.deform},
                               {"texture", c.texture}});
    return json{{"image_size", s.image_size},
                {"slices_per_scan", s.slices_per_scan},
                {"scans_per_class_train", s.scans_per_class_train},
                {"scans_per_class_test", s.scans_per_class_test},
                {"noise", s.noise},
                {"background", json::array({s.background_lo, s.background_hi})},
                {"classes", classes}};
}

inline SyntheticTaskSpec task_spec_from_json(const json& j) {
    SyntheticTaskSpec s;
    s.image_size = j.value("image_size", s.image_size);
    s.slices_per_scan = j.value("slices_per_scan", s.slices_per_scan);
    s.scans_per_class_train = j.value("scans_per_class_train", s.scans_per_class_train);
    s.scans_per_class_test = j.value("scans_per_class_test", s.scans_per_class_test);
    s.noise = j.value("noise", s.noise);
    if (j.contains("background")) {
        s.background_lo = j.at("background").at(0).get<double>();
        s.background_hi = j.at("background").at(1).get<double>();
    }
    if (j.contains("classes")) {
        s.classes.clear();
        for (const auto& cj : j.at("classes")) {
            ClassSpec c;
            c.id = cj.at("id").get<int>();
            c.family = cj.value("family", c.family);
            c.role = cj.value("role", c.role);
            if (cj.contains("intensity")) {
                c.intensity_lo = cj.at("intensity").at(0).get<double>();
                c.intensity_hi = cj.at("intensity").at(1).get<double>();
            }
            if (cj.contains("scale")) {
                c.scale_lo = cj.at("scale").at(0).get<double>();
                c.scale_hi = cj.at("scale").at(1).get<double>();
            }
            c.deform = cj.value("deform", c.deform);
            c.texture = cj.value("texture", c.texture);
            s.classes.push_back(c);
        }
    }
    s.validate();
    return s;
}

// The default benchmark: two base classes, one novel class, 64 x 64.
inline SyntheticTaskSpec default_task_spec() {
    SyntheticTaskSpec s;
    ClassSpec ellipse;
    ellipse.id = 1;
    ellipse.family = "ellipse";
    ellipse.role = "base";
    ellipse.intensity_lo = 0.65;
    ellipse.intensity_hi = 0.95;
    ClassSpec blob;
    blob.id = 2;
    blob.family = "blob";
    blob.role = "base";
    blob.intensity_lo = 0.45;
    blob.intensity_hi = 0.75;
    blob.deform = 0.35;
    ClassSpec ring;
    ring.id = 3;
    ring.family = "ring";
    ring.role = "novel";
    ring.intensity_lo = 0.55;
    ring.intensity_hi = 0.85;
    s.classes = {ellipse, blob, ring};
    return s;
}

inline TrainConfig default_train_config() {
    TrainConfig c;
    return c;
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidSpec("cannot open " + path);
    json j;
    in >> j;
    return j;
}

inline void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InvalidSpec("cannot open for write " + path);
    out << j.dump(2) << "\n";
}

}  // namespace pmcr
