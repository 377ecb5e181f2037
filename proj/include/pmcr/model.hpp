#pragma once

// Trainable parameter container and the on-disk model archive: a directory
// of .pmt tensors plus a JSON manifest carrying shapes, hyperparameters,
// class memory and rng state.

#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pmcr/config.hpp"
#include "pmcr/crr.hpp"
#include "pmcr/encoder.hpp"
#include "pmcr/io.hpp"
#include "pmcr/linalg.hpp"
#include "pmcr/pcm.hpp"
#include "pmcr/rng.hpp"

namespace pmcr {

struct CrrParams {
    Tensor W_q;          // (H_l W_l) x N_q
    Tensor W_s1, W_s2;   // D_s x D_l
    Tensor W_g;          // D_l x D_l
    Tensor W_c;          // D_u x D_l
    Tensor W_c1, W_c2;   // bag_capacity x (n1 n2)
    Tensor Q_k;          // D_u x D_l x n1 x n2
};

struct Model {
    Hyperparams hp;
    std::size_t image_size = 64;
    std::size_t k_shot = 1;
    std::size_t bag_capacity = 0;
    encoder::EncoderParams enc;
    pcm::PcmParams pcm_params;
    CrrParams crr_params;
    crr::ClassMemory memory;
    std::set<int> base_classes;  // classes seen during training
    std::uint64_t init_seed = 0;

    std::size_t feature_hw() const {
        const std::size_t side = image_size / enc.total_stride();
        return side * side;
    }
};

namespace detail {

inline Tensor uniform_tensor(Dims dims, double bound, Rng& rng) {
    Tensor t(std::move(dims));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

}  // namespace detail

// Bag capacity covers the worst case: full superpixel sets for K supports,
// nu memory centroids per possibly-missing class, plus the query bag.
inline std::size_t bag_capacity_for(const Hyperparams& hp, std::size_t k_shot,
                                    std::size_t class_count) {
    return hp.N_s_max * k_shot + hp.nu * class_count + hp.N_q;
}

inline Model init_model(const Hyperparams& hp, std::size_t image_size, std::size_t k_shot,
                        std::size_t class_count, std::uint64_t seed) {
    hp.validate();
    Model m;
    m.hp = hp;
    m.image_size = image_size;
    m.k_shot = k_shot;
    m.init_seed = seed;
    Rng rng(seed);
    m.enc = encoder::init_encoder(hp.D_l, rng);
    if (image_size % m.enc.total_stride() != 0)
        throw IndivisibleDims("image size not divisible by encoder stride");

    auto bank = [&](std::size_t heads) {
        std::vector<AttentionWeights> b;
        const double bound = 1.0 / std::sqrt(double(hp.D_l));
        for (std::size_t h = 0; h < heads; ++h)
            b.push_back({detail::uniform_tensor({hp.D_l, hp.d}, bound, rng),
                         detail::uniform_tensor({hp.D_l, hp.d}, bound, rng),
                         detail::uniform_tensor({hp.D_l, hp.d}, bound, rng)});
        return b;
    };
    m.pcm_params.support_bank = bank(hp.H_heads);
    m.pcm_params.query_bank = bank(hp.H_heads);
    m.pcm_params.joint_bank = bank(hp.H_heads);

    m.bag_capacity = bag_capacity_for(hp, k_shot, class_count);
    const std::size_t hw = m.feature_hw();
    const double dl_bound = 1.0 / std::sqrt(double(hp.D_l));
    m.crr_params.W_q = detail::uniform_tensor({hw, hp.N_q}, 1.0 / std::sqrt(double(hw)), rng);
    m.crr_params.W_s1 = detail::uniform_tensor({hp.D_s, hp.D_l}, dl_bound, rng);
    m.crr_params.W_s2 = detail::uniform_tensor({hp.D_s, hp.D_l}, dl_bound, rng);
    m.crr_params.W_g = detail::uniform_tensor({hp.D_l, hp.D_l}, 0.1 * dl_bound, rng);
    m.crr_params.W_c = detail::uniform_tensor({hp.D_u, hp.D_l}, dl_bound, rng);
    m.crr_params.W_c1 = detail::uniform_tensor({m.bag_capacity, hp.n1 * hp.n2},
                                               0.1 / std::sqrt(double(m.bag_capacity)), rng);
    m.crr_params.W_c2 = detail::uniform_tensor({m.bag_capacity, hp.n1 * hp.n2},
                                               0.1 / std::sqrt(double(m.bag_capacity)), rng);
    // near-identity refinement kernel: center tap carries the channel
    // identity so the refined query embedding starts aligned with the
    // support embedding the classifier compares against
    m.crr_params.Q_k = detail::uniform_tensor({hp.D_u, hp.D_l, hp.n1, hp.n2}, 0.03, rng);
    for (std::size_t c = 0; c < std::min(hp.D_u, hp.D_l); ++c)
        m.crr_params.Q_k(c, c, hp.n1 / 2, hp.n2 / 2) += 1.0;

    m.memory = crr::ClassMemory(hp.nu, rng.fork(0x6d656d));
    return m;
}

// Stable parameter enumeration: SGD and the archive both use this order.
inline std::vector<std::pair<std::string, Tensor*>> parameters(Model& m) {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < m.enc.layers.size(); ++i) {
        out.push_back({"enc.k" + std::to_string(i), &m.enc.layers[i].kernel});
        out.push_back({"enc.b" + std::to_string(i), &m.enc.layers[i].bias});
    }
    auto add_bank = [&](const std::string& tag, std::vector<AttentionWeights>& bank) {
        for (std::size_t h = 0; h < bank.size(); ++h) {
            out.push_back({"pcm." + tag + ".q" + std::to_string(h), &bank[h].W_q});
            out.push_back({"pcm." + tag + ".k" + std::to_string(h), &bank[h].W_k});
            out.push_back({"pcm." + tag + ".v" + std::to_string(h), &bank[h].W_v});
        }
    };
    add_bank("s", m.pcm_params.support_bank);
    add_bank("q", m.pcm_params.query_bank);
    add_bank("b", m.pcm_params.joint_bank);
    out.push_back({"crr.Wq", &m.crr_params.W_q});
    out.push_back({"crr.Ws1", &m.crr_params.W_s1});
    out.push_back({"crr.Ws2", &m.crr_params.W_s2});
    out.push_back({"crr.Wg", &m.crr_params.W_g});
    out.push_back({"crr.Wc", &m.crr_params.W_c});
    out.push_back({"crr.Wc1", &m.crr_params.W_c1});
    out.push_back({"crr.Wc2", &m.crr_params.W_c2});
    out.push_back({"crr.Qk", &m.crr_params.Q_k});
    return out;
}

// ---- archive ----

inline void save_model(Model& m, const std::string& dir, std::uint64_t iteration, Rng& train_rng) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    json tensors = json::object();
    for (auto& [name, t] : parameters(m)) {
        const std::string file = name + ".pmt";
        write_tensor((fs::path(dir) / file).string(), *t);
        tensors[name] = json{{"file", file}, {"dims", t->dims()}};
    }
    json memory = json::object();
    memory["capacity"] = m.memory.capacity();
    memory["rng"] = json{{"seed", m.memory.rng().seed()}, {"state", m.memory.rng().state()}};
    json mem_classes = json::object();
    for (const auto& [cls, buf] : m.memory.buffers()) {
        if (buf.entries.empty()) continue;
        const std::string file = "memory.c" + std::to_string(cls) + ".pmt";
        write_tensor((fs::path(dir) / file).string(), m.memory.stored(cls));
        mem_classes[std::to_string(cls)] = json{{"file", file}, {"seen", buf.seen}};
    }
    memory["classes"] = mem_classes;

    json manifest{{"format", "pmcr-model-v1"},
                  {"hyperparams", hyperparams_to_json(m.hp)},
                  {"image_size", m.image_size},
                  {"k_shot", m.k_shot},
                  {"bag_capacity", m.bag_capacity},
                  {"init_seed", m.init_seed},
                  {"iteration", iteration},
                  {"base_classes", std::vector<int>(m.base_classes.begin(), m.base_classes.end())},
                  {"train_rng", json{{"seed", train_rng.seed()}, {"state", train_rng.state()}}},
                  {"encoder",
                   json{{"leaky_slope", m.enc.leaky_slope},
                        {"strides", json::array({m.enc.layers[0].stride, m.enc.layers[1].stride,
                                                 m.enc.layers[2].stride})}}},
                  {"tensors", tensors},
                  {"memory", memory}};
    write_json_file((fs::path(dir) / "manifest.json").string(), manifest);
}

inline Model load_model(const std::string& dir) {
    namespace fs = std::filesystem;
    json manifest = read_json_file((fs::path(dir) / "manifest.json").string());
    if (manifest.value("format", "") != "pmcr-model-v1")
        throw InvalidSpec("not a pmcr model archive: " + dir);
    Model m;
    m.hp = hyperparams_from_json(manifest.at("hyperparams"));
    m.image_size = manifest.at("image_size").get<std::size_t>();
    m.k_shot = manifest.at("k_shot").get<std::size_t>();
    m.bag_capacity = manifest.at("bag_capacity").get<std::size_t>();
    m.init_seed = manifest.value("init_seed", 0ull);
    for (int c : manifest.at("base_classes").get<std::vector<int>>()) m.base_classes.insert(c);

    // rebuild layer skeletons, then overwrite every tensor from disk
    Rng scratch(0);
    m.enc = encoder::init_encoder(m.hp.D_l, scratch);
    m.enc.leaky_slope = manifest.at("encoder").at("leaky_slope").get<double>();
    auto bank0 = [&](std::size_t heads) {
        std::vector<AttentionWeights> b(heads);
        for (auto& w : b) {
            w.W_q = Tensor({m.hp.D_l, m.hp.d});
            w.W_k = Tensor({m.hp.D_l, m.hp.d});
            w.W_v = Tensor({m.hp.D_l, m.hp.d});
        }
        return b;
    };
    m.pcm_params.support_bank = bank0(m.hp.H_heads);
    m.pcm_params.query_bank = bank0(m.hp.H_heads);
    m.pcm_params.joint_bank = bank0(m.hp.H_heads);

    const json& tensors = manifest.at("tensors");
    for (auto& [name, t] : parameters(m)) {
        if (!tensors.contains(name)) throw MalformedHeader("archive missing tensor " + name);
        *t = read_tensor((fs::path(dir) / tensors.at(name).at("file").get<std::string>()).string());
    }

    const json& memory = manifest.at("memory");
    Rng mem_rng(0);
    mem_rng.restore(memory.at("rng").at("seed").get<std::uint64_t>(),
                    memory.at("rng").at("state").get<std::uint64_t>());
    m.memory = crr::ClassMemory(memory.at("capacity").get<std::size_t>(), mem_rng);
    for (auto it = memory.at("classes").begin(); it != memory.at("classes").end(); ++it) {
        const int cls = std::stoi(it.key());
        Tensor stored = read_tensor((fs::path(dir) / it.value().at("file").get<std::string>()).string());
        auto& buf = m.memory.buffers_mutable()[cls];
        buf.seen = it.value().at("seen").get<std::uint64_t>();
        for (std::size_t j = 0; j < stored.cols(); ++j) {
            std::vector<double> col(stored.rows());
            for (std::size_t d = 0; d < stored.rows(); ++d) col[d] = stored(d, j);
            buf.entries.push_back(std::move(col));
        }
    }
    return m;
}

}  // namespace pmcr
