#pragma once

// Synthetic episodic benchmark: stacks of slices per "scan", one foreground
// shape per scan whose position, scale and outline drift smoothly through
// the stack. Shape families carry distinct appearance statistics so classes
// are learnable but overlap enough to exercise inter-class reasoning.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "pmcr/config.hpp"
#include "pmcr/io.hpp"
#include "pmcr/rng.hpp"
#include "pmcr/tensor.hpp"

namespace pmcr::synth {

namespace fs = std::filesystem;

struct ScanParams {
    double fg[3], bg[3];          // per-channel intensities
    double cx0, cy0, dx, dy;      // center path endpoints (fractions)
    double scale0, scale1;
    double rot0, rot1;            // ellipse orientation
    double ecc;                   // ellipse eccentricity
    double h2a, h2p, h3a, h3p;    // radial harmonics (blob outline)
    double ring_ratio;            // inner/outer radius for rings
    double texture, noise;
};

inline ScanParams draw_scan_params(const ClassSpec& cls, const SyntheticTaskSpec& spec, Rng& rng) {
    ScanParams p{};
    const double fg_base = rng.uniform(cls.intensity_lo, cls.intensity_hi);
    const double bg_base = rng.uniform(spec.background_lo, spec.background_hi);
    for (int c = 0; c < 3; ++c) {
        p.fg[c] = fg_base + rng.uniform(-0.05, 0.05);
        p.bg[c] = bg_base + rng.uniform(-0.05, 0.05);
    }
    const double margin = cls.scale_hi + 0.05;
    p.cx0 = rng.uniform(margin, 1.0 - margin);
    p.cy0 = rng.uniform(margin, 1.0 - margin);
    p.dx = rng.uniform(-0.12, 0.12);
    p.dy = rng.uniform(-0.12, 0.12);
    // keep the path inside the frame
    p.dx = std::clamp(p.cx0 + p.dx, margin, 1.0 - margin) - p.cx0;
    p.dy = std::clamp(p.cy0 + p.dy, margin, 1.0 - margin) - p.cy0;
    p.scale0 = rng.uniform(cls.scale_lo, cls.scale_hi);
    p.scale1 = rng.uniform(cls.scale_lo, cls.scale_hi);
    p.rot0 = rng.uniform(0.0, 3.14159265358979);
    p.rot1 = p.rot0 + rng.uniform(-0.6, 0.6);
    p.ecc = rng.uniform(0.25, 0.55);
    p.h2a = cls.deform * rng.uniform(0.4, 1.0);
    p.h2p = rng.uniform(0.0, 6.283185307179586);
    p.h3a = cls.deform * rng.uniform(0.2, 0.8);
    p.h3p = rng.uniform(0.0, 6.283185307179586);
    p.ring_ratio = rng.uniform(0.45, 0.6);
    p.texture = cls.texture;
    p.noise = spec.noise;
    return p;
}

// Inside test for one pixel at slice parameter t in [0, 1].
inline bool inside_shape(const ClassSpec& cls, const ScanParams& p, double t, double x, double y) {
    const double cx = p.cx0 + t * p.dx, cy = p.cy0 + t * p.dy;
    const double r = p.scale0 + t * (p.scale1 - p.scale0);
    const double ux = x - cx, uy = y - cy;
    const double dist = std::sqrt(ux * ux + uy * uy);
    if (dist > 2.0 * r) return false;
    const double theta = std::atan2(uy, ux);
    if (cls.family == "ellipse") {
        const double rot = p.rot0 + t * (p.rot1 - p.rot0);
        const double ca = std::cos(rot), sa = std::sin(rot);
        const double ex = (ux * ca + uy * sa) / (r * (1.0 + p.ecc));
        const double ey = (-ux * sa + uy * ca) / (r * (1.0 - p.ecc));
        return ex * ex + ey * ey <= 1.0;
    }
    // radial outline with two harmonics, phases drifting through the stack
    const double wobble = 1.0 + p.h2a * std::sin(2.0 * theta + p.h2p + 0.8 * t) +
                          p.h3a * std::sin(3.0 * theta + p.h3p - 0.5 * t);
    const double edge = r * std::max(0.3, wobble);
    if (cls.family == "blob") return dist <= edge;
    // ring
    return dist <= edge && dist >= edge * p.ring_ratio;
}

struct Slice {
    Tensor image;  // H x W x 3
    Mask mask;     // H x W
};

inline Slice render_slice(const ClassSpec& cls, const SyntheticTaskSpec& spec, const ScanParams& p,
                          double t, Rng& rng) {
    const std::size_t n = spec.image_size;
    Slice s{Tensor({n, n, 3}), Mask(n, n)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double y = (double(i) + 0.5) / double(n), x = (double(j) + 0.5) / double(n);
            const bool in = inside_shape(cls, p, t, x, y);
            if (in) s.mask(i, j) = std::uint8_t(cls.id);
            for (std::size_t c = 0; c < 3; ++c) {
                const double base = in ? p.fg[c] : p.bg[c];
                const double sigma = in ? p.texture : p.noise;
                s.image(i, j, c) = std::clamp(base + sigma * rng.normal(), 0.0, 1.0);
            }
        }
    return s;
}

struct ScanRecord {
    std::string name;
    int class_id = 0;
    std::string role;  // train | test
    std::vector<std::string> image_files, mask_files;
};

struct DatasetIndex {
    SyntheticTaskSpec spec;
    std::uint64_t seed = 0;
    std::vector<ScanRecord> scans;
    fs::path root;

    std::vector<int> class_ids(const std::string& role_filter) const {
        std::vector<int> out;
        for (const auto& c : spec.classes)
            if (role_filter.empty() || c.role == role_filter) out.push_back(c.id);
        return out;
    }
    std::vector<const ScanRecord*> scans_of(int class_id, const std::string& role) const {
        std::vector<const ScanRecord*> out;
        for (const auto& s : scans)
            if (s.class_id == class_id && (role.empty() || s.role == role)) out.push_back(&s);
        return out;
    }
};

// Writes images/ masks/ and a manifest; deterministic for a fixed seed.
inline DatasetIndex generate_dataset(const SyntheticTaskSpec& spec, const std::string& out_dir,
                                     std::uint64_t seed) {
    spec.validate();
    DatasetIndex index;
    index.spec = spec;
    index.seed = seed;
    index.root = out_dir;
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "masks");

    Rng master(seed);
    json scans_json = json::array();
    for (const auto& cls : spec.classes) {
        const std::size_t n_train = cls.role == "base" ? spec.scans_per_class_train : 0;
        const std::size_t n_test = spec.scans_per_class_test;
        for (std::size_t k = 0; k < n_train + n_test; ++k) {
            const std::string role = k < n_train ? "train" : "test";
            ScanRecord rec;
            rec.class_id = cls.id;
            rec.role = role;
            char buf[64];
            std::snprintf(buf, sizeof buf, "c%d_%s_%03zu", cls.id, role.c_str(),
                          k < n_train ? k : k - n_train);
            rec.name = buf;

            Rng rng = master.fork(std::uint64_t(cls.id) * 1000 + k);
            ScanParams params = draw_scan_params(cls, spec, rng);
            for (std::size_t sl = 0; sl < spec.slices_per_scan; ++sl) {
                const double t = spec.slices_per_scan == 1
                                     ? 0.5
                                     : double(sl) / double(spec.slices_per_scan - 1);
                Slice slice = render_slice(cls, spec, params, t, rng);
                std::string img = "images/" + rec.name + "_s" + std::to_string(sl) + ".pmt";
                std::string msk = "masks/" + rec.name + "_s" + std::to_string(sl) + ".pmt";
                write_tensor((fs::path(out_dir) / img).string(), slice.image);
                write_mask((fs::path(out_dir) / msk).string(), slice.mask);
                rec.image_files.push_back(img);
                rec.mask_files.push_back(msk);
            }
            scans_json.push_back(json{{"name", rec.name},
                                      {"class", rec.class_id},
                                      {"role", rec.role},
                                      {"images", rec.image_files},
                                      {"masks", rec.mask_files}});
            index.scans.push_back(std::move(rec));
        }
    }
    json manifest{{"format", "pmcr-dataset-v1"},
                  {"seed", seed},
                  {"spec", task_spec_to_json(spec)},
                  {"scans", scans_json}};
    write_json_file((fs::path(out_dir) / "manifest.json").string(), manifest);
    return index;
}

inline DatasetIndex load_dataset(const std::string& dir) {
    json manifest = read_json_file((fs::path(dir) / "manifest.json").string());
    if (manifest.value("format", "") != "pmcr-dataset-v1")
        throw InvalidSpec("not a pmcr dataset: " + dir);
    DatasetIndex index;
    index.spec = task_spec_from_json(manifest.at("spec"));
    index.seed = manifest.value("seed", 0ull);
    index.root = dir;
    for (const auto& sj : manifest.at("scans")) {
        ScanRecord rec;
        rec.name = sj.at("name").get<std::string>();
        rec.class_id = sj.at("class").get<int>();
        rec.role = sj.at("role").get<std::string>();
        rec.image_files = sj.at("images").get<std::vector<std::string>>();
        rec.mask_files = sj.at("masks").get<std::vector<std::string>>();
        index.scans.push_back(std::move(rec));
    }
    return index;
}

inline Slice load_slice(const DatasetIndex& index, const ScanRecord& scan, std::size_t slice) {
    return {read_tensor((index.root / scan.image_files.at(slice)).string()),
            read_mask((index.root / scan.mask_files.at(slice)).string())};
}

// In-memory cache of a whole dataset; the default benchmark is ~15 MB.
struct CachedDataset {
    DatasetIndex index;
    std::vector<std::vector<Slice>> slices;  // per scan

    static CachedDataset load(const std::string& dir) {
        CachedDataset d;
        d.index = load_dataset(dir);
        d.slices.resize(d.index.scans.size());
        for (std::size_t i = 0; i < d.index.scans.size(); ++i) {
            const auto& rec = d.index.scans[i];
            for (std::size_t s = 0; s < rec.image_files.size(); ++s)
                d.slices[i].push_back(load_slice(d.index, rec, s));
        }
        return d;
    }

    std::vector<std::size_t> scan_ids_of(int class_id, const std::string& role) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < index.scans.size(); ++i)
            if (index.scans[i].class_id == class_id &&
                (role.empty() || index.scans[i].role == role))
                out.push_back(i);
        return out;
    }
};

}  // namespace pmcr::synth
