#pragma once

// Segmentation metrics, the volumetric evaluation protocol, and the
// RFC-4180 metrics CSV.

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "pmcr/errors.hpp"
#include "pmcr/tensor.hpp"

namespace pmcr {

// 2 |A n B| / (|A| + |B|) for one class label; both-empty counts as 1.
inline double dice_overlap(const Mask& pred, const Mask& gt, int cls) {
    if (pred.height() != gt.height() || pred.width() != gt.width())
        throw DimMismatch("dice_overlap mask dims");
    std::size_t inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const bool pa = int(pred.data()[i]) == cls, pb = int(gt.data()[i]) == cls;
        inter += pa && pb;
        a += pa;
        b += pb;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * double(inter) / double(a + b);
}

// mean over classes present in gt of |pred_c n gt_c| / |pred_c u gt_c|
inline double miou(const Mask& pred, const Mask& gt, std::size_t C) {
    if (pred.height() != gt.height() || pred.width() != gt.width())
        throw DimMismatch("miou mask dims");
    double acc = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < C; ++c) {
        std::size_t inter = 0, uni = 0, in_gt = 0;
        for (std::size_t i = 0; i < pred.numel(); ++i) {
            const bool pa = pred.data()[i] == c, pb = gt.data()[i] == c;
            inter += pa && pb;
            uni += pa || pb;
            in_gt += pb;
        }
        if (in_gt == 0) continue;
        ++present;
        acc += double(inter) / double(uni);
    }
    return present == 0 ? 0.0 : acc / double(present);
}

struct ChunkRange {
    std::size_t begin = 0, end = 0;  // [begin, end)
    std::size_t middle() const { return begin + (end - begin - 1) / 2; }
};

// P contiguous chunks; the remainder goes to the leading chunks.
inline std::vector<ChunkRange> chunk_ranges(std::size_t n, std::size_t P) {
    if (n == 0) throw EmptyScan("cannot chunk an empty scan");
    if (P < 1) throw InvalidSpec("P_chunks must be >= 1");
    if (P > n) P = n;
    std::vector<ChunkRange> out(P);
    const std::size_t base = n / P, rem = n % P;
    std::size_t pos = 0;
    for (std::size_t j = 0; j < P; ++j) {
        const std::size_t len = base + (j < rem ? 1 : 0);
        out[j] = {pos, pos + len};
        pos += len;
    }
    return out;
}

struct VolumeSlice {
    Tensor image;  // H x W x 3
    Mask mask;     // ground truth (query side) or support annotation
};

using SlicePredictor =
    std::function<Mask(const VolumeSlice& support, const Tensor& query_image)>;

// Chunked volumetric protocol: split both scans into P chunks, use the
// middle slice of each support chunk as the reference for every query slice
// in the matching chunk, restack, and score 3D Dice for `cls`.
inline double evaluate_volume(const SlicePredictor& predict,
                              const std::vector<VolumeSlice>& query_scan,
                              const std::vector<VolumeSlice>& support_scan, std::size_t P,
                              int cls) {
    if (query_scan.empty() || support_scan.empty()) throw EmptyScan("evaluate_volume");
    auto q_chunks = chunk_ranges(query_scan.size(), P);
    auto s_chunks = chunk_ranges(support_scan.size(), P);
    const std::size_t chunks = std::min(q_chunks.size(), s_chunks.size());
    std::size_t inter = 0, a = 0, b = 0;
    for (std::size_t j = 0; j < chunks; ++j) {
        const VolumeSlice& support = support_scan[s_chunks[j].middle()];
        for (std::size_t s = q_chunks[j].begin; s < q_chunks[j].end; ++s) {
            Mask pred = predict(support, query_scan[s].image);
            const Mask& gt = query_scan[s].mask;
            for (std::size_t i = 0; i < pred.numel(); ++i) {
                const bool pa = int(pred.data()[i]) == cls, pb = int(gt.data()[i]) == cls;
                inter += pa && pb;
                a += pa;
                b += pb;
            }
        }
    }
    if (a + b == 0) return 1.0;
    return 2.0 * double(inter) / double(a + b);
}

// ---- metrics CSV (RFC-4180: CRLF line endings, numeric fields) ----

struct MetricsRow {
    std::uint64_t episode_id = 0;
    int class_id = 0;
    double dice = 0.0, miou = 0.0;
    double loss_se = 0.0, loss_be = 0.0, loss_dc = 0.0, loss_all = 0.0;
    std::uint64_t iteration = 0;
    double wall_ms = 0.0;
};

inline std::string metrics_csv_header() {
    return "episode,class,dice,miou,loss_se,loss_be,loss_dc,loss_all,iteration,wall_ms\r\n";
}

inline std::string format_csv_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string format_metrics_row(const MetricsRow& r) {
    std::string s;
    s += std::to_string(r.episode_id);
    s += ',';
    s += std::to_string(r.class_id);
    for (double v : {r.dice, r.miou, r.loss_se, r.loss_be, r.loss_dc, r.loss_all}) {
        s += ',';
        s += format_csv_number(v);
    }
    s += ',';
    s += std::to_string(r.iteration);
    s += ',';
    s += format_csv_number(r.wall_ms);
    s += "\r\n";
    return s;
}

}  // namespace pmcr
