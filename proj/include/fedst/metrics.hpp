#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "fedst/errors.hpp"

namespace fedst {

// Segmentation metrics. Overlap scores use the both-empty = 1.0 convention;
// surface distances are NULL when either mask lacks the class. HD95 uses the
// nearest-rank percentile on the pooled directed distances, so values are
// bit-reproducible.

using MaskView = std::vector<std::uint8_t>;

namespace detail {

inline void require_same_size(const MaskView& a, const MaskView& b, int h, int w) {
    const std::size_t n = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    if (a.size() != n || b.size() != n) throw DimensionError("metric masks must match h*w");
}

// Boundary pixels of one class region under 8-connectivity; pixels at the
// image border count as boundary.
inline std::vector<std::pair<int, int>> class_boundary(const MaskView& m, int h, int w, int cls) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (m[static_cast<std::size_t>(y) * w + x] != cls) continue;
            bool boundary = false;
            for (int dy = -1; dy <= 1 && !boundary; ++dy)
                for (int dx = -1; dx <= 1 && !boundary; ++dx) {
                    if (dx == 0 && dy == 0) continue;
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w ||
                        m[static_cast<std::size_t>(ny) * w + nx] != cls)
                        boundary = true;
                }
            if (boundary) out.emplace_back(x, y);
        }
    return out;
}

inline void directed_distances(const std::vector<std::pair<int, int>>& from,
                               const std::vector<std::pair<int, int>>& to,
                               std::vector<double>& pool) {
    for (const auto& [ax, ay] : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [bx, by] : to) {
            const double dx = ax - bx, dy = ay - by;
            best = std::min(best, dx * dx + dy * dy);
        }
        pool.push_back(std::sqrt(best));
    }
}

} // namespace detail

inline double dice(const MaskView& pred, const MaskView& gt, int h, int w, int cls) {
    detail::require_same_size(pred, gt, h, w);
    long inter = 0, np = 0, ng = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] == cls, g = gt[i] == cls;
        inter += p && g;
        np += p;
        ng += g;
    }
    if (np + ng == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

inline double iou(const MaskView& pred, const MaskView& gt, int h, int w, int cls) {
    detail::require_same_size(pred, gt, h, w);
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] == cls, g = gt[i] == cls;
        inter += p && g;
        uni += p || g;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

struct SurfaceDistances {
    std::optional<double> hd95;
    std::optional<double> assd;
};

/// Symmetric surface distances between the 8-connectivity boundaries of one
/// class. NULL when the class is missing from either mask.
inline SurfaceDistances surface_distances(const MaskView& pred, const MaskView& gt, int h, int w,
                                          int cls) {
    detail::require_same_size(pred, gt, h, w);
    const auto bp = detail::class_boundary(pred, h, w, cls);
    const auto bg = detail::class_boundary(gt, h, w, cls);
    if (bp.empty() || bg.empty()) return {};

    std::vector<double> pool;
    pool.reserve(bp.size() + bg.size());
    detail::directed_distances(bp, bg, pool);
    detail::directed_distances(bg, bp, pool);
    std::sort(pool.begin(), pool.end());

    SurfaceDistances out;
    // nearest-rank: smallest index k with k/N >= 0.95
    const std::size_t rank =
        static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(pool.size())));
    out.hd95 = pool[rank == 0 ? 0 : rank - 1];
    double sum = 0;
    for (double d : pool) sum += d;
    out.assd = sum / static_cast<double>(pool.size());
    return out;
}

inline std::optional<double> hd95(const MaskView& pred, const MaskView& gt, int h, int w, int cls) {
    return surface_distances(pred, gt, h, w, cls).hd95;
}

inline std::optional<double> assd(const MaskView& pred, const MaskView& gt, int h, int w, int cls) {
    return surface_distances(pred, gt, h, w, cls).assd;
}

struct ClassMetrics {
    double dice = 0;
    double iou = 0;
    std::optional<double> hd95;
    std::optional<double> assd;
};

/// Per-class scores plus the foreground mean (classes 1..C-1; distance means
/// skip NULL entries).
struct MetricReport {
    std::vector<ClassMetrics> per_class;
    ClassMetrics mean;
};

inline MetricReport evaluate_masks(const MaskView& pred, const MaskView& gt, int h, int w,
                                   int classes) {
    MetricReport rep;
    double dsum = 0, isum = 0;
    double hsum = 0, asum = 0;
    int n_fg = 0, n_dist = 0;
    for (int cls = 0; cls < classes; ++cls) {
        ClassMetrics cm;
        cm.dice = dice(pred, gt, h, w, cls);
        cm.iou = iou(pred, gt, h, w, cls);
        const SurfaceDistances sd = surface_distances(pred, gt, h, w, cls);
        cm.hd95 = sd.hd95;
        cm.assd = sd.assd;
        rep.per_class.push_back(cm);
        if (cls > 0) {
            dsum += cm.dice;
            isum += cm.iou;
            ++n_fg;
            if (sd.hd95) {
                hsum += *sd.hd95;
                asum += *sd.assd;
                ++n_dist;
            }
        }
    }
    if (n_fg) {
        rep.mean.dice = dsum / n_fg;
        rep.mean.iou = isum / n_fg;
    }
    if (n_dist) {
        rep.mean.hd95 = hsum / n_dist;
        rep.mean.assd = asum / n_dist;
    }
    return rep;
}

/// Accumulates reports over many clips (mean of per-clip values, NULLs
/// skipped per cell).
class MetricAccumulator {
public:
    explicit MetricAccumulator(int classes) : classes_(classes) {}

    void add(const MetricReport& rep) {
        if (static_cast<int>(rep.per_class.size()) != classes_)
            throw ContractError("metric accumulator: class count mismatch");
        if (rows_.empty()) rows_.resize(static_cast<std::size_t>(classes_) + 1);
        for (int c = 0; c <= classes_; ++c) {
            const ClassMetrics& cm =
                c < classes_ ? rep.per_class[static_cast<std::size_t>(c)] : rep.mean;
            auto& acc = rows_[static_cast<std::size_t>(c)];
            acc.dice_sum += cm.dice;
            acc.iou_sum += cm.iou;
            acc.n += 1;
            if (cm.hd95) {
                acc.hd95_sum += *cm.hd95;
                acc.assd_sum += *cm.assd;
                acc.n_dist += 1;
            }
        }
    }

    bool empty() const { return rows_.empty(); }

    /// Row index 0..classes-1 per class, `classes` for the mean row.
    ClassMetrics row(int idx) const {
        const auto& acc = rows_.at(static_cast<std::size_t>(idx));
        ClassMetrics out;
        if (acc.n) {
            out.dice = acc.dice_sum / acc.n;
            out.iou = acc.iou_sum / acc.n;
        }
        if (acc.n_dist) {
            out.hd95 = acc.hd95_sum / acc.n_dist;
            out.assd = acc.assd_sum / acc.n_dist;
        }
        return out;
    }

    int classes() const { return classes_; }

private:
    struct Acc {
        double dice_sum = 0, iou_sum = 0, hd95_sum = 0, assd_sum = 0;
        long n = 0, n_dist = 0;
    };
    int classes_;
    std::vector<Acc> rows_;
};

// ---- CSV emission -----------------------------------------------------------

inline std::string format_metric(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string format_metric(const std::optional<double>& v) {
    return v ? format_metric(*v) : std::string();
}

inline const char* metrics_csv_header() { return "run_id,round,site,class,dice,iou,hd95,assd"; }

/// One CSV row per class plus a "mean" row, matching the fixed schema.
inline std::string metrics_csv_rows(const std::string& run_id, int round, const std::string& site,
                                    const MetricAccumulator& acc) {
    std::string out;
    for (int c = 0; c <= acc.classes(); ++c) {
        const ClassMetrics cm = acc.row(c);
        out += run_id;
        out += ',';
        out += std::to_string(round);
        out += ',';
        out += site;
        out += ',';
        out += c < acc.classes() ? std::to_string(c) : std::string("mean");
        out += ',';
        out += format_metric(cm.dice);
        out += ',';
        out += format_metric(cm.iou);
        out += ',';
        out += format_metric(cm.hd95);
        out += ',';
        out += format_metric(cm.assd);
        out += '\n';
    }
    return out;
}

} // namespace fedst
