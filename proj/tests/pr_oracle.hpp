#ifndef EVFUSE_TESTS_PR_ORACLE_HPP
#define EVFUSE_TESTS_PR_ORACLE_HPP

// Brute-force PR oracle. AP by the literal definition: for every prefix of the
// score-sorted detection list, rerun the greedy matching from scratch to get
// one (recall, precision) sample, then take the 101-point interpolated mean by
// scanning every sample at every recall threshold. Quadratic and proud of it.

#include <algorithm>
#include <set>
#include <vector>

#include "evfuse/evalkit.hpp"

namespace evfuse::oracle {

struct OracleDet {
    int image = 0, cls = 0;
    double score = 0;
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    int idx = 0; // insertion order within its image, breaks score ties
};

struct OracleGt {
    int image = 0, cls = 0;
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

inline double oracle_iou(const OracleDet& d, const OracleGt& g) {
    const double iw = std::min(d.x2, g.x2) - std::max(d.x1, g.x1);
    const double ih = std::min(d.y2, g.y2) - std::max(d.y1, g.y1);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    const double area_d = (d.x2 - d.x1) * (d.y2 - d.y1);
    const double area_g = (g.x2 - g.x1) * (g.y2 - g.y1);
    return inter / (area_d + area_g - inter);
}

// greedy matching of the first k detections only, recomputed from scratch:
// each detection takes the unmatched same-image GT with the highest IoU >=
// thresh (ties -> lowest GT index)
inline int oracle_prefix_tp(const std::vector<OracleDet>& sorted, int k,
                            const std::vector<OracleGt>& gts, double thresh) {
    std::vector<bool> used(gts.size(), false);
    int tp = 0;
    for (int i = 0; i < k; ++i) {
        int best = -1;
        double best_iou = 0;
        for (size_t j = 0; j < gts.size(); ++j) {
            if (used[j] || gts[j].image != sorted[i].image) continue;
            const double iou = oracle_iou(sorted[i], gts[j]);
            if (iou >= thresh && iou > best_iou) {
                best_iou = iou;
                best = static_cast<int>(j);
            }
        }
        if (best >= 0) {
            used[best] = true;
            ++tp;
        }
    }
    return tp;
}

inline double oracle_ap_one_class(std::vector<OracleDet> dets, const std::vector<OracleGt>& gts,
                                  double thresh) {
    std::sort(dets.begin(), dets.end(), [](const OracleDet& a, const OracleDet& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.image != b.image) return a.image < b.image;
        return a.idx < b.idx;
    });
    const int n = static_cast<int>(dets.size());
    const int g = static_cast<int>(gts.size());
    std::vector<std::pair<double, double>> pr; // (recall, precision)
    for (int k = 1; k <= n; ++k) {
        const int tp = oracle_prefix_tp(dets, k, gts, thresh);
        pr.push_back({static_cast<double>(tp) / g, static_cast<double>(tp) / k});
    }
    double ap = 0;
    for (int i = 0; i <= 100; ++i) {
        const double r = i / 100.0;
        double best = 0;
        for (const auto& [rec, prec] : pr)
            if (rec >= r && prec > best) best = prec;
        ap += best;
    }
    return ap / 101.0;
}

// mean over classes that have at least one GT box, and over thresholds
inline ApResult oracle_map(const std::vector<ImageEval>& images,
                           const std::vector<double>& thresholds) {
    std::set<int> classes;
    for (const auto& im : images)
        for (const auto& b : im.gts) classes.insert(b.cls);
    ApResult out;
    if (classes.empty()) return out;

    std::vector<double> per_thresh(thresholds.size(), 0.0);
    for (int cls : classes) {
        std::vector<OracleDet> dets;
        std::vector<OracleGt> gts;
        for (size_t im = 0; im < images.size(); ++im) {
            int idx = 0;
            for (const Detection& d : images[im].dets) {
                if (d.cls == cls)
                    dets.push_back({static_cast<int>(im), cls, d.score, d.x_min, d.y_min, d.x_max,
                                    d.y_max, idx});
                ++idx;
            }
            for (const GroundTruthBox& b : images[im].gts)
                if (b.cls == cls)
                    gts.push_back({static_cast<int>(im), cls, b.x_min, b.y_min, b.x_max, b.y_max});
        }
        for (size_t t = 0; t < thresholds.size(); ++t)
            per_thresh[t] += oracle_ap_one_class(dets, gts, thresholds[t]);
    }
    for (size_t t = 0; t < thresholds.size(); ++t) {
        per_thresh[t] /= static_cast<double>(classes.size());
        out.map += per_thresh[t];
        if (thresholds[t] == 0.5) out.ap50 = per_thresh[t];
        if (thresholds[t] == 0.75) out.ap75 = per_thresh[t];
    }
    out.map /= static_cast<double>(thresholds.size());
    return out;
}

} // namespace evfuse::oracle

#endif
