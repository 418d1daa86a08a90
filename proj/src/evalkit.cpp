#include "evfuse/evalkit.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <utility>

#include "evfuse/trainer.hpp"

namespace evfuse {

namespace {

using nlohmann::json;

// matching-side iou: degenerate boxes simply never match
double lenient_iou(double ax1, double ay1, double ax2, double ay2, double bx1, double by1,
                   double bx2, double by2) {
    const double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
    const double ih = std::min(ay2, by2) - std::max(ay1, by1);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    const double uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if (uni <= 0) return 0.0;
    return inter / uni;
}

} // namespace

double compute_iou(const GroundTruthBox& a, const GroundTruthBox& b) {
    if (a.x_max <= a.x_min || a.y_max <= a.y_min || b.x_max <= b.x_min || b.y_max <= b.y_min)
        throw std::invalid_argument("compute_iou: degenerate box");
    return lenient_iou(a.x_min, a.y_min, a.x_max, a.y_max, b.x_min, b.y_min, b.x_max, b.y_max);
}

std::vector<double> coco_thresholds() {
    std::vector<double> out;
    for (int i = 50; i <= 95; i += 5) out.push_back(i / 100.0);
    return out;
}

namespace {

struct PooledDet {
    double score = 0;
    int image = 0;
    int idx = 0; // insertion order within its image
    const Detection* d = nullptr;
};

// AP for one class at one threshold: single greedy pass in score order, then
// the 101-point mean of the right-running precision maximum over the
// (monotone) recall sequence.
double ap_one_class(const std::vector<PooledDet>& sorted,
                    const std::vector<std::vector<const GroundTruthBox*>>& gts_by_image,
                    int num_gt, double thresh) {
    std::vector<std::vector<bool>> used(gts_by_image.size());
    for (size_t i = 0; i < gts_by_image.size(); ++i) used[i].assign(gts_by_image[i].size(), false);

    const int n = static_cast<int>(sorted.size());
    std::vector<double> recall(n), precision(n);
    int tp = 0;
    for (int i = 0; i < n; ++i) {
        const Detection& d = *sorted[i].d;
        const auto& gts = gts_by_image[sorted[i].image];
        int best = -1;
        double best_iou = 0;
        for (size_t j = 0; j < gts.size(); ++j) {
            if (used[sorted[i].image][j]) continue;
            const double iou = lenient_iou(d.x_min, d.y_min, d.x_max, d.y_max, gts[j]->x_min,
                                           gts[j]->y_min, gts[j]->x_max, gts[j]->y_max);
            if (iou >= thresh && iou > best_iou) {
                best_iou = iou;
                best = static_cast<int>(j);
            }
        }
        if (best >= 0) {
            used[sorted[i].image][best] = true;
            ++tp;
        }
        recall[i] = static_cast<double>(tp) / num_gt;
        precision[i] = static_cast<double>(tp) / (i + 1);
    }

    // right-running max so precision[i] becomes "best achievable at or past i"
    for (int i = n - 2; i >= 0; --i) precision[i] = std::max(precision[i], precision[i + 1]);

    double ap = 0;
    int k = 0;
    for (int r = 0; r <= 100; ++r) {
        const double want = r / 100.0;
        while (k < n && recall[k] < want) ++k;
        if (k == n) break; // recall never reached -> zero contribution
        ap += precision[k];
    }
    return ap / 101.0;
}

} // namespace

ApResult compute_map(const std::vector<ImageEval>& images, const std::vector<double>& thresholds) {
    if (thresholds.empty()) throw std::invalid_argument("compute_map: no thresholds");
    ApResult out;
    out.per_threshold.assign(thresholds.size(), 0.0);

    std::set<int> classes;
    for (const ImageEval& im : images)
        for (const GroundTruthBox& b : im.gts) classes.insert(b.cls);
    if (classes.empty()) return out;

    for (int cls : classes) {
        std::vector<PooledDet> dets;
        std::vector<std::vector<const GroundTruthBox*>> gts_by_image(images.size());
        int num_gt = 0;
        for (size_t im = 0; im < images.size(); ++im) {
            for (size_t i = 0; i < images[im].dets.size(); ++i) {
                const Detection& d = images[im].dets[i];
                if (d.cls == cls)
                    dets.push_back({d.score, static_cast<int>(im), static_cast<int>(i), &d});
            }
            for (const GroundTruthBox& b : images[im].gts)
                if (b.cls == cls) {
                    gts_by_image[im].push_back(&b);
                    ++num_gt;
                }
        }
        std::sort(dets.begin(), dets.end(), [](const PooledDet& a, const PooledDet& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.image != b.image) return a.image < b.image;
            return a.idx < b.idx;
        });
        for (size_t t = 0; t < thresholds.size(); ++t)
            out.per_threshold[t] += ap_one_class(dets, gts_by_image, num_gt, thresholds[t]);
    }

    for (size_t t = 0; t < thresholds.size(); ++t) {
        out.per_threshold[t] /= static_cast<double>(classes.size());
        out.map += out.per_threshold[t];
        if (thresholds[t] == 0.5) out.ap50 = out.per_threshold[t];
        if (thresholds[t] == 0.75) out.ap75 = out.per_threshold[t];
    }
    out.map /= static_cast<double>(thresholds.size());
    return out;
}

double compute_mdrop(double reference_map, const std::vector<double>& sweep_maps) {
    if (sweep_maps.empty()) throw std::invalid_argument("compute_mdrop: empty sweep");
    return reference_map - *std::min_element(sweep_maps.begin(), sweep_maps.end());
}

// ---------------------------------------------------------------------------
// Models.
// ---------------------------------------------------------------------------

DetectorEvalModel::DetectorEvalModel(DetectorParams params, DetectorConfig config, int height,
                                     int width, double score_threshold, double nms_iou,
                                     FusionMode mode, bool use_align, bool use_rgb)
    : params_(std::move(params)),
      config_(std::move(config)),
      height_(height),
      width_(width),
      score_threshold_(score_threshold),
      nms_iou_(nms_iou),
      mode_(mode),
      use_align_(use_align),
      use_rgb_(use_rgb) {
    config_.validate();
    if (height_ % 32 != 0 || width_ % 32 != 0)
        throw std::invalid_argument("DetectorEvalModel: sensor size must be divisible by 32");
    reset();
}

void DetectorEvalModel::reset() { state_ = reset_state(config_, height_, width_); }

std::vector<Detection> DetectorEvalModel::step(const EvalInput& in) {
    if (in.voxel.c != 2 * config_.voxel_bins || in.voxel.h != height_ || in.voxel.w != width_)
        throw std::invalid_argument("DetectorEvalModel: voxel shape mismatch");
    std::optional<Tensor> rgb;
    if (use_rgb_ && in.rgb) rgb = *in.rgb;
    const FeatureMap fused = stage1_fused(in.voxel, rgb, params_, mode_, use_align_);
    ForwardResult fr = forward_tail(fused, state_, params_);
    // keep only the state's values: inference must not grow a graph across ticks
    state_ = detach_state(fr.state);
    return decode_detections(fr.head, score_threshold_, nms_iou_);
}

std::vector<Detection> GtEchoModel::step(const EvalInput& in) {
    std::vector<Detection> out;
    for (const GroundTruthBox& b : in.gt) {
        Detection d;
        d.cls = b.cls;
        d.score = 1.0;
        d.x_min = b.x_min;
        d.y_min = b.y_min;
        d.x_max = b.x_max;
        d.y_max = b.y_max;
        out.push_back(d);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Protocol runners.
// ---------------------------------------------------------------------------

namespace {

struct SequenceRun {
    std::vector<ImageEval> images;
    double seconds = 0;
    int steps = 0;
};

SequenceRun run_sequence(EvalModel& model, const SequenceDataset& ds) {
    if (auto hw = model.expected_hw()) {
        if (hw->first != ds.scene.height || hw->second != ds.scene.width)
            throw std::invalid_argument("eval: model and dataset sensor sizes differ");
    }
    model.reset();
    SequenceRun out;
    out.images.resize(ds.num_ticks);
    const auto t0 = std::chrono::steady_clock::now();
    for (int k = 0; k < ds.num_ticks; ++k) {
        PairedSample s = build_pair(ds, k, 0, model.voxel_bins());
        EvalInput in;
        in.voxel = std::move(s.voxel);
        in.rgb = &s.rgb;
        in.tick = k;
        in.t_us = ds.gt.at(k).t_us;
        in.gt = s.annotations;
        out.images[k].dets = model.step(in);
        out.images[k].gts = std::move(s.annotations);
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.steps = ds.num_ticks;
    return out;
}

json protocol_echo(const EvalProtocol& p) {
    json j{{"score_threshold", p.score_threshold}, {"nms_iou", p.nms_iou}};
    switch (p.kind) {
        case ProtocolKind::paired: j["protocol"] = "paired"; break;
        case ProtocolKind::rgb_mismatch:
            j["protocol"] = "rgb_mismatch";
            j["rgb_divisors"] = p.rgb_divisors;
            break;
        case ProtocolKind::train_infer:
            j["protocol"] = "train_infer";
            j["event_multipliers"] = p.event_multipliers;
            j["rgb_base_divisor"] = p.rgb_base_divisor;
            break;
    }
    return j;
}

} // namespace

DatasetFactory make_scene_factory(SceneConfig scene, double duration_sec, int base_hz) {
    return [scene = std::move(scene), duration_sec, base_hz](int event_multiplier,
                                                             int rgb_divisor) {
        if (event_multiplier < 1)
            throw std::invalid_argument("dataset factory: multiplier must be >= 1");
        return make_dataset(scene, duration_sec, base_hz * event_multiplier, rgb_divisor);
    };
}

MetricsReport run_paired_eval(EvalModel& model, const SequenceDataset& dataset,
                              const EvalProtocol& protocol) {
    if (dataset.rgb_divisor != 1)
        throw std::invalid_argument("run_paired_eval: paired data needs RGB at every tick");
    const SequenceRun run = run_sequence(model, dataset);
    ApResult ap = compute_map(run.images, coco_thresholds());

    MetricsReport rep;
    rep.reference_map = ap.map;
    rep.mdrop = compute_mdrop(ap.map, {ap.map});
    rep.points.push_back({"paired", 1.0, std::move(ap)});
    rep.seconds_per_step = run.steps > 0 ? run.seconds / run.steps : 0.0;
    rep.config_echo = protocol_echo(protocol).dump(2);
    return rep;
}

MetricsReport run_rgb_mismatch_sweep(EvalModel& model, const DatasetFactory& factory,
                                     const EvalProtocol& protocol) {
    if (protocol.kind != ProtocolKind::rgb_mismatch)
        throw std::invalid_argument("run_rgb_mismatch_sweep: wrong protocol kind");
    MetricsReport rep;
    double seconds = 0;
    int steps = 0;
    std::vector<double> sweep;
    std::optional<double> at_n1;
    for (int n : protocol.rgb_divisors) {
        if (n < 1) throw std::invalid_argument("run_rgb_mismatch_sweep: divisor must be >= 1");
        const SequenceRun run = run_sequence(model, factory(1, n));
        ApResult ap = compute_map(run.images, coco_thresholds());
        seconds += run.seconds;
        steps += run.steps;
        sweep.push_back(ap.map);
        if (n == 1) at_n1 = ap.map;
        rep.points.push_back({"rgb_mismatch", static_cast<double>(n), std::move(ap)});
    }
    if (!at_n1) {
        // the drop is anchored at dense RGB even when 1 is not swept
        const SequenceRun run = run_sequence(model, factory(1, 1));
        at_n1 = compute_map(run.images, coco_thresholds()).map;
        seconds += run.seconds;
        steps += run.steps;
    }
    rep.reference_map = *at_n1;
    rep.mdrop = compute_mdrop(rep.reference_map, sweep);
    rep.seconds_per_step = steps > 0 ? seconds / steps : 0.0;
    rep.config_echo = protocol_echo(protocol).dump(2);
    return rep;
}

MetricsReport run_train_infer_sweep(EvalModel& model, const DatasetFactory& factory,
                                    const EvalProtocol& protocol) {
    if (protocol.kind != ProtocolKind::train_infer)
        throw std::invalid_argument("run_train_infer_sweep: wrong protocol kind");
    MetricsReport rep;
    double seconds = 0;
    int steps = 0;

    // the paired anchor: base-rate ticks with RGB at every tick
    {
        const SequenceRun run = run_sequence(model, factory(1, 1));
        ApResult ap = compute_map(run.images, coco_thresholds());
        seconds += run.seconds;
        steps += run.steps;
        rep.reference_map = ap.map;
        rep.points.push_back({"paired", 1.0, std::move(ap)});
    }

    std::vector<double> sweep;
    std::optional<double> at_m1;
    for (int m : protocol.event_multipliers) {
        if (m < 1) throw std::invalid_argument("run_train_infer_sweep: multiplier must be >= 1");
        // rgb_base_divisor counts base ticks; m times finer ticks keep the
        // same wall-clock frame schedule
        const SequenceRun run = run_sequence(model, factory(m, protocol.rgb_base_divisor * m));
        ApResult ap = compute_map(run.images, coco_thresholds());
        seconds += run.seconds;
        steps += run.steps;
        sweep.push_back(ap.map);
        if (m == 1) at_m1 = ap.map;
        rep.points.push_back({"train_infer", static_cast<double>(m), std::move(ap)});
    }
    if (!at_m1) {
        const SequenceRun run = run_sequence(model, factory(1, protocol.rgb_base_divisor));
        at_m1 = compute_map(run.images, coco_thresholds()).map;
        seconds += run.seconds;
        steps += run.steps;
    }
    rep.mdrop = compute_mdrop(rep.reference_map, sweep);
    rep.mdrop_rgb_mismatch = rep.reference_map - *at_m1;
    rep.mdrop_train_infer = compute_mdrop(*at_m1, sweep);
    rep.seconds_per_step = steps > 0 ? seconds / steps : 0.0;
    rep.config_echo = protocol_echo(protocol).dump(2);
    return rep;
}

// ---------------------------------------------------------------------------
// Report artifacts. AP values leave the process in percent.
// ---------------------------------------------------------------------------

void write_sweep_csv(const MetricsReport& report, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_sweep_csv: cannot open " + path);
    f << "protocol,point,mAP,AP50,AP75\n";
    f.precision(10);
    for (const ProtocolPoint& p : report.points)
        f << p.protocol << ',' << p.point << ',' << 100.0 * p.ap.map << ',' << 100.0 * p.ap.ap50
          << ',' << 100.0 * p.ap.ap75 << '\n';
}

void write_report_json(const MetricsReport& report, const std::string& path) {
    json points = json::array();
    for (const ProtocolPoint& p : report.points)
        points.push_back({{"protocol", p.protocol},
                          {"point", p.point},
                          {"mAP", 100.0 * p.ap.map},
                          {"AP50", 100.0 * p.ap.ap50},
                          {"AP75", 100.0 * p.ap.ap75}});
    json j{{"points", std::move(points)},
           {"reference_mAP", 100.0 * report.reference_map},
           {"mdrop", 100.0 * report.mdrop},
           {"seconds_per_step", report.seconds_per_step},
           {"config", json::parse(report.config_echo)}};
    if (report.mdrop_rgb_mismatch) j["mdrop_rgb_mismatch"] = 100.0 * *report.mdrop_rgb_mismatch;
    if (report.mdrop_train_infer) j["mdrop_train_infer"] = 100.0 * *report.mdrop_train_infer;

    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_report_json: cannot open " + path);
    f << j.dump(2) << "\n";
}

} // namespace evfuse
