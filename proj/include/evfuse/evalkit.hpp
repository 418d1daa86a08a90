#ifndef EVFUSE_EVALKIT_HPP
#define EVFUSE_EVALKIT_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "evfuse/detector.hpp"
#include "evfuse/scene_sim.hpp"
#include "evfuse/tensor.hpp"

namespace evfuse {

// Axis-aligned IoU; throws on boxes with non-positive extent.
double compute_iou(const GroundTruthBox& a, const GroundTruthBox& b);

// One evaluation image (= one tick): the model's detections and the truth.
struct ImageEval {
    std::vector<Detection> dets;
    std::vector<GroundTruthBox> gts;
};

struct ApResult {
    double map = 0, ap50 = 0, ap75 = 0;
    std::vector<double> per_threshold; // one AP per requested threshold
};

// The ten thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_thresholds();

// Pooled-over-images AP per class and IoU threshold: detections sorted by
// (score desc, image asc, insertion order asc), greedily matched to the
// highest-IoU unmatched GT of the same class and image (ties -> lowest GT
// index); 101-point interpolated AP; map = mean over classes that have at
// least one GT box, then over thresholds. ap50/ap75 are filled when 0.5/0.75
// appear among the thresholds. No GT at all -> all zeros.
ApResult compute_map(const std::vector<ImageEval>& images, const std::vector<double>& thresholds);

// Maximum performance drop across a sweep, relative to a reference point.
double compute_mdrop(double reference_map, const std::vector<double>& sweep_maps);

// ---------------------------------------------------------------------------
// Protocol runners.
// ---------------------------------------------------------------------------

// What the runner hands the model at one tick. `rgb` is the latest frame
// available at or before the tick (zero-order hold); null only if the
// sequence carries no frames at all. `gt` is this tick's truth -- real models
// must ignore it, the echo stub exists to prove the harness never corrupts it.
struct EvalInput {
    Tensor voxel;
    const Tensor* rgb = nullptr;
    int tick = 0;
    int64_t t_us = 0;
    std::vector<GroundTruthBox> gt;
};

class EvalModel {
public:
    virtual ~EvalModel() = default;
    virtual void reset() = 0;
    virtual std::vector<Detection> step(const EvalInput& in) = 0;
    virtual int voxel_bins() const { return 1; }
    // (height, width) the model is committed to, if any
    virtual std::optional<std::pair<int, int>> expected_hw() const { return std::nullopt; }
};

// Runs the fusion detector with persistent recurrent state between steps.
// The three trailing flags must match the training regime of the weights:
// fusion block choice, alignment bypass, and the event-only mode (use_rgb
// false drops the frame so the RGB branch contributes its zero map).
class DetectorEvalModel : public EvalModel {
public:
    DetectorEvalModel(DetectorParams params, DetectorConfig config, int height, int width,
                      double score_threshold, double nms_iou, FusionMode mode = FusionMode::ef,
                      bool use_align = true, bool use_rgb = true);
    void reset() override;
    std::vector<Detection> step(const EvalInput& in) override;
    int voxel_bins() const override { return config_.voxel_bins; }
    std::optional<std::pair<int, int>> expected_hw() const override { return {{height_, width_}}; }

private:
    DetectorParams params_;
    DetectorConfig config_;
    int height_, width_;
    double score_threshold_, nms_iou_;
    FusionMode mode_;
    bool use_align_, use_rgb_;
    RecurrentState state_;
};

// Harness self-test stubs.
class GtEchoModel : public EvalModel {
public:
    void reset() override {}
    std::vector<Detection> step(const EvalInput& in) override;
};

class EmptyModel : public EvalModel {
public:
    void reset() override {}
    std::vector<Detection> step(const EvalInput&) override { return {}; }
};

// Ablates temporal recurrence: clears the wrapped model before every step.
class ResetEveryStep : public EvalModel {
public:
    explicit ResetEveryStep(EvalModel& inner) : inner_(inner) {}
    void reset() override { inner_.reset(); }
    std::vector<Detection> step(const EvalInput& in) override {
        inner_.reset();
        return inner_.step(in);
    }
    int voxel_bins() const override { return inner_.voxel_bins(); }
    std::optional<std::pair<int, int>> expected_hw() const override { return inner_.expected_hw(); }

private:
    EvalModel& inner_;
};

enum class ProtocolKind { paired, rgb_mismatch, train_infer };

struct EvalProtocol {
    ProtocolKind kind = ProtocolKind::paired;
    std::vector<int> rgb_divisors = {1, 2, 4, 6, 8, 10};  // rgb_mismatch: frame every N ticks
    std::vector<int> event_multipliers = {1, 2, 4, 6, 8}; // train_infer: ticks at m * base rate
    int rgb_base_divisor = 5; // train_infer: frames every this many BASE ticks
    double score_threshold = 0.01;
    double nms_iou = 0.65;
};

struct ProtocolPoint {
    std::string protocol; // "paired" | "rgb_mismatch" | "train_infer"
    double point = 0;     // N, m, or 1 for paired
    ApResult ap;
};

// AP values live in [0,1] here; the report writers scale to percent.
struct MetricsReport {
    std::vector<ProtocolPoint> points;
    double reference_map = 0; // the drop's anchor (paired, or the N=1 point)
    double mdrop = 0;         // reference - min over the sweep
    // train_infer only: the drop split into its two causes
    std::optional<double> mdrop_rgb_mismatch; // paired - (m=1)
    std::optional<double> mdrop_train_infer;  // (m=1) - min over m
    double seconds_per_step = 0;
    std::string config_echo; // JSON
};

// Builds the sweep datasets. `event_multiplier` scales the tick rate,
// `rgb_divisor` counts in RESULTING ticks. Every call re-slices the same
// underlying event stream: the emitted events depend only on the scene and
// the wall-clock span, never on the tick rate.
using DatasetFactory = std::function<SequenceDataset(int event_multiplier, int rgb_divisor)>;
DatasetFactory make_scene_factory(SceneConfig scene, double duration_sec, int base_hz);

// Sequential inference over one sequence with persistent state; detections at
// every tick are scored against that tick's truth.
MetricsReport run_paired_eval(EvalModel& model, const SequenceDataset& dataset,
                              const EvalProtocol& protocol);

// Events at every base tick, RGB only every N ticks (latest-available frame in
// between); truth stays per-tick. MDrop is anchored at the N=1 point.
MetricsReport run_rgb_mismatch_sweep(EvalModel& model, const DatasetFactory& factory,
                                     const EvalProtocol& protocol);

// Ticks at m times the base rate over the same wall-clock span, RGB pinned to
// the base-rate schedule (every rgb_base_divisor base ticks); truth at every
// inference tick. Reports the paired anchor as the first point and splits the
// drop into its RGB-mismatch and train-infer parts.
MetricsReport run_train_infer_sweep(EvalModel& model, const DatasetFactory& factory,
                                    const EvalProtocol& protocol);

// sweep.csv: "protocol,point,mAP,AP50,AP75", AP columns in percent.
void write_sweep_csv(const MetricsReport& report, const std::string& path);
void write_report_json(const MetricsReport& report, const std::string& path);

} // namespace evfuse

#endif
