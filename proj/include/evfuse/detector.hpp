#ifndef EVFUSE_DETECTOR_HPP
#define EVFUSE_DETECTOR_HPP

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "evfuse/align.hpp"
#include "evfuse/events.hpp"
#include "evfuse/feature_map.hpp"
#include "evfuse/fusion.hpp"
#include "evfuse/rng.hpp"
#include "evfuse/scene_sim.hpp"

namespace evfuse {

enum class FusionMode { ef, cat };

struct DetectorConfig {
    std::vector<int> widths = {32, 64, 128, 256}; // stage widths at strides 4/8/16/32
    int num_classes = 3;
    int voxel_bins = 10; // event input channels = 2*voxel_bins
    int csp_depth = 2;   // bottlenecks per CSP block
    int fpn_width = 256;
    int head_width = 256;
    int attn_reduction = 8;

    void validate() const;
};

struct ConvParams {
    Var w, b;
};

struct CspParams {
    ConvParams split_main, split_side, out;
    std::vector<std::array<ConvParams, 2>> bottlenecks; // 1x1 then 3x3, residual
};

struct StemParams {
    ConvParams down1, down2; // two stride-2 3x3 convs
    CspParams csp;
};

struct LstmParams {
    ConvParams gates; // 3x3 over concat(x, h) -> 4C, gate order i,f,o,g
};

struct StageParams {
    ConvParams down;
    CspParams csp;
    LstmParams lstm;
};

struct FpnParams {
    ConvParams lat2, lat3, lat4; // 1x1 laterals
    ConvParams top;              // 3x3 on the stride-32 map
    ConvParams m3a, m3b;         // merge at stride 16
    ConvParams m2a, m2b;         // merge at stride 8
};

struct HeadLevelParams {
    ConvParams stem;
    ConvParams cls1, cls2, cls_pred;
    ConvParams reg1, reg2, reg_pred, obj_pred;
};

struct DetectorParams {
    DetectorConfig config;
    StemParams stem_event, stem_rgb;
    AlignParams align;
    FusionParams ef;
    ConcatFuseParams cat;
    LstmParams lstm1;
    StageParams stage2, stage3, stage4;
    FpnParams fpn;
    std::array<HeadLevelParams, 3> head;

    static DetectorParams init(Rng& rng, const DetectorConfig& config);

    // Stable name -> parameter registry; order is the serialization order.
    std::vector<std::pair<std::string, Var*>> named();
    size_t param_count();
};

struct LstmState {
    Var h, c;
};

// One (hidden, cell) pair per stage, stride 4/8/16/32.
struct RecurrentState {
    std::vector<LstmState> stages;
};

struct HeadOutput {
    Var cls; // (num_classes, H, W) logits
    Var reg; // (4, H, W): tx, ty, tw, th
    Var obj; // (1, H, W) logit
    int stride = 0;
};

struct ForwardResult {
    std::vector<FeatureMap> fpn; // strides 8, 16, 32
    RecurrentState state;
    std::vector<HeadOutput> head;
};

struct Detection {
    int cls = 0;
    double score = 0;
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
};

// Standard ConvLSTM gating: i,f,o = sigmoid, g = tanh of a 3x3 conv over
// concat(x, h); c' = f*c + i*g, h' = o*tanh(c').
std::pair<FeatureMap, LstmState> conv_lstm_step(const FeatureMap& x, const LstmState& state,
                                                const LstmParams& params);

RecurrentState reset_state(const DetectorConfig& config, int height, int width);

// Stage 1: both stems at stride 4, RGB warped onto the events by the
// alignment block, then fused. An absent RGB image contributes a zero map in
// place of the aligned RGB features (degraded event-only mode). use_align=false
// bypasses the alignment block and fuses the raw RGB stem output (the
// no-alignment ablation); the alignment parameters then never enter the graph.
FeatureMap stage1_fused(const Tensor& event_voxel, const std::optional<Tensor>& rgb_image,
                        const DetectorParams& params, FusionMode mode, bool use_align = true);

// Shared trunk from the fused stride-4 map: stage-1 ConvLSTM, stages 2-4,
// FPN, decoupled head. Touches no RGB-branch parameters.
ForwardResult forward_tail(const FeatureMap& fused, const RecurrentState& state,
                           const DetectorParams& params);

ForwardResult forward(const EventVoxelGrid& event_voxel, const std::optional<Tensor>& rgb_image,
                      const RecurrentState& state, const DetectorParams& params, FusionMode mode,
                      bool use_align = true);

std::vector<Detection> decode_detections(const std::vector<HeadOutput>& head, double score_threshold,
                                         double nms_iou);

// Cells within 1.5*stride of a ground-truth centre, refined to the 10
// highest-IoU predictions per box; ties and multi-assignments resolved
// deterministically.
struct Assignment {
    struct Pos {
        int level, gy, gx, gt;
    };
    std::vector<Pos> positives;
};

Assignment assign_targets(const std::vector<HeadOutput>& head, const std::vector<GroundTruthBox>& gt);

struct DetectionLoss {
    Var total;
    double iou = 0, cls = 0, obj = 0;
    int num_fg = 0;
};

DetectionLoss loss_given_assignment(const std::vector<HeadOutput>& head,
                                    const std::vector<GroundTruthBox>& gt, const Assignment& assignment,
                                    int num_classes);

DetectionLoss detection_loss(const std::vector<HeadOutput>& head,
                             const std::vector<GroundTruthBox>& gt, int num_classes);

// Self-describing container: magic + JSON directory (config echo, tensor
// names/shapes/offsets) + raw little-endian float64 payload. Bit-exact.
void save_checkpoint(const std::string& path, DetectorParams& params);
DetectorParams load_checkpoint(const std::string& path);

} // namespace evfuse

#endif
