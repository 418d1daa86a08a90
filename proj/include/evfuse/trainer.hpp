#ifndef EVFUSE_TRAINER_HPP
#define EVFUSE_TRAINER_HPP

#include <map>
#include <string>
#include <vector>

#include "evfuse/detector.hpp"
#include "evfuse/rng.hpp"
#include "evfuse/scene_sim.hpp"

namespace evfuse {

struct TimeShiftConfig {
    int dt_min = 0; // ticks
    int dt_max = 10;
    bool enabled = true;

    void validate() const; // 0 <= dt_min <= dt_max
};

// Uniform draw from {dt_min..dt_max}; always 0 when disabled.
int sample_shift(const TimeShiftConfig& config, Rng& rng);

// One training step's worth of data. The RGB frame is taken from an earlier
// tick than the events; the annotations always belong to the event tick.
struct PairedSample {
    Tensor voxel; // (2*num_bins, H, W) event counts for the tick
    Tensor rgb;   // (3, H, W) from the latest frame at or before the shifted tick
    std::vector<GroundTruthBox> annotations;
    int dt = 0;
    int event_tick = 0;
    int rgb_tick = 0;
};

PairedSample build_pair(const SequenceDataset& seq, int tick, int dt, int num_bins);

// Linear warmup max_lr/25 -> max_lr over the first 30% of steps, then cosine
// decay to max_lr/1000.
double onecycle_lr(int64_t step, int64_t total_steps, double max_lr);

struct TrainConfig {
    int iterations = 0;
    int batch_size = 4;
    double max_lr = 1.5e-4;
    int unroll_len = 8;   // L
    int tbptt_detach = 4; // carried state detaches every this many steps on odd iterations
    uint64_t seed = 0;
    FusionMode fusion_mode = FusionMode::ef;
    TimeShiftConfig time_shift;
    bool use_rgb = true;   // false trains the event-only degraded mode
    bool use_align = true; // false bypasses the alignment block (ablation)
    bool augment = true;

    void validate() const;
};

// Window-level augmentation, applied identically to every tick so the
// sequence stays temporally coherent.
struct WindowAugment {
    bool hflip = false;
    double zoom = 1.0; // >= 1; central crop scaled back up with nearest neighbour
};

WindowAugment sample_augment(Rng& rng);
void apply_augment(std::vector<PairedSample>& window, const WindowAugment& aug);

RecurrentState detach_state(const RecurrentState& state);

struct WindowLoss {
    Var total; // mean over the window's steps
    double iou = 0, cls = 0, obj = 0;
    RecurrentState final_state;
};

// Unrolls the detector over a window, one detection loss per step. A positive
// detach_every cuts the gradient path through the carried state at that
// period (truncated backpropagation); 0 keeps the full graph. The unroll
// starts from a zero state unless init_state is given.
WindowLoss unroll_loss(const std::vector<PairedSample>& window, const DetectorParams& params,
                       FusionMode mode, int detach_every, bool use_rgb = true,
                       const RecurrentState* init_state = nullptr, bool use_align = true);

class AdamOptimizer {
public:
    explicit AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    // grads keyed by parameter name; missing names mean zero gradient
    void step(DetectorParams& params, const std::map<std::string, Tensor>& grads, double lr);

private:
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

struct TrainLogRow {
    int iteration = 0;
    double lr = 0, loss_total = 0, loss_iou = 0, loss_cls = 0, loss_obj = 0;
};

struct TrainResult {
    DetectorParams params;
    std::vector<TrainLogRow> log;
};

// Full loop: random window starts, Time Shift per step and sequence,
// BPTT/TBPTT alternating by iteration parity, ADAM with the OneCycle rate.
// Deterministic for a fixed seed. Throws on a non-finite loss.
TrainResult train(const SequenceDataset& dataset, const TrainConfig& config,
                  const DetectorParams& params_init);

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& log);
void write_config_echo(const std::string& path, const TrainConfig& config);

} // namespace evfuse

#endif
