#ifndef EVFUSE_SCENE_SIM_HPP
#define EVFUSE_SCENE_SIM_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evfuse/events.hpp"
#include "evfuse/tensor.hpp"

namespace evfuse {

enum class Shape { disc = 0, square = 1, triangle = 2 };

// One moving object. The shape also serves as the class id (0/1/2). The
// trajectory is analytic: linear motion plus an optional vertical sinusoid,
// with the centre reflected off the canvas margins when `bounce` is set so
// long sequences never empty out. A pause window freezes motion (the
// trajectory clock stops, then resumes).
struct ObjectSpec {
    Shape shape = Shape::disc;
    double intensity = 0.8; // gray level in [0,1]
    double size = 12.0;     // full extent in pixels
    double x0 = 0.0, y0 = 0.0;
    double vx = 0.0, vy = 0.0; // pixels per second
    double sin_amp = 0.0, sin_period = 0.0, sin_phase = 0.0; // period in seconds
    bool bounce = true;
    double pause_start = 0.0, pause_end = 0.0; // seconds; inactive if end <= start

    int class_id() const { return static_cast<int>(shape); }
};

struct SceneConfig {
    int width = 128, height = 96;
    double background = 0.05;
    std::vector<ObjectSpec> objects;
    double contrast = 0.15; // log-intensity threshold C
    int substeps = 4;       // camera micro-steps M per base tick
    int base_hz = 25;       // base tick rate defining the absolute substep grid
    uint64_t seed = 0;
};

struct GroundTruthBox {
    int cls = 0;
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
    int64_t t_us = 0;
};

// Analytic object centre at time t (seconds).
struct Vec2 {
    double x = 0, y = 0;
};
Vec2 object_center(const ObjectSpec& obj, const SceneConfig& scene, double t_sec);

// Back-to-front binary rendering at pixel centres; grayscale.
Tensor render_gray(const SceneConfig& scene, int64_t t_us);
// Same image replicated to 3 channels.
Tensor render_frame(const SceneConfig& scene, int64_t t_us);

// Idealized contrast-threshold camera. Per-pixel log-intensity references
// start at t0; the scene is sampled on an absolute micro-step grid of
// substeps*base_hz steps per second, and every full crossing of the +-C
// threshold emits one event with a timestamp interpolated inside the step.
std::vector<EventPoint> generate_events(const SceneConfig& scene, int64_t t0_us, int64_t t1_us);

// Tight axis-aligned box per on-canvas object, clipped to the canvas.
std::vector<GroundTruthBox> ground_truth(const SceneConfig& scene, int64_t t_us);

struct Frame {
    int tick = 0;
    int64_t t_us = 0;
    Tensor rgb; // (3,H,W), already quantized to the 8-bit grid
};

struct TickGroundTruth {
    int tick = 0;
    int64_t t_us = 0;
    std::vector<GroundTruthBox> boxes;
};

// A complete synthetic sequence: one event stream, RGB frames every
// `rgb_divisor` ticks (timestamped at the window start), and analytic ground
// truth at every tick (timestamped at the window end).
struct SequenceDataset {
    SceneConfig scene;
    int f_event = 25;    // ticks per second
    int rgb_divisor = 1; // RGB available every N ticks
    int num_ticks = 0;
    std::vector<EventPoint> events;
    std::vector<Frame> frames;
    std::vector<TickGroundTruth> gt;
};

// Start of tick k at f_event_hz ticks per second, rounded down to whole
// microseconds. Rates that do not divide 1e6 (e.g. 150 Hz) give windows whose
// widths differ by at most 1 us; boundaries stay exact at whole seconds.
int64_t tick_start_us(int f_event_hz, int64_t k);

SequenceDataset make_dataset(const SceneConfig& scene, double duration_sec, int f_event_hz,
                             int rgb_divisor);

// Directory layout: events.evs, frames/NNNNNN.png (named by tick), gt.jsonl,
// meta.json (scene echo + f_event + N + seed).
void save_dataset(const std::string& dir, const SequenceDataset& ds);
SequenceDataset load_dataset(const std::string& dir);

// The standard desk scene: 128x96, three objects (one per class) whose
// positions, velocities and phases are drawn from the seed.
SceneConfig default_scene(uint64_t seed);

} // namespace evfuse

#endif
