#include "evfuse/scene_sim.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "evfuse/png_io.hpp"
#include "evfuse/rng.hpp"

namespace evfuse {

namespace {

constexpr double kLogFloor = 1e-3;

// Reflects p into [lo, hi] (triangle wave), so linear motion bounces off the
// canvas margins instead of leaving.
double fold(double p, double lo, double hi) {
    const double range = hi - lo;
    if (range <= 0.0) return lo;
    double q = std::fmod(p - lo, 2.0 * range);
    if (q < 0.0) q += 2.0 * range;
    return q <= range ? lo + q : hi - (q - range);
}

double effective_time(const ObjectSpec& obj, double t) {
    if (obj.pause_end <= obj.pause_start) return t;
    if (t < obj.pause_start) return t;
    if (t < obj.pause_end) return obj.pause_start;
    return t - (obj.pause_end - obj.pause_start);
}

bool covers(const ObjectSpec& obj, double cx, double cy, double px, double py) {
    const double dx = px - cx, dy = py - cy, half = obj.size / 2.0;
    switch (obj.shape) {
        case Shape::disc:
            return dx * dx + dy * dy <= half * half;
        case Shape::square:
            return std::abs(dx) <= half && std::abs(dy) <= half;
        case Shape::triangle:
            // apex up, base at the bottom of the bounding box
            return dy >= -half && dy <= half && std::abs(dx) <= (dy + half) / 2.0;
    }
    return false;
}

void check_scene(const SceneConfig& scene) {
    if (scene.width < 1 || scene.height < 1) throw std::invalid_argument("scene: bad canvas size");
    if (scene.contrast <= 0.0) throw std::invalid_argument("scene: contrast threshold must be positive");
    if (scene.substeps < 1) throw std::invalid_argument("scene: substeps must be >= 1");
    if (scene.base_hz < 1) throw std::invalid_argument("scene: base_hz must be >= 1");
    if (scene.objects.empty()) throw std::invalid_argument("scene: needs at least one object");
    for (const auto& o : scene.objects)
        if (o.size <= 0.0) throw std::invalid_argument("scene: object size must be positive");
}

} // namespace

Vec2 object_center(const ObjectSpec& obj, const SceneConfig& scene, double t_sec) {
    const double te = effective_time(obj, t_sec);
    double cx = obj.x0 + obj.vx * te;
    double cy = obj.y0 + obj.vy * te;
    if (obj.sin_period > 0.0)
        cy += obj.sin_amp * std::sin(2.0 * M_PI * te / obj.sin_period + obj.sin_phase);
    if (obj.bounce) {
        const double hx = obj.size / 2.0, hy = obj.size / 2.0;
        if (hx < scene.width - hx) cx = fold(cx, hx, scene.width - hx);
        if (hy < scene.height - hy) cy = fold(cy, hy, scene.height - hy);
    }
    return {cx, cy};
}

Tensor render_gray(const SceneConfig& scene, int64_t t_us) {
    check_scene(scene);
    const double t = static_cast<double>(t_us) * 1e-6;
    Tensor img = Tensor::full(1, scene.height, scene.width, scene.background);
    for (const ObjectSpec& obj : scene.objects) {
        const Vec2 c = object_center(obj, scene, t);
        const double half = obj.size / 2.0;
        const int y_lo = std::max(0, static_cast<int>(std::floor(c.y - half)));
        const int y_hi = std::min(scene.height - 1, static_cast<int>(std::ceil(c.y + half)));
        const int x_lo = std::max(0, static_cast<int>(std::floor(c.x - half)));
        const int x_hi = std::min(scene.width - 1, static_cast<int>(std::ceil(c.x + half)));
        for (int y = y_lo; y <= y_hi; ++y)
            for (int x = x_lo; x <= x_hi; ++x)
                if (covers(obj, c.x, c.y, x + 0.5, y + 0.5)) img.at(0, y, x) = obj.intensity;
    }
    return img;
}

Tensor render_frame(const SceneConfig& scene, int64_t t_us) {
    Tensor gray = render_gray(scene, t_us);
    Tensor img(3, scene.height, scene.width);
    for (int ch = 0; ch < 3; ++ch)
        std::copy(gray.v.begin(), gray.v.end(), img.v.begin() + static_cast<size_t>(ch) * gray.size());
    return img;
}

std::vector<EventPoint> generate_events(const SceneConfig& scene, int64_t t0_us, int64_t t1_us) {
    check_scene(scene);
    if (t0_us >= t1_us) throw std::invalid_argument("generate_events: need t0 < t1");
    const int steps_per_sec = scene.substeps * scene.base_hz;
    if (1000000 % steps_per_sec != 0)
        throw std::invalid_argument("generate_events: substeps*base_hz must divide 1e6 microseconds");
    const int64_t sub_us = 1000000 / steps_per_sec;

    const size_t n = static_cast<size_t>(scene.width) * scene.height;
    Tensor g0 = render_gray(scene, t0_us);
    std::vector<double> ref(n), prev_log(n);
    for (size_t i = 0; i < n; ++i) {
        ref[i] = std::log(std::max(g0.v[i], kLogFloor));
        prev_log[i] = ref[i];
    }

    std::vector<EventPoint> out;
    const double C = scene.contrast;
    int64_t t_prev = t0_us;
    // walk the absolute micro-step grid (aligned at t = 0) so the emitted
    // stream does not depend on how callers later slice it into ticks
    int64_t k = t0_us / sub_us + 1;
    while (t_prev < t1_us) {
        const int64_t t_cur = std::min(k * sub_us, t1_us);
        ++k;
        if (t_cur <= t_prev) continue;
        Tensor g = render_gray(scene, t_cur);
        for (size_t i = 0; i < n; ++i) {
            const double L = std::log(std::max(g.v[i], kLogFloor));
            const double d = L - ref[i];
            const int crossings = static_cast<int>(std::floor(std::abs(d) / C));
            if (crossings > 0) {
                const int8_t pol = d > 0 ? 1 : -1;
                const double L_prev = prev_log[i];
                const uint16_t x = static_cast<uint16_t>(i % scene.width);
                const uint16_t y = static_cast<uint16_t>(i / scene.width);
                for (int j = 1; j <= crossings; ++j) {
                    const double thresh = ref[i] + pol * j * C;
                    double frac = 0.5;
                    if (L != L_prev) frac = std::clamp((thresh - L_prev) / (L - L_prev), 0.0, 1.0);
                    const int64_t te = t_prev + static_cast<int64_t>(std::llround(frac * static_cast<double>(t_cur - t_prev)));
                    out.push_back({x, y, te, pol});
                }
                ref[i] += pol * crossings * C;
            }
            prev_log[i] = L;
        }
        t_prev = t_cur;
    }
    std::sort(out.begin(), out.end(), [](const EventPoint& a, const EventPoint& b) {
        if (a.t != b.t) return a.t < b.t;
        if (a.y != b.y) return a.y < b.y;
        if (a.x != b.x) return a.x < b.x;
        return a.p < b.p;
    });
    return out;
}

std::vector<GroundTruthBox> ground_truth(const SceneConfig& scene, int64_t t_us) {
    check_scene(scene);
    const double t = static_cast<double>(t_us) * 1e-6;
    std::vector<GroundTruthBox> boxes;
    for (const ObjectSpec& obj : scene.objects) {
        const Vec2 c = object_center(obj, scene, t);
        const double half = obj.size / 2.0;
        GroundTruthBox b;
        b.cls = obj.class_id();
        b.x_min = std::max(0.0, c.x - half);
        b.y_min = std::max(0.0, c.y - half);
        b.x_max = std::min(static_cast<double>(scene.width), c.x + half);
        b.y_max = std::min(static_cast<double>(scene.height), c.y + half);
        b.t_us = t_us;
        if (b.x_min < b.x_max && b.y_min < b.y_max) boxes.push_back(b);
    }
    return boxes;
}

int64_t tick_start_us(int f_event_hz, int64_t k) {
    if (f_event_hz < 1) throw std::invalid_argument("tick_start_us: f_event must be >= 1 Hz");
    if (k < 0) throw std::invalid_argument("tick_start_us: tick must be >= 0");
    return k * 1000000 / f_event_hz;
}

SequenceDataset make_dataset(const SceneConfig& scene, double duration_sec, int f_event_hz,
                             int rgb_divisor) {
    check_scene(scene);
    if (f_event_hz < 1) throw std::invalid_argument("make_dataset: f_event must be >= 1 Hz");
    if (rgb_divisor < 1) throw std::invalid_argument("make_dataset: rgb divisor must be >= 1");
    const double ticks_f = duration_sec * f_event_hz;
    const int num_ticks = static_cast<int>(std::lround(ticks_f));
    if (std::abs(ticks_f - num_ticks) > 1e-9)
        throw std::invalid_argument("make_dataset: duration*f_event must be an integer tick count");
    if (num_ticks < 2) throw std::invalid_argument("make_dataset: need at least 2 ticks");

    SequenceDataset ds;
    ds.scene = scene;
    ds.f_event = f_event_hz;
    ds.rgb_divisor = rgb_divisor;
    ds.num_ticks = num_ticks;
    ds.events = generate_events(scene, 0, tick_start_us(f_event_hz, num_ticks));

    // frame for tick j is the scene at the window start, so RGB timestamps
    // stay exact tick boundaries
    for (int j = 0; j < num_ticks; j += rgb_divisor) {
        Frame f;
        f.tick = j;
        f.t_us = tick_start_us(f_event_hz, j);
        f.rgb = quantize8(render_frame(scene, f.t_us));
        ds.frames.push_back(std::move(f));
    }
    // annotations describe the scene at the end of each event window
    for (int kk = 0; kk < num_ticks; ++kk) {
        TickGroundTruth tg;
        tg.tick = kk;
        tg.t_us = tick_start_us(f_event_hz, kk + 1);
        tg.boxes = ground_truth(scene, tg.t_us);
        ds.gt.push_back(std::move(tg));
    }
    return ds;
}

namespace {

using nlohmann::json;

json scene_to_json(const SceneConfig& s) {
    json objs = json::array();
    for (const auto& o : s.objects)
        objs.push_back({{"shape", static_cast<int>(o.shape)},
                        {"intensity", o.intensity},
                        {"size", o.size},
                        {"x0", o.x0},
                        {"y0", o.y0},
                        {"vx", o.vx},
                        {"vy", o.vy},
                        {"sin_amp", o.sin_amp},
                        {"sin_period", o.sin_period},
                        {"sin_phase", o.sin_phase},
                        {"bounce", o.bounce},
                        {"pause_start", o.pause_start},
                        {"pause_end", o.pause_end}});
    return {{"width", s.width},      {"height", s.height},   {"background", s.background},
            {"objects", objs},       {"contrast", s.contrast}, {"substeps", s.substeps},
            {"base_hz", s.base_hz},  {"seed", s.seed}};
}

SceneConfig scene_from_json(const json& j) {
    SceneConfig s;
    s.width = j.at("width");
    s.height = j.at("height");
    s.background = j.at("background");
    s.contrast = j.at("contrast");
    s.substeps = j.at("substeps");
    s.base_hz = j.at("base_hz");
    s.seed = j.at("seed");
    for (const auto& jo : j.at("objects")) {
        ObjectSpec o;
        o.shape = static_cast<Shape>(jo.at("shape").get<int>());
        o.intensity = jo.at("intensity");
        o.size = jo.at("size");
        o.x0 = jo.at("x0");
        o.y0 = jo.at("y0");
        o.vx = jo.at("vx");
        o.vy = jo.at("vy");
        o.sin_amp = jo.at("sin_amp");
        o.sin_period = jo.at("sin_period");
        o.sin_phase = jo.at("sin_phase");
        o.bounce = jo.at("bounce");
        o.pause_start = jo.at("pause_start");
        o.pause_end = jo.at("pause_end");
        s.objects.push_back(o);
    }
    return s;
}

std::string frame_name(int tick) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d.png", tick);
    return buf;
}

} // namespace

void save_dataset(const std::string& dir, const SequenceDataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "frames");
    write_evs((fs::path(dir) / "events.evs").string(), static_cast<uint16_t>(ds.scene.width),
              static_cast<uint16_t>(ds.scene.height), ds.events);
    for (const Frame& f : ds.frames)
        write_png_rgb8((fs::path(dir) / "frames" / frame_name(f.tick)).string(), f.rgb);

    std::ofstream gtf(fs::path(dir) / "gt.jsonl");
    if (!gtf) throw std::runtime_error("save_dataset: cannot write gt.jsonl in " + dir);
    for (const TickGroundTruth& tg : ds.gt) {
        json boxes = json::array();
        for (const auto& b : tg.boxes)
            boxes.push_back({{"cls", b.cls},
                             {"x_min", b.x_min},
                             {"y_min", b.y_min},
                             {"x_max", b.x_max},
                             {"y_max", b.y_max}});
        gtf << json{{"tick", tg.tick}, {"t_us", tg.t_us}, {"boxes", boxes}}.dump() << "\n";
    }

    json meta{{"scene", scene_to_json(ds.scene)},
              {"f_event", ds.f_event},
              {"rgb_divisor", ds.rgb_divisor},
              {"num_ticks", ds.num_ticks}};
    std::ofstream mf(fs::path(dir) / "meta.json");
    if (!mf) throw std::runtime_error("save_dataset: cannot write meta.json in " + dir);
    mf << meta.dump(2) << "\n";
}

SequenceDataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "meta.json");
    if (!mf) throw std::runtime_error("load_dataset: missing meta.json in " + dir);
    json meta = json::parse(mf);

    SequenceDataset ds;
    ds.scene = scene_from_json(meta.at("scene"));
    ds.f_event = meta.at("f_event");
    ds.rgb_divisor = meta.at("rgb_divisor");
    ds.num_ticks = meta.at("num_ticks");

    EvsData ev = read_evs((fs::path(dir) / "events.evs").string());
    ds.events = std::move(ev.events);

    for (int j = 0; j < ds.num_ticks; j += ds.rgb_divisor) {
        Frame f;
        f.tick = j;
        f.t_us = tick_start_us(ds.f_event, j);
        f.rgb = read_png_rgb8((fs::path(dir) / "frames" / frame_name(j)).string());
        ds.frames.push_back(std::move(f));
    }

    std::ifstream gtf(fs::path(dir) / "gt.jsonl");
    if (!gtf) throw std::runtime_error("load_dataset: missing gt.jsonl in " + dir);
    std::string line;
    while (std::getline(gtf, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        TickGroundTruth tg;
        tg.tick = j.at("tick");
        tg.t_us = j.at("t_us");
        for (const auto& jb : j.at("boxes")) {
            GroundTruthBox b;
            b.cls = jb.at("cls");
            b.x_min = jb.at("x_min");
            b.y_min = jb.at("y_min");
            b.x_max = jb.at("x_max");
            b.y_max = jb.at("y_max");
            b.t_us = tg.t_us;
            tg.boxes.push_back(b);
        }
        ds.gt.push_back(std::move(tg));
    }
    return ds;
}

SceneConfig default_scene(uint64_t seed) {
    Rng rng(seed * 0x9e3779b97f4a7c15ULL + 0x6d2b79f5ULL);
    SceneConfig s;
    s.seed = seed;
    s.objects.resize(3);

    const double sizes[3] = {15.0, 16.0, 17.0};
    const double intensities[3] = {0.85, 0.55, 0.30};
    for (int i = 0; i < 3; ++i) {
        ObjectSpec& o = s.objects[i];
        o.shape = static_cast<Shape>(i);
        o.size = sizes[i];
        o.intensity = intensities[i];
        o.x0 = rng.uniform(o.size, s.width - o.size);
        o.y0 = rng.uniform(o.size, s.height - o.size);
        const double speed = rng.uniform(22.0, 40.0);
        const double angle = rng.uniform(0.0, 2.0 * M_PI);
        o.vx = speed * std::cos(angle);
        o.vy = speed * std::sin(angle);
        o.bounce = true;
    }
    // the disc additionally wobbles so at least one trajectory is nonlinear
    s.objects[0].sin_amp = rng.uniform(5.0, 9.0);
    s.objects[0].sin_period = rng.uniform(1.2, 2.0);
    s.objects[0].sin_phase = rng.uniform(0.0, 2.0 * M_PI);
    return s;
}

} // namespace evfuse
