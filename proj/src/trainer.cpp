#include "evfuse/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace evfuse {

void TimeShiftConfig::validate() const {
    if (dt_min < 0 || dt_min > dt_max)
        throw std::invalid_argument("time shift: need 0 <= dt_min <= dt_max");
}

int sample_shift(const TimeShiftConfig& config, Rng& rng) {
    config.validate();
    if (!config.enabled) return 0;
    return static_cast<int>(rng.uniform_int(config.dt_min, config.dt_max));
}

PairedSample build_pair(const SequenceDataset& seq, int tick, int dt, int num_bins) {
    if (tick < 0 || tick >= seq.num_ticks) throw std::out_of_range("build_pair: tick out of range");
    if (dt < 0) throw std::invalid_argument("build_pair: negative shift");
    if (seq.frames.empty()) throw std::invalid_argument("build_pair: sequence has no frames");

    PairedSample s;
    s.dt = dt;
    s.event_tick = tick;

    const int64_t t0 = tick_start_us(seq.f_event, tick);
    const int64_t t1 = tick_start_us(seq.f_event, tick + 1);
    auto lo = std::lower_bound(seq.events.begin(), seq.events.end(), t0,
                               [](const EventPoint& e, int64_t t) { return e.t < t; });
    auto hi = std::lower_bound(lo, seq.events.end(), t1,
                               [](const EventPoint& e, int64_t t) { return e.t < t; });
    std::vector<EventPoint> slice(lo, hi);
    VoxelConfig vc{num_bins, seq.scene.width, seq.scene.height};
    s.voxel = voxelize(slice, t0, t1, vc).to_tensor();

    const int target = std::max(tick - dt, 0);
    auto fit = std::upper_bound(seq.frames.begin(), seq.frames.end(), target,
                                [](int t, const Frame& f) { return t < f.tick; });
    if (fit == seq.frames.begin()) throw std::invalid_argument("build_pair: no frame at or before tick 0");
    --fit;
    s.rgb = fit->rgb;
    s.rgb_tick = fit->tick;

    s.annotations = seq.gt.at(tick).boxes;
    return s;
}

double onecycle_lr(int64_t step, int64_t total_steps, double max_lr) {
    if (total_steps <= 0) throw std::invalid_argument("onecycle_lr: total_steps must be positive");
    if (step < 0 || step > total_steps) throw std::invalid_argument("onecycle_lr: step outside schedule");
    if (max_lr <= 0) throw std::invalid_argument("onecycle_lr: max_lr must be positive");
    const int64_t warm = std::llround(0.3 * static_cast<double>(total_steps));
    if (step <= warm) {
        if (step == warm) return max_lr; // exact peak, no float round-trip
        const double lr0 = max_lr / 25.0;
        return lr0 + (max_lr - lr0) * static_cast<double>(step) / static_cast<double>(warm);
    }
    const double t = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
    const double lo = max_lr / 1000.0;
    return lo + (max_lr - lo) * 0.5 * (1.0 + std::cos(M_PI * t));
}

void TrainConfig::validate() const {
    if (iterations < 0) throw std::invalid_argument("train config: negative iteration count");
    if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
    if (max_lr <= 0) throw std::invalid_argument("train config: max_lr must be positive");
    if (unroll_len < 1) throw std::invalid_argument("train config: unroll length must be >= 1");
    if (tbptt_detach < 1) throw std::invalid_argument("train config: truncation length must be >= 1");
    time_shift.validate();
}

WindowAugment sample_augment(Rng& rng) {
    WindowAugment a;
    a.hflip = rng.uniform() < 0.5;
    a.zoom = rng.uniform() < 0.5 ? 1.0 : rng.uniform(1.0, 1.2);
    return a;
}

namespace {

Tensor hflip_tensor(const Tensor& in) {
    Tensor out(in.c, in.h, in.w);
    for (int c = 0; c < in.c; ++c)
        for (int y = 0; y < in.h; ++y)
            for (int x = 0; x < in.w; ++x) out.at(c, y, x) = in.at(c, y, in.w - 1 - x);
    return out;
}

Tensor zoom_tensor(const Tensor& in, double z) {
    Tensor out(in.c, in.h, in.w);
    const double y0 = in.h / 2.0 * (1.0 - 1.0 / z);
    const double x0 = in.w / 2.0 * (1.0 - 1.0 / z);
    std::vector<int> sy(in.h), sx(in.w);
    for (int y = 0; y < in.h; ++y)
        sy[y] = std::clamp(static_cast<int>(std::floor(y0 + (y + 0.5) / z)), 0, in.h - 1);
    for (int x = 0; x < in.w; ++x)
        sx[x] = std::clamp(static_cast<int>(std::floor(x0 + (x + 0.5) / z)), 0, in.w - 1);
    for (int c = 0; c < in.c; ++c)
        for (int y = 0; y < in.h; ++y)
            for (int x = 0; x < in.w; ++x) out.at(c, y, x) = in.at(c, sy[y], sx[x]);
    return out;
}

} // namespace

void apply_augment(std::vector<PairedSample>& window, const WindowAugment& aug) {
    if (aug.zoom < 1.0) throw std::invalid_argument("apply_augment: zoom must be >= 1");
    for (PairedSample& s : window) {
        const int W = s.voxel.w, H = s.voxel.h;
        if (aug.hflip) {
            s.voxel = hflip_tensor(s.voxel);
            s.rgb = hflip_tensor(s.rgb);
            for (auto& b : s.annotations) {
                const double x1 = W - b.x_max, x2 = W - b.x_min;
                b.x_min = x1;
                b.x_max = x2;
            }
        }
        if (aug.zoom > 1.0) {
            s.voxel = zoom_tensor(s.voxel, aug.zoom);
            s.rgb = zoom_tensor(s.rgb, aug.zoom);
            const double y0 = H / 2.0 * (1.0 - 1.0 / aug.zoom);
            const double x0 = W / 2.0 * (1.0 - 1.0 / aug.zoom);
            std::vector<GroundTruthBox> kept;
            for (auto b : s.annotations) {
                b.x_min = std::clamp((b.x_min - x0) * aug.zoom, 0.0, static_cast<double>(W));
                b.x_max = std::clamp((b.x_max - x0) * aug.zoom, 0.0, static_cast<double>(W));
                b.y_min = std::clamp((b.y_min - y0) * aug.zoom, 0.0, static_cast<double>(H));
                b.y_max = std::clamp((b.y_max - y0) * aug.zoom, 0.0, static_cast<double>(H));
                if (b.x_max - b.x_min >= 2.0 && b.y_max - b.y_min >= 2.0) kept.push_back(b);
            }
            s.annotations = std::move(kept);
        }
    }
}

RecurrentState detach_state(const RecurrentState& state) {
    RecurrentState out;
    for (const auto& st : state.stages)
        out.stages.push_back({Var(st.h.val(), false), Var(st.c.val(), false)});
    return out;
}

WindowLoss unroll_loss(const std::vector<PairedSample>& window, const DetectorParams& params,
                       FusionMode mode, int detach_every, bool use_rgb,
                       const RecurrentState* init_state, bool use_align) {
    if (window.empty()) throw std::invalid_argument("unroll_loss: empty window");
    if (detach_every < 0) throw std::invalid_argument("unroll_loss: negative truncation period");

    const int h = window.front().voxel.h, w = window.front().voxel.w;
    RecurrentState state = init_state ? *init_state : reset_state(params.config, h, w);

    WindowLoss out;
    Var total;
    for (size_t s = 0; s < window.size(); ++s) {
        if (detach_every > 0 && s > 0 && s % static_cast<size_t>(detach_every) == 0)
            state = detach_state(state);
        std::optional<Tensor> rgb;
        if (use_rgb) rgb = window[s].rgb;
        FeatureMap fused = stage1_fused(window[s].voxel, rgb, params, mode, use_align);
        ForwardResult res = forward_tail(fused, state, params);
        state = std::move(res.state);
        DetectionLoss dl = detection_loss(res.head, window[s].annotations, params.config.num_classes);
        total = total.defined() ? add(total, dl.total) : dl.total;
        out.iou += dl.iou;
        out.cls += dl.cls;
        out.obj += dl.obj;
    }
    const double inv = 1.0 / static_cast<double>(window.size());
    out.total = mul_scalar(total, inv);
    out.iou *= inv;
    out.cls *= inv;
    out.obj *= inv;
    out.final_state = std::move(state);
    return out;
}

AdamOptimizer::AdamOptimizer(double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(DetectorParams& params, const std::map<std::string, Tensor>& grads,
                         double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, v] : params.named()) {
        Tensor& p = v->node()->val;
        auto mit = m_.try_emplace(name, Tensor(p.c, p.h, p.w)).first;
        auto vit = v_.try_emplace(name, Tensor(p.c, p.h, p.w)).first;
        Tensor& m = mit->second;
        Tensor& vv = vit->second;
        const auto git = grads.find(name);
        if (git != grads.end() && git->second.size() != p.size())
            throw std::invalid_argument("adam: gradient shape mismatch for " + name);
        for (size_t i = 0; i < p.size(); ++i) {
            const double g = git != grads.end() ? git->second.v[i] : 0.0;
            m.v[i] = beta1_ * m.v[i] + (1.0 - beta1_) * g;
            vv.v[i] = beta2_ * vv.v[i] + (1.0 - beta2_) * g * g;
            const double mhat = m.v[i] / bc1;
            const double vhat = vv.v[i] / bc2;
            p.v[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

TrainResult train(const SequenceDataset& dataset, const TrainConfig& config,
                  const DetectorParams& params_init) {
    config.validate();
    params_init.config.validate();
    if (dataset.num_ticks < config.unroll_len)
        throw std::invalid_argument("train: sequence shorter than the unroll length");

    TrainResult out;
    out.params = params_init;
    for (auto& [name, v] : out.params.named()) *v = Var(v->val(), true); // private leaves

    Rng rng(config.seed);
    AdamOptimizer adam;
    const int bins = out.params.config.voxel_bins;

    for (int iter = 0; iter < config.iterations; ++iter) {
        const double lr = onecycle_lr(iter, config.iterations, config.max_lr);
        const int detach = iter % 2 == 1 ? config.tbptt_detach : 0; // even BPTT, odd TBPTT

        std::map<std::string, Tensor> acc;
        double lt = 0, li = 0, lc = 0, lo = 0;
        for (int b = 0; b < config.batch_size; ++b) {
            const int start = static_cast<int>(rng.uniform_int(0, dataset.num_ticks - config.unroll_len));
            std::vector<PairedSample> window;
            window.reserve(config.unroll_len);
            for (int s = 0; s < config.unroll_len; ++s)
                window.push_back(
                    build_pair(dataset, start + s, sample_shift(config.time_shift, rng), bins));
            if (config.augment) apply_augment(window, sample_augment(rng));

            WindowLoss wl = unroll_loss(window, out.params, config.fusion_mode, detach,
                                        config.use_rgb, nullptr, config.use_align);
            if (!std::isfinite(wl.total.val().v[0]))
                throw std::runtime_error("train: non-finite loss at iteration " + std::to_string(iter) +
                                         " (window start " + std::to_string(start) + ")");

            GradMap gm = backward(wl.total);
            for (auto& [name, v] : out.params.named()) {
                const Tensor* g = gm.find(v->node().get());
                if (!g) continue;
                auto it = acc.try_emplace(name, Tensor(g->c, g->h, g->w)).first;
                for (size_t i = 0; i < g->size(); ++i) it->second.v[i] += g->v[i];
            }
            lt += wl.total.val().v[0];
            li += wl.iou;
            lc += wl.cls;
            lo += wl.obj;
        }

        const double inv_b = 1.0 / config.batch_size;
        for (auto& [name, g] : acc)
            for (auto& x : g.v) x *= inv_b;
        adam.step(out.params, acc, lr);
        out.log.push_back({iter, lr, lt * inv_b, li * inv_b, lc * inv_b, lo * inv_b});
    }
    return out;
}

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& log) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("write_train_log: cannot open " + path);
    f << "iteration,lr,loss_total,loss_iou,loss_cls,loss_obj\n";
    char buf[256];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.iteration, r.lr,
                      r.loss_total, r.loss_iou, r.loss_cls, r.loss_obj);
        f << buf;
    }
    if (!f) throw std::runtime_error("write_train_log: write failed for " + path);
}

void write_config_echo(const std::string& path, const TrainConfig& config) {
    nlohmann::json j{
        {"iterations", config.iterations},
        {"batch_size", config.batch_size},
        {"max_lr", config.max_lr},
        {"unroll_len", config.unroll_len},
        {"tbptt_detach", config.tbptt_detach},
        {"seed", config.seed},
        {"fusion_mode", config.fusion_mode == FusionMode::ef ? "ef" : "cat"},
        {"use_rgb", config.use_rgb},
        {"use_align", config.use_align},
        {"augment", config.augment},
        {"time_shift",
         {{"enabled", config.time_shift.enabled},
          {"dt_min", config.time_shift.dt_min},
          {"dt_max", config.time_shift.dt_max}}},
    };
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("write_config_echo: cannot open " + path);
    f << j.dump(2) << "\n";
}

} // namespace evfuse
