#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "evfuse/detector.hpp"
#include "gradcheck.hpp"

using namespace evfuse;

namespace {

DetectorConfig mini_config() {
    DetectorConfig c;
    c.widths = {2, 2, 2, 2};
    c.num_classes = 2;
    c.voxel_bins = 1;
    c.csp_depth = 1;
    c.fpn_width = 2;
    c.head_width = 2;
    c.attn_reduction = 8;
    return c;
}

DetectorConfig small_config() {
    DetectorConfig c;
    c.widths = {4, 6, 8, 10};
    c.num_classes = 3;
    c.voxel_bins = 2;
    c.csp_depth = 1;
    c.fpn_width = 6;
    c.head_width = 6;
    c.attn_reduction = 4;
    return c;
}

EventVoxelGrid random_voxel(Rng& rng, int bins, int h, int w) {
    EventVoxelGrid g;
    g.num_bins = bins;
    g.width = w;
    g.height = h;
    g.t_a = 0;
    g.t_b = 1000;
    g.counts.assign(static_cast<size_t>(2) * bins * h * w, 0);
    for (auto& c : g.counts)
        if (rng.uniform() < 0.2) c = static_cast<int32_t>(rng.uniform_int(1, 3));
    return g;
}

Tensor random_tensor(Rng& rng, int c, int h, int w, double lo = -1.0, double hi = 1.0) {
    Tensor t(c, h, w);
    for (auto& v : t.v) v = lo + (hi - lo) * rng.uniform();
    return t;
}

bool same_values(const Tensor& a, const Tensor& b) {
    return a.c == b.c && a.h == b.h && a.w == b.w &&
           std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double bce_ref(double x, double t) {
    return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
}

double iou_ref(double ax1, double ay1, double ax2, double ay2, double bx1, double by1, double bx2,
               double by2) {
    const double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
    const double ih = std::min(ay2, by2) - std::max(ay1, by1);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter);
}

} // namespace

TEST_CASE("conv_lstm_step matches hand gating with zero parameters") {
    const int c = 2, h = 3, w = 4;
    LstmParams p;
    p.gates.w = Var(Tensor(4 * c, 2 * c, 9), false);
    p.gates.b = Var(Tensor(4 * c, 1, 1), false);

    Rng rng(11);
    FeatureMap x{Var(random_tensor(rng, c, h, w), false), 4};

    SUBCASE("zero state stays zero") {
        LstmState st{Var(Tensor(c, h, w), false), Var(Tensor(c, h, w), false)};
        auto [y, ns] = conv_lstm_step(x, st, p);
        for (double v : y.values.val().v) CHECK(v == 0.0);
        for (double v : ns.c.val().v) CHECK(v == 0.0);
    }
    SUBCASE("nonzero cell: gates all one half") {
        Tensor c0 = random_tensor(rng, c, h, w);
        LstmState st{Var(Tensor(c, h, w), false), Var(c0, false)};
        auto [y, ns] = conv_lstm_step(x, st, p);
        for (size_t i = 0; i < c0.size(); ++i) {
            const double cexp = 0.5 * c0.v[i];
            CHECK(ns.c.val().v[i] == doctest::Approx(cexp).epsilon(1e-12));
            CHECK(y.values.val().v[i] == doctest::Approx(0.5 * std::tanh(cexp)).epsilon(1e-12));
        }
    }
    SUBCASE("shape mismatches rejected") {
        LstmState st{Var(Tensor(c, h, w + 1), false), Var(Tensor(c, h, w + 1), false)};
        CHECK_THROWS_AS(conv_lstm_step(x, st, p), std::invalid_argument);
        LstmState st2{Var(Tensor(c + 1, h, w), false), Var(Tensor(c + 1, h, w), false)};
        CHECK_THROWS_AS(conv_lstm_step(x, st2, p), std::invalid_argument);
    }
}

TEST_CASE("conv_lstm_step carries state between steps") {
    const int c = 2, h = 4, w = 4;
    Rng rng(12);
    LstmParams p;
    p.gates.w = Var(he_uniform(rng, 4 * c, 2 * c, 9, 2 * c * 9), true);
    p.gates.b = Var(Tensor(4 * c, 1, 1), true);

    FeatureMap x{Var(random_tensor(rng, c, h, w), false), 4};
    LstmState st{Var(Tensor(c, h, w), false), Var(Tensor(c, h, w), false)};
    auto [y1, s1] = conv_lstm_step(x, st, p);
    auto [y2, s2] = conv_lstm_step(x, s1, p);
    CHECK_FALSE(same_values(y1.values.val(), y2.values.val()));
    CHECK_FALSE(same_values(s1.c.val(), s2.c.val()));
    CHECK(y1.stride == 4);
}

TEST_CASE("conv_lstm_step gradients agree with finite differences") {
    const int c = 2, h = 3, w = 3;
    Rng rng(13);
    std::vector<Tensor> init = {
        he_uniform(rng, 4 * c, 2 * c, 9, 2 * c * 9), // gate weights
        random_tensor(rng, 4 * c, 1, 1, -0.3, 0.3),  // gate bias
        random_tensor(rng, c, h, w),                 // input
        random_tensor(rng, c, h, w, -0.5, 0.5),      // hidden
        random_tensor(rng, c, h, w, -0.5, 0.5),      // cell
    };
    auto f = [&](std::vector<Var>& vs) {
        LstmParams p{ConvParams{vs[0], vs[1]}};
        auto [y, ns] = conv_lstm_step(FeatureMap{vs[2], 4}, LstmState{vs[3], vs[4]}, p);
        return add(sum_all(y.values), sum_all(mul(ns.c, ns.c)));
    };
    testutil::gradcheck(f, init, 1e-3, 1e-6);
}

TEST_CASE("forward produces the contracted grid shapes") {
    DetectorConfig cfg = small_config();
    Rng rng(21);
    DetectorParams params = DetectorParams::init(rng, cfg);
    const int H = 96, W = 128;

    EventVoxelGrid voxel = random_voxel(rng, cfg.voxel_bins, H, W);
    Tensor rgb = random_tensor(rng, 3, H, W, 0.0, 1.0);
    RecurrentState st = reset_state(cfg, H, W);
    ForwardResult res = forward(voxel, rgb, st, params, FusionMode::ef);

    REQUIRE(res.fpn.size() == 3);
    REQUIRE(res.head.size() == 3);
    REQUIRE(res.state.stages.size() == 4);

    const int strides[3] = {8, 16, 32};
    for (int i = 0; i < 3; ++i) {
        CHECK(res.fpn[i].stride == strides[i]);
        CHECK(res.fpn[i].channels() == cfg.fpn_width);
        CHECK(res.fpn[i].height() == H / strides[i]);
        CHECK(res.fpn[i].width() == W / strides[i]);
        CHECK(res.head[i].stride == strides[i]);
        CHECK(res.head[i].cls.c() == cfg.num_classes);
        CHECK(res.head[i].cls.h() == H / strides[i]);
        CHECK(res.head[i].cls.w() == W / strides[i]);
        CHECK(res.head[i].reg.c() == 4);
        CHECK(res.head[i].obj.c() == 1);
    }
    const int sstrides[4] = {4, 8, 16, 32};
    for (int i = 0; i < 4; ++i) {
        CHECK(res.state.stages[i].h.c() == cfg.widths[i]);
        CHECK(res.state.stages[i].h.h() == H / sstrides[i]);
        CHECK(res.state.stages[i].h.w() == W / sstrides[i]);
    }
}

TEST_CASE("forward is bitwise deterministic") {
    DetectorConfig cfg = mini_config();
    Rng rng(22);
    DetectorParams params = DetectorParams::init(rng, cfg);
    EventVoxelGrid voxel = random_voxel(rng, cfg.voxel_bins, 32, 64);
    Tensor rgb = random_tensor(rng, 3, 32, 64, 0.0, 1.0);

    RecurrentState st = reset_state(cfg, 32, 64);
    ForwardResult a = forward(voxel, rgb, st, params, FusionMode::ef);
    ForwardResult b = forward(voxel, rgb, st, params, FusionMode::ef);
    for (int i = 0; i < 3; ++i) {
        CHECK(same_values(a.head[i].cls.val(), b.head[i].cls.val()));
        CHECK(same_values(a.head[i].reg.val(), b.head[i].reg.val()));
        CHECK(same_values(a.head[i].obj.val(), b.head[i].obj.val()));
    }
}

TEST_CASE("recurrent state changes the next prediction") {
    DetectorConfig cfg = mini_config();
    Rng rng(23);
    DetectorParams params = DetectorParams::init(rng, cfg);
    EventVoxelGrid voxel = random_voxel(rng, cfg.voxel_bins, 32, 32);

    RecurrentState st = reset_state(cfg, 32, 32);
    ForwardResult r1 = forward(voxel, std::nullopt, st, params, FusionMode::ef);
    ForwardResult r2 = forward(voxel, std::nullopt, r1.state, params, FusionMode::ef);
    bool any_diff = false;
    for (int i = 0; i < 3 && !any_diff; ++i)
        any_diff = !same_values(r1.head[i].obj.val(), r2.head[i].obj.val());
    CHECK(any_diff);
}

TEST_CASE("event-only mode ignores every rgb-branch parameter") {
    DetectorConfig cfg = mini_config();
    Rng rng(24);
    DetectorParams params = DetectorParams::init(rng, cfg);
    EventVoxelGrid voxel = random_voxel(rng, cfg.voxel_bins, 32, 32);
    RecurrentState st = reset_state(cfg, 32, 32);

    ForwardResult before = forward(voxel, std::nullopt, st, params, FusionMode::ef);
    for (auto& [name, v] : params.named())
        if (name.rfind("stem_rgb", 0) == 0 || name.rfind("align.", 0) == 0)
            for (auto& x : v->node()->val.v) x = 123.0;
    ForwardResult after = forward(voxel, std::nullopt, st, params, FusionMode::ef);
    for (int i = 0; i < 3; ++i) {
        CHECK(same_values(before.head[i].cls.val(), after.head[i].cls.val()));
        CHECK(same_values(before.head[i].reg.val(), after.head[i].reg.val()));
        CHECK(same_values(before.head[i].obj.val(), after.head[i].obj.val()));
    }
}

TEST_CASE("alignment bypass fuses the raw rgb stem and drops the align parameters") {
    DetectorConfig cfg = mini_config();
    Rng rng(26);
    DetectorParams params = DetectorParams::init(rng, cfg);
    EventVoxelGrid voxel = random_voxel(rng, cfg.voxel_bins, 32, 32);
    Tensor rgb = random_tensor(rng, 3, 32, 32, 0.0, 1.0);
    RecurrentState st = reset_state(cfg, 32, 32);

    ForwardResult aligned = forward(voxel, rgb, st, params, FusionMode::ef, true);
    ForwardResult bypassed = forward(voxel, rgb, st, params, FusionMode::ef, false);
    CHECK_FALSE(same_values(aligned.head[0].obj.val(), bypassed.head[0].obj.val()));

    // align.* params never enter the bypassed graph
    for (auto& [name, v] : params.named())
        if (name.rfind("align.", 0) == 0)
            for (auto& x : v->node()->val.v) x = 77.0;
    ForwardResult mutated = forward(voxel, rgb, st, params, FusionMode::ef, false);
    for (int i = 0; i < 3; ++i) {
        CHECK(same_values(bypassed.head[i].cls.val(), mutated.head[i].cls.val()));
        CHECK(same_values(bypassed.head[i].reg.val(), mutated.head[i].reg.val()));
        CHECK(same_values(bypassed.head[i].obj.val(), mutated.head[i].obj.val()));
    }
    // but the rgb stem still matters
    for (auto& [name, v] : params.named())
        if (name.rfind("stem_rgb", 0) == 0)
            for (auto& x : v->node()->val.v) x = 55.0;
    ForwardResult stem_moved = forward(voxel, rgb, st, params, FusionMode::ef, false);
    CHECK_FALSE(same_values(mutated.head[0].obj.val(), stem_moved.head[0].obj.val()));
}

TEST_CASE("fusion happens at stage one only") {
    DetectorConfig cfg = mini_config();
    Rng rng(25);
    DetectorParams params = DetectorParams::init(rng, cfg);
    EventVoxelGrid voxel = random_voxel(rng, cfg.voxel_bins, 32, 32);
    Tensor rgb = random_tensor(rng, 3, 32, 32, 0.0, 1.0);
    RecurrentState st = reset_state(cfg, 32, 32);

    SUBCASE("forward decomposes into stage-1 fusion plus an rgb-free tail") {
        ForwardResult whole = forward(voxel, rgb, st, params, FusionMode::ef);
        FeatureMap fused = stage1_fused(voxel.to_tensor(), rgb, params, FusionMode::ef);
        ForwardResult split = forward_tail(fused, st, params);
        for (int i = 0; i < 3; ++i) CHECK(same_values(whole.head[i].obj.val(), split.head[i].obj.val()));
    }
    SUBCASE("tail parameters cannot move the fused map") {
        FeatureMap f1 = stage1_fused(voxel.to_tensor(), rgb, params, FusionMode::ef);
        for (auto& x : params.fpn.top.w.node()->val.v) x = 55.0;
        for (auto& x : params.head[0].obj_pred.b.node()->val.v) x = -9.0;
        FeatureMap f2 = stage1_fused(voxel.to_tensor(), rgb, params, FusionMode::ef);
        CHECK(same_values(f1.values.val(), f2.values.val()));
    }
    SUBCASE("rgb image changes the output in fused mode") {
        ForwardResult with = forward(voxel, rgb, st, params, FusionMode::ef);
        ForwardResult without = forward(voxel, std::nullopt, st, params, FusionMode::ef);
        CHECK_FALSE(same_values(with.head[0].obj.val(), without.head[0].obj.val()));
    }
    SUBCASE("concat fusion mode runs too") {
        ForwardResult res = forward(voxel, rgb, st, params, FusionMode::cat);
        CHECK(res.head.size() == 3);
    }
}

TEST_CASE("forward validates its inputs") {
    DetectorConfig cfg = mini_config();
    Rng rng(26);
    DetectorParams params = DetectorParams::init(rng, cfg);
    RecurrentState st = reset_state(cfg, 32, 32);

    EventVoxelGrid bad_bins = random_voxel(rng, cfg.voxel_bins + 1, 32, 32);
    CHECK_THROWS_AS(forward(bad_bins, std::nullopt, st, params, FusionMode::ef), std::invalid_argument);

    EventVoxelGrid bad_size = random_voxel(rng, cfg.voxel_bins, 40, 32);
    CHECK_THROWS_AS(forward(bad_size, std::nullopt, st, params, FusionMode::ef), std::invalid_argument);

    EventVoxelGrid ok = random_voxel(rng, cfg.voxel_bins, 32, 32);
    Tensor rgb_bad = random_tensor(rng, 2, 32, 32);
    CHECK_THROWS_AS(forward(ok, rgb_bad, st, params, FusionMode::ef), std::invalid_argument);
    Tensor rgb_small = random_tensor(rng, 3, 32, 64);
    CHECK_THROWS_AS(forward(ok, rgb_small, st, params, FusionMode::ef), std::invalid_argument);

    CHECK_THROWS_AS(reset_state(cfg, 40, 32), std::invalid_argument);
    CHECK_THROWS_AS(reset_state(cfg, 0, 32), std::invalid_argument);
}

TEST_CASE("parameter budget and registry") {
    DetectorConfig cfg; // defaults
    Rng rng(27);
    DetectorParams params = DetectorParams::init(rng, cfg);
    const size_t n = params.param_count();
    INFO("default parameter count " << n);
    CHECK(n <= 25'000'000);
    CHECK(n >= 12'000'000);

    auto reg = params.named();
    std::set<std::string> names;
    for (auto& [name, v] : reg) {
        CHECK(v->node() != nullptr);
        names.insert(name);
    }
    CHECK(names.size() == reg.size()); // no duplicate names
}

TEST_CASE("lstm forget bias and head priors at init") {
    DetectorConfig cfg = small_config();
    Rng rng(28);
    DetectorParams params = DetectorParams::init(rng, cfg);

    const int c = cfg.widths[0];
    const Tensor& b = params.lstm1.gates.b.val();
    for (int i = 0; i < 4 * c; ++i) CHECK(b.v[i] == (i >= c && i < 2 * c ? 1.0 : 0.0));

    const double prior = -std::log((1.0 - 0.01) / 0.01);
    for (int i = 0; i < 3; ++i) {
        for (double v : params.head[i].obj_pred.b.val().v) CHECK(v == doctest::Approx(prior));
        for (double v : params.head[i].cls_pred.b.val().v) CHECK(v == doctest::Approx(prior));
    }

    // offset generator starts as the identity warp
    for (double v : params.align.offset_w.val().v) CHECK(v == 0.0);
}

TEST_CASE("decode matches a brute-force reference") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<HeadOutput> head;
        const int strides[2] = {8, 16};
        const int hs[2] = {6, 3}, ws[2] = {8, 4};
        for (int l = 0; l < 2; ++l) {
            HeadOutput ho;
            ho.cls = Var(random_tensor(rng, 3, hs[l], ws[l], -4.0, 2.0), false);
            ho.reg = Var(random_tensor(rng, 4, hs[l], ws[l], -1.0, 1.0), false);
            ho.obj = Var(random_tensor(rng, 1, hs[l], ws[l], -4.0, 3.0), false);
            ho.stride = strides[l];
            head.push_back(ho);
        }
        const double thr = 0.05, nms = 0.5;

        // independent reference: collect, sort, O(n^2) suppression
        struct Ref {
            int cls, stride, gy, gx;
            double score, x1, y1, x2, y2;
        };
        std::vector<Ref> cands;
        for (const auto& ho : head) {
            const Tensor& cls = ho.cls.val();
            const Tensor& reg = ho.reg.val();
            const Tensor& obj = ho.obj.val();
            for (int gy = 0; gy < obj.h; ++gy)
                for (int gx = 0; gx < obj.w; ++gx) {
                    int best = 0;
                    for (int c = 1; c < cls.c; ++c)
                        if (cls.at(c, gy, gx) > cls.at(best, gy, gx)) best = c;
                    const double score =
                        sigmoid_ref(obj.at(0, gy, gx)) * sigmoid_ref(cls.at(best, gy, gx));
                    if (score < thr) continue;
                    const double cx = (gx + 0.5 + reg.at(0, gy, gx)) * ho.stride;
                    const double cy = (gy + 0.5 + reg.at(1, gy, gx)) * ho.stride;
                    const double w = std::exp(std::min(reg.at(2, gy, gx), 12.0)) * ho.stride;
                    const double h = std::exp(std::min(reg.at(3, gy, gx), 12.0)) * ho.stride;
                    cands.push_back({best, ho.stride, gy, gx, score, cx - w / 2, cy - h / 2,
                                     cx + w / 2, cy + h / 2});
                }
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Ref& a, const Ref& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.stride != b.stride) return a.stride < b.stride;
            if (a.gy != b.gy) return a.gy < b.gy;
            if (a.gx != b.gx) return a.gx < b.gx;
            return a.cls < b.cls;
        });
        std::vector<Ref> expect;
        for (const Ref& c : cands) {
            bool keep = true;
            for (const Ref& k : expect)
                if (k.cls == c.cls &&
                    iou_ref(k.x1, k.y1, k.x2, k.y2, c.x1, c.y1, c.x2, c.y2) > nms)
                    keep = false;
            if (keep) expect.push_back(c);
        }

        std::vector<Detection> got = decode_detections(head, thr, nms);
        REQUIRE(got.size() == expect.size());
        for (size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].cls == expect[i].cls);
            CHECK(got[i].score == doctest::Approx(expect[i].score).epsilon(1e-12));
            CHECK(got[i].x_min == doctest::Approx(expect[i].x1).epsilon(1e-12));
            CHECK(got[i].y_max == doctest::Approx(expect[i].y2).epsilon(1e-12));
        }
        for (size_t i = 1; i < got.size(); ++i) CHECK(got[i - 1].score >= got[i].score);
    }
}

TEST_CASE("decode hand case: one dominant cell") {
    HeadOutput ho;
    ho.stride = 8;
    Tensor cls = Tensor::full(3, 2, 2, -20.0);
    Tensor reg(4, 2, 2);
    Tensor obj = Tensor::full(1, 2, 2, -20.0);
    obj.at(0, 0, 1) = 4.0;
    cls.at(1, 0, 1) = 3.0;
    cls.at(0, 0, 1) = -5.0;
    cls.at(2, 0, 1) = -5.0;
    reg.at(0, 0, 1) = 0.25;
    reg.at(1, 0, 1) = -0.25;
    reg.at(2, 0, 1) = std::log(2.0);
    ho.cls = Var(cls, false);
    ho.reg = Var(reg, false);
    ho.obj = Var(obj, false);

    auto dets = decode_detections({ho}, 0.05, 0.5);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].cls == 1);
    CHECK(dets[0].score == doctest::Approx(sigmoid_ref(4.0) * sigmoid_ref(3.0)).epsilon(1e-12));
    CHECK(dets[0].x_min == doctest::Approx(14.0 - 8.0).epsilon(1e-12));
    CHECK(dets[0].y_min == doctest::Approx(2.0 - 4.0).epsilon(1e-12));
    CHECK(dets[0].x_max == doctest::Approx(14.0 + 8.0).epsilon(1e-12));
    CHECK(dets[0].y_max == doctest::Approx(2.0 + 4.0).epsilon(1e-12));

    CHECK(decode_detections({ho}, 0.9999, 0.5).empty());
    CHECK_THROWS_AS(decode_detections({ho}, 0.0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(decode_detections({ho}, 0.5, 1.0), std::invalid_argument);
}

TEST_CASE("huge size logits stay finite in decode") {
    HeadOutput ho;
    ho.stride = 8;
    ho.cls = Var(Tensor::full(2, 1, 1, 5.0), false);
    Tensor reg(4, 1, 1);
    reg.at(2, 0, 0) = 500.0; // would overflow exp without the clamp
    reg.at(3, 0, 0) = 500.0;
    ho.reg = Var(reg, false);
    ho.obj = Var(Tensor::full(1, 1, 1, 5.0), false);
    auto dets = decode_detections({ho}, 0.05, 0.5);
    REQUIRE(dets.size() == 1);
    CHECK(std::isfinite(dets[0].x_max));
    CHECK(dets[0].x_max - dets[0].x_min == doctest::Approx(std::exp(12.0) * 8));
}

namespace {

std::vector<HeadOutput> zero_reg_head(int grid_h, int grid_w, int stride, int ncls = 2) {
    HeadOutput ho;
    ho.cls = Var(Tensor(ncls, grid_h, grid_w), false);
    ho.reg = Var(Tensor(4, grid_h, grid_w), false);
    ho.obj = Var(Tensor(1, grid_h, grid_w), false);
    ho.stride = stride;
    return {ho};
}

} // namespace

TEST_CASE("assignment obeys the centre prior") {
    // 8x8 grid at stride 8; zero regression means each cell predicts its own
    // stride-sized centred box.
    auto head = zero_reg_head(8, 8, 8);
    std::vector<GroundTruthBox> gt = {{0, 12.0, 12.0, 28.0, 28.0, 0}}; // centre (20,20)

    Assignment a = assign_targets(head, gt);
    // cells whose centres lie within 1.5*8 = 12 of (20,20): the 3x3 block
    // around cell (2,2), corners included (distance 8*sqrt(2) < 12)
    REQUIRE(a.positives.size() == 9);
    for (const auto& p : a.positives) {
        CHECK(p.level == 0);
        CHECK(p.gt == 0);
        CHECK(p.gy >= 1);
        CHECK(p.gy <= 3);
        CHECK(p.gx >= 1);
        CHECK(p.gx <= 3);
        const double cx = (p.gx + 0.5) * 8, cy = (p.gy + 0.5) * 8;
        CHECK(std::hypot(cx - 20.0, cy - 20.0) <= 12.0 + 1e-9);
    }
}

TEST_CASE("assignment keeps at most ten cells per box") {
    auto head = zero_reg_head(16, 16, 8);
    // very large box: the centre prior admits the same 9 cells, but grow the
    // radius by using a second, coarser level
    HeadOutput coarse;
    coarse.cls = Var(Tensor(2, 8, 8), false);
    coarse.reg = Var(Tensor(4, 8, 8), false);
    coarse.obj = Var(Tensor(1, 8, 8), false);
    coarse.stride = 16;
    head.push_back(coarse);

    std::vector<GroundTruthBox> gt = {{1, 24.0, 24.0, 72.0, 72.0, 0}}; // centre (48,48)
    Assignment a = assign_targets(head, gt);
    CHECK(a.positives.size() <= 10);
    CHECK(!a.positives.empty());
    // the kept cells must be the highest-IoU ones: every kept coarse cell is
    // legal, and no kept cell has IoU 0
    for (const auto& p : a.positives) {
        const int s = head[p.level].stride;
        const double cx = (p.gx + 0.5) * s, cy = (p.gy + 0.5) * s;
        const double iou =
            iou_ref(cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0, 24, 24, 72, 72);
        CHECK(iou > 0.0);
    }
}

TEST_CASE("duplicate claims resolve to one owner per cell") {
    auto head = zero_reg_head(8, 8, 8);
    std::vector<GroundTruthBox> gt = {{0, 12.0, 12.0, 28.0, 28.0, 0}, {1, 12.0, 12.0, 28.0, 28.0, 0}};
    Assignment a = assign_targets(head, gt);
    std::set<std::array<int, 3>> cells;
    for (const auto& p : a.positives) {
        CHECK(cells.insert({p.level, p.gy, p.gx}).second); // unique
        CHECK(p.gt == 0); // identical IoU resolves to the lower index
    }
    CHECK(a.positives.size() == 9);
}

TEST_CASE("empty ground truth gives an objectness-only loss") {
    auto head = zero_reg_head(4, 4, 8);
    DetectionLoss l = detection_loss(head, {}, 2);
    CHECK(l.num_fg == 0);
    CHECK(l.iou == 0.0);
    CHECK(l.cls == 0.0);
    CHECK(l.obj == doctest::Approx(16 * bce_ref(0.0, 0.0)).epsilon(1e-12));
    CHECK(l.total.val().v[0] == doctest::Approx(l.obj).epsilon(1e-12));
}

TEST_CASE("loss matches straight-line arithmetic on a single positive") {
    HeadOutput ho;
    ho.stride = 8;
    const int gh = 2, gw = 2;
    Tensor cls(2, gh, gw), reg(4, gh, gw), obj(1, gh, gw);
    // fill with mild background logits
    for (auto& v : cls.v) v = -1.1;
    for (auto& v : obj.v) v = -0.9;
    const double tx = 0.1, ty = -0.2, tw = 0.3, th = 0.05;
    reg.at(0, 0, 0) = tx;
    reg.at(1, 0, 0) = ty;
    reg.at(2, 0, 0) = tw;
    reg.at(3, 0, 0) = th;
    obj.at(0, 0, 0) = 0.7;
    cls.at(0, 0, 0) = -0.4;
    cls.at(1, 0, 0) = 0.2;
    ho.cls = Var(cls, false);
    ho.reg = Var(reg, false);
    ho.obj = Var(obj, false);

    std::vector<GroundTruthBox> gt = {{0, 0.0, 0.0, 8.0, 8.0, 0}};
    Assignment a;
    a.positives.push_back({0, 0, 0, 0});
    DetectionLoss l = loss_given_assignment({ho}, gt, a, 2);

    // objectness: positive cell plus three background cells
    const double obj_exp = bce_ref(0.7, 1.0) + 3 * bce_ref(-0.9, 0.0);
    // class: one-hot (1,0) at the positive
    const double cls_exp = bce_ref(-0.4, 1.0) + bce_ref(0.2, 0.0);
    // box: decode, overlap, generalised IoU
    const double cx = (0.5 + tx) * 8, cy = (0.5 + ty) * 8;
    const double w = std::exp(tw) * 8, h = std::exp(th) * 8;
    const double px1 = cx - w / 2, py1 = cy - h / 2, px2 = cx + w / 2, py2 = cy + h / 2;
    const double iw = std::max(0.0, std::min(px2, 8.0) - std::max(px1, 0.0));
    const double ih = std::max(0.0, std::min(py2, 8.0) - std::max(py1, 0.0));
    const double inter = iw * ih;
    const double uni = w * h + 64.0 - inter;
    const double ew = std::max(px2, 8.0) - std::min(px1, 0.0);
    const double eh = std::max(py2, 8.0) - std::min(py1, 0.0);
    const double giou = inter / uni - (ew * eh - uni) / (ew * eh);
    const double iou_exp = 1.0 - giou;

    CHECK(l.num_fg == 1);
    CHECK(l.obj == doctest::Approx(obj_exp).epsilon(1e-12));
    CHECK(l.cls == doctest::Approx(cls_exp).epsilon(1e-12));
    CHECK(l.iou == doctest::Approx(iou_exp).epsilon(1e-12));
    CHECK(l.total.val().v[0] == doctest::Approx(obj_exp + cls_exp + iou_exp).epsilon(1e-12));
}

TEST_CASE("a perfect prediction zeroes the box term") {
    auto head = zero_reg_head(2, 2, 8);
    // zero regression at cell (0,0) decodes to exactly [0,0,8,8]
    std::vector<GroundTruthBox> gt = {{0, 0.0, 0.0, 8.0, 8.0, 0}};
    Assignment a;
    a.positives.push_back({0, 0, 0, 0});
    DetectionLoss l = loss_given_assignment(head, gt, a, 2);
    CHECK(l.iou == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("loss normalisation uses the positive count") {
    auto head = zero_reg_head(8, 8, 8);
    std::vector<GroundTruthBox> gt = {{0, 12.0, 12.0, 28.0, 28.0, 0}};
    DetectionLoss l = detection_loss(head, gt, 2);
    REQUIRE(l.num_fg == 9);
    // 9 positive cells and 55 background cells, all logits zero
    const double obj_exp = 64 * bce_ref(0.0, 0.0) / 9.0;
    CHECK(l.obj == doctest::Approx(obj_exp).epsilon(1e-12));
    const double cls_exp = 9 * (bce_ref(0.0, 1.0) + bce_ref(0.0, 0.0)) / 9.0;
    CHECK(l.cls == doctest::Approx(cls_exp).epsilon(1e-12));
}

TEST_CASE("detection_loss validates ground truth") {
    auto head = zero_reg_head(2, 2, 8);
    CHECK_THROWS_AS(detection_loss(head, {{0, 8.0, 0.0, 8.0, 8.0, 0}}, 2), std::invalid_argument);
    CHECK_THROWS_AS(detection_loss(head, {{2, 0.0, 0.0, 8.0, 8.0, 0}}, 2), std::invalid_argument);
    CHECK_THROWS_AS(detection_loss(head, {{-1, 0.0, 0.0, 8.0, 8.0, 0}}, 2), std::invalid_argument);
}

TEST_CASE("loss backward reaches the shared parameters") {
    DetectorConfig cfg = mini_config();
    // seed picked so the width-1 attention MLP is not a dead relu; at toy
    // widths roughly half of all seeds kill it for every pooled input
    Rng rng(42);
    DetectorParams params = DetectorParams::init(rng, cfg);
    EventVoxelGrid voxel = random_voxel(rng, cfg.voxel_bins, 32, 32);
    Tensor rgb = random_tensor(rng, 3, 32, 32, 0.0, 1.0);
    RecurrentState st = reset_state(cfg, 32, 32);

    ForwardResult res = forward(voxel, rgb, st, params, FusionMode::ef);
    std::vector<GroundTruthBox> gt = {{0, 10.0, 10.0, 22.0, 22.0, 0}};
    DetectionLoss l = detection_loss(res.head, gt, cfg.num_classes);
    GradMap gm = backward(l.total);

    std::set<std::string> without_grad;
    for (auto& [name, v] : params.named()) {
        const Tensor* g = gm.find(v->node().get());
        bool nonzero = false;
        if (g)
            for (double x : g->v)
                if (x != 0.0) nonzero = true;
        if (!nonzero) without_grad.insert(name);
    }
    // only the concat-fuse projection sits outside the ef-mode graph
    CHECK(without_grad == std::set<std::string>{"catfuse.w", "catfuse.b"});
}

TEST_CASE("mini end-to-end gradients agree with finite differences") {
    DetectorConfig cfg = mini_config();
    Rng rng(42);
    DetectorParams params = DetectorParams::init(rng, cfg);
    // move the offset generator off the bilinear kinks at exact integers
    for (auto& v : params.align.offset_w.node()->val.v) v = 0.02 * (rng.uniform() - 0.5);
    for (auto& v : params.align.offset_b.node()->val.v) v = 0.02 * (rng.uniform() - 0.5);

    EventVoxelGrid voxel = random_voxel(rng, cfg.voxel_bins, 32, 32);
    Tensor rgb = random_tensor(rng, 3, 32, 32, 0.0, 1.0);
    std::vector<GroundTruthBox> gt = {{0, 9.0, 7.0, 23.0, 21.0, 0}, {1, 18.0, 20.0, 30.0, 30.0, 0}};

    RecurrentState st = reset_state(cfg, 32, 32);
    ForwardResult first = forward(voxel, rgb, st, params, FusionMode::ef);
    const Assignment frozen = assign_targets(first.head, gt);
    REQUIRE(!frozen.positives.empty());

    const std::vector<std::string> picked = {
        "stem_event.down1.w", "stem_rgb.down2.b",   "align.offset_b", "align.deform_w",
        "fuse.mlp_w1",        "fuse.spatial_b",     "fuse.proj_w",    "stage1.lstm.gates.b",
        "stage2.down.w",      "stage3.csp.bn0.b.b", "fpn.m2a.b",      "fpn.top.b",
        "head0.reg_pred.w",   "head1.cls_pred.b",   "head2.obj_pred.b"};

    std::vector<Tensor> init;
    {
        auto reg = params.named();
        for (const auto& want : picked) {
            auto it = std::find_if(reg.begin(), reg.end(),
                                   [&](const auto& kv) { return kv.first == want; });
            REQUIRE(it != reg.end());
            init.push_back(it->second->val());
        }
    }

    auto f = [&](std::vector<Var>& vs) {
        DetectorParams p = params;
        auto reg = p.named();
        for (size_t i = 0; i < picked.size(); ++i) {
            auto it = std::find_if(reg.begin(), reg.end(),
                                   [&](const auto& kv) { return kv.first == picked[i]; });
            *it->second = vs[i];
        }
        ForwardResult res = forward(voxel, rgb, reset_state(cfg, 32, 32), p, FusionMode::ef);
        return loss_given_assignment(res.head, gt, frozen, cfg.num_classes).total;
    };
    testutil::gradcheck(f, init, 1e-2, 1e-5);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    DetectorConfig cfg = mini_config();
    Rng rng(51);
    DetectorParams params = DetectorParams::init(rng, cfg);
    // make values irregular so byte-level identity means something
    for (auto& [name, v] : params.named())
        for (auto& x : v->node()->val.v) x += rng.uniform() * 1e-7;

    const std::string path = "detector_ckpt_test.bin";
    save_checkpoint(path, params);
    DetectorParams loaded = load_checkpoint(path);

    CHECK(loaded.config.widths == cfg.widths);
    CHECK(loaded.config.num_classes == cfg.num_classes);
    CHECK(loaded.config.voxel_bins == cfg.voxel_bins);
    CHECK(loaded.config.csp_depth == cfg.csp_depth);
    CHECK(loaded.config.fpn_width == cfg.fpn_width);
    CHECK(loaded.config.head_width == cfg.head_width);
    CHECK(loaded.config.attn_reduction == cfg.attn_reduction);

    auto ra = params.named();
    auto rb = loaded.named();
    REQUIRE(ra.size() == rb.size());
    for (size_t i = 0; i < ra.size(); ++i) {
        CHECK(ra[i].first == rb[i].first);
        CHECK(same_values(ra[i].second->val(), rb[i].second->val()));
    }

    // identical forward pass from the restored weights
    EventVoxelGrid voxel = random_voxel(rng, cfg.voxel_bins, 32, 32);
    RecurrentState st = reset_state(cfg, 32, 32);
    ForwardResult a = forward(voxel, std::nullopt, st, params, FusionMode::ef);
    ForwardResult b = forward(voxel, std::nullopt, st, loaded, FusionMode::ef);
    CHECK(same_values(a.head[0].obj.val(), b.head[0].obj.val()));

    std::filesystem::remove(path);
}

TEST_CASE("checkpoint loader rejects foreign files") {
    CHECK_THROWS_AS(load_checkpoint("no_such_checkpoint.bin"), std::runtime_error);
    const std::string path = "not_a_ckpt.bin";
    {
        std::ofstream f(path, std::ios::binary);
        f << "EVS0 this is something else entirely, long enough to pass the size check";
    }
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
    std::filesystem::remove(path);
}

TEST_CASE("config validation") {
    DetectorConfig c = mini_config();
    c.widths = {2, 2, 2};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = mini_config();
    c.widths = {2, 4, 2, 4};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = mini_config();
    c.widths = {3, 4, 6, 8};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = mini_config();
    c.num_classes = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = mini_config();
    c.voxel_bins = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK_NOTHROW(mini_config().validate());
}
