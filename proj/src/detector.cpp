#include "evfuse/detector.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace evfuse {

namespace {

// YOLOX-style rare-positive prior for objectness/class logits.
constexpr double kFocalBias = -4.59511985013459; // -log((1-0.01)/0.01)

ConvParams conv_init(Rng& rng, int cout, int cin, int k, double bias_fill = 0.0) {
    ConvParams p;
    p.w = param(he_uniform(rng, cout, cin, k * k, cin * k * k));
    p.b = param(Tensor::full(cout, 1, 1, bias_fill));
    return p;
}

CspParams csp_init(Rng& rng, int c, int depth) {
    CspParams p;
    const int half = c / 2;
    p.split_main = conv_init(rng, half, c, 1);
    p.split_side = conv_init(rng, half, c, 1);
    for (int i = 0; i < depth; ++i)
        p.bottlenecks.push_back({conv_init(rng, half, half, 1), conv_init(rng, half, half, 3)});
    p.out = conv_init(rng, c, c, 1);
    return p;
}

StemParams stem_init(Rng& rng, int in_ch, int c, int depth) {
    StemParams s;
    s.down1 = conv_init(rng, c, in_ch, 3);
    s.down2 = conv_init(rng, c, c, 3);
    s.csp = csp_init(rng, c, depth);
    return s;
}

LstmParams lstm_init(Rng& rng, int c) {
    LstmParams p;
    p.gates = conv_init(rng, 4 * c, 2 * c, 3);
    // forget gate starts open so fresh cells retain their state
    for (int i = c; i < 2 * c; ++i) p.gates.b.node()->val.v[i] = 1.0;
    return p;
}

StageParams stage_init(Rng& rng, int cin, int cout, int depth) {
    StageParams s;
    s.down = conv_init(rng, cout, cin, 3);
    s.csp = csp_init(rng, cout, depth);
    s.lstm = lstm_init(rng, cout);
    return s;
}

HeadLevelParams head_init(Rng& rng, int fpn_w, int head_w, int ncls) {
    HeadLevelParams h;
    h.stem = conv_init(rng, head_w, fpn_w, 3);
    h.cls1 = conv_init(rng, head_w, head_w, 3);
    h.cls2 = conv_init(rng, head_w, head_w, 3);
    h.cls_pred = conv_init(rng, ncls, head_w, 1, kFocalBias);
    h.reg1 = conv_init(rng, head_w, head_w, 3);
    h.reg2 = conv_init(rng, head_w, head_w, 3);
    h.reg_pred = conv_init(rng, 4, head_w, 1);
    h.obj_pred = conv_init(rng, 1, head_w, 1, kFocalBias);
    return h;
}

Var conv_act(const Var& x, const ConvParams& p, int stride, int pad) {
    return silu(conv2d(x, p.w, p.b, stride, pad));
}

Var csp_forward(const Var& x, const CspParams& p) {
    Var main = conv_act(x, p.split_main, 1, 0);
    Var side = conv_act(x, p.split_side, 1, 0);
    for (const auto& bn : p.bottlenecks)
        main = add(main, conv_act(conv_act(main, bn[0], 1, 0), bn[1], 1, 1));
    return conv_act(concat_ch(main, side), p.out, 1, 0);
}

Var stem_forward(const Var& x, const StemParams& p) {
    Var y = conv_act(x, p.down1, 2, 1);
    y = conv_act(y, p.down2, 2, 1);
    return csp_forward(y, p.csp);
}

double box_iou(double ax1, double ay1, double ax2, double ay2, double bx1, double by1, double bx2,
               double by2) {
    const double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
    const double ih = std::min(ay2, by2) - std::max(ay1, by1);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

struct CellBox {
    double x1, y1, x2, y2;
};

// Raw regression -> box in input pixels, shared by decode and assignment.
CellBox decode_cell(const Tensor& reg, int gy, int gx, int stride) {
    const double tx = reg.at(0, gy, gx), ty = reg.at(1, gy, gx);
    const double tw = std::min(reg.at(2, gy, gx), 12.0), th = std::min(reg.at(3, gy, gx), 12.0);
    const double cx = (gx + 0.5 + tx) * stride;
    const double cy = (gy + 0.5 + ty) * stride;
    const double w = std::exp(tw) * stride;
    const double h = std::exp(th) * stride;
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

} // namespace

void DetectorConfig::validate() const {
    if (widths.size() != 4) throw std::invalid_argument("detector config: need exactly 4 stage widths");
    for (size_t i = 0; i < widths.size(); ++i) {
        if (widths[i] < 2 || widths[i] % 2 != 0)
            throw std::invalid_argument("detector config: stage widths must be even and >= 2");
        if (i > 0 && widths[i] < widths[i - 1])
            throw std::invalid_argument("detector config: stage widths must be non-decreasing");
    }
    if (num_classes < 1) throw std::invalid_argument("detector config: need at least one class");
    if (voxel_bins < 1) throw std::invalid_argument("detector config: need at least one voxel bin");
    if (csp_depth < 1) throw std::invalid_argument("detector config: csp_depth must be >= 1");
    if (fpn_width < 1 || head_width < 1) throw std::invalid_argument("detector config: bad fpn/head width");
    if (attn_reduction < 1) throw std::invalid_argument("detector config: bad attention reduction");
}

DetectorParams DetectorParams::init(Rng& rng, const DetectorConfig& config) {
    config.validate();
    DetectorParams p;
    p.config = config;
    const auto& w = config.widths;
    p.stem_event = stem_init(rng, 2 * config.voxel_bins, w[0], config.csp_depth);
    p.stem_rgb = stem_init(rng, 3, w[0], config.csp_depth);
    p.align = AlignParams::init(rng, w[0]);
    p.ef = FusionParams::init(rng, w[0], config.attn_reduction);
    p.cat = ConcatFuseParams::init(rng, w[0]);
    p.lstm1 = lstm_init(rng, w[0]);
    p.stage2 = stage_init(rng, w[0], w[1], config.csp_depth);
    p.stage3 = stage_init(rng, w[1], w[2], config.csp_depth);
    p.stage4 = stage_init(rng, w[2], w[3], config.csp_depth);
    p.fpn.lat2 = conv_init(rng, config.fpn_width, w[1], 1);
    p.fpn.lat3 = conv_init(rng, config.fpn_width, w[2], 1);
    p.fpn.lat4 = conv_init(rng, config.fpn_width, w[3], 1);
    p.fpn.top = conv_init(rng, config.fpn_width, config.fpn_width, 3);
    p.fpn.m3a = conv_init(rng, config.fpn_width, 2 * config.fpn_width, 3);
    p.fpn.m3b = conv_init(rng, config.fpn_width, config.fpn_width, 3);
    p.fpn.m2a = conv_init(rng, config.fpn_width, 2 * config.fpn_width, 3);
    p.fpn.m2b = conv_init(rng, config.fpn_width, config.fpn_width, 3);
    for (int i = 0; i < 3; ++i)
        p.head[i] = head_init(rng, config.fpn_width, config.head_width, config.num_classes);
    return p;
}

std::vector<std::pair<std::string, Var*>> DetectorParams::named() {
    std::vector<std::pair<std::string, Var*>> out;
    auto add_conv = [&](const std::string& n, ConvParams& c) {
        out.emplace_back(n + ".w", &c.w);
        out.emplace_back(n + ".b", &c.b);
    };
    auto add_csp = [&](const std::string& n, CspParams& c) {
        add_conv(n + ".main", c.split_main);
        add_conv(n + ".side", c.split_side);
        for (size_t i = 0; i < c.bottlenecks.size(); ++i) {
            add_conv(n + ".bn" + std::to_string(i) + ".a", c.bottlenecks[i][0]);
            add_conv(n + ".bn" + std::to_string(i) + ".b", c.bottlenecks[i][1]);
        }
        add_conv(n + ".out", c.out);
    };
    auto add_stem = [&](const std::string& n, StemParams& s) {
        add_conv(n + ".down1", s.down1);
        add_conv(n + ".down2", s.down2);
        add_csp(n + ".csp", s.csp);
    };
    auto add_stage = [&](const std::string& n, StageParams& s) {
        add_conv(n + ".down", s.down);
        add_csp(n + ".csp", s.csp);
        add_conv(n + ".lstm.gates", s.lstm.gates);
    };

    add_stem("stem_event", stem_event);
    add_stem("stem_rgb", stem_rgb);
    for (auto& [n, v] : align.named()) out.emplace_back(n, v);
    for (auto& [n, v] : ef.named()) out.emplace_back(n, v);
    for (auto& [n, v] : cat.named()) out.emplace_back(n, v);
    add_conv("stage1.lstm.gates", lstm1.gates);
    add_stage("stage2", stage2);
    add_stage("stage3", stage3);
    add_stage("stage4", stage4);
    add_conv("fpn.lat2", fpn.lat2);
    add_conv("fpn.lat3", fpn.lat3);
    add_conv("fpn.lat4", fpn.lat4);
    add_conv("fpn.top", fpn.top);
    add_conv("fpn.m3a", fpn.m3a);
    add_conv("fpn.m3b", fpn.m3b);
    add_conv("fpn.m2a", fpn.m2a);
    add_conv("fpn.m2b", fpn.m2b);
    for (int i = 0; i < 3; ++i) {
        const std::string n = "head" + std::to_string(i);
        add_conv(n + ".stem", head[i].stem);
        add_conv(n + ".cls1", head[i].cls1);
        add_conv(n + ".cls2", head[i].cls2);
        add_conv(n + ".cls_pred", head[i].cls_pred);
        add_conv(n + ".reg1", head[i].reg1);
        add_conv(n + ".reg2", head[i].reg2);
        add_conv(n + ".reg_pred", head[i].reg_pred);
        add_conv(n + ".obj_pred", head[i].obj_pred);
    }
    return out;
}

size_t DetectorParams::param_count() {
    size_t n = 0;
    for (auto& [name, v] : named()) n += v->val().size();
    return n;
}

std::pair<FeatureMap, LstmState> conv_lstm_step(const FeatureMap& x, const LstmState& state,
                                                const LstmParams& params) {
    const int c = state.h.c();
    if (state.c.c() != c || x.height() != state.h.h() || x.width() != state.h.w() ||
        state.c.h() != state.h.h() || state.c.w() != state.h.w())
        throw std::invalid_argument("conv_lstm_step: state/input shape mismatch");
    if (params.gates.w.c() != 4 * c || params.gates.w.h() != x.channels() + c)
        throw std::invalid_argument("conv_lstm_step: params do not match input/state widths");

    Var z = conv2d(concat_ch(x.values, state.h), params.gates.w, params.gates.b, 1, 1);
    Var i = sigmoid(slice_ch(z, 0, c));
    Var f = sigmoid(slice_ch(z, c, 2 * c));
    Var o = sigmoid(slice_ch(z, 2 * c, 3 * c));
    Var g = tanh_(slice_ch(z, 3 * c, 4 * c));
    Var c2 = add(mul(f, state.c), mul(i, g));
    Var h2 = mul(o, tanh_(c2));
    return {FeatureMap{h2, x.stride}, LstmState{h2, c2}};
}

RecurrentState reset_state(const DetectorConfig& config, int height, int width) {
    config.validate();
    if (height % 32 != 0 || width % 32 != 0 || height < 32 || width < 32)
        throw std::invalid_argument("reset_state: input size must be a positive multiple of 32");
    RecurrentState st;
    const int strides[4] = {4, 8, 16, 32};
    for (int i = 0; i < 4; ++i) {
        Tensor zero(config.widths[i], height / strides[i], width / strides[i]);
        st.stages.push_back({Var(zero, false), Var(zero, false)});
    }
    return st;
}

FeatureMap stage1_fused(const Tensor& event_voxel, const std::optional<Tensor>& rgb_image,
                        const DetectorParams& params, FusionMode mode, bool use_align) {
    const DetectorConfig& cfg = params.config;
    if (event_voxel.c != 2 * cfg.voxel_bins)
        throw std::invalid_argument("stage1_fused: voxel channels " + std::to_string(event_voxel.c) +
                                    " do not match 2*" + std::to_string(cfg.voxel_bins));
    if (event_voxel.h % 32 != 0 || event_voxel.w % 32 != 0)
        throw std::invalid_argument("stage1_fused: input size must be a multiple of 32");

    FeatureMap ev{stem_forward(Var(event_voxel, false), params.stem_event), 4};
    FeatureMap rgb_aligned;
    if (rgb_image.has_value()) {
        if (rgb_image->c != 3 || rgb_image->h != event_voxel.h || rgb_image->w != event_voxel.w)
            throw std::invalid_argument("stage1_fused: rgb image must be 3 channels at sensor size");
        FeatureMap rgb{stem_forward(Var(*rgb_image, false), params.stem_rgb), 4};
        rgb_aligned = use_align ? align_module(rgb, ev, params.align) : rgb;
    } else {
        rgb_aligned = {Var(Tensor(ev.channels(), ev.height(), ev.width()), false), 4};
    }
    return mode == FusionMode::ef ? ef_fuse(ev, rgb_aligned, params.ef)
                                  : concat_fuse(ev, rgb_aligned, params.cat);
}

ForwardResult forward_tail(const FeatureMap& fused, const RecurrentState& state,
                           const DetectorParams& params) {
    if (state.stages.size() != 4) throw std::invalid_argument("forward_tail: state must hold 4 stages");
    ForwardResult res;
    res.state.stages.resize(4);

    auto [h1, s1] = conv_lstm_step(fused, state.stages[0], params.lstm1);
    res.state.stages[0] = s1;

    auto run_stage = [&](const FeatureMap& x, const StageParams& sp, const LstmState& st, int idx) {
        FeatureMap y{csp_forward(conv_act(x.values, sp.down, 2, 1), sp.csp), x.stride * 2};
        auto [h, ns] = conv_lstm_step(y, st, sp.lstm);
        res.state.stages[idx] = ns;
        return h;
    };
    FeatureMap h2 = run_stage(h1, params.stage2, state.stages[1], 1);
    FeatureMap h3 = run_stage(h2, params.stage3, state.stages[2], 2);
    FeatureMap h4 = run_stage(h3, params.stage4, state.stages[3], 3);

    Var l4 = conv_act(h4.values, params.fpn.lat4, 1, 0);
    Var p4 = conv_act(l4, params.fpn.top, 1, 1);
    Var l3 = conv_act(h3.values, params.fpn.lat3, 1, 0);
    Var m3 = conv_act(conv_act(concat_ch(upsample2x(l4), l3), params.fpn.m3a, 1, 1), params.fpn.m3b, 1, 1);
    Var l2 = conv_act(h2.values, params.fpn.lat2, 1, 0);
    Var m2 = conv_act(conv_act(concat_ch(upsample2x(m3), l2), params.fpn.m2a, 1, 1), params.fpn.m2b, 1, 1);

    res.fpn = {FeatureMap{m2, 8}, FeatureMap{m3, 16}, FeatureMap{p4, 32}};
    for (int i = 0; i < 3; ++i) {
        const HeadLevelParams& hp = params.head[i];
        Var st = conv_act(res.fpn[i].values, hp.stem, 1, 1);
        Var cb = conv_act(conv_act(st, hp.cls1, 1, 1), hp.cls2, 1, 1);
        Var rb = conv_act(conv_act(st, hp.reg1, 1, 1), hp.reg2, 1, 1);
        HeadOutput ho;
        ho.cls = conv2d(cb, hp.cls_pred.w, hp.cls_pred.b, 1, 0);
        ho.reg = conv2d(rb, hp.reg_pred.w, hp.reg_pred.b, 1, 0);
        ho.obj = conv2d(rb, hp.obj_pred.w, hp.obj_pred.b, 1, 0);
        ho.stride = res.fpn[i].stride;
        res.head.push_back(std::move(ho));
    }
    return res;
}

ForwardResult forward(const EventVoxelGrid& event_voxel, const std::optional<Tensor>& rgb_image,
                      const RecurrentState& state, const DetectorParams& params, FusionMode mode,
                      bool use_align) {
    if (event_voxel.num_bins != params.config.voxel_bins)
        throw std::invalid_argument("forward: voxel bins do not match the detector config");
    return forward_tail(stage1_fused(event_voxel.to_tensor(), rgb_image, params, mode, use_align),
                        state, params);
}

std::vector<Detection> decode_detections(const std::vector<HeadOutput>& head, double score_threshold,
                                         double nms_iou) {
    if (score_threshold <= 0.0 || score_threshold >= 1.0 || nms_iou <= 0.0 || nms_iou >= 1.0)
        throw std::invalid_argument("decode_detections: thresholds must lie in (0,1)");

    struct Cand {
        Detection det;
        int stride, gy, gx;
    };
    std::vector<Cand> cands;
    for (const HeadOutput& ho : head) {
        const Tensor& cls = ho.cls.val();
        const Tensor& reg = ho.reg.val();
        const Tensor& obj = ho.obj.val();
        for (int gy = 0; gy < obj.h; ++gy)
            for (int gx = 0; gx < obj.w; ++gx) {
                const double obj_sig = 1.0 / (1.0 + std::exp(-obj.at(0, gy, gx)));
                int best = 0;
                for (int c = 1; c < cls.c; ++c)
                    if (cls.at(c, gy, gx) > cls.at(best, gy, gx)) best = c;
                const double score = obj_sig / (1.0 + std::exp(-cls.at(best, gy, gx)));
                if (score < score_threshold) continue;
                const CellBox b = decode_cell(reg, gy, gx, ho.stride);
                if (b.x2 <= b.x1 || b.y2 <= b.y1) continue;
                cands.push_back({{best, score, b.x1, b.y1, b.x2, b.y2}, ho.stride, gy, gx});
            }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.det.score != b.det.score) return a.det.score > b.det.score;
        if (a.stride != b.stride) return a.stride < b.stride;
        if (a.gy != b.gy) return a.gy < b.gy;
        if (a.gx != b.gx) return a.gx < b.gx;
        return a.det.cls < b.det.cls;
    });

    std::vector<Detection> kept;
    for (const Cand& c : cands) {
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.cls != c.det.cls) continue;
            if (box_iou(k.x_min, k.y_min, k.x_max, k.y_max, c.det.x_min, c.det.y_min, c.det.x_max,
                        c.det.y_max) > nms_iou) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(c.det);
    }
    return kept;
}

Assignment assign_targets(const std::vector<HeadOutput>& head, const std::vector<GroundTruthBox>& gt) {
    struct Claim {
        double iou;
        int gt;
    };
    // cell key -> best claim; cells keyed by (level, gy, gx)
    std::map<std::array<int, 3>, Claim> claims;

    for (size_t gi = 0; gi < gt.size(); ++gi) {
        const GroundTruthBox& g = gt[gi];
        const double gcx = (g.x_min + g.x_max) / 2.0;
        const double gcy = (g.y_min + g.y_max) / 2.0;
        struct Cand {
            double iou;
            int level, gy, gx;
        };
        std::vector<Cand> cands;
        for (size_t li = 0; li < head.size(); ++li) {
            const int s = head[li].stride;
            const Tensor& reg = head[li].reg.val();
            const double radius = 1.5 * s;
            for (int gy = 0; gy < reg.h; ++gy)
                for (int gx = 0; gx < reg.w; ++gx) {
                    const double cx = (gx + 0.5) * s, cy = (gy + 0.5) * s;
                    const double dx = cx - gcx, dy = cy - gcy;
                    if (dx * dx + dy * dy > radius * radius) continue;
                    const CellBox b = decode_cell(reg, gy, gx, s);
                    cands.push_back({box_iou(b.x1, b.y1, b.x2, b.y2, g.x_min, g.y_min, g.x_max, g.y_max),
                                     static_cast<int>(li), gy, gx});
                }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.iou != b.iou) return a.iou > b.iou;
            if (a.level != b.level) return a.level < b.level;
            if (a.gy != b.gy) return a.gy < b.gy;
            return a.gx < b.gx;
        });
        const size_t keep = std::min<size_t>(10, cands.size());
        for (size_t k = 0; k < keep; ++k) {
            const std::array<int, 3> key{cands[k].level, cands[k].gy, cands[k].gx};
            auto it = claims.find(key);
            if (it == claims.end() || cands[k].iou > it->second.iou)
                claims[key] = {cands[k].iou, static_cast<int>(gi)};
        }
    }

    Assignment a;
    for (const auto& [key, claim] : claims) a.positives.push_back({key[0], key[1], key[2], claim.gt});
    return a;
}

DetectionLoss loss_given_assignment(const std::vector<HeadOutput>& head,
                                    const std::vector<GroundTruthBox>& gt, const Assignment& assignment,
                                    int num_classes) {
    const int num_fg = static_cast<int>(assignment.positives.size());
    const double inv_fg = 1.0 / std::max(1, num_fg);

    Var iou_sum, cls_sum, obj_sum;
    for (size_t li = 0; li < head.size(); ++li) {
        const HeadOutput& ho = head[li];

        std::vector<std::pair<int, int>> locs;
        std::vector<int> gts;
        for (const auto& p : assignment.positives)
            if (p.level == static_cast<int>(li)) {
                locs.emplace_back(p.gy, p.gx);
                gts.push_back(p.gt);
            }

        Tensor obj_target(1, ho.obj.h(), ho.obj.w());
        for (const auto& [gy, gx] : locs) obj_target.at(0, gy, gx) = 1.0;
        Var obj_l = bce_with_logits_sum(ho.obj, obj_target);
        obj_sum = obj_sum.defined() ? add(obj_sum, obj_l) : obj_l;

        if (locs.empty()) continue;
        const int K = static_cast<int>(locs.size());

        Tensor cls_target(num_classes, K, 1);
        for (int k = 0; k < K; ++k) cls_target.at(gt[gts[k]].cls, k, 0) = 1.0;
        Var cls_l = bce_with_logits_sum(gather_locs(ho.cls, locs), cls_target);
        cls_sum = cls_sum.defined() ? add(cls_sum, cls_l) : cls_l;

        Var reg_g = gather_locs(ho.reg, locs); // (4, K, 1)
        const double s = ho.stride;
        Tensor cx_base(1, K, 1), cy_base(1, K, 1);
        Tensor gx1(1, K, 1), gy1(1, K, 1), gx2(1, K, 1), gy2(1, K, 1), garea(1, K, 1);
        for (int k = 0; k < K; ++k) {
            cx_base.v[k] = (locs[k].second + 0.5) * s;
            cy_base.v[k] = (locs[k].first + 0.5) * s;
            const GroundTruthBox& g = gt[gts[k]];
            gx1.v[k] = g.x_min;
            gy1.v[k] = g.y_min;
            gx2.v[k] = g.x_max;
            gy2.v[k] = g.y_max;
            garea.v[k] = (g.x_max - g.x_min) * (g.y_max - g.y_min);
        }
        Var cx = add(mul_scalar(slice_ch(reg_g, 0, 1), s), constant(cx_base));
        Var cy = add(mul_scalar(slice_ch(reg_g, 1, 2), s), constant(cy_base));
        Var w = mul_scalar(exp_(slice_ch(reg_g, 2, 3)), s);
        Var h = mul_scalar(exp_(slice_ch(reg_g, 3, 4)), s);
        Var px1 = sub(cx, mul_scalar(w, 0.5));
        Var px2 = add(cx, mul_scalar(w, 0.5));
        Var py1 = sub(cy, mul_scalar(h, 0.5));
        Var py2 = add(cy, mul_scalar(h, 0.5));

        Var cgx1 = constant(gx1), cgy1 = constant(gy1), cgx2 = constant(gx2), cgy2 = constant(gy2);
        Var iw = relu(sub(min_elem(px2, cgx2), max_elem(px1, cgx1)));
        Var ih = relu(sub(min_elem(py2, cgy2), max_elem(py1, cgy1)));
        Var inter = mul(iw, ih);
        Var uni = sub(add(mul(w, h), constant(garea)), inter);
        Var iou = div_(inter, uni);
        Var ew = sub(max_elem(px2, cgx2), min_elem(px1, cgx1));
        Var eh = sub(max_elem(py2, cgy2), min_elem(py1, cgy1));
        Var encl = mul(ew, eh);
        Var giou = sub(iou, div_(sub(encl, uni), encl));
        Var iou_l = sum_all(add_scalar(mul_scalar(giou, -1.0), 1.0));
        iou_sum = iou_sum.defined() ? add(iou_sum, iou_l) : iou_l;
    }

    DetectionLoss out;
    out.num_fg = num_fg;
    Var zero = constant(Tensor::scalar(0.0));
    Var iou_term = iou_sum.defined() ? mul_scalar(iou_sum, inv_fg) : zero;
    Var cls_term = cls_sum.defined() ? mul_scalar(cls_sum, inv_fg) : zero;
    Var obj_term = mul_scalar(obj_sum, inv_fg);
    out.total = add(add(iou_term, cls_term), obj_term);
    out.iou = iou_term.val().v[0];
    out.cls = cls_term.val().v[0];
    out.obj = obj_term.val().v[0];
    return out;
}

DetectionLoss detection_loss(const std::vector<HeadOutput>& head,
                             const std::vector<GroundTruthBox>& gt, int num_classes) {
    for (const auto& g : gt) {
        if (g.x_min >= g.x_max || g.y_min >= g.y_max)
            throw std::invalid_argument("detection_loss: degenerate ground truth box");
        if (g.cls < 0 || g.cls >= num_classes)
            throw std::invalid_argument("detection_loss: class id outside [0, num_classes)");
    }
    return loss_given_assignment(head, gt, assign_targets(head, gt), num_classes);
}

namespace {

using nlohmann::json;

json config_to_json(const DetectorConfig& c) {
    return {{"widths", c.widths},       {"num_classes", c.num_classes},
            {"voxel_bins", c.voxel_bins}, {"csp_depth", c.csp_depth},
            {"fpn_width", c.fpn_width},  {"head_width", c.head_width},
            {"attn_reduction", c.attn_reduction}};
}

DetectorConfig config_from_json(const json& j) {
    DetectorConfig c;
    c.widths = j.at("widths").get<std::vector<int>>();
    c.num_classes = j.at("num_classes");
    c.voxel_bins = j.at("voxel_bins");
    c.csp_depth = j.at("csp_depth");
    c.fpn_width = j.at("fpn_width");
    c.head_width = j.at("head_width");
    c.attn_reduction = j.at("attn_reduction");
    return c;
}

constexpr char kCkptMagic[8] = {'E', 'V', 'F', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

} // namespace

void save_checkpoint(const std::string& path, DetectorParams& params) {
    auto reg = params.named();
    json tensors = json::array();
    uint64_t offset = 0;
    for (auto& [name, v] : reg) {
        const Tensor& t = v->val();
        tensors.push_back({{"name", name}, {"c", t.c}, {"h", t.h}, {"w", t.w}, {"offset", offset}});
        offset += t.size();
    }
    const std::string header =
        json{{"config", config_to_json(params.config)}, {"dtype", "f64"}, {"tensors", tensors}}.dump();

    std::string buf;
    buf.reserve(16 + header.size() + offset * 8);
    buf.append(kCkptMagic, 8);
    put_u64(buf, header.size());
    buf += header;
    for (auto& [name, v] : reg)
        for (double x : v->val().v) put_u64(buf, std::bit_cast<uint64_t>(x));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

DetectorParams load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 16 || std::memcmp(buf.data(), kCkptMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: " + path + " is not a detector checkpoint");
    const uint64_t header_len = get_u64(buf.data() + 8);
    if (buf.size() < 16 + header_len) throw std::runtime_error("load_checkpoint: truncated header");
    json header = json::parse(buf.substr(16, header_len));
    if (header.at("dtype") != "f64") throw std::runtime_error("load_checkpoint: unsupported dtype");

    Rng rng(0);
    DetectorParams params = DetectorParams::init(rng, config_from_json(header.at("config")));
    std::map<std::string, Var*> by_name;
    for (auto& [name, v] : params.named()) by_name[name] = v;

    const char* payload = buf.data() + 16 + header_len;
    const size_t payload_len = buf.size() - 16 - header_len;
    for (const auto& jt : header.at("tensors")) {
        const std::string name = jt.at("name");
        auto it = by_name.find(name);
        if (it == by_name.end()) throw std::runtime_error("load_checkpoint: unknown tensor " + name);
        Tensor& t = it->second->node()->val;
        if (t.c != jt.at("c") || t.h != jt.at("h") || t.w != jt.at("w"))
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
        const uint64_t off = jt.at("offset");
        if ((off + t.size()) * 8 > payload_len) throw std::runtime_error("load_checkpoint: truncated payload");
        for (size_t i = 0; i < t.size(); ++i)
            t.v[i] = std::bit_cast<double>(get_u64(payload + (off + i) * 8));
    }
    return params;
}

} // namespace evfuse
