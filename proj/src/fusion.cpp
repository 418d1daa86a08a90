#include "evfuse/fusion.hpp"

namespace evfuse {

FusionParams FusionParams::init(Rng& rng, int channels, int reduction) {
    if (channels < 1 || reduction < 1) throw std::invalid_argument("FusionParams: bad sizes");
    const int hidden = std::max(channels / reduction, 1);
    const int k2 = kSpatialAttnKernel * kSpatialAttnKernel;
    FusionParams p;
    p.mlp_w1 = param(he_uniform(rng, hidden, channels, 1, channels));
    p.mlp_b1 = param(Tensor(hidden, 1, 1));
    p.mlp_w2 = param(he_uniform(rng, channels, hidden, 1, hidden));
    p.mlp_b2 = param(Tensor(channels, 1, 1));
    p.spatial_w = param(he_uniform(rng, 1, 2, k2, 2 * k2));
    p.spatial_b = param(Tensor(1, 1, 1));
    p.proj_w = param(he_uniform(rng, channels, channels, 1, channels));
    p.proj_b = param(Tensor(channels, 1, 1));
    return p;
}

std::vector<std::pair<std::string, Var*>> FusionParams::named() {
    return {{"fuse.mlp_w1", &mlp_w1},       {"fuse.mlp_b1", &mlp_b1},
            {"fuse.mlp_w2", &mlp_w2},       {"fuse.mlp_b2", &mlp_b2},
            {"fuse.spatial_w", &spatial_w}, {"fuse.spatial_b", &spatial_b},
            {"fuse.proj_w", &proj_w},       {"fuse.proj_b", &proj_b}};
}

ConcatFuseParams ConcatFuseParams::init(Rng& rng, int channels) {
    ConcatFuseParams p;
    p.w = param(he_uniform(rng, channels, 2 * channels, 1, 2 * channels));
    p.b = param(Tensor(channels, 1, 1));
    return p;
}

std::vector<std::pair<std::string, Var*>> ConcatFuseParams::named() {
    return {{"catfuse.w", &w}, {"catfuse.b", &b}};
}

FeatureMap shared_enhance(const FeatureMap& event_feat, const FeatureMap& rgb_feat) {
    require_same_layout(event_feat, rgb_feat, "shared_enhance");
    const Var& e = event_feat.values;
    const Var& r = rgb_feat.values;
    return {add(mul(e, r), add(e, r)), event_feat.stride};
}

FeatureMap ef_fuse(const FeatureMap& event_feat, const FeatureMap& aligned_rgb_feat,
                   const FusionParams& params, Tensor* channel_attn, Tensor* spatial_attn) {
    require_same_layout(event_feat, aligned_rgb_feat, "ef_fuse");
    FeatureMap shared = shared_enhance(event_feat, aligned_rgb_feat);
    const Var& s = shared.values;

    auto mlp = [&](const Var& pooled) {
        Var h = relu(conv2d(pooled, params.mlp_w1, params.mlp_b1, 1, 0));
        return conv2d(h, params.mlp_w2, params.mlp_b2, 1, 0);
    };
    Var a_c = sigmoid(add(mlp(channel_mean(s)), mlp(channel_max(s))));

    Var planes = concat_ch(over_channel_mean(s), over_channel_max(s));
    Var a_s = sigmoid(conv2d(planes, params.spatial_w, params.spatial_b, 1, kSpatialAttnKernel / 2));

    if (channel_attn) *channel_attn = a_c.val();
    if (spatial_attn) *spatial_attn = a_s.val();

    Var e_att = mul_bcast(mul_bcast(event_feat.values, a_c), a_s);
    Var r_att = mul_bcast(mul_bcast(aligned_rgb_feat.values, a_c), a_s);
    Var out = conv2d(add(e_att, r_att), params.proj_w, params.proj_b, 1, 0);
    return {out, event_feat.stride};
}

FeatureMap concat_fuse(const FeatureMap& event_feat, const FeatureMap& rgb_feat,
                       const ConcatFuseParams& params) {
    require_same_layout(event_feat, rgb_feat, "concat_fuse");
    Var out = conv2d(concat_ch(event_feat.values, rgb_feat.values), params.w, params.b, 1, 0);
    return {out, event_feat.stride};
}

} // namespace evfuse
