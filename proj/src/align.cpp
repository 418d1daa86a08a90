#include "evfuse/align.hpp"

#include <cmath>

namespace evfuse {

AlignParams AlignParams::init(Rng& rng, int channels) {
    const int k2 = kAlignKernel * kAlignKernel;
    AlignParams p;
    p.offset_w = param(Tensor(2 * k2, 2 * channels, k2));
    p.offset_b = param(Tensor(2 * k2, 1, 1));
    p.deform_w = param(he_uniform(rng, channels, channels, k2, channels * k2));
    p.deform_b = param(Tensor(channels, 1, 1));
    return p;
}

std::vector<std::pair<std::string, Var*>> AlignParams::named() {
    return {{"align.offset_w", &offset_w},
            {"align.offset_b", &offset_b},
            {"align.deform_w", &deform_w},
            {"align.deform_b", &deform_b}};
}

FeatureMap adain(const FeatureMap& rgb_feat, const FeatureMap& event_feat, double eps) {
    require_same_layout(rgb_feat, event_feat, "adain");
    if (eps <= 0.0) throw std::invalid_argument("adain: eps must be positive");
    const Var& I = rgb_feat.values;
    const Var& E = event_feat.values;

    Var mu_i = channel_mean(I);
    Var centered = sub_bcast(I, mu_i);
    Var sig_i = sqrt_(channel_mean(mul(centered, centered)));
    Var mu_e = channel_mean(E);
    Var de = sub_bcast(E, mu_e);
    Var sig_e = sqrt_(channel_mean(mul(de, de)));

    Var normalized = div_bcast(centered, add_scalar(sig_i, eps));
    return {add_bcast(mul_bcast(normalized, sig_e), mu_e), rgb_feat.stride};
}

OffsetField generate_offsets(const FeatureMap& adain_rgb, const FeatureMap& event_feat,
                             const AlignParams& params) {
    require_same_layout(adain_rgb, event_feat, "generate_offsets");
    Var stacked = concat_ch(adain_rgb.values, event_feat.values);
    Var off = conv2d(stacked, params.offset_w, params.offset_b, 1, kAlignKernel / 2);
    return {off, adain_rgb.stride};
}

FeatureMap deformable_align(const FeatureMap& rgb_feat, const OffsetField& offsets,
                            const AlignParams& params) {
    for (double v : offsets.values.val().v)
        if (!std::isfinite(v)) throw std::invalid_argument("deformable_align: non-finite offset");
    Var out = deform_conv2d(rgb_feat.values, offsets.values, params.deform_w, params.deform_b);
    return {out, rgb_feat.stride};
}

FeatureMap align_module(const FeatureMap& rgb_feat, const FeatureMap& event_feat,
                        const AlignParams& params) {
    FeatureMap styled = adain(rgb_feat, event_feat);
    OffsetField offsets = generate_offsets(styled, event_feat, params);
    return deformable_align(rgb_feat, offsets, params);
}

Var aligned_loss(const FeatureMap& warped_unpaired, const FeatureMap& paired_ref) {
    require_same_layout(warped_unpaired, paired_ref, "aligned_loss");
    Var d = sub(warped_unpaired.values, paired_ref.values);
    return mean_all(mul(d, d));
}

} // namespace evfuse
