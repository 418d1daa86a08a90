#ifndef EVFUSE_FUSION_HPP
#define EVFUSE_FUSION_HPP

#include <string>
#include <utility>
#include <vector>

#include "evfuse/feature_map.hpp"
#include "evfuse/rng.hpp"

namespace evfuse {

inline constexpr int kSpatialAttnKernel = 7;

// Attention-based fusion of the two modality features: shared enhancement,
// CBAM-style channel attention (shared two-layer MLP over avg/max pools) and
// spatial attention (7x7 conv over channel mean/max planes), followed by a
// 1x1 projection of the attended sum.
struct FusionParams {
    Var mlp_w1, mlp_b1; // (hidden, C, 1)
    Var mlp_w2, mlp_b2; // (C, hidden, 1)
    Var spatial_w, spatial_b;
    Var proj_w, proj_b;

    static FusionParams init(Rng& rng, int channels, int reduction = 8);
    std::vector<std::pair<std::string, Var*>> named();
};

struct ConcatFuseParams {
    Var w, b; // 1x1 conv (C, 2C, 1)

    static ConcatFuseParams init(Rng& rng, int channels);
    std::vector<std::pair<std::string, Var*>> named();
};

// event*rgb + event + rgb, elementwise; the shared feature both attention
// branches read from.
FeatureMap shared_enhance(const FeatureMap& event_feat, const FeatureMap& rgb_feat);

// Optional out-params expose the attention maps for inspection.
FeatureMap ef_fuse(const FeatureMap& event_feat, const FeatureMap& aligned_rgb_feat,
                   const FusionParams& params, Tensor* channel_attn = nullptr,
                   Tensor* spatial_attn = nullptr);

// Plain channel concat + 1x1 projection; the ablation baseline.
FeatureMap concat_fuse(const FeatureMap& event_feat, const FeatureMap& rgb_feat,
                       const ConcatFuseParams& params);

} // namespace evfuse

#endif
