#ifndef EVFUSE_ALIGN_HPP
#define EVFUSE_ALIGN_HPP

#include <string>
#include <utility>
#include <vector>

#include "evfuse/feature_map.hpp"
#include "evfuse/rng.hpp"

namespace evfuse {

inline constexpr int kAlignKernel = 3; // offset generator and deformable kernel size
inline constexpr double kAdainEps = 1e-5;

// Learned state of the alignment block: one K×K conv that turns the
// concatenated (style-transferred RGB, event) pair into per-tap offsets, and
// the K×K deformable conv that warps the RGB features with them.
struct AlignParams {
    Var offset_w, offset_b;
    Var deform_w, deform_b;

    // The offset conv starts at exactly zero so training begins from the
    // identity warp; the deformable conv starts He-uniform.
    static AlignParams init(Rng& rng, int channels);

    std::vector<std::pair<std::string, Var*>> named();
};

// Re-styles `rgb_feat` so its per-channel mean/std match `event_feat`.
FeatureMap adain(const FeatureMap& rgb_feat, const FeatureMap& event_feat, double eps = kAdainEps);

OffsetField generate_offsets(const FeatureMap& adain_rgb, const FeatureMap& event_feat,
                             const AlignParams& params);

// Deformable K×K convolution of the RGB features at the offset-shifted tap
// positions (stride 1, zero padding, bilinear sampling).
FeatureMap deformable_align(const FeatureMap& rgb_feat, const OffsetField& offsets,
                            const AlignParams& params);

// Full block: deformable_align(rgb, generate_offsets(adain(rgb, ev), ev)).
FeatureMap align_module(const FeatureMap& rgb_feat, const FeatureMap& event_feat,
                        const AlignParams& params);

// Mean squared error between two feature maps; auxiliary training signal,
// off by default.
Var aligned_loss(const FeatureMap& warped_unpaired, const FeatureMap& paired_ref);

} // namespace evfuse

#endif
