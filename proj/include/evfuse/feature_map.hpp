#ifndef EVFUSE_FEATURE_MAP_HPP
#define EVFUSE_FEATURE_MAP_HPP

#include "evfuse/autograd.hpp"

namespace evfuse {

// A differentiable C×H×W activation plus the spatial downsampling factor it
// lives at, relative to sensor resolution.
struct FeatureMap {
    Var values;
    int stride = 1;

    int channels() const { return values.c(); }
    int height() const { return values.h(); }
    int width() const { return values.w(); }
};

// Per-tap (dy, dx) sampling displacements for a K×K deformable kernel,
// stored as 2*K*K channels at the same resolution as the feature map.
struct OffsetField {
    Var values;
    int stride = 1;
};

inline void require_same_layout(const FeatureMap& a, const FeatureMap& b, const char* op) {
    require_same_shape(a.values.val(), b.values.val(), op);
    if (a.stride != b.stride)
        throw std::invalid_argument(std::string(op) + ": stride mismatch " + std::to_string(a.stride) +
                                    " vs " + std::to_string(b.stride));
}

} // namespace evfuse

#endif
