#ifndef EVFUSE_TENSOR_HPP
#define EVFUSE_TENSOR_HPP

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace evfuse {

// Dense channel-major (C,H,W) array of doubles. The one value type every
// network op consumes and produces; vectors are (C,1,1), scalars (1,1,1).
struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, 0.0) {
        if (c_ < 1 || h_ < 1 || w_ < 1) throw std::invalid_argument("Tensor: dims must be >= 1");
    }

    static Tensor full(int c, int h, int w, double x) {
        Tensor t(c, h, w);
        std::fill(t.v.begin(), t.v.end(), x);
        return t;
    }
    static Tensor scalar(double x) { return full(1, 1, 1, x); }

    size_t size() const { return v.size(); }

    double& at(int ci, int y, int x) { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }
    double at(int ci, int y, int x) const { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }

    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }

    std::string shape_str() const {
        return "(" + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

} // namespace evfuse

#endif
