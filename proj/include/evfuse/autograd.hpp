#ifndef EVFUSE_AUTOGRAD_HPP
#define EVFUSE_AUTOGRAD_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "evfuse/tensor.hpp"

namespace evfuse {

class GradMap;

// One node of the dynamically built computation graph. Nodes are created by
// the op functions below and chained through `parents`; `back` scatters the
// node's incoming gradient to the parents via the GradMap.
struct Node {
    Tensor val;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Tensor& g, GradMap& gm)> back;
    bool requires_grad = false;
    uint64_t id = 0; // creation order; consumers always have larger ids
};

// Gradients live outside the nodes so that independent backward passes over
// graphs sharing the same parameters never interfere.
class GradMap {
public:
    Tensor& of(const Node* n) {
        auto it = g_.find(n);
        if (it == g_.end()) it = g_.emplace(n, Tensor(n->val.c, n->val.h, n->val.w)).first;
        return it->second;
    }
    const Tensor* find(const Node* n) const {
        auto it = g_.find(n);
        return it == g_.end() ? nullptr : &it->second;
    }

private:
    std::unordered_map<const Node*, Tensor> g_;
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor t, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const Tensor& val() const { return n_->val; }
    int c() const { return n_->val.c; }
    int h() const { return n_->val.h; }
    int w() const { return n_->val.w; }
    std::shared_ptr<Node> node() const { return n_; }

    // Value copy with no graph attached; the TBPTT truncation boundary.
    Var detach() const { return Var(n_->val, false); }

    static Var from_node(std::shared_ptr<Node> n) {
        Var v;
        v.n_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<Node> n_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var param(Tensor t) { return Var(std::move(t), true); }

// Runs reverse-mode accumulation from a scalar root. Returns the gradient of
// root w.r.t. every reachable node that requires grad (directly or through
// its parents).
GradMap backward(const Var& root);

// Elementwise, same shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div_(const Var& a, const Var& b);
Var min_elem(const Var& a, const Var& b);
Var max_elem(const Var& a, const Var& b);

Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);

// Unary.
Var sigmoid(const Var& a);
Var tanh_(const Var& a);
Var silu(const Var& a);
Var relu(const Var& a);
Var exp_(const Var& a);
// sqrt with a clamped backward so sqrt(0) does not produce infinities.
Var sqrt_(const Var& a);

// Reductions.
Var sum_all(const Var& a);  // -> (1,1,1)
Var mean_all(const Var& a); // -> (1,1,1)
Var channel_mean(const Var& a); // over H,W -> (C,1,1)
Var channel_max(const Var& a);  // over H,W -> (C,1,1)
Var over_channel_mean(const Var& a); // over C -> (1,H,W)
Var over_channel_max(const Var& a);  // over C -> (1,H,W)

// Broadcast arithmetic: s must be (C,1,1), (1,H,W) or (1,1,1).
Var add_bcast(const Var& x, const Var& s);
Var sub_bcast(const Var& x, const Var& s);
Var mul_bcast(const Var& x, const Var& s);
Var div_bcast(const Var& x, const Var& s);

// Layout ops.
Var concat_ch(const Var& a, const Var& b);
Var slice_ch(const Var& a, int from, int to); // channels [from, to)
Var upsample2x(const Var& a);                 // nearest neighbour

// Gather the feature column at each (y,x) location -> (C, K, 1).
Var gather_locs(const Var& x, const std::vector<std::pair<int, int>>& yx);

// conv weight layout: Tensor(c=Cout, h=Cin, w=K*K); bias (Cout,1,1).
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

// Deformable convolution, stride 1, pad K/2. offsets: (2*K*K, H, W) holding
// (dy,dx) per kernel tap; sampling is bilinear with zero padding outside.
Var deform_conv2d(const Var& x, const Var& offsets, const Var& w, const Var& b);

// sum of elementwise binary cross entropy between logits and fixed targets,
// computed in the numerically stable log1p form. -> (1,1,1)
Var bce_with_logits_sum(const Var& logits, Tensor targets);

} // namespace evfuse

#endif
