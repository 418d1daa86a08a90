#include "evfuse/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace evfuse {

namespace {

uint64_t g_next_id = 1;

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatRM>;
using MMap = Eigen::Map<MatRM>;

std::shared_ptr<Node> new_node(Tensor val, std::vector<std::shared_ptr<Node>> parents) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->id = g_next_id++;
    for (const auto& p : parents)
        if (p && p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->parents = std::move(parents);
    return n;
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

// Index into a broadcast operand shaped (C,1,1), (1,H,W) or (1,1,1).
size_t bcast_index(const Tensor& s, int ci, int y, int x) {
    if (s.h == 1 && s.w == 1) return s.c == 1 ? 0 : static_cast<size_t>(ci);
    return static_cast<size_t>(y) * s.w + x;
}

void check_bcast(const Tensor& x, const Tensor& s, const char* op) {
    bool chan = s.c == x.c && s.h == 1 && s.w == 1;
    bool spat = s.c == 1 && s.h == x.h && s.w == x.w;
    bool scal = s.c == 1 && s.h == 1 && s.w == 1;
    if (!chan && !spat && !scal)
        throw std::invalid_argument(std::string(op) + ": operand " + s.shape_str() +
                                    " does not broadcast over " + x.shape_str());
}

void fill_im2col(const Tensor& x, int K, int stride, int pad, int Ho, int Wo, std::vector<double>& buf) {
    const size_t rows = static_cast<size_t>(x.c) * K * K;
    const size_t cols = static_cast<size_t>(Ho) * Wo;
    buf.assign(rows * cols, 0.0);
    for (int ci = 0; ci < x.c; ++ci)
        for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) {
                const size_t r = (static_cast<size_t>(ci) * K + ky) * K + kx;
                double* dst = buf.data() + r * cols;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= x.h) continue;
                    const double* src = &x.v[(static_cast<size_t>(ci) * x.h + iy) * x.w];
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < x.w) dst[static_cast<size_t>(oy) * Wo + ox] = src[ix];
                    }
                }
            }
}

void col2im_add(const std::vector<double>& buf, Tensor& gx, int K, int stride, int pad, int Ho, int Wo) {
    const size_t cols = static_cast<size_t>(Ho) * Wo;
    for (int ci = 0; ci < gx.c; ++ci)
        for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) {
                const size_t r = (static_cast<size_t>(ci) * K + ky) * K + kx;
                const double* src = buf.data() + r * cols;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= gx.h) continue;
                    double* dst = &gx.v[(static_cast<size_t>(ci) * gx.h + iy) * gx.w];
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < gx.w) dst[ix] += src[static_cast<size_t>(oy) * Wo + ox];
                    }
                }
            }
}

thread_local std::vector<double> tl_col;
thread_local std::vector<double> tl_col2;

int kernel_size_from(const Tensor& w) {
    int k = static_cast<int>(std::lround(std::sqrt(static_cast<double>(w.w))));
    if (k * k != w.w) throw std::invalid_argument("conv weight: last dim is not a square kernel size");
    return k;
}

// Fills the deformable patch matrix (Cin*K*K rows, H*W cols) by bilinear
// sampling at the offset-shifted tap positions. Zero outside the input.
void fill_deform_patches(const Tensor& x, const Tensor& off, int K, std::vector<double>& buf) {
    const int pad = K / 2;
    const size_t rows = static_cast<size_t>(x.c) * K * K;
    const size_t cols = static_cast<size_t>(x.h) * x.w;
    buf.assign(rows * cols, 0.0);
    for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx) {
            const size_t col = static_cast<size_t>(y) * x.w + xx;
            for (int k = 0; k < K * K; ++k) {
                const int ky = k / K, kx = k % K;
                const double py = y - pad + ky + off.at(2 * k, y, xx);
                const double px = xx - pad + kx + off.at(2 * k + 1, y, xx);
                const int y0 = static_cast<int>(std::floor(py));
                const int x0 = static_cast<int>(std::floor(px));
                const double wy = py - y0, wx = px - x0;
                const bool in00 = y0 >= 0 && y0 < x.h && x0 >= 0 && x0 < x.w;
                const bool in01 = y0 >= 0 && y0 < x.h && x0 + 1 >= 0 && x0 + 1 < x.w;
                const bool in10 = y0 + 1 >= 0 && y0 + 1 < x.h && x0 >= 0 && x0 < x.w;
                const bool in11 = y0 + 1 >= 0 && y0 + 1 < x.h && x0 + 1 >= 0 && x0 + 1 < x.w;
                for (int ci = 0; ci < x.c; ++ci) {
                    double v = 0.0;
                    if (in00) v += (1 - wy) * (1 - wx) * x.at(ci, y0, x0);
                    if (in01) v += (1 - wy) * wx * x.at(ci, y0, x0 + 1);
                    if (in10) v += wy * (1 - wx) * x.at(ci, y0 + 1, x0);
                    if (in11) v += wy * wx * x.at(ci, y0 + 1, x0 + 1);
                    buf[(static_cast<size_t>(ci) * K * K + k) * cols + col] = v;
                }
            }
        }
}

} // namespace

Var::Var(Tensor t, bool requires_grad) {
    n_ = std::make_shared<Node>();
    n_->val = std::move(t);
    n_->requires_grad = requires_grad;
    n_->id = g_next_id++;
}

GradMap backward(const Var& root) {
    const auto& rn = root.node();
    if (!rn) throw std::invalid_argument("backward: undefined root");
    if (rn->val.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    GradMap gm;
    gm.of(rn.get()).v[0] = 1.0;

    std::vector<const Node*> order;
    std::unordered_set<const Node*> seen;
    std::vector<const Node*> stack{rn.get()};
    seen.insert(rn.get());
    while (!stack.empty()) {
        const Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    // Creation ids give a topological order: every consumer is newer than its
    // inputs, so walking ids downward visits each node after all its users.
    std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });
    for (const Node* n : order) {
        if (!n->back) continue;
        const Tensor* g = gm.find(n);
        if (!g) continue;
        n->back(*g, gm);
    }
    return gm;
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "add");
    Tensor out = a.val();
    for (size_t i = 0; i < out.size(); ++i) out.v[i] += b.val().v[i];
    auto pa = a.node(), pb = b.node();
    auto n = new_node(std::move(out), {pa, pb});
    if (n->requires_grad)
        n->back = [pa, pb](const Tensor& g, GradMap& gm) {
            if (pa->requires_grad) {
                Tensor& ga = gm.of(pa.get());
                for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
            }
            if (pb->requires_grad) {
                Tensor& gb = gm.of(pb.get());
                for (size_t i = 0; i < g.size(); ++i) gb.v[i] += g.v[i];
            }
        };
    return Var::from_node(n);
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "sub");
    Tensor out = a.val();
    for (size_t i = 0; i < out.size(); ++i) out.v[i] -= b.val().v[i];
    auto pa = a.node(), pb = b.node();
    auto n = new_node(std::move(out), {pa, pb});
    if (n->requires_grad)
        n->back = [pa, pb](const Tensor& g, GradMap& gm) {
            if (pa->requires_grad) {
                Tensor& ga = gm.of(pa.get());
                for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
            }
            if (pb->requires_grad) {
                Tensor& gb = gm.of(pb.get());
                for (size_t i = 0; i < g.size(); ++i) gb.v[i] -= g.v[i];
            }
        };
    return Var::from_node(n);
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "mul");
    Tensor out = a.val();
    for (size_t i = 0; i < out.size(); ++i) out.v[i] *= b.val().v[i];
    auto pa = a.node(), pb = b.node();
    auto n = new_node(std::move(out), {pa, pb});
    if (n->requires_grad)
        n->back = [pa, pb](const Tensor& g, GradMap& gm) {
            if (pa->requires_grad) {
                Tensor& ga = gm.of(pa.get());
                for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * pb->val.v[i];
            }
            if (pb->requires_grad) {
                Tensor& gb = gm.of(pb.get());
                for (size_t i = 0; i < g.size(); ++i) gb.v[i] += g.v[i] * pa->val.v[i];
            }
        };
    return Var::from_node(n);
}

Var div_(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "div");
    Tensor out = a.val();
    for (size_t i = 0; i < out.size(); ++i) out.v[i] /= b.val().v[i];
    auto pa = a.node(), pb = b.node();
    auto n = new_node(std::move(out), {pa, pb});
    if (n->requires_grad)
        n->back = [pa, pb](const Tensor& g, GradMap& gm) {
            if (pa->requires_grad) {
                Tensor& ga = gm.of(pa.get());
                for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] / pb->val.v[i];
            }
            if (pb->requires_grad) {
                Tensor& gb = gm.of(pb.get());
                for (size_t i = 0; i < g.size(); ++i) {
                    double d = pb->val.v[i];
                    gb.v[i] -= g.v[i] * pa->val.v[i] / (d * d);
                }
            }
        };
    return Var::from_node(n);
}

Var min_elem(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "min_elem");
    Tensor out = a.val();
    for (size_t i = 0; i < out.size(); ++i) out.v[i] = std::min(out.v[i], b.val().v[i]);
    auto pa = a.node(), pb = b.node();
    auto n = new_node(std::move(out), {pa, pb});
    if (n->requires_grad)
        n->back = [pa, pb](const Tensor& g, GradMap& gm) {
            for (size_t i = 0; i < g.size(); ++i) {
                bool take_a = pa->val.v[i] <= pb->val.v[i];
                if (take_a && pa->requires_grad) gm.of(pa.get()).v[i] += g.v[i];
                if (!take_a && pb->requires_grad) gm.of(pb.get()).v[i] += g.v[i];
            }
        };
    return Var::from_node(n);
}

Var max_elem(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "max_elem");
    Tensor out = a.val();
    for (size_t i = 0; i < out.size(); ++i) out.v[i] = std::max(out.v[i], b.val().v[i]);
    auto pa = a.node(), pb = b.node();
    auto n = new_node(std::move(out), {pa, pb});
    if (n->requires_grad)
        n->back = [pa, pb](const Tensor& g, GradMap& gm) {
            for (size_t i = 0; i < g.size(); ++i) {
                bool take_a = pa->val.v[i] >= pb->val.v[i];
                if (take_a && pa->requires_grad) gm.of(pa.get()).v[i] += g.v[i];
                if (!take_a && pb->requires_grad) gm.of(pb.get()).v[i] += g.v[i];
            }
        };
    return Var::from_node(n);
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.val();
    for (double& x : out.v) x += s;
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    if (n->requires_grad)
        n->back = [pa](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
        };
    return Var::from_node(n);
}

Var mul_scalar(const Var& a, double s) {
    Tensor out = a.val();
    for (double& x : out.v) x *= s;
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    if (n->requires_grad)
        n->back = [pa, s](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * s;
        };
    return Var::from_node(n);
}

Var sigmoid(const Var& a) {
    Tensor out = a.val();
    for (double& x : out.v) x = stable_sigmoid(x);
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    Node* self = n.get();
    if (n->requires_grad)
        n->back = [pa, self](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (size_t i = 0; i < g.size(); ++i) {
                double y = self->val.v[i];
                ga.v[i] += g.v[i] * y * (1.0 - y);
            }
        };
    return Var::from_node(n);
}

Var tanh_(const Var& a) {
    Tensor out = a.val();
    for (double& x : out.v) x = std::tanh(x);
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    Node* self = n.get();
    if (n->requires_grad)
        n->back = [pa, self](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (size_t i = 0; i < g.size(); ++i) {
                double y = self->val.v[i];
                ga.v[i] += g.v[i] * (1.0 - y * y);
            }
        };
    return Var::from_node(n);
}

Var silu(const Var& a) {
    Tensor out = a.val();
    for (double& x : out.v) x = x * stable_sigmoid(x);
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    if (n->requires_grad)
        n->back = [pa](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (size_t i = 0; i < g.size(); ++i) {
                double x = pa->val.v[i];
                double s = stable_sigmoid(x);
                ga.v[i] += g.v[i] * s * (1.0 + x * (1.0 - s));
            }
        };
    return Var::from_node(n);
}

Var relu(const Var& a) {
    Tensor out = a.val();
    for (double& x : out.v) x = std::max(0.0, x);
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    if (n->requires_grad)
        n->back = [pa](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (size_t i = 0; i < g.size(); ++i)
                if (pa->val.v[i] > 0.0) ga.v[i] += g.v[i];
        };
    return Var::from_node(n);
}

Var exp_(const Var& a) {
    Tensor out = a.val();
    for (double& x : out.v) x = std::exp(x);
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    Node* self = n.get();
    if (n->requires_grad)
        n->back = [pa, self](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * self->val.v[i];
        };
    return Var::from_node(n);
}

Var sqrt_(const Var& a) {
    Tensor out = a.val();
    for (double& x : out.v) {
        if (x < 0.0) throw std::invalid_argument("sqrt_: negative input");
        x = std::sqrt(x);
    }
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    Node* self = n.get();
    if (n->requires_grad)
        n->back = [pa, self](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (size_t i = 0; i < g.size(); ++i)
                ga.v[i] += g.v[i] * 0.5 / std::max(self->val.v[i], 1e-12);
        };
    return Var::from_node(n);
}

Var sum_all(const Var& a) {
    double s = 0.0;
    for (double x : a.val().v) s += x;
    auto pa = a.node();
    auto n = new_node(Tensor::scalar(s), {pa});
    if (n->requires_grad)
        n->back = [pa](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (double& x : ga.v) x += g.v[0];
        };
    return Var::from_node(n);
}

Var mean_all(const Var& a) {
    double s = 0.0;
    for (double x : a.val().v) s += x;
    const double inv = 1.0 / static_cast<double>(a.val().size());
    auto pa = a.node();
    auto n = new_node(Tensor::scalar(s * inv), {pa});
    if (n->requires_grad)
        n->back = [pa, inv](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (double& x : ga.v) x += g.v[0] * inv;
        };
    return Var::from_node(n);
}

Var channel_mean(const Var& a) {
    const Tensor& x = a.val();
    Tensor out(x.c, 1, 1);
    const size_t hw = static_cast<size_t>(x.h) * x.w;
    for (int ci = 0; ci < x.c; ++ci) {
        double s = 0.0;
        for (size_t i = 0; i < hw; ++i) s += x.v[ci * hw + i];
        out.v[ci] = s / static_cast<double>(hw);
    }
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    if (n->requires_grad)
        n->back = [pa, hw](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            const double inv = 1.0 / static_cast<double>(hw);
            for (int ci = 0; ci < ga.c; ++ci)
                for (size_t i = 0; i < hw; ++i) ga.v[ci * hw + i] += g.v[ci] * inv;
        };
    return Var::from_node(n);
}

Var channel_max(const Var& a) {
    const Tensor& x = a.val();
    Tensor out(x.c, 1, 1);
    const size_t hw = static_cast<size_t>(x.h) * x.w;
    std::vector<size_t> arg(x.c, 0);
    for (int ci = 0; ci < x.c; ++ci) {
        size_t best = 0;
        for (size_t i = 1; i < hw; ++i)
            if (x.v[ci * hw + i] > x.v[ci * hw + best]) best = i;
        arg[ci] = best;
        out.v[ci] = x.v[ci * hw + best];
    }
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    if (n->requires_grad)
        n->back = [pa, hw, arg](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (int ci = 0; ci < ga.c; ++ci) ga.v[ci * hw + arg[ci]] += g.v[ci];
        };
    return Var::from_node(n);
}

Var over_channel_mean(const Var& a) {
    const Tensor& x = a.val();
    Tensor out(1, x.h, x.w);
    const size_t hw = static_cast<size_t>(x.h) * x.w;
    for (size_t i = 0; i < hw; ++i) {
        double s = 0.0;
        for (int ci = 0; ci < x.c; ++ci) s += x.v[ci * hw + i];
        out.v[i] = s / x.c;
    }
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    if (n->requires_grad)
        n->back = [pa, hw](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            const double inv = 1.0 / ga.c;
            for (int ci = 0; ci < ga.c; ++ci)
                for (size_t i = 0; i < hw; ++i) ga.v[ci * hw + i] += g.v[i] * inv;
        };
    return Var::from_node(n);
}

Var over_channel_max(const Var& a) {
    const Tensor& x = a.val();
    Tensor out(1, x.h, x.w);
    const size_t hw = static_cast<size_t>(x.h) * x.w;
    std::vector<int> arg(hw, 0);
    for (size_t i = 0; i < hw; ++i) {
        int best = 0;
        for (int ci = 1; ci < x.c; ++ci)
            if (x.v[ci * hw + i] > x.v[static_cast<size_t>(best) * hw + i]) best = ci;
        arg[i] = best;
        out.v[i] = x.v[static_cast<size_t>(best) * hw + i];
    }
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    if (n->requires_grad)
        n->back = [pa, hw, arg](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (size_t i = 0; i < hw; ++i) ga.v[static_cast<size_t>(arg[i]) * hw + i] += g.v[i];
        };
    return Var::from_node(n);
}

namespace {

enum class BOp { Add, Sub, Mul, Div };

Var bcast_op(const Var& x, const Var& s, BOp op, const char* name) {
    check_bcast(x.val(), s.val(), name);
    const Tensor& X = x.val();
    const Tensor& S = s.val();
    Tensor out(X.c, X.h, X.w);
    for (int ci = 0; ci < X.c; ++ci)
        for (int y = 0; y < X.h; ++y)
            for (int xx = 0; xx < X.w; ++xx) {
                double sv = S.v[bcast_index(S, ci, y, xx)];
                double xv = X.at(ci, y, xx);
                double o;
                switch (op) {
                    case BOp::Add: o = xv + sv; break;
                    case BOp::Sub: o = xv - sv; break;
                    case BOp::Mul: o = xv * sv; break;
                    default: o = xv / sv; break;
                }
                out.at(ci, y, xx) = o;
            }
    auto px = x.node(), ps = s.node();
    auto n = new_node(std::move(out), {px, ps});
    if (n->requires_grad)
        n->back = [px, ps, op](const Tensor& g, GradMap& gm) {
            const Tensor& X = px->val;
            const Tensor& S = ps->val;
            Tensor* gx = px->requires_grad ? &gm.of(px.get()) : nullptr;
            Tensor* gs = ps->requires_grad ? &gm.of(ps.get()) : nullptr;
            for (int ci = 0; ci < X.c; ++ci)
                for (int y = 0; y < X.h; ++y)
                    for (int xx = 0; xx < X.w; ++xx) {
                        const size_t si = bcast_index(S, ci, y, xx);
                        const double gv = g.at(ci, y, xx);
                        const double sv = S.v[si];
                        const double xv = X.at(ci, y, xx);
                        switch (op) {
                            case BOp::Add:
                                if (gx) gx->at(ci, y, xx) += gv;
                                if (gs) gs->v[si] += gv;
                                break;
                            case BOp::Sub:
                                if (gx) gx->at(ci, y, xx) += gv;
                                if (gs) gs->v[si] -= gv;
                                break;
                            case BOp::Mul:
                                if (gx) gx->at(ci, y, xx) += gv * sv;
                                if (gs) gs->v[si] += gv * xv;
                                break;
                            case BOp::Div:
                                if (gx) gx->at(ci, y, xx) += gv / sv;
                                if (gs) gs->v[si] -= gv * xv / (sv * sv);
                                break;
                        }
                    }
        };
    return Var::from_node(n);
}

} // namespace

Var add_bcast(const Var& x, const Var& s) { return bcast_op(x, s, BOp::Add, "add_bcast"); }
Var sub_bcast(const Var& x, const Var& s) { return bcast_op(x, s, BOp::Sub, "sub_bcast"); }
Var mul_bcast(const Var& x, const Var& s) { return bcast_op(x, s, BOp::Mul, "mul_bcast"); }
Var div_bcast(const Var& x, const Var& s) { return bcast_op(x, s, BOp::Div, "div_bcast"); }

Var concat_ch(const Var& a, const Var& b) {
    const Tensor& A = a.val();
    const Tensor& B = b.val();
    if (A.h != B.h || A.w != B.w)
        throw std::invalid_argument("concat_ch: spatial mismatch " + A.shape_str() + " vs " + B.shape_str());
    Tensor out(A.c + B.c, A.h, A.w);
    std::copy(A.v.begin(), A.v.end(), out.v.begin());
    std::copy(B.v.begin(), B.v.end(), out.v.begin() + A.v.size());
    auto pa = a.node(), pb = b.node();
    auto n = new_node(std::move(out), {pa, pb});
    if (n->requires_grad)
        n->back = [pa, pb](const Tensor& g, GradMap& gm) {
            const size_t na = pa->val.size();
            if (pa->requires_grad) {
                Tensor& ga = gm.of(pa.get());
                for (size_t i = 0; i < na; ++i) ga.v[i] += g.v[i];
            }
            if (pb->requires_grad) {
                Tensor& gb = gm.of(pb.get());
                for (size_t i = 0; i < gb.v.size(); ++i) gb.v[i] += g.v[na + i];
            }
        };
    return Var::from_node(n);
}

Var slice_ch(const Var& a, int from, int to) {
    const Tensor& A = a.val();
    if (from < 0 || to > A.c || from >= to)
        throw std::out_of_range("slice_ch: bad channel range [" + std::to_string(from) + "," + std::to_string(to) + ") for C=" + std::to_string(A.c));
    const size_t hw = static_cast<size_t>(A.h) * A.w;
    Tensor out(to - from, A.h, A.w);
    std::copy(A.v.begin() + from * hw, A.v.begin() + to * hw, out.v.begin());
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    if (n->requires_grad)
        n->back = [pa, from, hw](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (size_t i = 0; i < g.size(); ++i) ga.v[from * hw + i] += g.v[i];
        };
    return Var::from_node(n);
}

Var upsample2x(const Var& a) {
    const Tensor& A = a.val();
    Tensor out(A.c, A.h * 2, A.w * 2);
    for (int ci = 0; ci < A.c; ++ci)
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x) out.at(ci, y, x) = A.at(ci, y / 2, x / 2);
    auto pa = a.node();
    auto n = new_node(std::move(out), {pa});
    if (n->requires_grad)
        n->back = [pa](const Tensor& g, GradMap& gm) {
            Tensor& ga = gm.of(pa.get());
            for (int ci = 0; ci < g.c; ++ci)
                for (int y = 0; y < g.h; ++y)
                    for (int x = 0; x < g.w; ++x) ga.at(ci, y / 2, x / 2) += g.at(ci, y, x);
        };
    return Var::from_node(n);
}

Var gather_locs(const Var& x, const std::vector<std::pair<int, int>>& yx) {
    const Tensor& X = x.val();
    if (yx.empty()) throw std::invalid_argument("gather_locs: empty location list");
    for (const auto& [y, xx] : yx)
        if (y < 0 || y >= X.h || xx < 0 || xx >= X.w)
            throw std::out_of_range("gather_locs: location outside " + X.shape_str());
    Tensor out(X.c, static_cast<int>(yx.size()), 1);
    for (int ci = 0; ci < X.c; ++ci)
        for (size_t k = 0; k < yx.size(); ++k) out.at(ci, static_cast<int>(k), 0) = X.at(ci, yx[k].first, yx[k].second);
    auto px = x.node();
    auto n = new_node(std::move(out), {px});
    if (n->requires_grad)
        n->back = [px, yx](const Tensor& g, GradMap& gm) {
            Tensor& gx = gm.of(px.get());
            for (int ci = 0; ci < gx.c; ++ci)
                for (size_t k = 0; k < yx.size(); ++k)
                    gx.at(ci, yx[k].first, yx[k].second) += g.at(ci, static_cast<int>(k), 0);
        };
    return Var::from_node(n);
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& X = x.val();
    const Tensor& W = w.val();
    const Tensor& B = b.val();
    const int K = kernel_size_from(W);
    if (W.h != X.c)
        throw std::invalid_argument("conv2d: weight expects " + std::to_string(W.h) + " input channels, got " + std::to_string(X.c));
    if (B.c != W.c || B.h != 1 || B.w != 1)
        throw std::invalid_argument("conv2d: bias shape " + B.shape_str() + " does not match " + std::to_string(W.c) + " outputs");
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
    if (X.h + 2 * pad < K || X.w + 2 * pad < K) throw std::invalid_argument("conv2d: input smaller than kernel");
    const int Ho = (X.h + 2 * pad - K) / stride + 1;
    const int Wo = (X.w + 2 * pad - K) / stride + 1;
    const int Cout = W.c;
    const size_t rows = static_cast<size_t>(X.c) * K * K;
    const size_t cols = static_cast<size_t>(Ho) * Wo;

    fill_im2col(X, K, stride, pad, Ho, Wo, tl_col);
    Tensor out(Cout, Ho, Wo);
    MMap(out.v.data(), Cout, cols).noalias() =
        CMap(W.v.data(), Cout, rows) * CMap(tl_col.data(), rows, cols);
    for (int co = 0; co < Cout; ++co) {
        double bv = B.v[co];
        for (size_t i = 0; i < cols; ++i) out.v[co * cols + i] += bv;
    }

    auto px = x.node(), pw = w.node(), pb = b.node();
    auto n = new_node(std::move(out), {px, pw, pb});
    if (n->requires_grad)
        n->back = [px, pw, pb, stride, pad, K, Ho, Wo](const Tensor& g, GradMap& gm) {
            const Tensor& X = px->val;
            const Tensor& W = pw->val;
            const int Cout = W.c;
            const size_t rows = static_cast<size_t>(X.c) * K * K;
            const size_t cols = static_cast<size_t>(Ho) * Wo;
            CMap G(g.v.data(), Cout, cols);
            if (pb->requires_grad) {
                Tensor& gb = gm.of(pb.get());
                // strict-order sum: Eigen's vectorised reduction splits at the
                // buffer's alignment, which varies between allocations
                for (int co = 0; co < Cout; ++co) {
                    const double* row = g.v.data() + static_cast<size_t>(co) * cols;
                    double s = 0.0;
                    for (size_t i = 0; i < cols; ++i) s += row[i];
                    gb.v[co] += s;
                }
            }
            if (pw->requires_grad) {
                fill_im2col(X, K, stride, pad, Ho, Wo, tl_col);
                Tensor& gw = gm.of(pw.get());
                MMap(gw.v.data(), Cout, rows).noalias() += G * CMap(tl_col.data(), rows, cols).transpose();
            }
            if (px->requires_grad) {
                tl_col2.assign(rows * cols, 0.0);
                MMap(tl_col2.data(), rows, cols).noalias() = CMap(W.v.data(), Cout, rows).transpose() * G;
                col2im_add(tl_col2, gm.of(px.get()), K, stride, pad, Ho, Wo);
            }
        };
    return Var::from_node(n);
}

Var deform_conv2d(const Var& x, const Var& offsets, const Var& w, const Var& b) {
    const Tensor& X = x.val();
    const Tensor& O = offsets.val();
    const Tensor& W = w.val();
    const Tensor& B = b.val();
    const int K = kernel_size_from(W);
    if (W.h != X.c)
        throw std::invalid_argument("deform_conv2d: weight expects " + std::to_string(W.h) + " input channels, got " + std::to_string(X.c));
    if (O.c != 2 * K * K || O.h != X.h || O.w != X.w)
        throw std::invalid_argument("deform_conv2d: offsets " + O.shape_str() + " do not match kernel " + std::to_string(K) + " over " + X.shape_str());
    if (B.c != W.c || B.h != 1 || B.w != 1)
        throw std::invalid_argument("deform_conv2d: bias shape " + B.shape_str() + " does not match outputs");
    const int Cout = W.c;
    const size_t rows = static_cast<size_t>(X.c) * K * K;
    const size_t cols = static_cast<size_t>(X.h) * X.w;

    fill_deform_patches(X, O, K, tl_col);
    Tensor out(Cout, X.h, X.w);
    MMap(out.v.data(), Cout, cols).noalias() =
        CMap(W.v.data(), Cout, rows) * CMap(tl_col.data(), rows, cols);
    for (int co = 0; co < Cout; ++co) {
        double bv = B.v[co];
        for (size_t i = 0; i < cols; ++i) out.v[co * cols + i] += bv;
    }

    auto px = x.node(), po = offsets.node(), pw = w.node(), pb = b.node();
    auto n = new_node(std::move(out), {px, po, pw, pb});
    if (n->requires_grad)
        n->back = [px, po, pw, pb, K](const Tensor& g, GradMap& gm) {
            const Tensor& X = px->val;
            const Tensor& O = po->val;
            const Tensor& W = pw->val;
            const int Cout = W.c;
            const int pad = K / 2;
            const size_t rows = static_cast<size_t>(X.c) * K * K;
            const size_t cols = static_cast<size_t>(X.h) * X.w;
            CMap G(g.v.data(), Cout, cols);
            if (pb->requires_grad) {
                Tensor& gb = gm.of(pb.get());
                for (int co = 0; co < Cout; ++co) {
                    const double* row = g.v.data() + static_cast<size_t>(co) * cols;
                    double s = 0.0;
                    for (size_t i = 0; i < cols; ++i) s += row[i];
                    gb.v[co] += s;
                }
            }
            if (pw->requires_grad) {
                fill_deform_patches(X, O, K, tl_col);
                Tensor& gw = gm.of(pw.get());
                MMap(gw.v.data(), Cout, rows).noalias() += G * CMap(tl_col.data(), rows, cols).transpose();
            }
            if (px->requires_grad || po->requires_grad) {
                tl_col2.assign(rows * cols, 0.0);
                MMap(tl_col2.data(), rows, cols).noalias() = CMap(W.v.data(), Cout, rows).transpose() * G;
                Tensor* gx = px->requires_grad ? &gm.of(px.get()) : nullptr;
                Tensor* go = po->requires_grad ? &gm.of(po.get()) : nullptr;
                for (int y = 0; y < X.h; ++y)
                    for (int xx = 0; xx < X.w; ++xx) {
                        const size_t col = static_cast<size_t>(y) * X.w + xx;
                        for (int k = 0; k < K * K; ++k) {
                            const int ky = k / K, kx = k % K;
                            const double py = y - pad + ky + O.at(2 * k, y, xx);
                            const double pxx = xx - pad + kx + O.at(2 * k + 1, y, xx);
                            const int y0 = static_cast<int>(std::floor(py));
                            const int x0 = static_cast<int>(std::floor(pxx));
                            const double wy = py - y0, wx = pxx - x0;
                            const bool in00 = y0 >= 0 && y0 < X.h && x0 >= 0 && x0 < X.w;
                            const bool in01 = y0 >= 0 && y0 < X.h && x0 + 1 < X.w && x0 + 1 >= 0;
                            const bool in10 = y0 + 1 < X.h && y0 + 1 >= 0 && x0 >= 0 && x0 < X.w;
                            const bool in11 = y0 + 1 < X.h && y0 + 1 >= 0 && x0 + 1 < X.w && x0 + 1 >= 0;
                            double dvy = 0.0, dvx = 0.0;
                            for (int ci = 0; ci < X.c; ++ci) {
                                const double gp = tl_col2[(static_cast<size_t>(ci) * K * K + k) * cols + col];
                                if (gp == 0.0) continue;
                                if (gx) {
                                    if (in00) gx->at(ci, y0, x0) += gp * (1 - wy) * (1 - wx);
                                    if (in01) gx->at(ci, y0, x0 + 1) += gp * (1 - wy) * wx;
                                    if (in10) gx->at(ci, y0 + 1, x0) += gp * wy * (1 - wx);
                                    if (in11) gx->at(ci, y0 + 1, x0 + 1) += gp * wy * wx;
                                }
                                if (go) {
                                    const double v00 = in00 ? X.at(ci, y0, x0) : 0.0;
                                    const double v01 = in01 ? X.at(ci, y0, x0 + 1) : 0.0;
                                    const double v10 = in10 ? X.at(ci, y0 + 1, x0) : 0.0;
                                    const double v11 = in11 ? X.at(ci, y0 + 1, x0 + 1) : 0.0;
                                    dvy += gp * (-(1 - wx) * v00 - wx * v01 + (1 - wx) * v10 + wx * v11);
                                    dvx += gp * (-(1 - wy) * v00 + (1 - wy) * v01 - wy * v10 + wy * v11);
                                }
                            }
                            if (go) {
                                go->at(2 * k, y, xx) += dvy;
                                go->at(2 * k + 1, y, xx) += dvx;
                            }
                        }
                    }
            }
        };
    return Var::from_node(n);
}

Var bce_with_logits_sum(const Var& logits, Tensor targets) {
    const Tensor& X = logits.val();
    require_same_shape(X, targets, "bce_with_logits_sum");
    double s = 0.0;
    for (size_t i = 0; i < X.size(); ++i) {
        const double x = X.v[i], t = targets.v[i];
        s += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    auto pl = logits.node();
    auto n = new_node(Tensor::scalar(s), {pl});
    if (n->requires_grad)
        n->back = [pl, targets = std::move(targets)](const Tensor& g, GradMap& gm) {
            Tensor& gl = gm.of(pl.get());
            for (size_t i = 0; i < gl.v.size(); ++i)
                gl.v[i] += g.v[0] * (stable_sigmoid(pl->val.v[i]) - targets.v[i]);
        };
    return Var::from_node(n);
}

} // namespace evfuse
