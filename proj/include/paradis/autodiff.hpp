#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Graph records every op as a node in creation order, which is already a
// topological order. backward() walks the nodes once in reverse and pushes
// gradients into inputs; parameter leaves forward their gradient into the
// owning Parameter's grad buffer, always by accumulation.

#include <cmath>
#include <cstddef>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "paradis/error.hpp"
#include "paradis/tensor.hpp"

namespace paradis {

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        grad.fill(T(0));
    }
};

// Sums gradient buffers from independent tapes into shared parameters.
// Additive merges commute, so callers may merge from any thread in any order.
template <typename T>
class GradAccumulator {
public:
    explicit GradAccumulator(std::vector<Parameter<T>>& params) : params_(params) {}

    void merge(const std::vector<Tensor<T>>& grads) {
        std::lock_guard lock(mu_);
        if (grads.size() != params_.size()) throw ShapeError("gradient set size mismatch");
        for (std::size_t i = 0; i < grads.size(); ++i) {
            auto& g = params_[i].grad;
            if (g.shape() != grads[i].shape())
                throw ShapeError("merge " + to_string(grads[i].shape()) + " into " + to_string(g.shape()));
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += grads[i][k];
        }
    }

private:
    std::vector<Parameter<T>>& params_;
    std::mutex mu_;
};

template <typename T>
class Graph;

// Lightweight handle to a node on a tape.
template <typename T>
struct Var {
    Graph<T>* graph = nullptr;
    std::size_t id = 0;

    bool valid() const { return graph != nullptr; }
    const Tensor<T>& value() const { return graph->value(*this); }
    const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    void set_check_finite(bool on) { check_finite_ = on; }
    std::size_t size() const { return nodes_.size(); }

    Var<T> constant(Tensor<T> value) { return push("const", std::move(value), {}, false, nullptr); }

    // Leaf whose gradient can be read back with grad(); used for checks.
    Var<T> input(Tensor<T> value) { return push("input", std::move(value), {}, grad_enabled_, nullptr); }

    Var<T> param(Parameter<T>& p) {
        Var<T> v = push("param", p.value, {}, grad_enabled_, nullptr);
        if (grad_enabled_) {
            nodes_[v.id].sink = [&p](const Tensor<T>& g) {
                if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
                for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
            };
        }
        return v;
    }

    // Leaf holding a copy of a sub-block of p; its gradient is scattered back
    // into the matching region of p.grad.
    Var<T> param_slice(Parameter<T>& p, std::vector<Range> ranges) {
        Var<T> v = push("param_slice", slice(p.value, ranges), {}, grad_enabled_, nullptr);
        if (grad_enabled_) {
            nodes_[v.id].sink = [&p, ranges = std::move(ranges)](const Tensor<T>& g) {
                if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
                scatter_add(p.grad, ranges, g);
            };
        }
        return v;
    }

    Var<T> detach(Var<T> v) { return constant(value(v)); }

    const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }

    // Gradient of the last backward() w.r.t. v (zeros if none flowed).
    Tensor<T> grad(Var<T> v) const {
        const auto& n = nodes_.at(v.id);
        if (n.grad.empty() && !n.value.empty()) return Tensor<T>(n.value.shape());
        return n.grad;
    }

    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    Tensor<T>& grad_buffer(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }

    const Tensor<T>& node_value(std::size_t id) const { return nodes_[id].value; }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

    Var<T> add_node(const char* op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
        bool rg = false;
        if (grad_enabled_)
            for (auto i : inputs) rg = rg || nodes_.at(i).requires_grad;
        return push(op, std::move(value), std::move(inputs), rg, rg ? std::move(fn) : nullptr);
    }

    void backward(Var<T> loss) {
        if (backward_done_) throw Error("backward called twice on the same tape; run a fresh forward");
        if (!grad_enabled_) throw Error("backward on a tape recorded without gradients");
        const auto& lv = value(loss);
        if (lv.size() != 1) throw ShapeError("backward needs a scalar loss, got shape " + to_string(lv.shape()));
        backward_done_ = true;
        grad_buffer(loss.id)[0] = T(1);
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            auto& n = nodes_[id];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, id);
            if (n.sink) n.sink(n.grad);
        }
    }

private:
    struct Node {
        const char* op = "";
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        BackwardFn backward;
        std::function<void(const Tensor<T>&)> sink;
    };

    Var<T> push(const char* op, Tensor<T> value, std::vector<std::size_t> inputs, bool rg, BackwardFn fn) {
        if (check_finite_ && !value.all_finite()) throw NonFiniteError(std::string("non-finite output from op ") + op);
        Node n;
        n.op = op;
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        n.requires_grad = rg;
        n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
    bool check_finite_ = false;
    bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Ops. Each computes its value eagerly and registers a closure that
// accumulates into the gradient buffers of inputs that require it.

namespace ops {

namespace detail {
template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}
}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same(a, b, "add");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return a.graph->add_node("add", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_buffer(self);
        for (auto in : {ia, ib}) {
            if (!g.requires_grad(in)) continue;
            auto& gi = g.grad_buffer(in);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::require_same(a, b, "sub");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return a.graph->add_node("sub", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_buffer(self);
        if (g.requires_grad(ia)) {
            auto& gi = g.grad_buffer(ia);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        }
        if (g.requires_grad(ib)) {
            auto& gi = g.grad_buffer(ib);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] -= go[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same(a, b, "mul");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return a.graph->add_node("mul", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_buffer(self);
        const auto& av = g.node_value(ia);
        const auto& bv = g.node_value(ib);
        if (g.requires_grad(ia)) {
            auto& gi = g.grad_buffer(ia);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * bv[i];
        }
        if (g.requires_grad(ib)) {
            auto& gi = g.grad_buffer(ib);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * av[i];
        }
    });
}

// x [B,C] + bias [C] broadcast over rows.
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
    const auto& s = x.shape();
    if (s.size() != 2 || bias.shape() != Shape{s[1]})
        throw ShapeError("add_bias: " + to_string(s) + " with bias " + to_string(bias.shape()));
    const std::size_t B = s[0], C = s[1];
    Tensor<T> out = x.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) out.at(b, c) += bias.value()[c];
    return x.graph->add_node("add_bias", std::move(out), {x.id, bias.id},
                             [xid = x.id, bid = bias.id, B, C](Graph<T>& g, std::size_t self) {
                                 const auto& go = g.grad_buffer(self);
                                 if (g.requires_grad(xid)) {
                                     auto& gx = g.grad_buffer(xid);
                                     for (std::size_t i = 0; i < B * C; ++i) gx[i] += go[i];
                                 }
                                 if (g.requires_grad(bid)) {
                                     auto& gb = g.grad_buffer(bid);
                                     for (std::size_t b = 0; b < B; ++b)
                                         for (std::size_t c = 0; c < C; ++c) gb[c] += go[b * C + c];
                                 }
                             });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.vec()) v *= s;
    return a.graph->add_node("scale", std::move(out), {a.id}, [ia = a.id, s](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_buffer(self);
        auto& gi = g.grad_buffer(ia);
        for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * s;
    });
}

template <typename T>
Var<T> square(Var<T> a) {
    return mul(a, a);
}

template <typename T>
Var<T> sum(Var<T> a) {
    T s = 0;
    for (auto v : a.value().vec()) s += v;
    return a.graph->add_node("sum", Tensor<T>(Shape{}, std::vector<T>{s}), {a.id}, [ia = a.id](Graph<T>& g, std::size_t self) {
        const T go = g.grad_buffer(self)[0];
        auto& gi = g.grad_buffer(ia);
        for (auto& v : gi.vec()) v += go;
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> relu(Var<T> a) {
    Tensor<T> out = a.value();
    for (auto& v : out.vec()) v = v > T(0) ? v : T(0);
    return a.graph->add_node("relu", std::move(out), {a.id}, [ia = a.id](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_buffer(self);
        const auto& x = g.node_value(ia);
        auto& gi = g.grad_buffer(ia);
        for (std::size_t i = 0; i < go.size(); ++i)
            if (x[i] > T(0)) gi[i] += go[i];
    });
}

struct ConvParams {
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k) throw ShapeError("conv kernel larger than padded input");
    return (in + 2 * pad - k) / stride + 1;
}

namespace detail {
// Valid output columns [lo, hi) for kernel tap kw so that input index stays in range.
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t out_n, std::size_t in_n, std::size_t tap,
                                                       std::size_t stride, std::size_t pad) {
    // in = o*stride + tap - pad must satisfy 0 <= in < in_n
    std::size_t lo = 0;
    if (tap < pad) lo = (pad - tap + stride - 1) / stride;
    const long long last = static_cast<long long>(in_n) - 1 + static_cast<long long>(pad) - static_cast<long long>(tap);
    std::size_t hi = last < 0 ? 0 : static_cast<std::size_t>(last) / stride + 1;
    hi = std::min(hi, out_n);
    if (lo > hi) lo = hi;
    return {lo, hi};
}
}  // namespace detail

// Cross-correlation. input [B,Cin,H,W], kernel [Cout,Cin/groups,kH,kW], bias [Cout].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> bias, ConvParams p) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4)
        throw ShapeError("conv2d expects rank-4 input and kernel, got " + to_string(xs) + " and " + to_string(ws));
    if (p.stride < 1) throw ShapeError("conv2d stride must be >= 1");
    const std::size_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const std::size_t Cout = ws[0], Cig = ws[1], KH = ws[2], KW = ws[3];
    const std::size_t G = p.groups;
    if (G == 0 || Cin % G != 0 || Cout % G != 0 || Cig * G != Cin)
        throw ShapeError("conv2d channel mismatch: input " + to_string(xs) + " kernel " + to_string(ws) + " groups " +
                         std::to_string(G));
    if (bias && bias->shape() != Shape{Cout})
        throw ShapeError("conv2d bias shape " + to_string(bias->shape()) + " for kernel " + to_string(ws));
    const std::size_t Ho = conv_out_extent(H, KH, p.stride, p.padding);
    const std::size_t Wo = conv_out_extent(W, KW, p.stride, p.padding);
    const std::size_t Cog = Cout / G;
    const std::size_t S = p.stride, P = p.padding;

    Tensor<T> out(Shape{B, Cout, Ho, Wo});
    const T* xd = x.value().data();
    const T* wd = w.value().data();
    T* od = out.data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t oc = 0; oc < Cout; ++oc) {
            T* op = od + (b * Cout + oc) * Ho * Wo;
            if (bias) std::fill(op, op + Ho * Wo, bias->value()[oc]);
            const std::size_t grp = oc / Cog;
            for (std::size_t icg = 0; icg < Cig; ++icg) {
                const std::size_t ic = grp * Cig + icg;
                const T* ip = xd + (b * Cin + ic) * H * W;
                for (std::size_t kh = 0; kh < KH; ++kh) {
                    const auto [oh_lo, oh_hi] = detail::valid_span(Ho, H, kh, S, P);
                    for (std::size_t kw = 0; kw < KW; ++kw) {
                        const T wv = wd[((oc * Cig + icg) * KH + kh) * KW + kw];
                        const auto [ow_lo, ow_hi] = detail::valid_span(Wo, W, kw, S, P);
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const T* irow = ip + (oh * S + kh - P) * W + kw - P;
                            T* orow = op + oh * Wo;
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * irow[ow * S];
                        }
                    }
                }
            }
        }
    }

    std::vector<std::size_t> in_ids{x.id, w.id};
    if (bias) in_ids.push_back(bias->id);
    const std::size_t bid = bias ? bias->id : static_cast<std::size_t>(-1);
    return x.graph->add_node(
        "conv2d", std::move(out), std::move(in_ids),
        [xid = x.id, wid = w.id, bid, B, Cin, H, W, Cout, Cig, KH, KW, Ho, Wo, Cog, S, P](Graph<T>& g, std::size_t self) {
            const auto& go = g.grad_buffer(self);
            const T* gd = go.data();
            const T* xd = g.node_value(xid).data();
            const T* wd = g.node_value(wid).data();
            T* gx = g.requires_grad(xid) ? g.grad_buffer(xid).data() : nullptr;
            T* gw = g.requires_grad(wid) ? g.grad_buffer(wid).data() : nullptr;
            if (bid != static_cast<std::size_t>(-1) && g.requires_grad(bid)) {
                auto& gb = g.grad_buffer(bid);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t oc = 0; oc < Cout; ++oc) {
                        const T* gp = gd + (b * Cout + oc) * Ho * Wo;
                        T s = 0;
                        for (std::size_t i = 0; i < Ho * Wo; ++i) s += gp[i];
                        gb[oc] += s;
                    }
            }
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t oc = 0; oc < Cout; ++oc) {
                    const T* gp = gd + (b * Cout + oc) * Ho * Wo;
                    const std::size_t grp = oc / Cog;
                    for (std::size_t icg = 0; icg < Cig; ++icg) {
                        const std::size_t ic = grp * Cig + icg;
                        const T* ip = xd + (b * Cin + ic) * H * W;
                        T* gip = gx ? gx + (b * Cin + ic) * H * W : nullptr;
                        for (std::size_t kh = 0; kh < KH; ++kh) {
                            const auto [oh_lo, oh_hi] = detail::valid_span(Ho, H, kh, S, P);
                            for (std::size_t kw = 0; kw < KW; ++kw) {
                                const std::size_t widx = ((oc * Cig + icg) * KH + kh) * KW + kw;
                                const T wv = wd[widx];
                                const auto [ow_lo, ow_hi] = detail::valid_span(Wo, W, kw, S, P);
                                T acc = 0;
                                for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                                    const std::size_t ioff = (oh * S + kh - P) * W + kw - P;
                                    const T* grow = gp + oh * Wo;
                                    const T* irow = ip + ioff;
                                    for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) acc += irow[ow * S] * grow[ow];
                                    if (gip) {
                                        T* girow = gip + ioff;
                                        for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) girow[ow * S] += wv * grow[ow];
                                    }
                                }
                                if (gw) gw[widx] += acc;
                            }
                        }
                    }
                }
            }
        });
}

// x [B,N], w [C,N], bias [C] -> [B,C]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> bias) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
        throw ShapeError("linear: input " + to_string(xs) + " incompatible with weight " + to_string(ws));
    const std::size_t B = xs[0], N = xs[1], C = ws[0];
    if (bias && bias->shape() != Shape{C}) throw ShapeError("linear: bias shape " + to_string(bias->shape()));
    Tensor<T> out(Shape{B, C});
    const T* xd = x.value().data();
    const T* wd = w.value().data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            T s = 0;
            for (std::size_t n = 0; n < N; ++n) s += xd[b * N + n] * wd[c * N + n];
            out.at(b, c) = s + (bias ? bias->value()[c] : T(0));
        }
    std::vector<std::size_t> in_ids{x.id, w.id};
    if (bias) in_ids.push_back(bias->id);
    const std::size_t bid = bias ? bias->id : static_cast<std::size_t>(-1);
    return x.graph->add_node("linear", std::move(out), std::move(in_ids),
                             [xid = x.id, wid = w.id, bid, B, N, C](Graph<T>& g, std::size_t self) {
                                 const auto& go = g.grad_buffer(self);
                                 const T* xd = g.node_value(xid).data();
                                 const T* wd = g.node_value(wid).data();
                                 if (g.requires_grad(xid)) {
                                     T* gx = g.grad_buffer(xid).data();
                                     for (std::size_t b = 0; b < B; ++b)
                                         for (std::size_t c = 0; c < C; ++c) {
                                             const T gv = go[b * C + c];
                                             for (std::size_t n = 0; n < N; ++n) gx[b * N + n] += gv * wd[c * N + n];
                                         }
                                 }
                                 if (g.requires_grad(wid)) {
                                     T* gw = g.grad_buffer(wid).data();
                                     for (std::size_t b = 0; b < B; ++b)
                                         for (std::size_t c = 0; c < C; ++c) {
                                             const T gv = go[b * C + c];
                                             for (std::size_t n = 0; n < N; ++n) gw[c * N + n] += gv * xd[b * N + n];
                                         }
                                 }
                                 if (bid != static_cast<std::size_t>(-1) && g.requires_grad(bid)) {
                                     auto& gb = g.grad_buffer(bid);
                                     for (std::size_t b = 0; b < B; ++b)
                                         for (std::size_t c = 0; c < C; ++c) gb[c] += go[b * C + c];
                                 }
                             });
}

// [B,C,H,W] -> [B,C]
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("global_avg_pool expects rank 4, got " + to_string(s));
    const std::size_t B = s[0], C = s[1], HW = s[2] * s[3];
    Tensor<T> out(Shape{B, C});
    const T inv = T(1) / static_cast<T>(HW);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        T acc = 0;
        const T* p = x.value().data() + bc * HW;
        for (std::size_t i = 0; i < HW; ++i) acc += p[i];
        out[bc] = acc * inv;
    }
    return x.graph->add_node("gap", std::move(out), {x.id}, [xid = x.id, B, C, HW, inv](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_buffer(self);
        auto& gx = g.grad_buffer(xid);
        for (std::size_t bc = 0; bc < B * C; ++bc) {
            const T v = go[bc] * inv;
            T* p = gx.data() + bc * HW;
            for (std::size_t i = 0; i < HW; ++i) p[i] += v;
        }
    });
}

// Row-wise softmax over [B,C].
template <typename T>
Var<T> softmax(Var<T> x) {
    const auto& s = x.shape();
    if (s.size() != 2) throw ShapeError("softmax expects [B,C], got " + to_string(s));
    const std::size_t B = s[0], C = s[1];
    Tensor<T> out(s);
    for (std::size_t b = 0; b < B; ++b) {
        const T* r = x.value().data() + b * C;
        T m = r[0];
        for (std::size_t c = 1; c < C; ++c) m = std::max(m, r[c]);
        T z = 0;
        for (std::size_t c = 0; c < C; ++c) z += (out.at(b, c) = std::exp(r[c] - m));
        for (std::size_t c = 0; c < C; ++c) out.at(b, c) /= z;
    }
    return x.graph->add_node("softmax", std::move(out), {x.id}, [xid = x.id, B, C](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_buffer(self);
        const auto& y = g.node_value(self);
        auto& gx = g.grad_buffer(xid);
        for (std::size_t b = 0; b < B; ++b) {
            T dot = 0;
            for (std::size_t c = 0; c < C; ++c) dot += go[b * C + c] * y[b * C + c];
            for (std::size_t c = 0; c < C; ++c) gx[b * C + c] += y[b * C + c] * (go[b * C + c] - dot);
        }
    });
}

// Per-channel batch normalization over [B,C] or [B,C,H,W].
//
// With stored statistics (mean/var non-null) the op normalizes with them;
// otherwise it uses the statistics of the current batch (biased variance) and
// reports them to the observer if one is set.
template <typename T>
struct BatchNormArgs {
    T eps = T(1e-5);
    const std::vector<T>* stored_mean = nullptr;
    const std::vector<T>* stored_var = nullptr;
    std::function<void(const std::vector<T>& mean, const std::vector<T>& var, std::size_t count)> observer;
};

template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormArgs<T>& args) {
    const auto& s = x.shape();
    if (s.size() != 2 && s.size() != 4) throw ShapeError("batchnorm expects rank 2 or 4, got " + to_string(s));
    const std::size_t B = s[0], C = s[1], HW = s.size() == 4 ? s[2] * s[3] : 1;
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
        throw ShapeError("batchnorm affine lengths " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                         " do not match " + std::to_string(C) + " channels");
    const bool stored = args.stored_mean != nullptr;
    if (stored && (args.stored_mean->size() != C || !args.stored_var || args.stored_var->size() != C))
        throw ShapeError("batchnorm stored stats length does not match " + std::to_string(C) + " channels");
    const std::size_t M = B * HW;
    std::vector<T> mu(C, T(0)), var(C, T(0));
    if (stored) {
        mu = *args.stored_mean;
        var = *args.stored_var;
    } else {
        if (M == 0) throw ShapeError("batchnorm on empty batch");
        const T* xd = x.value().data();
        for (std::size_t c = 0; c < C; ++c) {
            T acc = 0;
            for (std::size_t b = 0; b < B; ++b) {
                const T* p = xd + (b * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) acc += p[i];
            }
            mu[c] = acc / static_cast<T>(M);
            T sq = 0;
            for (std::size_t b = 0; b < B; ++b) {
                const T* p = xd + (b * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    const T d = p[i] - mu[c];
                    sq += d * d;
                }
            }
            var[c] = sq / static_cast<T>(M);
        }
        if (args.observer) args.observer(mu, var, M);
    }
    std::vector<T> invstd(C);
    for (std::size_t c = 0; c < C; ++c) invstd[c] = T(1) / std::sqrt(var[c] + args.eps);

    Tensor<T> out(s);
    Tensor<T> xhat(s);
    const T* xd = x.value().data();
    const auto& gm = gamma.value();
    const auto& bt = beta.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (b * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                const T h = (xd[off + i] - mu[c]) * invstd[c];
                xhat[off + i] = h;
                out[off + i] = gm[c] * h + bt[c];
            }
        }

    return x.graph->add_node(
        "batchnorm", std::move(out), {x.id, gamma.id, beta.id},
        [xid = x.id, gid = gamma.id, bid = beta.id, B, C, HW, M, stored, invstd = std::move(invstd),
         xhat = std::move(xhat)](Graph<T>& g, std::size_t self) {
            const auto& go = g.grad_buffer(self);
            const auto& gm = g.node_value(gid);
            std::vector<T> sum_dy(C, T(0)), sum_dy_xhat(C, T(0));
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t off = (b * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        sum_dy[c] += go[off + i];
                        sum_dy_xhat[c] += go[off + i] * xhat[off + i];
                    }
                }
            if (g.requires_grad(gid)) {
                auto& gg = g.grad_buffer(gid);
                for (std::size_t c = 0; c < C; ++c) gg[c] += sum_dy_xhat[c];
            }
            if (g.requires_grad(bid)) {
                auto& gb = g.grad_buffer(bid);
                for (std::size_t c = 0; c < C; ++c) gb[c] += sum_dy[c];
            }
            if (!g.requires_grad(xid)) return;
            auto& gx = g.grad_buffer(xid);
            const T inv_m = T(1) / static_cast<T>(M);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t off = (b * C + c) * HW;
                    const T k = gm[c] * invstd[c];
                    for (std::size_t i = 0; i < HW; ++i) {
                        if (stored) {
                            gx[off + i] += k * go[off + i];
                        } else {
                            gx[off + i] +=
                                k * (go[off + i] - inv_m * sum_dy[c] - xhat[off + i] * inv_m * sum_dy_xhat[c]);
                        }
                    }
                }
        });
}

// Places x [B,n] into columns [offset, offset+n) of a zero [B,N] tensor.
template <typename T>
Var<T> scatter_columns(Var<T> x, std::size_t total, std::size_t offset) {
    const auto& s = x.shape();
    if (s.size() != 2 || offset + s[1] > total)
        throw ShapeError("scatter_columns: " + to_string(s) + " at offset " + std::to_string(offset) +
                         " exceeds width " + std::to_string(total));
    const std::size_t B = s[0], n = s[1];
    Tensor<T> out(Shape{B, total});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < n; ++j) out.at(b, offset + j) = x.value().at(b, j);
    return x.graph->add_node("scatter_columns", std::move(out), {x.id},
                             [xid = x.id, B, n, total, offset](Graph<T>& g, std::size_t self) {
                                 const auto& go = g.grad_buffer(self);
                                 auto& gx = g.grad_buffer(xid);
                                 for (std::size_t b = 0; b < B; ++b)
                                     for (std::size_t j = 0; j < n; ++j) gx[b * n + j] += go[b * total + offset + j];
                             });
}

// Mean over the batch of -(1/C) sum_c target_c log(max(pred_c, 1e-12)).
// Differentiable through pred only; target is read as a constant.
template <typename T>
Var<T> cross_entropy(Var<T> pred, Var<T> target) {
    const auto& s = pred.shape();
    if (s.size() != 2 || target.shape() != s)
        throw ShapeError("cross_entropy: length mismatch " + to_string(s) + " vs " + to_string(target.shape()));
    const std::size_t B = s[0], C = s[1];
    constexpr T kFloor = T(1e-12);
    const auto& p = pred.value();
    const auto& t = target.value();
    T total = 0;
    for (std::size_t b = 0; b < B; ++b) {
        T row = 0;
        for (std::size_t c = 0; c < C; ++c) row += t.at(b, c) * std::log(std::max(p.at(b, c), kFloor));
        total += -row / static_cast<T>(C);
    }
    total /= static_cast<T>(B);
    return pred.graph->add_node("cross_entropy", Tensor<T>(Shape{}, std::vector<T>{total}), {pred.id, target.id},
                                [pid = pred.id, tid = target.id, B, C](Graph<T>& g, std::size_t self) {
                                    if (!g.requires_grad(pid)) return;
                                    const T go = g.grad_buffer(self)[0];
                                    const auto& p = g.node_value(pid);
                                    const auto& t = g.node_value(tid);
                                    auto& gp = g.grad_buffer(pid);
                                    const T k = -go / static_cast<T>(B * C);
                                    for (std::size_t i = 0; i < B * C; ++i)
                                        if (p[i] >= kFloor) gp[i] += k * t[i] / p[i];
                                });
}

}  // namespace ops
}  // namespace paradis
