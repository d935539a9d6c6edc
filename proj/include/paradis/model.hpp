#pragma once

// Width-elastic CNN with a single shared weight store.
//
// Every conv/norm layer owns a channel axis sized for the wide width
// (e.g. 1.2x the base count). A switch carves each axis into contiguous,
// left-packed intervals, one per sub-model; a sub-model only ever reads the
// weight blocks whose rows and columns both lie in its own intervals, except
// for the first layer, which reads the whole input image. Sub-models emit
// bias-free partial logits over all classes and the fuser adds the head bias
// once.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "paradis/autodiff.hpp"
#include "paradis/error.hpp"
#include "paradis/stats.hpp"
#include "paradis/switch_spec.hpp"
#include "paradis/tensor.hpp"

namespace paradis {

enum class BlockKind : std::uint8_t {
    conv = 1,       // conv kxk -> norm -> relu
    separable = 2,  // depthwise kxk -> norm -> relu -> pointwise 1x1 -> norm -> relu
    residual = 3,   // conv -> norm -> relu -> conv -> norm -> (+skip) -> relu
};

struct BlockSpec {
    BlockKind kind = BlockKind::conv;
    std::size_t channels = 16;  // output channels at width 1.0 (inner channels for residual)
    std::size_t kernel = 3;
    std::size_t stride = 1;

    friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct ModelManifest {
    std::size_t in_channels = 3;
    std::size_t in_height = 8;
    std::size_t in_width = 8;
    std::size_t num_classes = 10;
    double wide_width = 1.2;
    std::vector<BlockSpec> blocks;

    std::string canonical() const {
        std::ostringstream os;
        os.precision(17);
        os << "in=" << in_channels << 'x' << in_height << 'x' << in_width << ";classes=" << num_classes
           << ";wide=" << wide_width;
        for (const auto& b : blocks)
            os << ";b" << int(b.kind) << ':' << b.channels << ':' << b.kernel << ':' << b.stride;
        return os.str();
    }

    // FNV-1a over the canonical text.
    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (unsigned char c : canonical()) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        return h;
    }

    friend bool operator==(const ModelManifest&, const ModelManifest&) = default;
};

enum class LayerKind : std::uint8_t { conv, depthwise, norm, head };

struct Axis {
    std::size_t base = 0;      // channels at width 1.0
    std::size_t physical = 0;  // channels stored (wide width)
    bool sliced = true;        // false only for the input image channels
};

struct Layer {
    LayerKind kind = LayerKind::conv;
    std::string name;
    std::size_t in_axis = 0;
    std::size_t out_axis = 0;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t in_h = 1, in_w = 1, out_h = 1, out_w = 1;
    std::size_t weight = 0;  // param index (conv/depthwise/head) or gamma (norm)
    std::size_t bias = 0;    // param index of beta (norm) or bias (head)
};

enum class StepOp : std::uint8_t { layer, relu, push_skip, add_skip };

struct Step {
    StepOp op = StepOp::layer;
    std::size_t layer = 0;
};

// One sub-model of a resolved switch: a channel range on every axis.
struct SubModelSlice {
    std::string switch_id;
    std::size_t position = 0;
    std::vector<Range> axes;
    std::size_t head_axis = 0;

    const Range& axis(std::size_t a) const { return axes.at(a); }
    const Range& head_columns() const { return axes.at(head_axis); }
};

enum class NormMode { batch, stored };

template <typename T>
struct ForwardOptions {
    NormMode mode = NormMode::batch;
    const SwitchableStats<T>* stats = nullptr;  // defaults to the model's attached stats
    T eps = T(1e-5);
    // Batch-statistics observer: (norm layer id, mean, biased var, element count).
    std::function<void(std::size_t, const std::vector<T>&, const std::vector<T>&, std::size_t)> observer;
};

template <typename T>
struct SubModelOutput {
    Var<T> partial_logits;  // [B, classes], no bias
    Var<T> features;        // [B, slice channels], pooled pre-head activation
};

template <typename T>
struct SwitchOutput {
    Var<T> logits;
    std::vector<SubModelOutput<T>> submodels;
    // Pooled pre-head activation placed at its full-model channel positions,
    // zeros elsewhere. Invalid for switches extending past width 1.0.
    std::optional<Var<T>> activation;
};

template <typename T>
class ElasticModel {
public:
    explicit ElasticModel(ModelManifest manifest) : manifest_(std::move(manifest)) { build(); }

    const ModelManifest& manifest() const { return manifest_; }
    const std::vector<Layer>& layers() const { return layers_; }
    const std::vector<Axis>& axes() const { return axes_; }
    const std::vector<Step>& program() const { return program_; }
    std::vector<Parameter<T>>& params() { return params_; }
    const std::vector<Parameter<T>>& params() const { return params_; }
    std::size_t num_classes() const { return manifest_.num_classes; }
    double wide_width() const { return manifest_.wide_width; }
    const Layer& head() const { return layers_.back(); }
    std::size_t head_axis() const { return head().in_axis; }
    // Pre-head feature dimension of the full 1.0 width network.
    std::size_t pre_head_dim() const { return axes_[head_axis()].base; }

    std::size_t weight_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    // Kaiming-normal conv kernels (fan-in at width 1.0), unit gamma, zero beta,
    // small normal head weights, zero head bias.
    void init(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        for (const auto& l : layers_) {
            if (l.kind == LayerKind::conv || l.kind == LayerKind::depthwise) {
                const double fan_in =
                    double((l.kind == LayerKind::depthwise ? 1 : axes_[l.in_axis].base) * l.kernel * l.kernel);
                std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in));
                for (auto& v : params_[l.weight].value.vec()) v = static_cast<T>(d(rng));
            } else if (l.kind == LayerKind::norm) {
                params_[l.weight].value.fill(T(1));
                params_[l.bias].value.fill(T(0));
            } else {
                std::normal_distribution<double> d(0.0, 1.0 / std::sqrt(double(axes_[l.in_axis].base)));
                for (auto& v : params_[l.weight].value.vec()) v = static_cast<T>(d(rng));
                params_[l.bias].value.fill(T(0));
            }
        }
    }

    // ---- switch registry and statistics ----

    void register_switch(const SwitchSpec& spec) {
        resolve(spec);
        for (const auto& s : switches_)
            if (s == spec) return;
        switches_.push_back(spec);
    }
    const std::vector<SwitchSpec>& switches() const { return switches_; }
    void set_switches(std::vector<SwitchSpec> s) {
        switches_.clear();
        for (const auto& sp : s) register_switch(sp);
    }

    void attach_stats(SwitchableStats<T> stats) { stats_ = std::move(stats); }
    SwitchableStats<T>& stats() { return stats_; }
    const SwitchableStats<T>& stats() const { return stats_; }

    // ---- slicing ----

    std::vector<SubModelSlice> resolve(const SwitchSpec& spec) const {
        const double total = spec.total_width();
        if (total > manifest_.wide_width + 1e-9)
            throw SwitchError("switch " + spec.str() + " spans width " + std::to_string(total) +
                              " beyond the model's wide width " + std::to_string(manifest_.wide_width));
        const std::size_t k = spec.count();
        std::vector<SubModelSlice> out(k);
        for (std::size_t i = 0; i < k; ++i) {
            out[i].switch_id = spec.str();
            out[i].position = i;
            out[i].head_axis = head_axis();
            out[i].axes.resize(axes_.size());
        }
        for (std::size_t a = 0; a < axes_.size(); ++a) {
            if (!axes_[a].sliced) {
                for (auto& s : out) s.axes[a] = Range{0, axes_[a].physical};
                continue;
            }
            const auto ranges = spec.channel_ranges(axes_[a].base);
            for (std::size_t i = 0; i < k; ++i) {
                if (ranges[i].size() == 0)
                    throw SwitchError("switch " + spec.str() + " rounds layer " + axis_owner_name(a) +
                                      " to zero channels for sub-model " + std::to_string(i));
                if (ranges[i].end > axes_[a].physical)
                    throw SwitchError("switch " + spec.str() + " exceeds stored channels of layer " + axis_owner_name(a));
                out[i].axes[a] = ranges[i];
            }
        }
        return out;
    }

    // ---- forward ----

    // Runs one sub-model. Gradients flow into the shared weight store.
    SubModelOutput<T> forward_submodel(Graph<T>& g, const SubModelSlice& s, Var<T> x, const ForwardOptions<T>& opt) {
        return forward_impl(g, s, x, opt, [&](std::size_t p, std::vector<Range> r) {
            return g.grad_enabled() ? g.param_slice(params_[p], std::move(r)) : g.constant(slice(params_[p].value, r));
        });
    }

    // Read-only variant for inference on a gradient-free tape.
    SubModelOutput<T> forward_submodel(Graph<T>& g, const SubModelSlice& s, Var<T> x, const ForwardOptions<T>& opt) const {
        if (g.grad_enabled()) throw Error("const model forward requires a gradient-free tape");
        return forward_impl(g, s, x, opt, [&](std::size_t p, const std::vector<Range>& r) { return g.constant(slice(params_[p].value, r)); });
    }

    Var<T> head_bias(Graph<T>& g) {
        return g.grad_enabled() ? g.param(params_[head().bias]) : g.constant(params_[head().bias].value);
    }
    Var<T> head_bias(Graph<T>& g) const { return g.constant(params_[head().bias].value); }

    SwitchOutput<T> forward_switch(Graph<T>& g, const SwitchSpec& spec, Var<T> x, const ForwardOptions<T>& opt) {
        return forward_switch_impl(*this, g, spec, x, opt);
    }
    SwitchOutput<T> forward_switch(Graph<T>& g, const SwitchSpec& spec, Var<T> x, const ForwardOptions<T>& opt) const {
        return forward_switch_impl(*this, g, spec, x, opt);
    }

    // Copy with channels beyond width 1.0 dropped from every layer, and the
    // switches (and their stats) that needed them removed.
    ElasticModel export_deployable() const {
        ModelManifest m = manifest_;
        m.wide_width = 1.0;
        ElasticModel out(m);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            std::vector<Range> r;
            for (auto d : out.params_[i].value.shape()) r.push_back(Range{0, d});
            out.params_[i].value = slice(params_[i].value, r);
            out.params_[i].grad = Tensor<T>(out.params_[i].value.shape());
        }
        for (const auto& s : switches_)
            if (s.total_width() <= 1.0 + 1e-9) out.switches_.push_back(s);
        for (const auto& [k, v] : stats_.entries()) {
            if (SwitchSpec::parse(k.switch_id).total_width() <= 1.0 + 1e-9) {
                out.stats_.set(k, v);
                out.stats_.set_sample_count(k.switch_id, stats_.sample_count(k.switch_id));
            }
        }
        return out;
    }

private:
    template <typename Self>
    static SwitchOutput<T> forward_switch_impl(Self& self, Graph<T>& g, const SwitchSpec& spec, Var<T> x,
                                               const ForwardOptions<T>& opt) {
        SwitchOutput<T> out;
        std::vector<Var<T>> partials;
        for (const auto& s : self.resolve(spec)) {
            out.submodels.push_back(self.forward_submodel(g, s, x, opt));
            partials.push_back(out.submodels.back().partial_logits);
        }
        out.logits = fuse(partials, self.head_bias(g));
        const std::size_t N = self.pre_head_dim();
        if (spec.total_width() <= 1.0 + 1e-9) {
            std::optional<Var<T>> act;
            const auto slices = self.resolve(spec);
            for (std::size_t i = 0; i < slices.size(); ++i) {
                const Range& r = slices[i].head_columns();
                if (r.end > N) break;
                Var<T> placed = ops::scatter_columns(out.submodels[i].features, N, r.begin);
                act = act ? ops::add(*act, placed) : placed;
            }
            out.activation = act;
        }
        return out;
    }

    template <typename Leaf>
    SubModelOutput<T> forward_impl(Graph<T>&, const SubModelSlice& s, Var<T> x, const ForwardOptions<T>& opt,
                                   Leaf&& leaf) const {
        const auto& xs = x.shape();
        if (xs.size() != 4 || xs[1] != manifest_.in_channels || xs[2] != manifest_.in_height ||
            xs[3] != manifest_.in_width)
            throw ShapeError("model input must be [B," + std::to_string(manifest_.in_channels) + "," +
                             std::to_string(manifest_.in_height) + "," + std::to_string(manifest_.in_width) +
                             "], got " + to_string(xs));
        if (s.axes.size() != axes_.size()) throw ShapeError("slice does not match model axes");
        const SwitchableStats<T>* stats = opt.stats ? opt.stats : &stats_;
        Var<T> h = x;
        std::vector<Var<T>> skips;
        for (const auto& step : program_) {
            switch (step.op) {
                case StepOp::relu: h = ops::relu(h); break;
                case StepOp::push_skip: skips.push_back(h); break;
                case StepOp::add_skip:
                    h = ops::add(h, skips.back());
                    skips.pop_back();
                    break;
                case StepOp::layer: {
                    const Layer& l = layers_[step.layer];
                    const Range& in = s.axis(l.in_axis);
                    const Range& out = s.axis(l.out_axis);
                    const Range full_k{0, l.kernel};
                    if (l.kind == LayerKind::conv) {
                        Var<T> w = leaf(l.weight, {out, in, full_k, full_k});
                        h = ops::conv2d<T>(h, w, std::nullopt, {l.stride, l.padding, 1});
                    } else if (l.kind == LayerKind::depthwise) {
                        Var<T> w = leaf(l.weight, {out, Range{0, 1}, full_k, full_k});
                        h = ops::conv2d<T>(h, w, std::nullopt, {l.stride, l.padding, out.size()});
                    } else if (l.kind == LayerKind::norm) {
                        Var<T> gamma = leaf(l.weight, {out});
                        Var<T> beta = leaf(l.bias, {out});
                        ops::BatchNormArgs<T> args;
                        args.eps = opt.eps;
                        if (opt.mode == NormMode::stored) {
                            const auto& e = stats->lookup(s.switch_id, s.position, step.layer);
                            if (e.mean.size() != out.size())
                                throw ShapeError("stats for switch " + s.switch_id + " layer " + l.name +
                                                 " cover " + std::to_string(e.mean.size()) + " channels, slice has " +
                                                 std::to_string(out.size()));
                            args.stored_mean = &e.mean;
                            args.stored_var = &e.var;
                        } else if (opt.observer) {
                            args.observer = [&opt, id = step.layer](const std::vector<T>& m, const std::vector<T>& v,
                                                                    std::size_t n) { opt.observer(id, m, v, n); };
                        }
                        h = ops::batchnorm(h, gamma, beta, args);
                    } else {
                        throw Error("head layer inside body program");
                    }
                    break;
                }
            }
        }
        Var<T> feat = ops::global_avg_pool(h);
        const Layer& hd = head();
        Var<T> w = leaf(hd.weight, {Range{0, manifest_.num_classes}, s.head_columns()});
        return {ops::linear<T>(feat, w, std::nullopt), feat};
    }

    std::string axis_owner_name(std::size_t a) const {
        for (const auto& l : layers_)
            if (l.out_axis == a && l.kind != LayerKind::norm) return l.name;
        return "axis" + std::to_string(a);
    }

    std::size_t add_param(const std::string& name, Shape shape) {
        params_.emplace_back(name, Tensor<T>(std::move(shape)));
        return params_.size() - 1;
    }

    void build() {
        const auto& m = manifest_;
        std::vector<std::string> problems;
        if (m.blocks.empty()) problems.push_back("model has no blocks");
        if (m.in_channels == 0 || m.in_height == 0 || m.in_width == 0) problems.push_back("empty input shape");
        if (m.num_classes == 0) problems.push_back("num_classes must be > 0");
        if (!(m.wide_width >= 1.0)) problems.push_back("wide_width must be >= 1.0");
        if (!problems.empty()) throw ConfigError(problems);

        axes_.push_back(Axis{m.in_channels, m.in_channels, false});
        std::size_t cur = 0, h = m.in_height, w = m.in_width;
        auto new_axis = [&](std::size_t base) {
            axes_.push_back(Axis{base, channel_boundary(m.wide_width, base), true});
            return axes_.size() - 1;
        };
        auto conv = [&](const std::string& name, LayerKind kind, std::size_t in_axis, std::size_t out_axis,
                        std::size_t k, std::size_t stride) {
            Layer l;
            l.kind = kind;
            l.name = name;
            l.in_axis = in_axis;
            l.out_axis = out_axis;
            l.kernel = k;
            l.stride = stride;
            l.padding = k / 2;
            l.in_h = h;
            l.in_w = w;
            l.out_h = ops::conv_out_extent(h, k, stride, l.padding);
            l.out_w = ops::conv_out_extent(w, k, stride, l.padding);
            const std::size_t cin = kind == LayerKind::depthwise ? 1 : axes_[in_axis].physical;
            l.weight = add_param(name + ".weight", Shape{axes_[out_axis].physical, cin, k, k});
            h = l.out_h;
            w = l.out_w;
            layers_.push_back(l);
            program_.push_back({StepOp::layer, layers_.size() - 1});
        };
        auto norm = [&](const std::string& name, std::size_t axis) {
            Layer l;
            l.kind = LayerKind::norm;
            l.name = name;
            l.in_axis = l.out_axis = axis;
            l.in_h = l.out_h = h;
            l.in_w = l.out_w = w;
            l.weight = add_param(name + ".gamma", Shape{axes_[axis].physical});
            l.bias = add_param(name + ".beta", Shape{axes_[axis].physical});
            layers_.push_back(l);
            program_.push_back({StepOp::layer, layers_.size() - 1});
        };
        auto relu = [&] { program_.push_back({StepOp::relu, 0}); };

        for (std::size_t bi = 0; bi < m.blocks.size(); ++bi) {
            const auto& b = m.blocks[bi];
            const std::string p = "block" + std::to_string(bi);
            if (b.channels == 0 || b.kernel == 0 || b.kernel % 2 == 0 || b.stride == 0) {
                problems.push_back(p + ": channels > 0, odd kernel and stride >= 1 required");
                continue;
            }
            switch (b.kind) {
                case BlockKind::conv: {
                    const auto out = new_axis(b.channels);
                    conv(p + ".conv", LayerKind::conv, cur, out, b.kernel, b.stride);
                    norm(p + ".bn", out);
                    relu();
                    cur = out;
                    break;
                }
                case BlockKind::separable: {
                    conv(p + ".dw", LayerKind::depthwise, cur, cur, b.kernel, b.stride);
                    norm(p + ".dw_bn", cur);
                    relu();
                    const auto out = new_axis(b.channels);
                    conv(p + ".pw", LayerKind::conv, cur, out, 1, 1);
                    norm(p + ".pw_bn", out);
                    relu();
                    cur = out;
                    break;
                }
                case BlockKind::residual: {
                    if (b.stride != 1 || !axes_[cur].sliced) {
                        problems.push_back(p + ": residual blocks need stride 1 and a preceding conv block");
                        continue;
                    }
                    program_.push_back({StepOp::push_skip, 0});
                    const auto inner = new_axis(b.channels);
                    conv(p + ".conv1", LayerKind::conv, cur, inner, b.kernel, 1);
                    norm(p + ".bn1", inner);
                    relu();
                    conv(p + ".conv2", LayerKind::conv, inner, cur, b.kernel, 1);
                    norm(p + ".bn2", cur);
                    program_.push_back({StepOp::add_skip, 0});
                    relu();
                    break;
                }
                default: problems.push_back(p + ": unknown block kind");
            }
        }
        if (!axes_[cur].sliced) problems.push_back("the last block must produce sliceable channels");
        if (!problems.empty()) throw ConfigError(problems);

        Layer hd;
        hd.kind = LayerKind::head;
        hd.name = "head";
        hd.in_axis = cur;
        hd.out_axis = cur;
        hd.weight = add_param("head.weight", Shape{m.num_classes, axes_[cur].physical});
        hd.bias = add_param("head.bias", Shape{m.num_classes});
        layers_.push_back(hd);
    }

    ModelManifest manifest_;
    std::vector<Axis> axes_;
    std::vector<Layer> layers_;
    std::vector<Step> program_;
    std::vector<Parameter<T>> params_;
    std::vector<SwitchSpec> switches_;
    SwitchableStats<T> stats_;
};

// Sum of partial logits in list order, plus the head bias added once.
template <typename T>
Var<T> fuse(const std::vector<Var<T>>& partials, Var<T> head_bias) {
    if (partials.empty()) throw Error("fuse: no partial logits");
    Var<T> acc = partials.front();
    for (std::size_t i = 1; i < partials.size(); ++i) acc = ops::add(acc, partials[i]);
    return ops::add_bias(acc, head_bias);
}

template <typename T>
Tensor<T> fuse(const std::vector<Tensor<T>>& partials, const Tensor<T>& head_bias) {
    if (partials.empty()) throw Error("fuse: no partial logits");
    Tensor<T> acc = partials.front();
    if (acc.rank() != 2 || head_bias.shape() != Shape{acc.dim(1)})
        throw ShapeError("fuse: partial " + to_string(acc.shape()) + " with bias " + to_string(head_bias.shape()));
    for (std::size_t i = 1; i < partials.size(); ++i) {
        if (partials[i].shape() != acc.shape())
            throw ShapeError("fuse: partial shapes differ " + to_string(partials[i].shape()) + " vs " +
                             to_string(acc.shape()));
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += partials[i][k];
    }
    for (std::size_t b = 0; b < acc.dim(0); ++b)
        for (std::size_t c = 0; c < acc.dim(1); ++c) acc.at(b, c) += head_bias[c];
    return acc;
}

// Eval-mode logits of a switch on a gradient-free tape.
template <typename T>
Tensor<T> infer_switch(const ElasticModel<T>& model, const SwitchSpec& spec, const Tensor<T>& input,
                       NormMode mode = NormMode::stored, const SwitchableStats<T>* stats = nullptr) {
    Graph<T> g(false);
    ForwardOptions<T> opt;
    opt.mode = mode;
    opt.stats = stats;
    return model.forward_switch(g, spec, g.constant(input), opt).logits.value();
}

// Ready-made manifests used by the CLI, tests and benchmarks.
namespace arch {

// Three plain conv blocks on 3x8x8 inputs.
inline ModelManifest toy(std::size_t classes = 10, double wide = 1.2) {
    ModelManifest m;
    m.in_channels = 3;
    m.in_height = 8;
    m.in_width = 8;
    m.num_classes = classes;
    m.wide_width = wide;
    m.blocks = {{BlockKind::conv, 16, 3, 1}, {BlockKind::conv, 32, 3, 2}, {BlockKind::conv, 32, 3, 1}};
    return m;
}

// MobileNet-style: stem conv then depthwise-separable blocks.
inline ModelManifest mobilenet_toy(std::size_t classes = 10, double wide = 1.2) {
    ModelManifest m = toy(classes, wide);
    m.blocks = {{BlockKind::conv, 16, 3, 1}, {BlockKind::separable, 32, 3, 2}, {BlockKind::separable, 32, 3, 1}};
    return m;
}

// ResNet-style: stem conv then basic residual blocks.
inline ModelManifest resnet_toy(std::size_t classes = 10, double wide = 1.2) {
    ModelManifest m = toy(classes, wide);
    m.blocks = {{BlockKind::conv, 16, 3, 1}, {BlockKind::conv, 32, 3, 2}, {BlockKind::residual, 32, 3, 1}};
    return m;
}

inline ModelManifest by_name(const std::string& name, std::size_t classes, double wide) {
    if (name == "toy") return toy(classes, wide);
    if (name == "mobilenet-toy") return mobilenet_toy(classes, wide);
    if (name == "resnet-toy") return resnet_toy(classes, wide);
    throw ConfigError({"unknown arch \"" + name + "\" (expected toy, mobilenet-toy or resnet-toy)"});
}

}  // namespace arch

}  // namespace paradis
