#pragma once

// Reference execution of a switch as one network.
//
// The union of a switch's channel intervals is run in a single pass with
// every weight block that would connect two different sub-models zeroed.
// Normalization is per channel, so per-slice statistics are simply
// concatenated. The result must match the fused per-sub-model execution.

#include <cstddef>
#include <vector>

#include "paradis/autodiff.hpp"
#include "paradis/model.hpp"

namespace paradis {

inline constexpr std::size_t kShared = static_cast<std::size_t>(-1);

// Sub-model owning each channel of an axis over the union range; kShared for
// the unsliced input axis.
template <typename T>
std::vector<std::vector<std::size_t>> channel_owners(const ElasticModel<T>& model, const std::vector<SubModelSlice>& slices) {
    std::vector<std::vector<std::size_t>> owners(model.axes().size());
    for (std::size_t a = 0; a < model.axes().size(); ++a) {
        if (!model.axes()[a].sliced) {
            owners[a].assign(model.axes()[a].physical, kShared);
            continue;
        }
        owners[a].assign(slices.back().axis(a).end, kShared);
        for (const auto& s : slices)
            for (std::size_t c = s.axis(a).begin; c < s.axis(a).end; ++c) owners[a][c] = s.position;
    }
    return owners;
}

// Zeroes weight[o, i, ...] wherever output and input channels belong to
// different sub-models. Shared (input image) channels connect to everyone.
template <typename T>
Tensor<T> block_diagonal_mask(const Tensor<T>& weight, const std::vector<std::size_t>& out_owner,
                              const std::vector<std::size_t>& in_owner) {
    Tensor<T> w = weight;
    const std::size_t O = w.dim(0), I = w.dim(1);
    if (out_owner.size() != O || in_owner.size() != I) throw ShapeError("mask owners do not match weight " + to_string(w.shape()));
    const std::size_t inner = w.size() / (O * I);
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < I; ++i) {
            if (in_owner[i] == kShared || out_owner[o] == kShared || in_owner[i] == out_owner[o]) continue;
            std::fill_n(w.data() + (o * I + i) * inner, inner, T(0));
        }
    return w;
}

template <typename T>
Tensor<T> masked_monolith_forward(const ElasticModel<T>& model, const SwitchSpec& spec, const Tensor<T>& input,
                                  NormMode mode = NormMode::batch, const SwitchableStats<T>* stats = nullptr,
                                  T eps = T(1e-5)) {
    const auto slices = model.resolve(spec);
    const auto owners = channel_owners(model, slices);
    if (!stats) stats = &model.stats();
    auto union_range = [&](std::size_t axis) { return Range{0, owners[axis].size()}; };

    Graph<T> g(false);
    Var<T> h = g.constant(input);
    std::vector<Var<T>> skips;
    for (const auto& step : model.program()) {
        if (step.op == StepOp::relu) {
            h = ops::relu(h);
            continue;
        }
        if (step.op == StepOp::push_skip) {
            skips.push_back(h);
            continue;
        }
        if (step.op == StepOp::add_skip) {
            h = ops::add(h, skips.back());
            skips.pop_back();
            continue;
        }
        const Layer& l = model.layers()[step.layer];
        const Range in = union_range(l.in_axis), out = union_range(l.out_axis), k{0, l.kernel};
        if (l.kind == LayerKind::conv) {
            Tensor<T> w = slice(model.params()[l.weight].value, {out, in, k, k});
            w = block_diagonal_mask(w, owners[l.out_axis], owners[l.in_axis]);
            h = ops::conv2d<T>(h, g.constant(std::move(w)), std::nullopt, {l.stride, l.padding, 1});
        } else if (l.kind == LayerKind::depthwise) {
            Tensor<T> w = slice(model.params()[l.weight].value, {out, Range{0, 1}, k, k});
            h = ops::conv2d<T>(h, g.constant(std::move(w)), std::nullopt, {l.stride, l.padding, out.size()});
        } else if (l.kind == LayerKind::norm) {
            ops::BatchNormArgs<T> args;
            args.eps = eps;
            std::vector<T> mean, var;
            if (mode == NormMode::stored) {
                for (const auto& s : slices) {
                    const auto& e = stats->lookup(s.switch_id, s.position, step.layer);
                    mean.insert(mean.end(), e.mean.begin(), e.mean.end());
                    var.insert(var.end(), e.var.begin(), e.var.end());
                }
                args.stored_mean = &mean;
                args.stored_var = &var;
            }
            h = ops::batchnorm(h, g.constant(slice(model.params()[l.weight].value, {out})),
                               g.constant(slice(model.params()[l.bias].value, {out})), args);
        }
    }
    Var<T> feat = ops::global_avg_pool(h);
    const Layer& hd = model.head();
    Tensor<T> w = slice(model.params()[hd.weight].value, {Range{0, model.num_classes()}, union_range(hd.in_axis)});
    return ops::linear<T>(feat, g.constant(std::move(w)), g.constant(model.params()[hd.bias].value)).value();
}

}  // namespace paradis
