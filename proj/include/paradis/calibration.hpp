#pragma once

// Post-training calibration of switchable normalization statistics: a
// gradient-free forward pass of every sub-model over a data subset, in
// batch-statistics mode, aggregating what each normalization layer saw.

#include <cstddef>
#include <future>
#include <map>
#include <vector>

#include "paradis/model.hpp"
#include "paradis/stats.hpp"

namespace paradis {

enum class CalibrationMode {
    exact_mean,      // count-weighted pooling of batch moments (law of total variance)
    moving_average,  // running <- (1 - m) running + m batch, seeded by the first batch
};

struct CalibrationOptions {
    CalibrationMode mode = CalibrationMode::exact_mean;
    double momentum = 0.1;
    bool parallel = false;  // one task per switch; keys are disjoint
};

namespace detail {

struct MomentAccumulator {
    std::size_t count = 0;
    std::vector<double> sum_mean;   // sum_b n_b * mean_b
    std::vector<double> sum_var;    // sum_b n_b * var_b
    std::vector<double> sum_mean2;  // sum_b n_b * mean_b^2
    std::vector<double> running_mean, running_var;
    bool seeded = false;
};

template <typename T>
SwitchableStats<T> calibrate_one(const ElasticModel<T>& model, const SwitchSpec& spec, const std::vector<Tensor<T>>& batches,
                                 const CalibrationOptions& opt) {
    SwitchableStats<T> out;
    std::uint64_t samples = 0;
    for (const auto& b : batches) samples += b.dim(0);
    for (const auto& slice : model.resolve(spec)) {
        std::map<std::size_t, MomentAccumulator> acc;
        ForwardOptions<T> fo;
        fo.mode = NormMode::batch;
        fo.observer = [&](std::size_t layer, const std::vector<T>& mean, const std::vector<T>& var, std::size_t n) {
            auto& a = acc[layer];
            const std::size_t C = mean.size();
            if (a.sum_mean.empty()) {
                a.sum_mean.assign(C, 0.0);
                a.sum_var.assign(C, 0.0);
                a.sum_mean2.assign(C, 0.0);
                a.running_mean.assign(C, 0.0);
                a.running_var.assign(C, 0.0);
            }
            a.count += n;
            for (std::size_t c = 0; c < C; ++c) {
                a.sum_mean[c] += double(n) * mean[c];
                a.sum_var[c] += double(n) * var[c];
                a.sum_mean2[c] += double(n) * double(mean[c]) * double(mean[c]);
                if (!a.seeded) {
                    a.running_mean[c] = mean[c];
                    a.running_var[c] = var[c];
                } else {
                    a.running_mean[c] = (1.0 - opt.momentum) * a.running_mean[c] + opt.momentum * mean[c];
                    a.running_var[c] = (1.0 - opt.momentum) * a.running_var[c] + opt.momentum * var[c];
                }
            }
            a.seeded = true;
        };
        for (const auto& batch : batches) {
            Graph<T> g(false);
            model.forward_submodel(g, slice, g.constant(batch), fo);
        }
        for (const auto& [layer, a] : acc) {
            StatsEntry<T> e;
            const std::size_t C = a.sum_mean.size();
            e.mean.resize(C);
            e.var.resize(C);
            for (std::size_t c = 0; c < C; ++c) {
                if (opt.mode == CalibrationMode::exact_mean) {
                    const double m = a.sum_mean[c] / double(a.count);
                    const double between = std::max(0.0, a.sum_mean2[c] / double(a.count) - m * m);
                    e.mean[c] = static_cast<T>(m);
                    e.var[c] = static_cast<T>(a.sum_var[c] / double(a.count) + between);
                } else {
                    e.mean[c] = static_cast<T>(a.running_mean[c]);
                    e.var[c] = static_cast<T>(std::max(0.0, a.running_var[c]));
                }
            }
            out.set(StatsKey{slice.switch_id, slice.position, layer}, std::move(e));
        }
    }
    out.set_sample_count(spec.str(), samples);
    return out;
}

}  // namespace detail

template <typename T>
SwitchableStats<T> calibrate(const ElasticModel<T>& model, const std::vector<SwitchSpec>& specs,
                             const std::vector<Tensor<T>>& batches, const CalibrationOptions& opt = {}) {
    if (batches.empty()) throw Error("calibration needs a non-empty data subset");
    for (const auto& b : batches)
        if (b.rank() != 4 || b.dim(0) == 0) throw ShapeError("calibration batch must be non-empty [B,C,H,W]");
    for (const auto& s : specs) model.resolve(s);
    SwitchableStats<T> out;
    if (opt.parallel && specs.size() > 1) {
        std::vector<std::future<SwitchableStats<T>>> jobs;
        for (const auto& s : specs)
            jobs.push_back(std::async(std::launch::async, [&, s] { return detail::calibrate_one(model, s, batches, opt); }));
        for (auto& j : jobs) out.merge(j.get());
    } else {
        for (const auto& s : specs) out.merge(detail::calibrate_one(model, s, batches, opt));
    }
    return out;
}

}  // namespace paradis
