#pragma once

// Multiply-add and parameter counts per layer, sub-model and switch.
// Normalization, activations and bias adds count as zero MACs.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "paradis/model.hpp"

namespace paradis {

struct LayerCost {
    std::size_t submodel = 0;
    std::string layer;
    std::uint64_t macs = 0;
    std::uint64_t params = 0;
};

struct CostReport {
    std::string switch_id;
    std::vector<LayerCost> layers;             // per sample, grouped by sub-model
    std::vector<std::uint64_t> submodel_macs;  // per sample
    std::vector<std::uint64_t> submodel_params;
    std::uint64_t total_macs = 0;
    std::uint64_t per_device_max_macs = 0;
    std::uint64_t params = 0;  // all sub-models plus the shared head bias

    double total_mflops() const { return double(total_macs) / 1e6; }
    double per_device_mflops() const { return double(per_device_max_macs) / 1e6; }
    double submodel_mflops(std::size_t i) const { return double(submodel_macs.at(i)) / 1e6; }
};

template <typename T>
CostReport count_flops(const ElasticModel<T>& model, const SwitchSpec& spec) {
    CostReport r;
    r.switch_id = spec.str();
    const auto slices = model.resolve(spec);
    for (const auto& s : slices) {
        std::uint64_t sm_macs = 0, sm_params = 0;
        for (const auto& l : model.layers()) {
            const std::uint64_t in = s.axis(l.in_axis).size(), out = s.axis(l.out_axis).size();
            const std::uint64_t kk = std::uint64_t(l.kernel) * l.kernel, hw = std::uint64_t(l.out_h) * l.out_w;
            LayerCost c;
            c.submodel = s.position;
            c.layer = l.name;
            switch (l.kind) {
                case LayerKind::conv:
                    c.params = out * in * kk;
                    c.macs = c.params * hw;
                    break;
                case LayerKind::depthwise:
                    c.params = out * kk;
                    c.macs = c.params * hw;
                    break;
                case LayerKind::norm: c.params = 2 * out; break;
                case LayerKind::head:
                    c.params = std::uint64_t(model.num_classes()) * s.head_columns().size();
                    c.macs = c.params;
                    break;
            }
            sm_macs += c.macs;
            sm_params += c.params;
            r.layers.push_back(c);
        }
        r.submodel_macs.push_back(sm_macs);
        r.submodel_params.push_back(sm_params);
        r.total_macs += sm_macs;
        r.params += sm_params;
        r.per_device_max_macs = std::max(r.per_device_max_macs, sm_macs);
    }
    r.params += model.num_classes();
    return r;
}

// Abscissa of the distributed accuracy curve: cost of the heaviest sub-model.
struct DeviceView {
    double per_device_mflops = 0;
    std::size_t heaviest_submodel = 0;
    std::vector<double> submodel_mflops;
};

inline DeviceView per_device_view(const CostReport& r) {
    DeviceView v;
    for (std::size_t i = 0; i < r.submodel_macs.size(); ++i) {
        v.submodel_mflops.push_back(r.submodel_mflops(i));
        if (r.submodel_macs[i] > r.submodel_macs[v.heaviest_submodel]) v.heaviest_submodel = i;
    }
    v.per_device_mflops = r.per_device_mflops();
    return v;
}

// switch,submodel_idx,layer,macs rows, then one "total" row per sub-model,
// the switch total and the per-device maximum.
inline void write_flops_csv(std::ostream& os, const std::vector<CostReport>& reports) {
    os << "switch,submodel_idx,layer,macs\n";
    for (const auto& r : reports) {
        const std::string sw = "\"" + r.switch_id + "\"";
        for (const auto& l : r.layers) os << sw << ',' << l.submodel << ',' << l.layer << ',' << l.macs << '\n';
        for (std::size_t i = 0; i < r.submodel_macs.size(); ++i)
            os << sw << ',' << i << ",submodel_total," << r.submodel_macs[i] << '\n';
        os << sw << ",,switch_total," << r.total_macs << '\n';
        os << sw << ",,per_device_max," << r.per_device_max_macs << '\n';
    }
}

}  // namespace paradis
