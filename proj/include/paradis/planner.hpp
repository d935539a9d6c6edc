#pragma once

// Capacity-aware choice of a switch and its sub-model-to-device assignment.
//
// Modeled cost of sub-model i on device d for a batch of B samples:
//   compute = B * MFLOPs_i / capacity_d            (seconds)
//   comm    = latency_d + (input + logits bytes) / bandwidth_d
// A plan's latency is the slowest device's compute + comm.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "paradis/complexity.hpp"
#include "paradis/model.hpp"

namespace paradis {

struct DeviceProfile {
    std::string id;
    std::string address;          // host:port of the worker
    double capacity_mflops = 1;   // modeled MFLOPs per second
    double latency_ms = 0;        // link latency to the coordinator
    double bandwidth_mbps = 100;  // MB/s
    bool available = true;

    void validate() const {
        std::vector<std::string> p;
        if (id.empty()) p.push_back("device id is empty");
        if (!(capacity_mflops > 0)) p.push_back("device " + id + ": capacity must be > 0");
        if (!(bandwidth_mbps > 0)) p.push_back("device " + id + ": bandwidth must be > 0");
        if (!(latency_ms >= 0)) p.push_back("device " + id + ": latency must be >= 0");
        if (!p.empty()) throw ConfigError(p);
    }
};

// One device per line: id address capacity_mflops latency_ms bandwidth_mbps [available 0|1].
inline std::vector<DeviceProfile> parse_devices(const std::string& text) {
    std::vector<DeviceProfile> out;
    std::vector<std::string> problems;
    std::istringstream in(text);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        std::istringstream ls(line);
        DeviceProfile d;
        if (!(ls >> d.id)) continue;
        int avail = 1;
        if (!(ls >> d.address >> d.capacity_mflops >> d.latency_ms >> d.bandwidth_mbps)) {
            problems.push_back("line " + std::to_string(n) + ": expected id address capacity latency bandwidth");
            continue;
        }
        if (ls >> avail) d.available = avail != 0;
        try {
            d.validate();
        } catch (const ConfigError& e) {
            for (const auto& p : e.problems()) problems.push_back("line " + std::to_string(n) + ": " + p);
        }
        for (const auto& o : out)
            if (o.id == d.id) problems.push_back("line " + std::to_string(n) + ": duplicate device id " + d.id);
        out.push_back(d);
    }
    if (!problems.empty()) throw ConfigError(problems);
    return out;
}

inline std::vector<DeviceProfile> load_devices(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read device file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_devices(ss.str());
}

struct Assignment {
    std::size_t position = 0;
    std::string device_id;
    double mflops = 0;  // per sample
    double compute_ms = 0;
    double comm_ms = 0;
};

struct DeploymentPlan {
    SwitchSpec spec;
    std::vector<Assignment> assignment;  // indexed by sub-model position
    double latency_ms = 0;
    double compute_ms = 0;  // slowest device's compute alone

    const Assignment* find_device(const std::string& id) const {
        for (const auto& a : assignment)
            if (a.device_id == id) return &a;
        return nullptr;
    }
    friend bool operator==(const DeploymentPlan& a, const DeploymentPlan& b) {
        if (a.spec != b.spec || a.assignment.size() != b.assignment.size()) return false;
        for (std::size_t i = 0; i < a.assignment.size(); ++i)
            if (a.assignment[i].device_id != b.assignment[i].device_id) return false;
        return true;
    }
};

struct PlanRequest {
    std::size_t batch = 1;
    std::size_t input_bytes_per_sample = 0;   // f32 image bytes
    std::size_t output_bytes_per_sample = 0;  // f32 logits bytes
};

template <typename T>
PlanRequest plan_request(const ElasticModel<T>& model, std::size_t batch = 1) {
    const auto& m = model.manifest();
    return {batch, 4 * m.in_channels * m.in_height * m.in_width, 4 * m.num_classes};
}

inline Assignment cost_on(const DeviceProfile& d, std::size_t position, double mflops, const PlanRequest& req) {
    Assignment a;
    a.position = position;
    a.device_id = d.id;
    a.mflops = mflops;
    a.compute_ms = 1000.0 * double(req.batch) * mflops / d.capacity_mflops;
    const double bytes = double(req.batch) * double(req.input_bytes_per_sample + req.output_bytes_per_sample);
    a.comm_ms = d.latency_ms + 1000.0 * bytes / (d.bandwidth_mbps * 1e6);
    return a;
}

inline void finish_plan(DeploymentPlan& p) {
    p.latency_ms = 0;
    p.compute_ms = 0;
    for (const auto& a : p.assignment) {
        p.latency_ms = std::max(p.latency_ms, a.compute_ms + a.comm_ms);
        p.compute_ms = std::max(p.compute_ms, a.compute_ms);
    }
}

// Heaviest sub-model onto the most capable device, and so on down both
// lists. When link costs make that order suboptimal, the assignment falls
// back to a bottleneck matching: the smallest cost threshold admitting a
// perfect matching between sub-models and devices.
template <typename T>
DeploymentPlan assign(const ElasticModel<T>& model, const SwitchSpec& spec, std::vector<DeviceProfile> devices,
                      const PlanRequest& req) {
    const auto cost = count_flops(model, spec);
    const std::size_t k = spec.count(), n = devices.size();
    if (k > n) throw PlanError("switch " + spec.str() + " needs " + std::to_string(k) + " devices, " + std::to_string(n) + " given");
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return cost.submodel_macs[a] > cost.submodel_macs[b]; });
    std::stable_sort(devices.begin(), devices.end(), [](const DeviceProfile& a, const DeviceProfile& b) {
        if (a.capacity_mflops != b.capacity_mflops) return a.capacity_mflops > b.capacity_mflops;
        if (a.latency_ms != b.latency_ms) return a.latency_ms < b.latency_ms;
        if (a.bandwidth_mbps != b.bandwidth_mbps) return a.bandwidth_mbps > b.bandwidth_mbps;
        return a.id < b.id;
    });

    std::vector<std::vector<Assignment>> table(k);
    std::vector<double> thresholds;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t d = 0; d < n; ++d) {
            table[i].push_back(cost_on(devices[d], order[i], cost.submodel_mflops(order[i]), req));
            thresholds.push_back(table[i][d].compute_ms + table[i][d].comm_ms);
        }
    std::sort(thresholds.begin(), thresholds.end());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    auto total = [&](std::size_t i, std::size_t d) { return table[i][d].compute_ms + table[i][d].comm_ms; };

    constexpr std::size_t none = static_cast<std::size_t>(-1);
    std::vector<std::size_t> owner;
    std::vector<char> seen;
    std::function<bool(std::size_t, double)> augment = [&](std::size_t i, double limit) {
        for (std::size_t d = 0; d < n; ++d) {
            if (seen[d] || total(i, d) > limit) continue;
            seen[d] = 1;
            if (owner[d] == none || augment(owner[d], limit)) {
                owner[d] = i;
                return true;
            }
        }
        return false;
    };
    auto feasible = [&](double limit) {
        owner.assign(n, none);
        for (std::size_t i = 0; i < k; ++i) {
            seen.assign(n, 0);
            if (!augment(i, limit)) return false;
        }
        return true;
    };
    std::size_t lo = 0, hi = thresholds.size() - 1;
    while (lo < hi) {
        const std::size_t mid = (lo + hi) / 2;
        if (feasible(thresholds[mid])) hi = mid;
        else lo = mid + 1;
    }

    double greedy = 0;
    for (std::size_t i = 0; i < k; ++i) greedy = std::max(greedy, total(i, i));
    owner.assign(n, none);
    if (greedy <= thresholds[lo]) {
        for (std::size_t i = 0; i < k; ++i) owner[i] = i;
    } else {
        feasible(thresholds[lo]);
    }

    DeploymentPlan p;
    p.spec = spec;
    p.assignment.resize(k);
    for (std::size_t d = 0; d < n; ++d)
        if (owner[d] != none) p.assignment[order[owner[d]]] = table[owner[d]][d];
    finish_plan(p);
    return p;
}

// True when `a` should be preferred over `b`: lower latency, then larger
// total width, then the lexicographically smaller switch string.
inline bool better_plan(const DeploymentPlan& a, const DeploymentPlan& b) {
    const double tol = 1e-9 * std::max({1.0, a.latency_ms, b.latency_ms});
    if (std::abs(a.latency_ms - b.latency_ms) > tol) return a.latency_ms < b.latency_ms;
    const double wa = a.spec.total_width(), wb = b.spec.total_width();
    if (std::abs(wa - wb) > 1e-9) return wa > wb;
    return a.spec.str() < b.spec.str();
}

// Only deployable switches (total width <= 1.0) are candidates.
template <typename T>
DeploymentPlan plan(const ElasticModel<T>& model, const std::vector<SwitchSpec>& specs,
                    const std::vector<DeviceProfile>& devices, const PlanRequest& req) {
    std::vector<DeviceProfile> avail;
    for (const auto& d : devices) {
        d.validate();
        if (d.available) avail.push_back(d);
    }
    if (avail.empty()) throw PlanError("no available devices");
    std::optional<DeploymentPlan> best;
    for (const auto& s : specs) {
        if (s.total_width() > 1.0 + 1e-9 || s.count() > avail.size()) continue;
        auto p = assign(model, s, avail, req);
        if (!best || better_plan(p, *best)) best = std::move(p);
    }
    if (!best) {
        std::string list;
        for (const auto& s : specs) list += " " + s.str();
        throw PlanError("no deployable switch fits " + std::to_string(avail.size()) + " available device(s); candidates:" + list);
    }
    return *best;
}

template <typename T>
DeploymentPlan plan(const ElasticModel<T>& model, const std::vector<SwitchSpec>& specs,
                    const std::vector<DeviceProfile>& devices, std::size_t batch = 1) {
    return plan(model, specs, devices, plan_request(model, batch));
}

// Positions whose device or switch differ between two plans; these are the
// only workers that need a SET_SUBMODEL.
inline std::vector<std::size_t> changed_positions(const DeploymentPlan& from, const DeploymentPlan& to) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < to.assignment.size(); ++i) {
        const auto* prev = from.find_device(to.assignment[i].device_id);
        if (!prev || prev->position != i || from.spec != to.spec) out.push_back(i);
    }
    return out;
}

// Re-plans for a changed device set. Planning is deterministic, so an
// unchanged device set yields the same plan and no changed positions.
template <typename T>
DeploymentPlan reconfigure(const ElasticModel<T>& model, const DeploymentPlan& current, const std::vector<SwitchSpec>& specs,
                           const std::vector<DeviceProfile>& devices, std::size_t batch = 1) {
    DeploymentPlan next = plan(model, specs, devices, batch);
    return next == current ? current : next;
}

}  // namespace paradis
