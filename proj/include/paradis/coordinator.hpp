#pragma once

// Drives a set of workers: configures each with one sub-model of the planned
// switch, broadcasts inputs, and fuses the partial logits. Fusion is
// all-or-nothing: any timeout or ERROR aborts the whole inference.

#include <chrono>
#include <future>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "paradis/model.hpp"
#include "paradis/planner.hpp"
#include "paradis/wire.hpp"

namespace paradis {

struct InferTiming {
    std::vector<double> round_trip_ms;  // by sub-model position
    double critical_path_ms = 0;        // slowest round trip
    double total_ms = 0;                // broadcast to fused result
};

struct InferResult {
    Tensor<float> logits;
    InferTiming timing;
};

class Coordinator {
public:
    Coordinator(std::vector<DeviceProfile> devices, Tensor<float> head_bias,
                std::chrono::milliseconds timeout = std::chrono::seconds(5))
        : head_bias_(std::move(head_bias)), timeout_(timeout) {
        set_devices(std::move(devices));
    }

    // Replaces the device list. Connections to devices that remain are kept.
    void set_devices(std::vector<DeviceProfile> devices) {
        std::map<std::string, Conn> next;
        for (auto& d : devices) {
            d.validate();
            auto it = conns_.find(d.id);
            if (it != conns_.end() && it->second.device.address == d.address) {
                it->second.device = d;
                next.emplace(d.id, std::move(it->second));
            } else {
                next.emplace(d.id, Conn{d, Socket(), std::nullopt});
            }
        }
        conns_ = std::move(next);
    }

    std::vector<DeviceProfile> devices() const {
        std::vector<DeviceProfile> out;
        for (const auto& [id, c] : conns_) out.push_back(c.device);
        return out;
    }

    // Connects and greets every available device that is not connected yet.
    void connect() {
        for (auto& [id, c] : conns_) {
            if (!c.device.available || c.sock.valid()) continue;
            try {
                c.sock = Socket::connect(c.device.address, timeout_);
            } catch (const WireError& e) {
                throw WireError(e.code(), "device " + id + " (" + c.device.address + "): " + e.what());
            }
            c.active.reset();
            call(c, msg::hello("coordinator"), MsgType::hello);
        }
    }

    // Points every connected worker at a checkpoint file on its own disk.
    void load_checkpoint(const std::string& path) {
        for (auto& [id, c] : conns_) {
            if (!c.sock.valid()) continue;
            call(c, msg::load_checkpoint_ref(path), MsgType::load_checkpoint_ref);
            c.active.reset();
        }
    }

    // Sends SET_SUBMODEL to every device whose assignment differs from what
    // it is known to run. Returns the number of messages sent.
    std::size_t apply(const DeploymentPlan& plan) {
        std::size_t sent = 0;
        for (const auto& a : plan.assignment) {
            Conn& c = conn(a.device_id);
            const auto want = std::make_pair(plan.spec.str(), a.position);
            if (c.active == want) continue;
            call(c, msg::set_submodel(want.first, want.second), MsgType::set_submodel);
            c.active = want;
            ++sent;
        }
        plan_ = plan;
        return sent;
    }

    // Trusts that workers were configured for `plan` by an earlier session.
    void adopt(const DeploymentPlan& plan) {
        for (const auto& a : plan.assignment) conn(a.device_id).active = std::make_pair(plan.spec.str(), a.position);
        plan_ = plan;
    }

    const std::optional<DeploymentPlan>& current_plan() const { return plan_; }

    InferResult infer(const Tensor<float>& x) {
        if (!plan_) throw PlanError("infer before a plan was applied");
        const auto t0 = Clock::now();
        const std::size_t k = plan_->assignment.size();
        const auto request = encode_frame(msg::tensor(MsgType::infer_request, x));
        const Deadline deadline = Clock::now() + timeout_;

        struct Reply {
            Tensor<float> partial;
            double ms = 0;
        };
        std::vector<std::future<Reply>> jobs;
        for (std::size_t i = 0; i < k; ++i) {
            Conn& c = conn(plan_->assignment[i].device_id);
            if (!c.sock.valid()) throw WireError("disconnected", "device " + c.device.id + " is not connected");
            jobs.push_back(std::async(std::launch::async, [&, &c = c] {
                const auto s0 = Clock::now();
                c.sock.send_all(request.data(), request.size());
                wire_.record_sent(MsgType::infer_request, request.size());
                Frame f = c.sock.recv_frame(deadline, nullptr, &wire_);
                if (f.type == MsgType::error) msg::raise(f, "device " + c.device.id);
                if (f.type != MsgType::partial_logits)
                    throw WireError("unexpected", "device " + c.device.id + " replied " + to_string(f.type));
                return Reply{msg::parse_tensor<float>(f), ms_since(s0)};
            }));
        }

        std::vector<Tensor<float>> partials(k);
        InferResult out;
        out.timing.round_trip_ms.resize(k);
        std::optional<WireError> failure;
        for (std::size_t i = 0; i < k; ++i) {
            Conn& c = conn(plan_->assignment[i].device_id);
            try {
                auto r = jobs[i].get();
                partials[i] = std::move(r.partial);
                out.timing.round_trip_ms[i] = r.ms;
            } catch (const WireError& e) {
                const std::string what = std::string(e.what()).find("device ") == std::string::npos
                                             ? "device " + c.device.id + ": " + e.what()
                                             : std::string(e.what());
                if (!failure) failure = WireError(e.code(), what);
                if (e.code() != "missing-stats" && e.code() != "no-submodel" && e.code() != "bad-input") {
                    c.sock.close();
                    c.active.reset();
                }
            }
        }
        if (failure) throw *failure;
        for (double ms : out.timing.round_trip_ms) out.timing.critical_path_ms = std::max(out.timing.critical_path_ms, ms);
        out.logits = fuse(partials, head_bias_);
        out.timing.total_ms = ms_since(t0);
        return out;
    }

    void ping_all() {
        for (auto& [id, c] : conns_)
            if (c.sock.valid()) call(c, msg::ping(), MsgType::ping);
    }

    WireStats& wire() { return wire_; }
    std::chrono::milliseconds timeout() const { return timeout_; }

private:
    struct Conn {
        DeviceProfile device;
        Socket sock;
        std::optional<std::pair<std::string, std::size_t>> active;
    };

    Conn& conn(const std::string& id) {
        auto it = conns_.find(id);
        if (it == conns_.end()) throw PlanError("plan names unknown device " + id);
        return it->second;
    }

    Frame call(Conn& c, const Frame& req, MsgType expect) {
        if (!c.sock.valid()) throw WireError("disconnected", "device " + c.device.id + " is not connected");
        try {
            c.sock.send_frame(req, &wire_);
            Frame f = c.sock.recv_frame(Clock::now() + timeout_, nullptr, &wire_);
            if (f.type == MsgType::error) msg::raise(f, "device " + c.device.id);
            if (f.type != expect)
                throw WireError("unexpected", "device " + c.device.id + " replied " + to_string(f.type) + " to " +
                                                  to_string(req.type));
            return f;
        } catch (const WireError& e) {
            if (e.code() == "timeout" || e.code() == "closed" || e.code() == "recv" || e.code() == "send") {
                c.sock.close();
                c.active.reset();
                throw WireError(e.code(), "device " + c.device.id + ": " + e.what());
            }
            throw;
        }
    }

    static double ms_since(Clock::time_point t) {
        return std::chrono::duration<double, std::milli>(Clock::now() - t).count();
    }

    std::map<std::string, Conn> conns_;
    Tensor<float> head_bias_;
    std::chrono::milliseconds timeout_;
    std::optional<DeploymentPlan> plan_;
    WireStats wire_;
};

}  // namespace paradis
