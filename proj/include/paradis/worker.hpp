#pragma once

// A worker holds a full checkpoint and runs one sub-model of one switch at a
// time. SET_SUBMODEL only swaps a small slice descriptor; weights stay put.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "paradis/checkpoint.hpp"
#include "paradis/model.hpp"
#include "paradis/wire.hpp"

namespace paradis {

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

inline std::optional<LogLevel> parse_log_level(const std::string& s) {
    if (s == "error") return LogLevel::error;
    if (s == "warn") return LogLevel::warn;
    if (s == "info") return LogLevel::info;
    if (s == "debug") return LogLevel::debug;
    return std::nullopt;
}

using LogSink = std::function<void(LogLevel, const std::string&)>;

inline LogSink stderr_log(LogLevel max_level) {
    return [max_level](LogLevel l, const std::string& m) {
        static const char* names[] = {"error", "warn", "info", "debug"};
        if (l <= max_level) std::fprintf(stderr, "[%s] %s\n", names[int(l)], m.c_str());
    };
}

struct WorkerOptions {
    std::string name = "worker";
    std::chrono::milliseconds reply_delay{0};  // added before every PARTIAL_LOGITS reply
    LogSink log;
};

class WorkerServer {
public:
    using Model = ElasticModel<float>;

    WorkerServer(Model model, WorkerOptions opt = {})
        : model_(std::make_shared<const Model>(std::move(model))), opt_(std::move(opt)) {}

    // Serves until stop(); each connection gets its own thread.
    void serve(Listener& listener) {
        log(LogLevel::info, opt_.name + " listening on " + listener.address());
        std::vector<std::thread> conns;
        while (!stop_.load()) {
            Socket s = listener.accept(&stop_);
            if (!s.valid()) break;
            conns.emplace_back([this, s = std::move(s)]() mutable { handle(std::move(s)); });
        }
        for (auto& t : conns) t.join();
    }

    void stop() { stop_.store(true); }

    std::optional<std::pair<std::string, std::size_t>> active() const {
        std::lock_guard lock(mu_);
        if (!active_) return std::nullopt;
        return std::make_pair(active_->switch_id, active_->position);
    }

private:
    void log(LogLevel l, const std::string& m) const {
        if (opt_.log) opt_.log(l, m);
    }

    void handle(Socket s) {
        while (!stop_.load()) {
            Frame req;
            try {
                req = s.recv_frame(std::nullopt, &stop_);
            } catch (const WireError& e) {
                if (e.code() == "bad-version") {
                    try_send(s, msg::error("bad-version", e.what()));
                } else if (e.code() != "closed" && e.code() != "cancelled") {
                    log(LogLevel::warn, opt_.name + ": closing connection after malformed frame: " + e.what());
                }
                return;
            }
            std::optional<Frame> reply;
            try {
                reply = dispatch(req);
            } catch (const MissingStatsError& e) {
                reply = msg::error("missing-stats", e.what());
            } catch (const WireError& e) {
                reply = msg::error(e.code(), e.what());
            } catch (const ShapeError& e) {
                reply = msg::error("bad-input", e.what());
            } catch (const SwitchError& e) {
                reply = msg::error("bad-switch", e.what());
            } catch (const FormatError& e) {
                reply = msg::error("bad-checkpoint", e.what());
            } catch (const std::exception& e) {
                reply = msg::error("internal", e.what());
            }
            if (!reply) return;
            if (!try_send(s, *reply)) return;
            if (req.type == MsgType::hello && reply->type == MsgType::error) return;
        }
    }

    bool try_send(Socket& s, const Frame& f) {
        try {
            s.send_frame(f);
            return true;
        } catch (const WireError& e) {
            log(LogLevel::warn, opt_.name + ": send failed: " + e.what());
            return false;
        }
    }

    std::optional<Frame> dispatch(const Frame& req) {
        switch (req.type) {
            case MsgType::hello: {
                ByteReader r(req.payload, "HELLO payload");
                const auto v = r.u8();
                const std::string peer = r.str16();
                if (v != kWireVersion)
                    return msg::error("bad-version", "worker speaks protocol version " + std::to_string(kWireVersion) +
                                                         ", peer sent " + std::to_string(v));
                log(LogLevel::debug, opt_.name + ": hello from " + peer);
                return msg::hello(describe());
            }
            case MsgType::load_checkpoint_ref: {
                ByteReader r(req.payload, "LOAD_CHECKPOINT_REF payload");
                const std::string path = r.str16();
                std::optional<Checkpoint<float>> loaded;
                try {
                    loaded.emplace(load_checkpoint<float>(path));
                } catch (const Error& e) {
                    throw WireError("bad-checkpoint", e.what());
                }
                auto& ck = *loaded;
                const auto hash = ck.model.manifest().hash();
                {
                    std::lock_guard lock(mu_);
                    model_ = std::make_shared<const Model>(std::move(ck.model));
                    active_.reset();
                }
                log(LogLevel::info, opt_.name + ": loaded " + path);
                ByteWriter w;
                w.u64(hash);
                return Frame{MsgType::load_checkpoint_ref, w.take()};
            }
            case MsgType::set_submodel: {
                const auto sm = msg::parse_set_submodel(req);
                const auto spec = SwitchSpec::parse(sm.switch_id);
                std::lock_guard lock(mu_);
                const auto slices = model_->resolve(spec);
                if (sm.position >= slices.size())
                    throw WireError("bad-position", "switch " + spec.str() + " has " + std::to_string(slices.size()) +
                                                        " sub-models, position " + std::to_string(sm.position) + " requested");
                active_ = slices[sm.position];
                log(LogLevel::info, opt_.name + ": active " + spec.str() + " position " + std::to_string(sm.position));
                return req;
            }
            case MsgType::infer_request: {
                std::shared_ptr<const Model> model;
                std::optional<SubModelSlice> slice;
                {
                    std::lock_guard lock(mu_);
                    model = model_;
                    slice = active_;
                }
                if (!slice) throw WireError("no-submodel", "INFER_REQUEST before SET_SUBMODEL");
                const auto x = msg::parse_tensor<float>(req);
                Graph<float> g(false);
                ForwardOptions<float> fo;
                fo.mode = NormMode::stored;
                auto out = model->forward_submodel(g, *slice, g.constant(x), fo);
                if (opt_.reply_delay.count() > 0) std::this_thread::sleep_for(opt_.reply_delay);
                return msg::tensor(MsgType::partial_logits, out.partial_logits.value());
            }
            case MsgType::ping: return msg::ping();
            default: throw WireError("unexpected", "worker does not accept " + to_string(req.type));
        }
    }

    std::string describe() const {
        std::lock_guard lock(mu_);
        std::ostringstream os;
        os << opt_.name << " manifest=" << std::hex << model_->manifest().hash();
        return os.str();
    }

    std::shared_ptr<const Model> model_;
    std::optional<SubModelSlice> active_;
    mutable std::mutex mu_;
    WorkerOptions opt_;
    std::atomic<bool> stop_{false};
};

}  // namespace paradis
