#pragma once

// Framed binary protocol between coordinator and workers.
//
// Frame:  "PDIS" | u8 version | u8 type | u32 payload length (LE) | payload
// Tensor: u8 rank | u32 dims[rank] | f32 data[]
//
// Payloads by type:
//   HELLO               u8 protocol version, u16 str peer description
//   LOAD_CHECKPOINT_REF u16 str path on the worker's file system (reply: u64 manifest hash)
//   SET_SUBMODEL        u32 position, u16 str canonical switch string (reply: same payload)
//   INFER_REQUEST       tensor [B, C, H, W]
//   PARTIAL_LOGITS      tensor [B, classes]
//   ERROR               u16 str code, u32 str message
//   PING                empty (reply: PING)

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "paradis/bytes.hpp"
#include "paradis/error.hpp"

namespace paradis {

inline constexpr char kWireMagic[4] = {'P', 'D', 'I', 'S'};
inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kFrameHeaderBytes = 10;
inline constexpr std::uint32_t kMaxPayloadBytes = 256u << 20;

enum class MsgType : std::uint8_t {
    hello = 1,
    load_checkpoint_ref = 2,
    set_submodel = 3,
    infer_request = 4,
    partial_logits = 5,
    error = 6,
    ping = 7,
};

inline std::string to_string(MsgType t) {
    switch (t) {
        case MsgType::hello: return "HELLO";
        case MsgType::load_checkpoint_ref: return "LOAD_CHECKPOINT_REF";
        case MsgType::set_submodel: return "SET_SUBMODEL";
        case MsgType::infer_request: return "INFER_REQUEST";
        case MsgType::partial_logits: return "PARTIAL_LOGITS";
        case MsgType::error: return "ERROR";
        case MsgType::ping: return "PING";
    }
    return "UNKNOWN(" + std::to_string(int(t)) + ")";
}

struct Frame {
    MsgType type = MsgType::ping;
    std::vector<std::uint8_t> payload;
};

inline std::vector<std::uint8_t> encode_frame(const Frame& f, std::uint8_t version = kWireVersion) {
    if (f.payload.size() > kMaxPayloadBytes) throw WireError("too-large", "payload of " + std::to_string(f.payload.size()) + " bytes");
    ByteWriter w;
    w.raw(kWireMagic, 4);
    w.u8(version);
    w.u8(static_cast<std::uint8_t>(f.type));
    w.u32(static_cast<std::uint32_t>(f.payload.size()));
    w.raw(f.payload.data(), f.payload.size());
    return w.take();
}

// Header check shared by stream and buffer decoding; returns the payload length.
inline std::uint32_t check_frame_header(const std::uint8_t* h, MsgType& type) {
    if (std::memcmp(h, kWireMagic, 4) != 0) throw WireError("bad-magic", "frame does not start with PDIS");
    if (h[4] != kWireVersion)
        throw WireError("bad-version", "peer speaks protocol version " + std::to_string(h[4]) + ", expected " +
                                           std::to_string(kWireVersion));
    const std::uint8_t t = h[5];
    if (t < 1 || t > 7) throw WireError("bad-type", "unknown message type " + std::to_string(t));
    type = static_cast<MsgType>(t);
    std::uint32_t len;
    std::memcpy(&len, h + 6, 4);
    if (len > kMaxPayloadBytes) throw WireError("too-large", "payload length " + std::to_string(len));
    return len;
}

inline Frame decode_frame(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < kFrameHeaderBytes) throw WireError("truncated", "frame shorter than its header");
    Frame f;
    const auto len = check_frame_header(bytes.data(), f.type);
    if (bytes.size() != kFrameHeaderBytes + len) throw WireError("truncated", "frame length does not match header");
    f.payload.assign(bytes.begin() + kFrameHeaderBytes, bytes.end());
    return f;
}

// ---- payload builders ----

namespace msg {

inline Frame hello(const std::string& who) {
    ByteWriter w;
    w.u8(kWireVersion);
    w.str16(who);
    return {MsgType::hello, w.take()};
}

inline Frame load_checkpoint_ref(const std::string& path) {
    ByteWriter w;
    w.str16(path);
    return {MsgType::load_checkpoint_ref, w.take()};
}

inline Frame set_submodel(const std::string& switch_id, std::size_t position) {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(position));
    w.str16(switch_id);
    return {MsgType::set_submodel, w.take()};
}

template <typename T>
Frame tensor(MsgType type, const Tensor<T>& t) {
    ByteWriter w;
    w.tensor(t);
    return {type, w.take()};
}

inline Frame error(const std::string& code, const std::string& message) {
    ByteWriter w;
    w.str16(code);
    w.str(message);
    return {MsgType::error, w.take()};
}

inline Frame ping() { return {MsgType::ping, {}}; }

struct SetSubmodel {
    std::size_t position = 0;
    std::string switch_id;
};

inline SetSubmodel parse_set_submodel(const Frame& f) {
    ByteReader r(f.payload, "SET_SUBMODEL payload");
    SetSubmodel s;
    s.position = r.u32();
    s.switch_id = r.str16();
    return s;
}

template <typename T>
Tensor<T> parse_tensor(const Frame& f) {
    ByteReader r(f.payload, to_string(f.type) + " payload");
    auto t = r.template tensor<T>();
    if (!r.done()) throw WireError("malformed", "trailing bytes after tensor");
    return t;
}

// Turns an ERROR frame into a thrown WireError.
[[noreturn]] inline void raise(const Frame& f, const std::string& peer) {
    ByteReader r(f.payload, "ERROR payload");
    std::string code = r.str16();
    std::string message = r.str();
    throw WireError(code, peer + ": " + message);
}

}  // namespace msg

// Bytes and frames per message type, in each direction.
class WireStats {
public:
    void record_sent(MsgType t, std::size_t bytes) {
        std::lock_guard lock(mu_);
        sent_[t] += bytes;
        ++frames_sent_[t];
    }
    void record_received(MsgType t, std::size_t bytes) {
        std::lock_guard lock(mu_);
        received_[t] += bytes;
        ++frames_received_[t];
    }
    std::map<MsgType, std::uint64_t> sent() const {
        std::lock_guard lock(mu_);
        return sent_;
    }
    std::map<MsgType, std::uint64_t> received() const {
        std::lock_guard lock(mu_);
        return received_;
    }
    std::uint64_t frames_sent(MsgType t) const {
        std::lock_guard lock(mu_);
        auto it = frames_sent_.find(t);
        return it == frames_sent_.end() ? 0 : it->second;
    }
    std::uint64_t total() const {
        std::lock_guard lock(mu_);
        std::uint64_t n = 0;
        for (const auto& [t, b] : sent_) n += b;
        for (const auto& [t, b] : received_) n += b;
        return n;
    }
    void reset() {
        std::lock_guard lock(mu_);
        sent_.clear();
        received_.clear();
        frames_sent_.clear();
        frames_received_.clear();
    }

private:
    mutable std::mutex mu_;
    std::map<MsgType, std::uint64_t> sent_, received_, frames_sent_, frames_received_;
};

using Clock = std::chrono::steady_clock;
using Deadline = std::optional<Clock::time_point>;

inline Deadline deadline_after(std::chrono::milliseconds ms) { return Clock::now() + ms; }

// "host:port" (IPv4 or a resolvable name).
inline std::pair<std::string, std::uint16_t> split_address(const std::string& addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw ConfigError({"address \"" + addr + "\" must be host:port"});
    const std::string host = addr.substr(0, colon), port = addr.substr(colon + 1);
    unsigned long p = 0;
    try {
        std::size_t used = 0;
        p = std::stoul(port, &used);
        if (used != port.size() || p > 65535) throw std::out_of_range(port);
    } catch (const std::exception&) {
        throw ConfigError({"address \"" + addr + "\" has an invalid port"});
    }
    return {host.empty() ? "127.0.0.1" : host, static_cast<std::uint16_t>(p)};
}

class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;
    Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Socket& operator=(Socket&& o) noexcept {
        if (this != &o) {
            close();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    ~Socket() { close(); }

    static Socket connect(const std::string& addr, std::chrono::milliseconds timeout = std::chrono::seconds(5)) {
        const auto [host, port] = split_address(addr);
        addrinfo hints{};
        hints.ai_family = AF_INET;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo* res = nullptr;
        if (int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res); rc != 0)
            throw WireError("resolve", addr + ": " + ::gai_strerror(rc));
        Socket s(::socket(AF_INET, SOCK_STREAM, 0));
        if (!s.valid()) {
            ::freeaddrinfo(res);
            throw WireError("socket", std::strerror(errno));
        }
        const int flags = ::fcntl(s.fd_, F_GETFL);
        ::fcntl(s.fd_, F_SETFL, flags | O_NONBLOCK);
        int rc = ::connect(s.fd_, res->ai_addr, res->ai_addrlen);
        ::freeaddrinfo(res);
        if (rc != 0 && errno != EINPROGRESS) throw WireError("connect", addr + ": " + std::strerror(errno));
        if (rc != 0) {
            pollfd p{s.fd_, POLLOUT, 0};
            rc = ::poll(&p, 1, int(timeout.count()));
            if (rc == 0) throw WireError("timeout", addr + ": connect timed out");
            int err = 0;
            socklen_t len = sizeof err;
            ::getsockopt(s.fd_, SOL_SOCKET, SO_ERROR, &err, &len);
            if (rc < 0 || err != 0) throw WireError("connect", addr + ": " + std::strerror(err ? err : errno));
        }
        ::fcntl(s.fd_, F_SETFL, flags);
        s.set_nodelay();
        return s;
    }

    bool valid() const { return fd_ >= 0; }
    int fd() const { return fd_; }
    void close() {
        if (fd_ >= 0) ::close(std::exchange(fd_, -1));
    }
    void shutdown() {
        if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
    }

    void send_all(const std::uint8_t* p, std::size_t n) {
        while (n > 0) {
            const ssize_t k = ::send(fd_, p, n, MSG_NOSIGNAL);
            if (k < 0) {
                if (errno == EINTR) continue;
                throw WireError("send", std::strerror(errno));
            }
            p += k;
            n -= std::size_t(k);
        }
    }

    // Reads exactly n bytes. Throws WireError "timeout" past the deadline,
    // "cancelled" when *cancel turns true and "closed" on EOF.
    void recv_exact(std::uint8_t* p, std::size_t n, Deadline deadline = std::nullopt,
                    const std::atomic<bool>* cancel = nullptr) {
        while (n > 0) {
            int wait_ms = 100;
            if (deadline) {
                const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(*deadline - Clock::now()).count();
                if (left <= 0) throw WireError("timeout", "no reply before the deadline");
                wait_ms = int(std::min<long long>(left, 100));
            }
            if (cancel && cancel->load()) throw WireError("cancelled", "receive cancelled");
            pollfd pfd{fd_, POLLIN, 0};
            const int rc = ::poll(&pfd, 1, wait_ms);
            if (rc < 0) {
                if (errno == EINTR) continue;
                throw WireError("recv", std::strerror(errno));
            }
            if (rc == 0) continue;
            const ssize_t k = ::recv(fd_, p, n, 0);
            if (k == 0) throw WireError("closed", "peer closed the connection");
            if (k < 0) {
                if (errno == EINTR || errno == EAGAIN) continue;
                throw WireError("recv", std::strerror(errno));
            }
            p += k;
            n -= std::size_t(k);
        }
    }

    std::size_t send_frame(const Frame& f, WireStats* stats = nullptr) {
        const auto bytes = encode_frame(f);
        send_all(bytes.data(), bytes.size());
        if (stats) stats->record_sent(f.type, bytes.size());
        return bytes.size();
    }

    Frame recv_frame(Deadline deadline = std::nullopt, const std::atomic<bool>* cancel = nullptr, WireStats* stats = nullptr) {
        std::uint8_t h[kFrameHeaderBytes];
        recv_exact(h, sizeof h, deadline, cancel);
        Frame f;
        const auto len = check_frame_header(h, f.type);
        f.payload.resize(len);
        if (len) recv_exact(f.payload.data(), len, deadline, cancel);
        if (stats) stats->record_received(f.type, kFrameHeaderBytes + len);
        return f;
    }

private:
    void set_nodelay() {
        int one = 1;
        ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    }
    int fd_ = -1;
};

class Listener {
public:
    // Port 0 picks a free ephemeral port; see port().
    static Listener bind(const std::string& addr) {
        const auto [host, port] = split_address(addr);
        Listener l;
        l.sock_ = Socket(::socket(AF_INET, SOCK_STREAM, 0));
        if (!l.sock_.valid()) throw WireError("socket", std::strerror(errno));
        int one = 1;
        ::setsockopt(l.sock_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_port = htons(port);
        if (::inet_pton(AF_INET, host == "localhost" ? "127.0.0.1" : host.c_str(), &sa.sin_addr) != 1)
            throw WireError("bind", "listen address must be a dotted IPv4 address: " + host);
        if (::bind(l.sock_.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0)
            throw WireError("bind", addr + ": " + std::strerror(errno));
        if (::listen(l.sock_.fd(), 64) != 0) throw WireError("listen", std::strerror(errno));
        socklen_t len = sizeof sa;
        ::getsockname(l.sock_.fd(), reinterpret_cast<sockaddr*>(&sa), &len);
        l.port_ = ntohs(sa.sin_port);
        l.host_ = host;
        return l;
    }

    std::uint16_t port() const { return port_; }
    std::string address() const { return host_ + ":" + std::to_string(port_); }
    bool valid() const { return sock_.valid(); }
    void close() { sock_.close(); }

    // Waits for a connection; returns an invalid socket if cancelled.
    Socket accept(const std::atomic<bool>* cancel = nullptr) {
        while (!(cancel && cancel->load())) {
            pollfd pfd{sock_.fd(), POLLIN, 0};
            const int rc = ::poll(&pfd, 1, 100);
            if (rc < 0 && errno != EINTR) throw WireError("accept", std::strerror(errno));
            if (rc <= 0) continue;
            const int fd = ::accept(sock_.fd(), nullptr, nullptr);
            if (fd < 0) {
                if (errno == EINTR || errno == ECONNABORTED) continue;
                throw WireError("accept", std::strerror(errno));
            }
            int one = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            return Socket(fd);
        }
        return Socket();
    }

private:
    Socket sock_;
    std::uint16_t port_ = 0;
    std::string host_;
};

}  // namespace paradis
