#pragma once

// Little-endian encoding helpers shared by the checkpoint and wire formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "paradis/error.hpp"
#include "paradis/tensor.hpp"

namespace paradis {

static_assert(std::endian::native == std::endian::little, "byte encoders assume a little-endian host");

class ByteWriter {
public:
    template <typename U>
    void put(U v) {
        static_assert(std::is_trivially_copyable_v<U>);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(U));
    }
    void u8(std::uint8_t v) { put(v); }
    void u16(std::uint16_t v) { put(v); }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void f64(double v) { put(v); }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void str16(std::string_view s) {
        if (s.size() > 0xffff) throw FormatError("string too long for a u16 length prefix");
        u16(static_cast<std::uint16_t>(s.size()));
        raw(s.data(), s.size());
    }
    // u8 rank, u32 dims[rank], f32 data[]
    template <typename T>
    void tensor(const Tensor<T>& t) {
        if (t.rank() > 255) throw FormatError("tensor rank exceeds 255");
        u8(static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.shape()) {
            if (d > 0xffffffffULL) throw FormatError("tensor dimension exceeds u32");
            u32(static_cast<std::uint32_t>(d));
        }
        for (std::size_t i = 0; i < t.size(); ++i) put(static_cast<float>(t[i]));
    }
    template <typename T>
    void floats(const std::vector<T>& v) {
        u32(static_cast<std::uint32_t>(v.size()));
        for (auto x : v) put(static_cast<float>(x));
    }

    const std::vector<std::uint8_t>& bytes() const { return buf_; }
    std::vector<std::uint8_t> take() { return std::move(buf_); }
    std::size_t size() const { return buf_.size(); }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(const std::uint8_t* p, std::size_t n, std::string what = "buffer") : p_(p), n_(n), what_(std::move(what)) {}
    explicit ByteReader(const std::vector<std::uint8_t>& v, std::string what = "buffer") : ByteReader(v.data(), v.size(), std::move(what)) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        U v;
        std::memcpy(&v, p_ + off_, sizeof(U));
        off_ += sizeof(U);
        return v;
    }
    std::uint8_t u8() { return get<std::uint8_t>(); }
    std::uint16_t u16() { return get<std::uint16_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    double f64() { return get<double>(); }
    std::string raw(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p_ + off_), n);
        off_ += n;
        return s;
    }
    std::string str() { return raw(u32()); }
    std::string str16() { return raw(u16()); }

    template <typename T>
    Tensor<T> tensor() {
        const std::size_t rank = u8();
        Shape s(rank);
        for (auto& d : s) d = u32();
        const std::size_t n = numel(s);
        need(n * sizeof(float));
        Tensor<T> t(s);
        for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<T>(get<float>());
        return t;
    }
    template <typename T>
    std::vector<T> floats() {
        const std::size_t n = u32();
        need(n * sizeof(float));
        std::vector<T> v(n);
        for (auto& x : v) x = static_cast<T>(get<float>());
        return v;
    }

    std::size_t offset() const { return off_; }
    std::size_t remaining() const { return n_ - off_; }
    bool done() const { return off_ == n_; }

private:
    void need(std::size_t k) const {
        if (k > n_ - off_)
            throw FormatError("truncated " + what_ + ": need " + std::to_string(k) + " bytes at offset " +
                              std::to_string(off_) + ", have " + std::to_string(n_ - off_));
    }
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t off_ = 0;
    std::string what_;
};

}  // namespace paradis
