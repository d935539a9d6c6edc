#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "paradis/error.hpp"

namespace paradis {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Half-open index interval along one axis.
struct Range {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
    bool intersects(const Range& o) const { return begin < o.end && o.begin < end; }
    friend bool operator==(const Range&, const Range&) = default;
};

// Dense row-major tensor. Features are [B, C, H, W]; conv kernels are
// [Cout, Cin/groups, kH, kW].
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (numel(shape_) != data_.size())
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             to_string(shape_));
    }

    const Shape& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t a, std::size_t b) { return data_[a * shape_[1] + b]; }
    const T& at(std::size_t a, std::size_t b) const { return data_[a * shape_[1] + b]; }
    T& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    const T& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape s) const {
        if (numel(s) != data_.size())
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
        return Tensor(std::move(s), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

// Copies the sub-block selected by one range per axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& src, const std::vector<Range>& ranges) {
    const Shape& s = src.shape();
    if (ranges.size() != s.size()) throw ShapeError("slice rank mismatch for shape " + to_string(s));
    Shape out_shape;
    for (std::size_t a = 0; a < s.size(); ++a) {
        if (ranges[a].end > s[a] || ranges[a].begin > ranges[a].end)
            throw ShapeError("slice range out of bounds on axis " + std::to_string(a) + " of " + to_string(s));
        out_shape.push_back(ranges[a].size());
    }
    Tensor<T> out(out_shape);
    if (out.empty()) return out;
    // Iterate over all outer indices; copy innermost contiguous runs.
    const std::size_t rank = s.size();
    std::vector<std::size_t> stride(rank, 1);
    for (std::size_t a = rank - 1; a-- > 0;) stride[a] = stride[a + 1] * s[a + 1];
    std::vector<std::size_t> idx(rank, 0);
    const std::size_t inner = ranges[rank - 1].size();
    std::size_t o = 0;
    while (true) {
        std::size_t off = ranges[rank - 1].begin;
        for (std::size_t a = 0; a + 1 < rank; ++a) off += (ranges[a].begin + idx[a]) * stride[a];
        std::copy_n(src.data() + off, inner, out.data() + o);
        o += inner;
        std::size_t a = rank - 1;
        while (a-- > 0) {
            if (++idx[a] < ranges[a].size()) break;
            idx[a] = 0;
        }
        if (a == static_cast<std::size_t>(-1)) break;
    }
    return out;
}

// dst[ranges] += src (shape of src equals the range extents).
template <typename T>
void scatter_add(Tensor<T>& dst, const std::vector<Range>& ranges, const Tensor<T>& src) {
    const Shape& s = dst.shape();
    const std::size_t rank = s.size();
    if (ranges.size() != rank || src.rank() != rank) throw ShapeError("scatter_add rank mismatch");
    if (src.empty()) return;
    std::vector<std::size_t> stride(rank, 1);
    for (std::size_t a = rank - 1; a-- > 0;) stride[a] = stride[a + 1] * s[a + 1];
    std::vector<std::size_t> idx(rank, 0);
    const std::size_t inner = ranges[rank - 1].size();
    std::size_t o = 0;
    while (true) {
        std::size_t off = ranges[rank - 1].begin;
        for (std::size_t a = 0; a + 1 < rank; ++a) off += (ranges[a].begin + idx[a]) * stride[a];
        T* d = dst.data() + off;
        const T* p = src.data() + o;
        for (std::size_t i = 0; i < inner; ++i) d[i] += p[i];
        o += inner;
        std::size_t a = rank - 1;
        while (a-- > 0) {
            if (++idx[a] < ranges[a].size()) break;
            idx[a] = 0;
        }
        if (a == static_cast<std::size_t>(-1)) break;
    }
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("compare " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
    return m;
}

// max |a-b| / max(1, |b|) elementwise.
template <typename T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("compare " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::abs(double(a[i]) - double(b[i]));
        m = std::max(m, d / std::max(1.0, std::abs(double(b[i]))));
    }
    return m;
}

}  // namespace paradis
