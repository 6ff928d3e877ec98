#pragma once

#include "densescan/error.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace densescan {

// ---------------------------------------------------------------------------
// Allocation accounting. Every tensor buffer goes through TrackingAllocator so
// that the live/peak byte counters reflect the true high-water mark of tensor
// storage; plan memory estimates are checked against it.
// ---------------------------------------------------------------------------
namespace memory {

namespace detail {
inline std::atomic<std::int64_t> g_live{0};
inline std::atomic<std::int64_t> g_peak{0};

inline void on_allocate(std::int64_t bytes) {
    std::int64_t now = g_live.fetch_add(bytes) + bytes;
    std::int64_t peak = g_peak.load();
    while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
    }
}
inline void on_release(std::int64_t bytes) { g_live.fetch_sub(bytes); }
}  // namespace detail

inline std::int64_t live_bytes() { return detail::g_live.load(); }
inline std::int64_t peak_bytes() { return detail::g_peak.load(); }
inline void reset_peak() { detail::g_peak.store(detail::g_live.load()); }

}  // namespace memory

template <typename T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <typename U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        T* p = std::allocator<T>{}.allocate(n);
        memory::detail::on_allocate(static_cast<std::int64_t>(n * sizeof(T)));
        return p;
    }
    void deallocate(T* p, std::size_t n) noexcept {
        memory::detail::on_release(static_cast<std::int64_t>(n * sizeof(T)));
        std::allocator<T>{}.deallocate(p, n);
    }

    template <typename U>
    bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<float, TrackingAllocator<float>>;

// ---------------------------------------------------------------------------
// Shape
// ---------------------------------------------------------------------------

/// Ordered axis extents; every extent is at least 1.
class Shape {
public:
    Shape() = default;
    Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { check(); }
    explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { check(); }

    [[nodiscard]] std::size_t rank() const noexcept { return dims_.size(); }
    [[nodiscard]] std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
    [[nodiscard]] const std::vector<std::size_t>& dims() const noexcept { return dims_; }

    [[nodiscard]] std::size_t element_count() const noexcept {
        return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>{});
    }

    /// Row-major strides: the last axis is contiguous.
    [[nodiscard]] std::vector<std::size_t> strides() const {
        std::vector<std::size_t> s(dims_.size(), 1);
        for (std::size_t j = dims_.size(); j-- > 1;) s[j - 1] = s[j] * dims_[j];
        return s;
    }

    [[nodiscard]] std::string str() const {
        std::ostringstream out;
        out << '(';
        for (std::size_t i = 0; i < dims_.size(); ++i) out << (i ? "," : "") << dims_[i];
        out << ')';
        return out.str();
    }

    bool operator==(const Shape&) const = default;

private:
    void check() const {
        for (std::size_t d : dims_)
            if (d == 0) throw Error(ErrorCode::InvalidShape, "zero extent in shape " + str());
    }

    std::vector<std::size_t> dims_;
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Immutable dense float tensor in row-major order. Copies share storage;
/// reshape is a pure metadata change over the same buffer.
class Tensor {
public:
    Tensor() : Tensor(Shape{1}) {}

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), data_(std::make_shared<Buffer>(shape_.element_count(), 0.0f)) {}

    Tensor(Shape shape, Buffer data) : shape_(std::move(shape)) {
        if (data.size() != shape_.element_count())
            throw Error(ErrorCode::ElementCountMismatch,
                        std::to_string(data.size()) + " values for shape " + shape_.str());
        data_ = std::make_shared<Buffer>(std::move(data));
    }

    Tensor(Shape shape, std::span<const float> values)
        : Tensor(std::move(shape), Buffer(values.begin(), values.end())) {}

    Tensor(Shape shape, std::initializer_list<float> values)
        : Tensor(std::move(shape), Buffer(values.begin(), values.end())) {}

    static Tensor filled(Shape shape, float value) {
        std::size_t n = shape.element_count();
        return Tensor(std::move(shape), Buffer(n, value));
    }

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.rank(); }
    [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_[axis]; }
    [[nodiscard]] std::size_t size() const noexcept { return data_->size(); }
    [[nodiscard]] std::size_t bytes() const noexcept { return data_->size() * sizeof(float); }
    [[nodiscard]] std::span<const float> values() const noexcept { return {data_->data(), data_->size()}; }
    [[nodiscard]] const float* data() const noexcept { return data_->data(); }

    [[nodiscard]] std::size_t offset(std::span<const std::size_t> index) const {
        if (index.size() != rank())
            throw Error(ErrorCode::AxisOutOfRange, "index rank differs from tensor rank");
        auto strides = shape_.strides();
        std::size_t off = 0;
        for (std::size_t j = 0; j < index.size(); ++j) {
            if (index[j] >= shape_[j])
                throw Error(ErrorCode::RangeOutOfBounds, "index out of range on axis " + std::to_string(j));
            off += index[j] * strides[j];
        }
        return off;
    }

    [[nodiscard]] float at(std::span<const std::size_t> index) const { return (*data_)[offset(index)]; }
    [[nodiscard]] float at(std::initializer_list<std::size_t> index) const {
        return at(std::span<const std::size_t>(index.begin(), index.size()));
    }

    [[nodiscard]] bool shares_storage_with(const Tensor& other) const noexcept { return data_ == other.data_; }

private:
    friend Tensor reshape(const Tensor&, Shape);

    Shape shape_;
    std::shared_ptr<const Buffer> data_;
};

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

// ---------------------------------------------------------------------------
// Layout operations
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& t, Shape shape) {
    if (shape.element_count() != t.size())
        throw Error(ErrorCode::ElementCountMismatch,
                    "cannot reshape " + t.shape().str() + " to " + shape.str());
    Tensor out = t;
    out.shape_ = std::move(shape);
    return out;
}

namespace detail {

inline void check_axis(const Tensor& t, std::size_t axis) {
    if (axis >= t.rank())
        throw Error(ErrorCode::AxisOutOfRange,
                    "axis " + std::to_string(axis) + " for tensor of rank " + std::to_string(t.rank()));
}

// Extent products before and after an axis: the tensor viewed as (outer, dim, inner).
inline std::size_t outer_of(const Shape& s, std::size_t axis) {
    std::size_t n = 1;
    for (std::size_t j = 0; j < axis; ++j) n *= s[j];
    return n;
}
inline std::size_t inner_of(const Shape& s, std::size_t axis) {
    std::size_t n = 1;
    for (std::size_t j = axis + 1; j < s.rank(); ++j) n *= s[j];
    return n;
}

inline Shape with_extent(const Shape& s, std::size_t axis, std::size_t extent) {
    auto dims = s.dims();
    dims[axis] = extent;
    return Shape(std::move(dims));
}

}  // namespace detail

/// Swaps two axes and materializes the result in row-major order.
inline Tensor transpose(const Tensor& t, std::size_t axis_a, std::size_t axis_b) {
    detail::check_axis(t, axis_a);
    detail::check_axis(t, axis_b);
    if (axis_a == axis_b) throw Error(ErrorCode::AxisOutOfRange, "transpose needs two distinct axes");
    std::size_t a = std::min(axis_a, axis_b);
    std::size_t b = std::max(axis_a, axis_b);

    const Shape& s = t.shape();
    // View as (outer, da, middle, db, inner) -> (outer, db, middle, da, inner).
    std::size_t outer = detail::outer_of(s, a);
    std::size_t da = s[a];
    std::size_t middle = 1;
    for (std::size_t j = a + 1; j < b; ++j) middle *= s[j];
    std::size_t db = s[b];
    std::size_t inner = detail::inner_of(s, b);

    auto dims = s.dims();
    std::swap(dims[a], dims[b]);
    Shape out_shape(std::move(dims));

    Buffer out(t.size());
    const float* src = t.data();
    float* dst = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < db; ++j)
            for (std::size_t m = 0; m < middle; ++m)
                for (std::size_t i = 0; i < da; ++i) {
                    const float* from = src + ((((o * da + i) * middle + m) * db + j) * inner);
                    float* to = dst + ((((o * db + j) * middle + m) * da + i) * inner);
                    std::copy_n(from, inner, to);
                }
    return Tensor(std::move(out_shape), std::move(out));
}

inline Tensor pad(const Tensor& t, std::size_t axis, std::size_t before, std::size_t after, float value) {
    detail::check_axis(t, axis);
    const Shape& s = t.shape();
    std::size_t outer = detail::outer_of(s, axis);
    std::size_t inner = detail::inner_of(s, axis);
    std::size_t extent = s[axis];
    std::size_t grown = extent + before + after;

    Buffer out(outer * grown * inner, value);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(t.data() + o * extent * inner, extent * inner, out.data() + (o * grown + before) * inner);
    return Tensor(detail::with_extent(s, axis, grown), std::move(out));
}

inline Tensor crop(const Tensor& t, std::size_t axis, std::size_t start, std::size_t length) {
    detail::check_axis(t, axis);
    const Shape& s = t.shape();
    if (length == 0 || start + length > s[axis])
        throw Error(ErrorCode::RangeOutOfBounds, "crop [" + std::to_string(start) + ", +" + std::to_string(length) +
                                                     ") exceeds extent " + std::to_string(s[axis]));
    std::size_t outer = detail::outer_of(s, axis);
    std::size_t inner = detail::inner_of(s, axis);
    std::size_t extent = s[axis];

    Buffer out(outer * length * inner);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(t.data() + (o * extent + start) * inner, length * inner, out.data() + o * length * inner);
    return Tensor(detail::with_extent(s, axis, length), std::move(out));
}

inline Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw Error(ErrorCode::InvalidArgument, "concat of an empty list");
    const Shape& first = parts.front().shape();
    detail::check_axis(parts.front(), axis);
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != first.rank())
            throw Error(ErrorCode::ShapeMismatch, "concat rank mismatch");
        for (std::size_t j = 0; j < first.rank(); ++j)
            if (j != axis && p.dim(j) != first[j])
                throw Error(ErrorCode::ShapeMismatch,
                            "concat of " + first.str() + " and " + p.shape().str() + " on axis " + std::to_string(axis));
        total += p.dim(axis);
    }
    std::size_t outer = detail::outer_of(first, axis);
    std::size_t inner = detail::inner_of(first, axis);

    Buffer out(outer * total * inner);
    std::size_t placed = 0;
    for (const Tensor& p : parts) {
        std::size_t block = p.dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.data() + o * block, block, out.data() + (o * total + placed) * inner);
        placed += p.dim(axis);
    }
    return Tensor(detail::with_extent(first, axis, total), std::move(out));
}

inline Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

/// Pads the last two axes in a single copy (top/bottom on rank-2, left/right on rank-1).
inline Tensor pad_spatial(const Tensor& t, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right,
                          float value) {
    if (t.rank() < 2) throw Error(ErrorCode::AxisOutOfRange, "pad_spatial needs rank >= 2");
    const Shape& s = t.shape();
    std::size_t h = s[s.rank() - 2];
    std::size_t w = s[s.rank() - 1];
    std::size_t planes = t.size() / (h * w);
    std::size_t oh = h + top + bottom;
    std::size_t ow = w + left + right;

    Buffer out(planes * oh * ow, value);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(t.data() + (p * h + y) * w, w, out.data() + (p * oh + y + top) * ow + left);
    auto dims = s.dims();
    dims[s.rank() - 2] = oh;
    dims[s.rank() - 1] = ow;
    return Tensor(Shape(std::move(dims)), std::move(out));
}

/// Crops the last two axes to rows [y0, y0+h) and cols [x0, x0+w) in a single copy.
inline Tensor crop_spatial(const Tensor& t, std::size_t y0, std::size_t h, std::size_t x0, std::size_t w) {
    if (t.rank() < 2) throw Error(ErrorCode::AxisOutOfRange, "crop_spatial needs rank >= 2");
    const Shape& s = t.shape();
    std::size_t ih = s[s.rank() - 2];
    std::size_t iw = s[s.rank() - 1];
    if (h == 0 || w == 0 || y0 + h > ih || x0 + w > iw)
        throw Error(ErrorCode::RangeOutOfBounds, "spatial crop exceeds " + s.str());
    std::size_t planes = t.size() / (ih * iw);

    Buffer out(planes * h * w);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(t.data() + (p * ih + y0 + y) * iw + x0, w, out.data() + (p * h + y) * w);
    auto dims = s.dims();
    dims[s.rank() - 2] = h;
    dims[s.rank() - 1] = w;
    return Tensor(Shape(std::move(dims)), std::move(out));
}

// ---------------------------------------------------------------------------
// .dtns file format:
//   "DTNS" | u32 version (1) | u32 ndim | ndim x u64 extents | f32 payload
// All integers and floats little-endian, payload row-major.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void write_le(std::ostream& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    unsigned char bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T)))
        throw Error(ErrorCode::FormatError, "unexpected end of stream");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

}  // namespace detail

inline constexpr std::uint32_t kDtnsVersion = 1;

inline void write_dtns(std::ostream& out, const Tensor& t) {
    out.write("DTNS", 4);
    detail::write_le<std::uint32_t>(out, kDtnsVersion);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape().dims()) detail::write_le<std::uint64_t>(out, d);
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.bytes()));
    } else {
        for (float v : t.values()) detail::write_le<float>(out, v);
    }
    if (!out) throw Error(ErrorCode::IoError, "failed writing tensor");
}

inline Tensor read_dtns(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "DTNS", 4) != 0)
        throw Error(ErrorCode::FormatError, "missing DTNS magic");
    auto version = detail::read_le<std::uint32_t>(in);
    if (version != kDtnsVersion) throw Error(ErrorCode::FormatError, "unsupported DTNS version " + std::to_string(version));
    auto ndim = detail::read_le<std::uint32_t>(in);
    if (ndim == 0 || ndim > 16) throw Error(ErrorCode::FormatError, "bad rank " + std::to_string(ndim));
    std::vector<std::size_t> dims(ndim);
    for (auto& d : dims) {
        auto extent = detail::read_le<std::uint64_t>(in);
        if (extent == 0 || extent > (std::uint64_t{1} << 40)) throw Error(ErrorCode::FormatError, "bad extent");
        d = static_cast<std::size_t>(extent);
    }
    Shape shape(std::move(dims));
    Buffer data(shape.element_count());
    if constexpr (std::endian::native == std::endian::little) {
        if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float))))
            throw Error(ErrorCode::FormatError, "truncated DTNS payload");
    } else {
        for (auto& v : data) v = detail::read_le<float>(in);
    }
    return Tensor(std::move(shape), std::move(data));
}

inline void save_dtns(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
    write_dtns(out, t);
}

inline Tensor load_dtns(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
    return read_dtns(in);
}

}  // namespace densescan
