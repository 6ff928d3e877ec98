#pragma once

#include "densescan/error.hpp"
#include "densescan/parallel.hpp"
#include "densescan/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>

namespace densescan {

/// Spatial extent pair (rows, cols) used for kernels, windows, strides and image sizes.
struct Size2 {
    std::size_t h = 1;
    std::size_t w = 1;

    [[nodiscard]] std::size_t area() const noexcept { return h * w; }
    bool operator==(const Size2&) const = default;
};

/// Top/left offset of a shifted pooling grid.
struct Shift2 {
    std::size_t y = 0;
    std::size_t x = 0;

    bool operator==(const Shift2&) const = default;
};

/// subsample is striding expressed as pooling: window 1x1, keep the top-left element.
enum class PoolKind { max, mean, subsample };
enum class ActivationKind { tanh, relu };

constexpr std::string_view to_string(PoolKind kind) {
    switch (kind) {
        case PoolKind::max: return "max";
        case PoolKind::mean: return "mean";
        case PoolKind::subsample: return "subsample";
    }
    return "?";
}

constexpr std::string_view to_string(ActivationKind kind) {
    return kind == ActivationKind::tanh ? "tanh" : "relu";
}

/// kernels: (out_channels, in_channels, k_h, k_w); bias: (out_channels,).
class ConvWeights {
public:
    ConvWeights(Tensor kernels, Tensor bias) : kernels_(std::move(kernels)), bias_(std::move(bias)) {
        if (kernels_.rank() != 4) throw Error(ErrorCode::ShapeMismatch, "conv kernels must be rank 4");
        if (bias_.rank() != 1 || bias_.dim(0) != kernels_.dim(0))
            throw Error(ErrorCode::ShapeMismatch, "bias " + bias_.shape().str() + " does not match kernels " +
                                                      kernels_.shape().str());
        for (float v : kernels_.values())
            if (!std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "non-finite kernel weight");
        for (float v : bias_.values())
            if (!std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "non-finite bias");
    }

    [[nodiscard]] const Tensor& kernels() const noexcept { return kernels_; }
    [[nodiscard]] const Tensor& bias() const noexcept { return bias_; }
    [[nodiscard]] std::size_t out_channels() const { return kernels_.dim(0); }
    [[nodiscard]] std::size_t in_channels() const { return kernels_.dim(1); }
    [[nodiscard]] Size2 kernel() const { return {kernels_.dim(2), kernels_.dim(3)}; }

private:
    Tensor kernels_;
    Tensor bias_;
};

namespace detail {

inline void require_rank4(const Tensor& t, std::string_view op) {
    if (t.rank() != 4)
        throw Error(ErrorCode::ShapeMismatch, std::string(op) + " expects (M,k,H,W), got " + t.shape().str());
}

}  // namespace detail

/// Valid cross-correlation, applied independently to every M sample.
///
/// Each output element is bias + sum over (c, dy, dx) in that nesting order;
/// the accumulation order per element is fixed, so any two callers that see
/// the same input values produce bit-identical results regardless of the
/// tensor they are embedded in or the thread count.
inline Tensor conv2d(const Tensor& input, const ConvWeights& weights, Size2 stride = {1, 1}) {
    detail::require_rank4(input, "conv2d");
    const std::size_t samples = input.dim(0);
    const std::size_t cin = input.dim(1);
    const std::size_t h = input.dim(2);
    const std::size_t w = input.dim(3);
    const Size2 k = weights.kernel();
    const std::size_t cout = weights.out_channels();

    if (cin != weights.in_channels())
        throw Error(ErrorCode::ChannelMismatch, "input has " + std::to_string(cin) + " channels, kernel expects " +
                                                    std::to_string(weights.in_channels()));
    if (h < k.h || w < k.w)
        throw Error(ErrorCode::SpatialTooSmall, "input " + input.shape().str() + " smaller than kernel " +
                                                    std::to_string(k.h) + "x" + std::to_string(k.w));
    if (stride.h == 0 || stride.w == 0) throw Error(ErrorCode::InvalidArgument, "zero conv stride");

    const std::size_t oh = (h - k.h) / stride.h + 1;
    const std::size_t ow = (w - k.w) / stride.w + 1;
    Buffer out(samples * cout * oh * ow);

    const float* src = input.data();
    const float* kern = weights.kernels().data();
    const float* bias = weights.bias().data();
    float* dst_all = out.data();
    constexpr std::size_t kRowBlock = 8;

    parallel_for(samples * cout, [&](std::size_t job) {
        const std::size_t m = job / cout;
        const std::size_t o = job % cout;
        float* plane = dst_all + job * oh * ow;
        const float* sample = src + m * cin * h * w;

        for (std::size_t y0 = 0; y0 < oh; y0 += kRowBlock) {
            const std::size_t y1 = std::min(oh, y0 + kRowBlock);
            for (std::size_t c = 0; c < cin; ++c) {
                const float* channel = sample + c * h * w;
                for (std::size_t dy = 0; dy < k.h; ++dy) {
                    for (std::size_t dx = 0; dx < k.w; ++dx) {
                        const float wv = kern[((o * cin + c) * k.h + dy) * k.w + dx];
                        for (std::size_t y = y0; y < y1; ++y) {
                            const float* __restrict row = channel + (y * stride.h + dy) * w + dx;
                            float* __restrict acc = plane + y * ow;
                            if (stride.w == 1) {
                                for (std::size_t x = 0; x < ow; ++x) acc[x] += wv * row[x];
                            } else {
                                for (std::size_t x = 0; x < ow; ++x) acc[x] += wv * row[x * stride.w];
                            }
                        }
                    }
                }
            }
        }
        const float b = bias[o];
        for (std::size_t i = 0; i < oh * ow; ++i) plane[i] = b + plane[i];
    });
    return Tensor(Shape{samples, cout, oh, ow}, std::move(out));
}

inline Tensor activation(const Tensor& input, ActivationKind kind) {
    Buffer out(input.size());
    const float* src = input.data();
    if (kind == ActivationKind::tanh) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(src[i]);
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] > 0.0f ? src[i] : 0.0f;
    }
    return Tensor(input.shape(), std::move(out));
}

/// Number of fully-inside windows along one axis when the grid starts at `shift`.
/// Returns 0 when not even one window fits.
constexpr std::size_t pooled_extent(std::size_t extent, std::size_t window, std::size_t stride, std::size_t shift) {
    if (extent < shift + window) return 0;
    return (extent - shift - window) / stride + 1;
}

/// True when every shift 0..stride-1 yields the same output extent, i.e.
/// extent = window - 1 (mod stride). For window == stride this is extent = stride - 1 (mod stride).
constexpr bool shifts_agree(std::size_t extent, std::size_t window, std::size_t stride) {
    std::size_t first = pooled_extent(extent, window, stride, 0);
    return first > 0 && first == pooled_extent(extent, window, stride, stride - 1);
}

namespace detail {

inline void pool_plane(const float* src, std::size_t w, float* dst, std::size_t oh, std::size_t ow, PoolKind kind,
                       Size2 window, Size2 stride, Shift2 shift) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const float* cell = src + (shift.y + oy * stride.h) * w + shift.x + ox * stride.w;
            float result;
            switch (kind) {
                case PoolKind::max: {
                    result = cell[0];
                    for (std::size_t dy = 0; dy < window.h; ++dy)
                        for (std::size_t dx = 0; dx < window.w; ++dx) {
                            float v = cell[dy * w + dx];
                            result = v > result ? v : result;
                        }
                    break;
                }
                case PoolKind::mean: {
                    float sum = 0.0f;
                    for (std::size_t dy = 0; dy < window.h; ++dy)
                        for (std::size_t dx = 0; dx < window.w; ++dx) sum += cell[dy * w + dx];
                    result = sum / static_cast<float>(window.area());
                    break;
                }
                case PoolKind::subsample:
                default: result = cell[0]; break;
            }
            dst[oy * ow + ox] = result;
        }
    }
}

inline void check_pool_args(Size2 window, Size2 stride, Shift2 shift) {
    if (window.h == 0 || window.w == 0 || stride.h == 0 || stride.w == 0)
        throw Error(ErrorCode::InvalidArgument, "pooling window and stride must be positive");
    if (shift.y >= stride.h || shift.x >= stride.w)
        throw Error(ErrorCode::InvalidArgument, "shift must be smaller than the stride");
}

}  // namespace detail

/// Pooling on a grid whose first window starts at (shift.y, shift.x).
/// Only windows lying fully inside the input produce output.
inline Tensor shifted_pool(const Tensor& input, PoolKind kind, Size2 window, Size2 stride, Shift2 shift) {
    detail::require_rank4(input, "shifted_pool");
    detail::check_pool_args(window, stride, shift);
    const std::size_t samples = input.dim(0);
    const std::size_t channels = input.dim(1);
    const std::size_t h = input.dim(2);
    const std::size_t w = input.dim(3);
    const std::size_t oh = pooled_extent(h, window.h, stride.h, shift.y);
    const std::size_t ow = pooled_extent(w, window.w, stride.w, shift.x);
    if (oh == 0 || ow == 0)
        throw Error(ErrorCode::WindowTooLarge, "window does not fit in " + input.shape().str() + " at shift (" +
                                                   std::to_string(shift.y) + "," + std::to_string(shift.x) + ")");

    Buffer out(samples * channels * oh * ow);
    parallel_for(samples * channels, [&](std::size_t plane) {
        detail::pool_plane(input.data() + plane * h * w, w, out.data() + plane * oh * ow, oh, ow, kind, window, stride,
                           shift);
    });
    return Tensor(Shape{samples, channels, oh, ow}, std::move(out));
}

inline Tensor pool(const Tensor& input, PoolKind kind, Size2 window, Size2 stride) {
    return shifted_pool(input, kind, window, stride, {0, 0});
}

/// All stride.h * stride.w shifted poolings stacked on the sample axis.
///
/// Output sample (y * stride.w + x) * M_in + m holds shift (y, x) applied to
/// input sample m, i.e. the new shift pair becomes the outermost part of the
/// compound sample index. Written straight into one buffer; equivalent to
/// concat of shifted_pool results in row-major shift order.
inline Tensor multipool(const Tensor& input, PoolKind kind, Size2 window, Size2 stride) {
    detail::require_rank4(input, "multipool");
    detail::check_pool_args(window, stride, {0, 0});
    const std::size_t samples = input.dim(0);
    const std::size_t channels = input.dim(1);
    const std::size_t h = input.dim(2);
    const std::size_t w = input.dim(3);
    if (!shifts_agree(h, window.h, stride.h) || !shifts_agree(w, window.w, stride.w))
        throw Error(ErrorCode::UnequalShiftOutputs,
                    "input " + input.shape().str() + " gives unequal outputs across shifts for stride " +
                        std::to_string(stride.h) + "x" + std::to_string(stride.w));
    const std::size_t oh = pooled_extent(h, window.h, stride.h, 0);
    const std::size_t ow = pooled_extent(w, window.w, stride.w, 0);
    const std::size_t shifts = stride.area();

    Buffer out(shifts * samples * channels * oh * ow);
    parallel_for(shifts * samples * channels, [&](std::size_t job) {
        const std::size_t s = job / (samples * channels);
        const std::size_t plane_in = job % (samples * channels);
        const Shift2 shift{s / stride.w, s % stride.w};
        detail::pool_plane(input.data() + plane_in * h * w, w, out.data() + job * oh * ow, oh, ow, kind, window, stride,
                           shift);
    });
    return Tensor(Shape{shifts * samples, channels, oh, ow}, std::move(out));
}

}  // namespace densescan
