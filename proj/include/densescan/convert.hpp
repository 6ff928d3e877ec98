#pragma once

#include "densescan/error.hpp"
#include "densescan/netspec.hpp"
#include "densescan/nn.hpp"
#include "densescan/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace densescan {

// ---------------------------------------------------------------------------
// Plan steps. Layer tensors use the (M, k, H, W) layout; the unwarp chain
// moves to (k, H, W, m-axes...) and ends at (k, H, W).
// ---------------------------------------------------------------------------
namespace step {

/// Zero padding of the two spatial axes.
struct Pad {
    std::size_t top = 0;
    std::size_t bottom = 0;
    std::size_t left = 0;
    std::size_t right = 0;
};

/// Convolution number `ordinal` of the network (stride 1 after decomposition).
struct Conv {
    std::size_t ordinal = 0;
    Size2 kernel;
    std::size_t out_channels = 0;
};

struct Activation {
    ActivationKind kind = ActivationKind::tanh;
};

struct Multipool {
    PoolKind kind = PoolKind::max;
    Size2 window;
    Size2 stride;
};

/// (M, k, y*, x*) -> (M, f*) -> transpose -> (f*, M) -> (k, y*, x*, y_n, x_n, ..., y_1, x_1).
struct UnwarpPrepare {};

/// (k, Y, X, s_h, s_w, rest...) -> swap axes 2 and 3 -> fuse -> (k, Y*s_h, X*s_w, rest...).
struct UnwarpPool {
    Size2 stride;
};

/// Reinterpret as (k, H, W).
struct FinalView {};

/// Keep rows [0, extent.h) and cols [0, extent.w).
struct Crop {
    Size2 extent;
};

}  // namespace step

using StepOp = std::variant<step::Pad, step::Conv, step::Activation, step::Multipool, step::UnwarpPrepare,
                            step::UnwarpPool, step::FinalView, step::Crop>;

struct PlanStep {
    StepOp op;
    Shape input;
    Shape output;
};

inline std::string_view step_name(const StepOp& op) {
    return std::visit(
        [](const auto& s) -> std::string_view {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, step::Pad>) return "pad";
            else if constexpr (std::is_same_v<T, step::Conv>) return "conv";
            else if constexpr (std::is_same_v<T, step::Activation>) return "act";
            else if constexpr (std::is_same_v<T, step::Multipool>) return "multipool";
            else if constexpr (std::is_same_v<T, step::UnwarpPrepare>) return "unwarp_prepare";
            else if constexpr (std::is_same_v<T, step::UnwarpPool>) return "unwarp_pool";
            else if constexpr (std::is_same_v<T, step::FinalView>) return "final_view";
            else return "crop";
        },
        op);
}

/// The compiled image network for one input size.
struct DensePlan {
    NetworkSpec network;  // after strided-conv decomposition
    PatchGeometry geometry;
    Size2 dense_input;
    Size2 extra_pad;  // appended bottom/right on top of the patch padding
    std::vector<Size2> m_ledger;  // one stride pair per pooling layer, first pooling first
    std::vector<PlanStep> steps;

    [[nodiscard]] std::size_t in_channels() const { return network.in_channels; }
    [[nodiscard]] std::size_t out_channels() const { return network.out_channels(); }
    [[nodiscard]] Shape output_shape() const { return steps.back().output; }

    /// M after each multipool.
    [[nodiscard]] std::vector<std::size_t> m_sizes() const {
        std::vector<std::size_t> sizes;
        std::size_t m = 1;
        for (Size2 s : m_ledger) sizes.push_back(m *= s.area());
        return sizes;
    }
};

// ---------------------------------------------------------------------------
// Compilation
// ---------------------------------------------------------------------------

/// Rewrites every strided conv as a stride-1 conv followed by a 1x1 subsample
/// pool with the conv's stride.
inline NetworkSpec decompose_strided_convs(const NetworkSpec& spec) {
    NetworkSpec out = spec;
    out.layers.clear();
    for (const auto& layer : spec.layers) {
        const auto* conv = std::get_if<ConvLayer>(&layer);
        if (conv && conv->stride != Size2{1, 1}) {
            out.layers.emplace_back(ConvLayer{conv->out_channels, conv->kernel, {1, 1}});
            out.layers.emplace_back(PoolLayer{PoolKind::subsample, {1, 1}, conv->stride});
        } else {
            out.layers.push_back(layer);
        }
    }
    return out;
}

namespace detail {

struct AxisLayer {
    bool is_pool;
    std::size_t extent;  // kernel or window
    std::size_t stride;
};

inline std::vector<AxisLayer> axis_layers(const NetworkSpec& spec, bool vertical) {
    std::vector<AxisLayer> out;
    for (const auto& layer : spec.layers) {
        if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
            out.push_back({false, vertical ? conv->kernel.h : conv->kernel.w, vertical ? conv->stride.h : conv->stride.w});
        } else if (const auto* p = std::get_if<PoolLayer>(&layer)) {
            out.push_back({true, vertical ? p->window.h : p->window.w, vertical ? p->stride.h : p->stride.w});
        }
    }
    return out;
}

enum class AxisOutcome { ok, underflow, unequal };

// Forward-simulates one spatial axis of the image network from the padded
// input extent; on success `final_extent` is the extent after the last layer
// and `stride_product` the product of pooling strides.
inline AxisOutcome simulate_axis(const std::vector<AxisLayer>& layers, std::size_t extent, std::size_t& final_extent,
                                 std::size_t& stride_product) {
    stride_product = 1;
    for (const auto& l : layers) {
        if (!l.is_pool) {
            if (extent < l.extent) return AxisOutcome::underflow;
            extent -= l.extent - 1;
        } else {
            if (pooled_extent(extent, l.extent, l.stride, l.stride - 1) == 0) return AxisOutcome::underflow;
            if (!shifts_agree(extent, l.extent, l.stride)) return AxisOutcome::unequal;
            extent = pooled_extent(extent, l.extent, l.stride, 0);
            stride_product *= l.stride;
        }
    }
    final_extent = extent;
    return AxisOutcome::ok;
}

inline std::size_t solve_axis(const std::vector<AxisLayer>& layers, std::size_t image, std::size_t patch,
                              const char* axis_name) {
    std::size_t product = 1;
    for (const auto& l : layers)
        if (l.is_pool) product *= l.stride;
    const std::size_t bound = product * product;
    for (std::size_t e = 0; e < bound; ++e) {
        std::size_t final_extent = 0;
        std::size_t strides = 1;
        if (simulate_axis(layers, image + patch - 1 + e, final_extent, strides) != AxisOutcome::ok) continue;
        if (final_extent * strides >= image) return e;
    }
    throw Error(ErrorCode::NoFeasiblePadding, std::string("no padding satisfies the ") + axis_name +
                                                  " pooling constraints for image extent " + std::to_string(image));
}

}  // namespace detail

/// Smallest bottom/right padding for which every multipool input gives equal
/// outputs across its shifts and the unwarped map covers the image.
/// Expects a spec whose strided convs have been decomposed.
inline Size2 solve_padding(const NetworkSpec& spec, Size2 image) {
    if (image.h == 0 || image.w == 0) throw Error(ErrorCode::InvalidArgument, "image extents must be >= 1");
    for (const auto& layer : spec.layers)
        if (const auto* conv = std::get_if<ConvLayer>(&layer); conv && conv->stride != Size2{1, 1})
            throw Error(ErrorCode::InvalidArgument, "solve_padding expects strided convs to be decomposed");
    return {detail::solve_axis(detail::axis_layers(spec, true), image.h, spec.patch.h, "vertical"),
            detail::solve_axis(detail::axis_layers(spec, false), image.w, spec.patch.w, "horizontal")};
}

/// Unwarp chain for a (M, k, y*, x*) tensor whose compound sample index is
/// (y_n, x_n, ..., y_1, x_1) for the given ledger (first pooling first).
/// Ends at (k, y* * prod s_h, x* * prod s_w).
inline std::vector<PlanStep> build_unwarp(std::span<const Size2> m_ledger, std::size_t y_star, std::size_t x_star,
                                          std::size_t channels) {
    std::vector<PlanStep> steps;
    if (m_ledger.empty()) return steps;
    std::size_t m = 1;
    for (Size2 s : m_ledger) m *= s.area();

    std::vector<std::size_t> dims{channels, y_star, x_star};
    for (auto it = m_ledger.rbegin(); it != m_ledger.rend(); ++it) {
        dims.push_back(it->h);
        dims.push_back(it->w);
    }
    Shape current(dims);
    steps.push_back({step::UnwarpPrepare{}, Shape{m, channels, y_star, x_star}, current});

    for (auto it = m_ledger.rbegin(); it != m_ledger.rend(); ++it) {
        std::vector<std::size_t> next{dims[0], dims[1] * dims[3], dims[2] * dims[4]};
        next.insert(next.end(), dims.begin() + 5, dims.end());
        Shape fused(next);
        steps.push_back({step::UnwarpPool{*it}, current, fused});
        dims = std::move(next);
        current = std::move(fused);
    }
    return steps;
}

/// Compiles the patch network into the image network for an (I_h, I_w) input.
inline DensePlan compile(const NetworkSpec& spec, Size2 image) {
    infer_shapes(spec);
    DensePlan plan;
    plan.network = decompose_strided_convs(spec);
    plan.geometry = spec.geometry();
    plan.dense_input = image;
    plan.extra_pad = solve_padding(plan.network, image);

    const PatchGeometry& g = plan.geometry;
    std::size_t m = 1;
    std::size_t c = spec.in_channels;
    std::size_t h = image.h + g.pad_top + g.pad_bottom + plan.extra_pad.h;
    std::size_t w = image.w + g.pad_left + g.pad_right + plan.extra_pad.w;
    plan.steps.push_back({step::Pad{g.pad_top, g.pad_bottom + plan.extra_pad.h, g.pad_left,
                                    g.pad_right + plan.extra_pad.w},
                          Shape{1, c, image.h, image.w}, Shape{1, c, h, w}});

    std::size_t ordinal = 0;
    for (const auto& layer : plan.network.layers) {
        Shape in{m, c, h, w};
        if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
            h -= conv->kernel.h - 1;
            w -= conv->kernel.w - 1;
            c = conv->out_channels;
            plan.steps.push_back({step::Conv{ordinal++, conv->kernel, conv->out_channels}, in, Shape{m, c, h, w}});
        } else if (const auto* p = std::get_if<PoolLayer>(&layer)) {
            h = pooled_extent(h, p->window.h, p->stride.h, 0);
            w = pooled_extent(w, p->window.w, p->stride.w, 0);
            m *= p->stride.area();
            plan.m_ledger.push_back(p->stride);
            plan.steps.push_back({step::Multipool{p->kind, p->window, p->stride}, in, Shape{m, c, h, w}});
        } else {
            plan.steps.push_back({step::Activation{std::get<ActivationLayer>(layer).kind}, in, in});
        }
    }

    for (auto& s : build_unwarp(plan.m_ledger, h, w, c)) plan.steps.push_back(std::move(s));
    for (Size2 s : plan.m_ledger) {
        h *= s.h;
        w *= s.w;
    }
    plan.steps.push_back({step::FinalView{}, plan.steps.back().output, Shape{c, h, w}});
    plan.steps.push_back({step::Crop{image}, Shape{c, h, w}, Shape{c, image.h, image.w}});
    return plan;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

inline Tensor apply_step(const PlanStep& s, const WeightSet& weights, const Tensor& t) {
    if (t.shape() != s.input)
        throw Error(ErrorCode::ShapeMismatch, std::string(step_name(s.op)) + " expects " + s.input.str() + ", got " +
                                                  t.shape().str());
    Tensor out = std::visit(
        [&](const auto& op) -> Tensor {
            using T = std::decay_t<decltype(op)>;
            if constexpr (std::is_same_v<T, step::Pad>) {
                return pad_spatial(t, op.top, op.bottom, op.left, op.right, 0.0f);
            } else if constexpr (std::is_same_v<T, step::Conv>) {
                return conv2d(t, weights.conv(op.ordinal));
            } else if constexpr (std::is_same_v<T, step::Activation>) {
                return activation(t, op.kind);
            } else if constexpr (std::is_same_v<T, step::Multipool>) {
                return multipool(t, op.kind, op.window, op.stride);
            } else if constexpr (std::is_same_v<T, step::UnwarpPrepare>) {
                const std::size_t m = t.dim(0);
                Tensor flat = reshape(t, Shape{m, t.size() / m});
                return reshape(transpose(flat, 0, 1), s.output);
            } else if constexpr (std::is_same_v<T, step::UnwarpPool>) {
                return reshape(transpose(t, 2, 3), s.output);
            } else if constexpr (std::is_same_v<T, step::FinalView>) {
                return reshape(t, s.output);
            } else {
                return crop_spatial(t, 0, op.extent.h, 0, op.extent.w);
            }
        },
        s.op);
    if (out.shape() != s.output)
        throw Error(ErrorCode::ShapeMismatch, std::string(step_name(s.op)) + " produced " + out.shape().str() +
                                                  ", plan expects " + s.output.str());
    return out;
}

/// Runs steps [first, last) of the plan.
inline Tensor execute_steps(const DensePlan& plan, const WeightSet& weights, Tensor t, std::size_t first,
                            std::size_t last) {
    last = std::min(last, plan.steps.size());
    for (std::size_t i = first; i < last; ++i) t = apply_step(plan.steps[i], weights, t);
    return t;
}

/// Dense features for a (c, I_h, I_w) or (1, c, I_h, I_w) image; returns (k, I_h, I_w).
/// The image is taken by value so its storage is released after padding.
inline Tensor execute(const DensePlan& plan, const WeightSet& weights, Tensor image) {
    check_weights(plan.network, weights);
    if (image.rank() == 3) image = reshape(image, Shape{1, image.dim(0), image.dim(1), image.dim(2)});
    return execute_steps(plan, weights, std::move(image), 0, plan.steps.size());
}

/// Executes a plan on an input that already carries the patch padding, i.e.
/// (c, I_h + P_h - 1, I_w + P_w - 1); only the solver's extra padding is added.
inline Tensor execute_prepadded(const DensePlan& plan, const WeightSet& weights, Tensor padded) {
    check_weights(plan.network, weights);
    if (padded.rank() == 3) padded = reshape(padded, Shape{1, padded.dim(0), padded.dim(1), padded.dim(2)});
    Tensor t = pad_spatial(padded, 0, plan.extra_pad.h, 0, plan.extra_pad.w, 0.0f);
    padded = Tensor();
    if (t.shape() != plan.steps.front().output)
        throw Error(ErrorCode::ShapeMismatch, "pre-padded input " + t.shape().str() + " does not match " +
                                                  plan.steps.front().output.str());
    return execute_steps(plan, weights, std::move(t), 1, plan.steps.size());
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

/// Largest input + output footprint of any single step, in bytes.
inline std::uint64_t estimate_memory(const DensePlan& plan) {
    std::uint64_t peak = 0;
    for (const auto& s : plan.steps)
        peak = std::max<std::uint64_t>(peak, (s.input.element_count() + s.output.element_count()) * sizeof(float));
    return peak;
}

struct PerPatch {};
struct Dense {
    Size2 image;
};

/// 2 * multiply-adds over the image network's actual conv sizes, all M samples included.
inline std::uint64_t count_flops(const DensePlan& plan) {
    std::uint64_t flops = 0;
    for (const auto& s : plan.steps)
        if (const auto* conv = std::get_if<step::Conv>(&s.op))
            flops += 2ull * s.output.element_count() * s.input[1] * conv->kernel.h * conv->kernel.w;
    return flops;
}

inline std::uint64_t count_flops(const NetworkSpec& spec, PerPatch) { return count_patch_flops(spec); }
inline std::uint64_t count_flops(const NetworkSpec& spec, Dense mode) { return count_flops(compile(spec, mode.image)); }

/// Per-patch FLOPs over every pixel divided by the image network's FLOPs.
inline double redundancy_ratio(const NetworkSpec& spec, Size2 image) {
    const double dense = static_cast<double>(count_flops(spec, Dense{image}));
    const double patches = static_cast<double>(count_flops(spec, PerPatch{})) * image.area();
    return dense > 0 ? patches / dense : 0.0;
}

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

/// Rectangle in image coordinates; may extend past the image (read as zeros).
struct Rect {
    std::ptrdiff_t y = 0;
    std::ptrdiff_t x = 0;
    std::size_t h = 0;
    std::size_t w = 0;
};

/// output: the pixels this tile produces. input: the image region its patches read.
struct Tile {
    Rect output;
    Rect input;
};

inline std::vector<Tile> plan_tiles_grid(const DensePlan& plan, std::size_t rows, std::size_t cols) {
    const Size2 image = plan.dense_input;
    if (rows == 0 || cols == 0 || rows > image.h || cols > image.w)
        throw Error(ErrorCode::InvalidArgument, "tile grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                                                    " does not fit the image");
    const PatchGeometry& g = plan.geometry;
    std::vector<Tile> tiles;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t y0 = image.h * r / rows;
            const std::size_t y1 = image.h * (r + 1) / rows;
            const std::size_t x0 = image.w * c / cols;
            const std::size_t x1 = image.w * (c + 1) / cols;
            Rect out{static_cast<std::ptrdiff_t>(y0), static_cast<std::ptrdiff_t>(x0), y1 - y0, x1 - x0};
            Rect in{out.y - static_cast<std::ptrdiff_t>(g.pad_top), out.x - static_cast<std::ptrdiff_t>(g.pad_left),
                    out.h + g.patch.h - 1, out.w + g.patch.w - 1};
            tiles.push_back({out, in});
        }
    }
    return tiles;
}

/// Smallest power-of-two style grid whose largest tile fits in max_bytes.
inline std::vector<Tile> plan_tiles(const DensePlan& plan, std::uint64_t max_bytes) {
    const Size2 image = plan.dense_input;
    if (estimate_memory(compile(plan.network, {1, 1})) > max_bytes)
        throw Error(ErrorCode::BudgetTooSmall, "budget of " + std::to_string(max_bytes) +
                                                   " bytes cannot hold even a 1x1 output tile");
    std::size_t rows = 1;
    std::size_t cols = 1;
    while (true) {
        const Size2 largest{(image.h + rows - 1) / rows, (image.w + cols - 1) / cols};
        if (estimate_memory(compile(plan.network, largest)) <= max_bytes) break;
        if (rows == image.h && cols == image.w) break;
        if ((largest.h >= largest.w && rows < image.h) || cols == image.w)
            rows = std::min(image.h, rows * 2);
        else
            cols = std::min(image.w, cols * 2);
    }
    return plan_tiles_grid(plan, rows, cols);
}

/// Copies rect out of a (c, H, W) image, zero outside the image.
inline Tensor extract_region(const Tensor& image, const Rect& rect) {
    const std::size_t c = image.dim(0);
    const auto ih = static_cast<std::ptrdiff_t>(image.dim(1));
    const auto iw = static_cast<std::ptrdiff_t>(image.dim(2));
    Buffer out(c * rect.h * rect.w, 0.0f);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = 0; r < rect.h; ++r) {
            const std::ptrdiff_t y = rect.y + static_cast<std::ptrdiff_t>(r);
            if (y < 0 || y >= ih) continue;
            for (std::size_t q = 0; q < rect.w; ++q) {
                const std::ptrdiff_t x = rect.x + static_cast<std::ptrdiff_t>(q);
                if (x < 0 || x >= iw) continue;
                out[(ch * rect.h + r) * rect.w + q] = image.data()[(ch * ih + y) * iw + x];
            }
        }
    return Tensor(Shape{c, rect.h, rect.w}, std::move(out));
}

/// Runs each tile through its own compiled plan and stitches the outputs.
inline Tensor execute_tiled(const DensePlan& plan, const WeightSet& weights, const Tensor& image,
                            std::span<const Tile> tiles) {
    Tensor img = image.rank() == 4 ? reshape(image, Shape{image.dim(1), image.dim(2), image.dim(3)}) : image;
    if (img.shape() != Shape{plan.in_channels(), plan.dense_input.h, plan.dense_input.w})
        throw Error(ErrorCode::ShapeMismatch, "image " + img.shape().str() + " does not match the plan input");
    const std::size_t k = plan.out_channels();
    const Size2 full = plan.dense_input;
    Buffer out(k * full.area());
    for (const Tile& tile : tiles) {
        DensePlan tile_plan = compile(plan.network, {tile.output.h, tile.output.w});
        Tensor result = execute_prepadded(tile_plan, weights, extract_region(img, tile.input));
        for (std::size_t ch = 0; ch < k; ++ch)
            for (std::size_t r = 0; r < tile.output.h; ++r)
                std::copy_n(result.data() + (ch * tile.output.h + r) * tile.output.w, tile.output.w,
                            out.data() + (ch * full.h + tile.output.y + r) * full.w + tile.output.x);
    }
    return Tensor(Shape{k, full.h, full.w}, std::move(out));
}

// ---------------------------------------------------------------------------
// Description
// ---------------------------------------------------------------------------

inline nlohmann::json step_to_json(const PlanStep& s) {
    nlohmann::json j{{"op", std::string(step_name(s.op))}, {"input", s.input.dims()}, {"output", s.output.dims()}};
    std::visit(
        [&](const auto& op) {
            using T = std::decay_t<decltype(op)>;
            if constexpr (std::is_same_v<T, step::Pad>) {
                j["pad"] = {{"top", op.top}, {"bottom", op.bottom}, {"left", op.left}, {"right", op.right}};
            } else if constexpr (std::is_same_v<T, step::Conv>) {
                j["conv_index"] = op.ordinal;
                j["kernel"] = {op.kernel.h, op.kernel.w};
            } else if constexpr (std::is_same_v<T, step::Activation>) {
                j["kind"] = std::string(to_string(op.kind));
            } else if constexpr (std::is_same_v<T, step::Multipool>) {
                j["kind"] = std::string(to_string(op.kind));
                j["window"] = {op.window.h, op.window.w};
                j["stride"] = {op.stride.h, op.stride.w};
                j["m"] = s.output[0];
            } else if constexpr (std::is_same_v<T, step::UnwarpPool>) {
                j["stride"] = {op.stride.h, op.stride.w};
            } else if constexpr (std::is_same_v<T, step::Crop>) {
                j["extent"] = {op.extent.h, op.extent.w};
            }
        },
        s.op);
    return j;
}

inline nlohmann::json describe_plan(const DensePlan& plan) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : plan.steps) steps.push_back(step_to_json(s));
    nlohmann::json ledger = nlohmann::json::array();
    for (Size2 s : plan.m_ledger) ledger.push_back({s.h, s.w});
    const PatchGeometry& g = plan.geometry;
    return {{"dense_input", {plan.dense_input.h, plan.dense_input.w}},
            {"geometry",
             {{"patch", {g.patch.h, g.patch.w}},
              {"pad_top", g.pad_top},
              {"pad_bottom", g.pad_bottom},
              {"pad_left", g.pad_left},
              {"pad_right", g.pad_right}}},
            {"extra_pad", {plan.extra_pad.h, plan.extra_pad.w}},
            {"m_ledger", ledger},
            {"m_sizes", plan.m_sizes()},
            {"output_shape", plan.output_shape().dims()},
            {"peak_bytes", estimate_memory(plan)},
            {"steps", steps}};
}

}  // namespace densescan
