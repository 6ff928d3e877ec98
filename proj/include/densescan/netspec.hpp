#pragma once

#include "densescan/error.hpp"
#include "densescan/nn.hpp"
#include "densescan/random.hpp"
#include "densescan/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace densescan {

struct ConvLayer {
    std::size_t out_channels = 1;
    Size2 kernel;
    Size2 stride{1, 1};
};

struct PoolLayer {
    PoolKind kind = PoolKind::max;
    Size2 window;
    Size2 stride;
};

struct ActivationLayer {
    ActivationKind kind = ActivationKind::tanh;
};

using LayerSpec = std::variant<ConvLayer, PoolLayer, ActivationLayer>;

/// Per-side zero padding that centers a patch on its pixel. For even patch
/// sizes the extra row/column goes to the top/left, so pixel (x, y) sits at
/// patch index (pad_top, pad_left) and its patch covers original rows
/// y - pad_top ... y + pad_bottom.
struct PatchGeometry {
    Size2 patch;
    std::size_t pad_top = 0;
    std::size_t pad_bottom = 0;
    std::size_t pad_left = 0;
    std::size_t pad_right = 0;

    static PatchGeometry for_patch(Size2 patch) {
        PatchGeometry g;
        g.patch = patch;
        g.pad_top = patch.h / 2;  // ceil((P_h - 1) / 2)
        g.pad_bottom = (patch.h - 1) / 2;
        g.pad_left = patch.w / 2;
        g.pad_right = (patch.w - 1) / 2;
        return g;
    }
};

/// The patch network: maps one (in_channels, P_h, P_w) patch to a k-vector.
struct NetworkSpec {
    Size2 patch;
    std::size_t in_channels = 1;
    std::vector<LayerSpec> layers;

    [[nodiscard]] PatchGeometry geometry() const { return PatchGeometry::for_patch(patch); }

    [[nodiscard]] std::size_t conv_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += std::holds_alternative<ConvLayer>(l);
        return n;
    }

    [[nodiscard]] std::size_t out_channels() const {
        std::size_t c = in_channels;
        for (const auto& l : layers)
            if (const auto* conv = std::get_if<ConvLayer>(&l)) c = conv->out_channels;
        return c;
    }
};

inline std::string describe_layer(const LayerSpec& layer) {
    std::ostringstream out;
    std::visit(
        [&](const auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ConvLayer>)
                out << "conv " << l.kernel.h << "x" << l.kernel.w << " -> " << l.out_channels << " stride "
                    << l.stride.h << "x" << l.stride.w;
            else if constexpr (std::is_same_v<T, PoolLayer>)
                out << to_string(l.kind) << " pool " << l.window.h << "x" << l.window.w << " stride " << l.stride.h
                    << "x" << l.stride.w;
            else
                out << to_string(l.kind);
        },
        layer);
    return out.str();
}

/// Structural checks that do not depend on spatial sizes.
inline void validate_layers(const NetworkSpec& spec) {
    if (spec.patch.h == 0 || spec.patch.w == 0) throw Error(ErrorCode::InvalidArgument, "patch extents must be >= 1");
    if (spec.in_channels == 0) throw Error(ErrorCode::InvalidArgument, "in_channels must be >= 1");
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const std::string where = "layer " + std::to_string(i) + " (" + describe_layer(spec.layers[i]) + ")";
        if (const auto* conv = std::get_if<ConvLayer>(&spec.layers[i])) {
            if (conv->out_channels == 0 || conv->kernel.h == 0 || conv->kernel.w == 0 || conv->stride.h == 0 ||
                conv->stride.w == 0)
                throw Error(ErrorCode::InvalidArgument, where + ": extents must be >= 1");
        } else if (const auto* p = std::get_if<PoolLayer>(&spec.layers[i])) {
            if (p->window.h == 0 || p->window.w == 0 || p->stride.h == 0 || p->stride.w == 0)
                throw Error(ErrorCode::InvalidArgument, where + ": extents must be >= 1");
            if (p->kind == PoolKind::subsample) {
                if (p->window != Size2{1, 1})
                    throw Error(ErrorCode::InvalidArgument, where + ": subsample window must be 1x1");
            } else if (p->window != p->stride) {
                throw Error(ErrorCode::InvalidArgument, where + ": overlapping or gapped pooling is not supported");
            }
        }
    }
}

/// Shapes along the patch network: element 0 is the input (1, c, P_h, P_w),
/// element i + 1 the output of layer i. The last shape must be (1, k, 1, 1).
inline std::vector<Shape> infer_shapes(const NetworkSpec& spec) {
    validate_layers(spec);
    std::vector<Shape> shapes;
    shapes.reserve(spec.layers.size() + 1);
    std::size_t c = spec.in_channels;
    std::size_t h = spec.patch.h;
    std::size_t w = spec.patch.w;
    shapes.push_back(Shape{1, c, h, w});

    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto underflow = [&] {
            return Error(ErrorCode::ShapeUnderflow, "layer " + std::to_string(i) + " (" +
                                                        describe_layer(spec.layers[i]) + ") on " +
                                                        std::to_string(h) + "x" + std::to_string(w) + " input");
        };
        if (const auto* conv = std::get_if<ConvLayer>(&spec.layers[i])) {
            if (h < conv->kernel.h || w < conv->kernel.w) throw underflow();
            h = (h - conv->kernel.h) / conv->stride.h + 1;
            w = (w - conv->kernel.w) / conv->stride.w + 1;
            c = conv->out_channels;
        } else if (const auto* p = std::get_if<PoolLayer>(&spec.layers[i])) {
            std::size_t ph = pooled_extent(h, p->window.h, p->stride.h, 0);
            std::size_t pw = pooled_extent(w, p->window.w, p->stride.w, 0);
            if (ph == 0 || pw == 0) throw underflow();
            h = ph;
            w = pw;
        }
        shapes.push_back(Shape{1, c, h, w});
    }
    if (h != 1 || w != 1)
        throw Error(ErrorCode::NotSinglePixelOutput,
                    "patch network ends at " + std::to_string(h) + "x" + std::to_string(w) + ", expected 1x1");
    return shapes;
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Convolution weights in conv order, each tagged with its layer index in the
/// spec it was created for.
class WeightSet {
public:
    struct Entry {
        std::size_t layer_index;
        ConvWeights weights;
    };

    WeightSet() = default;
    explicit WeightSet(std::vector<Entry> entries) : entries_(std::move(entries)) {}

    [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }
    [[nodiscard]] const ConvWeights& conv(std::size_t ordinal) const {
        if (ordinal >= entries_.size())
            throw Error(ErrorCode::ShapeMismatch, "no weights for conv #" + std::to_string(ordinal));
        return entries_[ordinal].weights;
    }
    [[nodiscard]] const std::vector<Entry>& entries() const noexcept { return entries_; }

private:
    std::vector<Entry> entries_;
};

/// Checks that every conv of spec has weights of the matching shape.
inline void check_weights(const NetworkSpec& spec, const WeightSet& weights) {
    if (weights.size() != spec.conv_count())
        throw Error(ErrorCode::ShapeMismatch, "weight set has " + std::to_string(weights.size()) +
                                                  " convs, network has " + std::to_string(spec.conv_count()));
    std::size_t c = spec.in_channels;
    std::size_t ordinal = 0;
    for (const auto& l : spec.layers) {
        const auto* conv = std::get_if<ConvLayer>(&l);
        if (!conv) continue;
        const ConvWeights& cw = weights.conv(ordinal);
        if (cw.kernels().shape() != Shape{conv->out_channels, c, conv->kernel.h, conv->kernel.w})
            throw Error(ErrorCode::ShapeMismatch, "conv #" + std::to_string(ordinal) + " weights have shape " +
                                                      cw.kernels().shape().str());
        c = conv->out_channels;
        ++ordinal;
    }
}

/// Uniform [-0.1, 0.1] weights. The root SplitMix64(seed) is split once per
/// conv layer (in layer order); each child stream fills the kernel in
/// row-major order and then the bias.
inline WeightSet init_weights(const NetworkSpec& spec, std::uint64_t seed) {
    validate_layers(spec);
    SplitMix64 root(seed);
    std::vector<WeightSet::Entry> entries;
    std::size_t c = spec.in_channels;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto* conv = std::get_if<ConvLayer>(&spec.layers[i]);
        if (!conv) continue;
        SplitMix64 stream = root.split();
        Shape kshape{conv->out_channels, c, conv->kernel.h, conv->kernel.w};
        Buffer kdata(kshape.element_count());
        for (auto& v : kdata) v = stream.uniform(-0.1f, 0.1f);
        Buffer bdata(conv->out_channels);
        for (auto& v : bdata) v = stream.uniform(-0.1f, 0.1f);
        entries.push_back({i, ConvWeights(Tensor(kshape, std::move(kdata)),
                                          Tensor(Shape{conv->out_channels}, std::move(bdata)))});
        c = conv->out_channels;
    }
    return WeightSet(std::move(entries));
}

// Weight file: "DWTS" | u32 version (1) | u32 entry count | entries, where
// each entry is u32 layer index | u32 role (0 kernel, 1 bias) | .dtns tensor.
// Kernel and bias entries of one conv are adjacent, kernel first.

inline void write_weights(std::ostream& out, const WeightSet& weights) {
    out.write("DWTS", 4);
    detail::write_le<std::uint32_t>(out, 1);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(weights.size() * 2));
    for (const auto& e : weights.entries()) {
        detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.layer_index));
        detail::write_le<std::uint32_t>(out, 0);
        write_dtns(out, e.weights.kernels());
        detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.layer_index));
        detail::write_le<std::uint32_t>(out, 1);
        write_dtns(out, e.weights.bias());
    }
    if (!out) throw Error(ErrorCode::IoError, "failed writing weights");
}

inline WeightSet read_weights(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "DWTS", 4) != 0)
        throw Error(ErrorCode::FormatError, "missing DWTS magic");
    if (detail::read_le<std::uint32_t>(in) != 1) throw Error(ErrorCode::FormatError, "unsupported weight file version");
    auto count = detail::read_le<std::uint32_t>(in);
    if (count % 2 != 0) throw Error(ErrorCode::FormatError, "weight entries must come in kernel/bias pairs");
    std::vector<WeightSet::Entry> entries;
    for (std::uint32_t i = 0; i < count / 2; ++i) {
        auto layer = detail::read_le<std::uint32_t>(in);
        if (detail::read_le<std::uint32_t>(in) != 0) throw Error(ErrorCode::FormatError, "expected kernel entry");
        Tensor kernels = read_dtns(in);
        if (detail::read_le<std::uint32_t>(in) != layer || detail::read_le<std::uint32_t>(in) != 1)
            throw Error(ErrorCode::FormatError, "expected bias entry for layer " + std::to_string(layer));
        Tensor bias = read_dtns(in);
        entries.push_back({layer, ConvWeights(std::move(kernels), std::move(bias))});
    }
    return WeightSet(std::move(entries));
}

inline void save_weights(const std::string& path, const WeightSet& weights) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
    write_weights(out, weights);
}

inline WeightSet load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
    return read_weights(in);
}

// ---------------------------------------------------------------------------
// Network description JSON
// ---------------------------------------------------------------------------

namespace detail {

inline Size2 size_from_json(const nlohmann::json& j, const char* what) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number_unsigned() || !j[1].is_number_unsigned())
        throw Error(ErrorCode::FormatError, std::string(what) + " must be a pair of non-negative integers");
    return {j[0].get<std::size_t>(), j[1].get<std::size_t>()};
}

}  // namespace detail

inline NetworkSpec network_from_json(const nlohmann::json& doc) {
    try {
        NetworkSpec spec;
        spec.patch = detail::size_from_json(doc.at("patch"), "patch");
        spec.in_channels = doc.at("in_channels").get<std::size_t>();
        for (const auto& l : doc.at("layers")) {
            const std::string type = l.at("type").get<std::string>();
            if (type == "conv") {
                ConvLayer conv;
                conv.out_channels = l.at("out").get<std::size_t>();
                conv.kernel = detail::size_from_json(l.at("kernel"), "kernel");
                if (l.contains("stride")) conv.stride = detail::size_from_json(l.at("stride"), "stride");
                spec.layers.emplace_back(conv);
            } else if (type == "pool") {
                PoolLayer p;
                const std::string kind = l.at("kind").get<std::string>();
                if (kind == "max") p.kind = PoolKind::max;
                else if (kind == "mean") p.kind = PoolKind::mean;
                else if (kind == "subsample") p.kind = PoolKind::subsample;
                else throw Error(ErrorCode::FormatError, "unknown pool kind '" + kind + "'");
                p.window = detail::size_from_json(l.at("window"), "window");
                p.stride = detail::size_from_json(l.at("stride"), "stride");
                spec.layers.emplace_back(p);
            } else if (type == "act") {
                const std::string kind = l.at("kind").get<std::string>();
                if (kind == "tanh") spec.layers.emplace_back(ActivationLayer{ActivationKind::tanh});
                else if (kind == "relu") spec.layers.emplace_back(ActivationLayer{ActivationKind::relu});
                else throw Error(ErrorCode::FormatError, "unknown activation '" + kind + "'");
            } else {
                throw Error(ErrorCode::FormatError, "unknown layer type '" + type + "'");
            }
        }
        validate_layers(spec);
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::FormatError, e.what());
    }
}

inline nlohmann::json network_to_json(const NetworkSpec& spec) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : spec.layers) {
        std::visit(
            [&](const auto& l) {
                using T = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<T, ConvLayer>)
                    layers.push_back({{"type", "conv"},
                                      {"out", l.out_channels},
                                      {"kernel", {l.kernel.h, l.kernel.w}},
                                      {"stride", {l.stride.h, l.stride.w}}});
                else if constexpr (std::is_same_v<T, PoolLayer>)
                    layers.push_back({{"type", "pool"},
                                      {"kind", std::string(to_string(l.kind))},
                                      {"window", {l.window.h, l.window.w}},
                                      {"stride", {l.stride.h, l.stride.w}}});
                else
                    layers.push_back({{"type", "act"}, {"kind", std::string(to_string(l.kind))}});
            },
            layer);
    }
    return {{"patch", {spec.patch.h, spec.patch.w}}, {"in_channels", spec.in_channels}, {"layers", layers}};
}

inline NetworkSpec parse_network(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::FormatError, e.what());
    }
    return network_from_json(doc);
}

inline NetworkSpec load_network(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_network(buffer.str());
}

// ---------------------------------------------------------------------------
// Patch execution
// ---------------------------------------------------------------------------

/// Runs the patch network on a batch (B, c, P_h, P_w) of independent patches
/// and returns (B, k). Strided convolutions run directly. Every intermediate
/// shape is checked against infer_shapes.
inline Tensor run_patches(const NetworkSpec& spec, const WeightSet& weights, const Tensor& batch) {
    const auto shapes = infer_shapes(spec);
    check_weights(spec, weights);
    if (batch.rank() != 4 || batch.dim(1) != spec.in_channels || batch.dim(2) != spec.patch.h ||
        batch.dim(3) != spec.patch.w)
        throw Error(ErrorCode::ShapeMismatch, "patch batch " + batch.shape().str() + " does not match network input " +
                                                  shapes.front().str());
    const std::size_t count = batch.dim(0);
    Tensor t = batch;
    std::size_t ordinal = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& layer = spec.layers[i];
        if (const auto* conv = std::get_if<ConvLayer>(&layer))
            t = conv2d(t, weights.conv(ordinal++), conv->stride);
        else if (const auto* p = std::get_if<PoolLayer>(&layer))
            t = pool(t, p->kind, p->window, p->stride);
        else
            t = activation(t, std::get<ActivationLayer>(layer).kind);
        const auto& expect = shapes[i + 1];
        if (t.dim(1) != expect[1] || t.dim(2) != expect[2] || t.dim(3) != expect[3])
            throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(i) + " produced " + t.shape().str());
    }
    return reshape(t, Shape{count, t.dim(1)});
}

/// One patch (1, c, P_h, P_w) or (c, P_h, P_w) to its k-vector.
inline Tensor run_patch(const NetworkSpec& spec, const WeightSet& weights, const Tensor& patch) {
    Tensor batch = patch.rank() == 3 ? reshape(patch, Shape{1, patch.dim(0), patch.dim(1), patch.dim(2)}) : patch;
    if (batch.dim(0) != 1) throw Error(ErrorCode::ShapeMismatch, "run_patch takes a single patch");
    Tensor out = run_patches(spec, weights, batch);
    return reshape(out, Shape{out.dim(1)});
}

/// 2 * multiply-adds of one patch-network pass (convolutions only).
inline std::uint64_t count_patch_flops(const NetworkSpec& spec) {
    const auto shapes = infer_shapes(spec);
    std::uint64_t flops = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        if (const auto* conv = std::get_if<ConvLayer>(&spec.layers[i])) {
            const Shape& in = shapes[i];
            const Shape& out = shapes[i + 1];
            flops += 2ull * out[1] * out[2] * out[3] * in[1] * conv->kernel.h * conv->kernel.w;
        }
    }
    return flops;
}

}  // namespace densescan
