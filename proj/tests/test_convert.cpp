#include <catch2/catch_amalgamated.hpp>

#include "densescan/convert.hpp"
#include "densescan/oracle.hpp"

#include <algorithm>
#include <vector>

using namespace densescan;

namespace {

void check_err(ErrorCode expected, auto&& fn) {
    try {
        fn();
        FAIL("expected " << to_string(expected));
    } catch (const Error& e) {
        CHECK(e.code() == expected);
    }
}

std::string net_path(const char* name) { return std::string(DENSESCAN_NETS_DIR) + "/" + name; }

float encode(std::size_t c, std::size_t y, std::size_t x) { return static_cast<float>(c * 10000 + y * 100 + x); }

Tensor run_unwarp(const std::vector<PlanStep>& steps, Tensor t) {
    for (const auto& s : steps) t = apply_step(s, WeightSet{}, t);
    return t;
}

// Random patch network reaching 1x1, built backwards from the output.
NetworkSpec random_spec(SplitMix64& rng, std::size_t max_patch) {
    while (true) {
        NetworkSpec spec;
        spec.in_channels = 1 + rng.below(3);
        std::vector<LayerSpec> layers;
        std::size_t h = 1;
        std::size_t w = 1;
        const std::size_t pools = rng.below(4);
        for (std::size_t i = 0; i <= pools; ++i) {
            const std::size_t kh = 1 + rng.below(3);
            const std::size_t kw = 1 + rng.below(3);
            if (rng.below(2)) layers.insert(layers.begin(), ActivationLayer{rng.below(2) ? ActivationKind::tanh
                                                                                         : ActivationKind::relu});
            layers.insert(layers.begin(), ConvLayer{1 + rng.below(4), {kh, kw}});
            h += kh - 1;
            w += kw - 1;
            if (i < pools) {
                const Size2 s{2 + rng.below(3), 2 + rng.below(3)};
                layers.insert(layers.begin(), PoolLayer{rng.below(2) ? PoolKind::max : PoolKind::mean, s, s});
                h *= s.h;
                w *= s.w;
            }
        }
        // the front layer must be a conv so the first pool sees conv output
        const std::size_t k = 1 + rng.below(3);
        layers.insert(layers.begin(), ConvLayer{1 + rng.below(4), {k, k}});
        h += k - 1;
        w += k - 1;
        if (h > max_patch || w > max_patch) continue;
        spec.patch = {h, w};
        spec.layers = layers;
        return spec;
    }
}

}  // namespace

TEST_CASE("strided conv decomposition preserves patch outputs", "[convert]") {
    const NetworkSpec spec = load_network(net_path("strided.json"));
    const NetworkSpec split = decompose_strided_convs(spec);
    CHECK(split.layers.size() == spec.layers.size() + 1);
    const auto& pool = std::get<PoolLayer>(split.layers[1]);
    CHECK(pool.kind == PoolKind::subsample);
    CHECK(pool.window == Size2{1, 1});
    CHECK(pool.stride == Size2{2, 2});
    CHECK(infer_shapes(split).back() == infer_shapes(spec).back());

    const WeightSet w = init_weights(spec, 4);
    Tensor batch = random_tensor(Shape{6, spec.in_channels, spec.patch.h, spec.patch.w}, 8);
    CHECK(bit_equal(run_patches(spec, w, batch), run_patches(split, w, batch)));
}

TEST_CASE("solve_padding", "[convert]") {
    // single pool of 2 on a 2x2 patch over a 4x4 image needs nothing extra
    NetworkSpec pool2{{2, 2}, 1, {PoolLayer{PoolKind::max, {2, 2}, {2, 2}}}};
    CHECK(solve_padding(pool2, {4, 4}) == Size2{0, 0});
    NetworkSpec plain = load_network(net_path("plain.json"));
    CHECK(solve_padding(plain, {13, 9}) == Size2{0, 0});

    const NetworkSpec appendix = load_network(net_path("appendix.json"));
    const DensePlan plan = compile(appendix, {48, 72});
    CHECK(plan.extra_pad == Size2{0, 0});
    CHECK(plan.output_shape() == Shape{128, 48, 72});
    // before the crop the unwarped map covers exactly the image
    CHECK(plan.steps[plan.steps.size() - 2].output == Shape{128, 48, 72});

    check_err(ErrorCode::InvalidArgument, [&] { (void)solve_padding(load_network(net_path("strided.json")), {9, 9}); });
}

TEST_CASE("solve_padding satisfies the multipool rule at every pool", "[convert][property]") {
    SplitMix64 rng(101);
    for (int trial = 0; trial < 60; ++trial) {
        const NetworkSpec spec = random_spec(rng, 40);
        const Size2 image{1 + rng.below(50), 1 + rng.below(50)};
        CAPTURE(network_to_json(spec).dump(), image.h, image.w);
        const DensePlan plan = compile(spec, image);
        for (const auto& s : plan.steps) {
            if (const auto* mp = std::get_if<step::Multipool>(&s.op)) {
                CHECK(shifts_agree(s.input[2], mp->window.h, mp->stride.h));
                CHECK(shifts_agree(s.input[3], mp->window.w, mp->stride.w));
            }
        }
        const Shape& unwarped = plan.steps[plan.steps.size() - 2].output;
        CHECK(unwarped[1] >= image.h);
        CHECK(unwarped[2] >= image.w);
        // extra padding stays below one full period of the stride product
        std::size_t ph = 1, pw = 1;
        for (Size2 s : plan.m_ledger) {
            ph *= s.h;
            pw *= s.w;
        }
        CHECK(plan.extra_pad.h < ph * ph);
        CHECK(plan.extra_pad.w < pw * pw);
    }
}

TEST_CASE("compile step sequences", "[convert]") {
    const DensePlan flat = compile(load_network(net_path("plain.json")), {10, 20});
    for (const auto& s : flat.steps) {
        CHECK_FALSE(std::holds_alternative<step::UnwarpPrepare>(s.op));
        CHECK_FALSE(std::holds_alternative<step::UnwarpPool>(s.op));
        CHECK_FALSE(std::holds_alternative<step::Multipool>(s.op));
        if (s.input.rank() == 4) CHECK(s.input[0] == 1);
    }
    CHECK(flat.m_sizes().empty());
    CHECK(flat.output_shape() == Shape{4, 10, 20});

    const DensePlan plan = compile(load_network(net_path("appendix.json")), {48, 72});
    std::vector<Size2> unwarp;
    std::size_t multipools = 0;
    for (const auto& s : plan.steps) {
        multipools += std::holds_alternative<step::Multipool>(s.op);
        if (const auto* u = std::get_if<step::UnwarpPool>(&s.op)) unwarp.push_back(u->stride);
    }
    CHECK(multipools == 3);
    CHECK(unwarp == std::vector<Size2>{{4, 4}, {3, 3}, {2, 2}});
    CHECK(plan.m_sizes() == std::vector<std::size_t>{4, 36, 576});
    CHECK(std::holds_alternative<step::Pad>(plan.steps.front().op));
    CHECK(std::holds_alternative<step::Crop>(plan.steps.back().op));

    // consecutive steps chain shapes
    for (std::size_t i = 1; i < plan.steps.size(); ++i) CHECK(plan.steps[i].input == plan.steps[i - 1].output);
}

TEST_CASE("build_unwarp shapes for one pool", "[convert]") {
    const std::vector<Size2> ledger{{2, 3}};
    const auto steps = build_unwarp(ledger, 4, 5, 7);
    REQUIRE(steps.size() == 2);
    CHECK(steps[0].input == Shape{6, 7, 4, 5});
    CHECK(steps[0].output == Shape{7, 4, 5, 2, 3});
    CHECK(steps[1].output == Shape{7, 8, 15});
    CHECK(build_unwarp(std::vector<Size2>{}, 4, 5, 7).empty());
}

TEST_CASE("unwarp places every multipool sample at its pixel", "[convert]") {
    SECTION("one pool") {
        const Size2 s{2, 3};
        const std::size_t k = 2, ys = 3, xs = 4;
        Buffer data(s.area() * k * ys * xs);
        for (std::size_t y1 = 0; y1 < s.h; ++y1)
            for (std::size_t x1 = 0; x1 < s.w; ++x1)
                for (std::size_t c = 0; c < k; ++c)
                    for (std::size_t a = 0; a < ys; ++a)
                        for (std::size_t b = 0; b < xs; ++b) {
                            const std::size_t m = y1 * s.w + x1;
                            data[((m * k + c) * ys + a) * xs + b] = encode(c, a * s.h + y1, b * s.w + x1);
                        }
        const std::vector<Size2> ledger{s};
        Tensor out = run_unwarp(build_unwarp(ledger, ys, xs, k), Tensor(Shape{s.area(), k, ys, xs}, std::move(data)));
        REQUIRE(out.shape() == Shape{k, ys * s.h, xs * s.w});
        for (std::size_t c = 0; c < k; ++c)
            for (std::size_t y = 0; y < out.dim(1); ++y)
                for (std::size_t x = 0; x < out.dim(2); ++x) CHECK(out.at({c, y, x}) == encode(c, y, x));
    }
    SECTION("two pools") {
        const Size2 s1{2, 2};
        const Size2 s2{3, 2};
        const std::size_t k = 2, ys = 2, xs = 3;
        const std::size_t m1 = s1.area();
        Buffer data(m1 * s2.area() * k * ys * xs);
        for (std::size_t y2 = 0; y2 < s2.h; ++y2)
            for (std::size_t x2 = 0; x2 < s2.w; ++x2)
                for (std::size_t y1 = 0; y1 < s1.h; ++y1)
                    for (std::size_t x1 = 0; x1 < s1.w; ++x1)
                        for (std::size_t c = 0; c < k; ++c)
                            for (std::size_t a = 0; a < ys; ++a)
                                for (std::size_t b = 0; b < xs; ++b) {
                                    const std::size_t m = (y2 * s2.w + x2) * m1 + y1 * s1.w + x1;
                                    const std::size_t y = (a * s2.h + y2) * s1.h + y1;
                                    const std::size_t x = (b * s2.w + x2) * s1.w + x1;
                                    data[((m * k + c) * ys + a) * xs + b] = encode(c, y, x);
                                }
        const std::vector<Size2> ledger{s1, s2};
        Tensor out = run_unwarp(build_unwarp(ledger, ys, xs, k),
                                Tensor(Shape{m1 * s2.area(), k, ys, xs}, std::move(data)));
        REQUIRE(out.shape() == Shape{k, ys * s1.h * s2.h, xs * s1.w * s2.w});
        for (std::size_t c = 0; c < k; ++c)
            for (std::size_t y = 0; y < out.dim(1); ++y)
                for (std::size_t x = 0; x < out.dim(2); ++x) CHECK(out.at({c, y, x}) == encode(c, y, x));
    }
}

TEST_CASE("unwarp is a permutation", "[convert][property]") {
    SplitMix64 rng(55);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Size2> ledger;
        std::size_t m = 1;
        for (std::size_t i = 0, n = 1 + rng.below(3); i < n; ++i) {
            ledger.push_back({1 + rng.below(3), 1 + rng.below(3)});
            m *= ledger.back().area();
        }
        const std::size_t k = 1 + rng.below(3), ys = 1 + rng.below(3), xs = 1 + rng.below(3);
        Tensor in = random_tensor(Shape{m, k, ys, xs}, rng.next());
        Tensor out = run_unwarp(build_unwarp(ledger, ys, xs, k), in);
        CHECK(out.size() == in.size());
        std::vector<float> a(in.values().begin(), in.values().end());
        std::vector<float> b(out.values().begin(), out.values().end());
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        CHECK(a == b);
    }
}

TEST_CASE("M ledger multiplies strides", "[convert][property]") {
    SplitMix64 rng(66);
    for (int trial = 0; trial < 20; ++trial) {
        const NetworkSpec spec = random_spec(rng, 48);
        const DensePlan plan = compile(spec, {20, 20});
        std::size_t m = 1;
        std::size_t i = 0;
        for (const auto& s : plan.steps) {
            if (std::holds_alternative<step::Multipool>(s.op)) {
                m *= plan.m_ledger[i].area();
                CHECK(s.output[0] == m);
                CHECK(plan.m_sizes()[i] == m);
                ++i;
            }
        }
        CHECK(i == plan.m_ledger.size());
    }
}

TEST_CASE("memory estimate", "[convert]") {
    const NetworkSpec identity{{1, 1}, 3, {}};
    CHECK(estimate_memory(compile(identity, {10, 7})) == 2 * 3 * 10 * 7 * 4);

    const NetworkSpec spec = load_network(net_path("mean16.json"));
    const double small = static_cast<double>(estimate_memory(compile(spec, {40, 40})));
    const double large = static_cast<double>(estimate_memory(compile(spec, {80, 80})));
    CHECK(large / small >= 4.0 / 2.0);
    CHECK(large / small <= 4.0 * 2.0);
}

TEST_CASE("memory estimate bounds the measured peak", "[convert]") {
    for (const char* name : {"mean16.json", "strided.json", "plain.json", "appendix_small.json"}) {
        const NetworkSpec spec = load_network(net_path(name));
        const WeightSet w = init_weights(spec, 1);
        const Size2 size{37, 45};
        const DensePlan plan = compile(spec, size);
        Tensor image = random_tensor(Shape{spec.in_channels, size.h, size.w}, 2);
        const auto baseline = memory::live_bytes() - image.bytes();
        memory::reset_peak();
        Tensor out = execute(plan, w, std::move(image));
        const auto measured = memory::peak_bytes() - baseline;
        CAPTURE(name, measured, estimate_memory(plan));
        CHECK(measured <= estimate_memory(plan));
    }
}

TEST_CASE("dense FLOPs undercut per-patch FLOPs", "[convert]") {
    const NetworkSpec spec = load_network(net_path("appendix.json"));
    const std::uint64_t dense = count_flops(spec, Dense{{48, 72}});
    CHECK(dense == 4196037312ull);
    CHECK(count_flops(spec, PerPatch{}) == 123136768ull);
    CHECK(redundancy_ratio(spec, {48, 72}) > 100.0);
}

TEST_CASE("tiling", "[convert]") {
    const NetworkSpec spec = load_network(net_path("mean16.json"));
    const WeightSet w = init_weights(spec, 3);
    const Size2 size{30, 41};
    const DensePlan plan = compile(spec, size);
    const Tensor image = random_tensor(Shape{spec.in_channels, size.h, size.w}, 4);
    const Tensor whole = execute(plan, w, image);

    const auto one = plan_tiles(plan, estimate_memory(plan));
    REQUIRE(one.size() == 1);
    CHECK(bit_equal(execute_tiled(plan, w, image, one), whole));

    const auto halves = plan_tiles_grid(plan, 1, 2);
    REQUIRE(halves.size() == 2);
    const Rect& left = halves[0].input;
    const Rect& right = halves[1].input;
    CHECK(left.x + static_cast<std::ptrdiff_t>(left.w) - right.x == static_cast<std::ptrdiff_t>(spec.patch.w - 1));
    CHECK(bit_equal(execute_tiled(plan, w, image, halves), whole));

    const auto budgeted = plan_tiles(plan, estimate_memory(plan) / 3);
    CHECK(budgeted.size() > 1);
    for (const Tile& t : budgeted)
        CHECK(estimate_memory(compile(plan.network, {t.output.h, t.output.w})) <= estimate_memory(plan) / 3);
    CHECK(bit_equal(execute_tiled(plan, w, image, budgeted), whole));

    check_err(ErrorCode::BudgetTooSmall, [&] { (void)plan_tiles(plan, 16); });
}

TEST_CASE("random networks match the per-patch oracle", "[convert][property]") {
    SplitMix64 rng(2718);
    for (int trial = 0; trial < 12; ++trial) {
        const NetworkSpec spec = random_spec(rng, 24);
        const Size2 size{8 + rng.below(20), 8 + rng.below(20)};
        CAPTURE(network_to_json(spec).dump(), size.h, size.w);
        const WeightSet w = init_weights(spec, rng.next());
        const Tensor image = random_tensor(Shape{spec.in_channels, size.h, size.w}, rng.next());
        const DiffReport r = compare(execute(compile(spec, size), w, image), dense_by_patches(spec, w, image), 1e-5f);
        CAPTURE(format_report(r));
        CHECK(r.pass);
    }
}

TEST_CASE("execute rejects mismatched inputs", "[convert]") {
    const NetworkSpec spec = load_network(net_path("plain.json"));
    const DensePlan plan = compile(spec, {9, 9});
    const WeightSet w = init_weights(spec, 1);
    check_err(ErrorCode::ShapeMismatch, [&] { (void)execute(plan, w, Tensor(Shape{2, 9, 8})); });
    check_err(ErrorCode::ShapeMismatch,
              [&] { (void)execute(plan, init_weights(load_network(net_path("mean16.json")), 1), Tensor(Shape{2, 9, 9})); });
}
