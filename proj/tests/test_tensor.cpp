#include <catch2/catch_amalgamated.hpp>

#include "densescan/random.hpp"
#include "densescan/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <vector>

using namespace densescan;

namespace {

Tensor iota(Shape shape) {
    Buffer data(shape.element_count());
    std::iota(data.begin(), data.end(), 0.0f);
    return Tensor(std::move(shape), std::move(data));
}

// Random shape of rank 1..5 with extents 1..5.
Shape random_shape(SplitMix64& rng) {
    std::vector<std::size_t> dims(1 + rng.below(5));
    for (auto& d : dims) d = 1 + rng.below(5);
    return Shape(dims);
}

std::vector<std::size_t> unravel(std::size_t linear, const Shape& s) {
    std::vector<std::size_t> idx(s.rank());
    for (std::size_t j = s.rank(); j-- > 0;) {
        idx[j] = linear % s[j];
        linear /= s[j];
    }
    return idx;
}

void check_err(ErrorCode expected, auto&& fn) {
    try {
        fn();
        FAIL("expected " << to_string(expected));
    } catch (const Error& e) {
        CHECK(e.code() == expected);
    }
}

}  // namespace

TEST_CASE("shape metadata and row-major strides", "[tensor]") {
    Shape s{2, 3, 4};
    CHECK(s.rank() == 3);
    CHECK(s.element_count() == 24);
    CHECK(s.strides() == std::vector<std::size_t>{12, 4, 1});
    check_err(ErrorCode::InvalidShape, [] { Shape bad{2, 0, 3}; });
    check_err(ErrorCode::ElementCountMismatch, [] { Tensor t(Shape{2, 2}, {1.0f, 2.0f, 3.0f}); });
}

TEST_CASE("linear index law", "[tensor][property]") {
    SplitMix64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Shape s = random_shape(rng);
        Tensor t = iota(s);
        auto strides = s.strides();
        for (int k = 0; k < 10; ++k) {
            auto idx = unravel(rng.below(t.size()), s);
            std::size_t expected = 0;
            for (std::size_t j = 0; j < idx.size(); ++j) expected += idx[j] * strides[j];
            CHECK(t.at(idx) == static_cast<float>(expected));
        }
    }
}

TEST_CASE("reshape reinterprets the same storage", "[tensor]") {
    Tensor t = iota(Shape{4, 6, 1});
    Tensor flat = reshape(t, Shape{24});
    CHECK(flat.shares_storage_with(t));
    CHECK(std::equal(flat.values().begin(), flat.values().end(), t.values().begin()));
    for (std::size_t i = 0; i < 24; ++i) CHECK(flat.at({i}) == static_cast<float>(i));

    // fusing (dim1, dim2) and (dim3, dim4) of (2,2,3,2,1)
    Tensor six = iota(Shape{2, 2, 3, 2, 1});
    Tensor fused = reshape(six, Shape{4, 6, 1});
    CHECK(fused.shape() == Shape{4, 6, 1});
    CHECK(bit_equal(reshape(fused, Shape{24}), reshape(six, Shape{24})));

    check_err(ErrorCode::ElementCountMismatch, [&] { (void)reshape(t, Shape{5, 5}); });
}

TEST_CASE("reshape round trip on random tensors", "[tensor][property]") {
    SplitMix64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        Shape s = random_shape(rng);
        Tensor t = random_tensor(s, rng.next());
        Tensor there = reshape(t, Shape{t.size()});
        CHECK(bit_equal(reshape(there, s), t));
    }
}

TEST_CASE("transpose of a matrix", "[tensor]") {
    Tensor m(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = transpose(m, 0, 1);
    CHECK(t.shape() == Shape{3, 2});
    std::vector<float> expected{1, 4, 2, 5, 3, 6};
    CHECK(std::equal(expected.begin(), expected.end(), t.values().begin()));
    CHECK(m.at({0, 1}) == 2.0f);  // input untouched

    check_err(ErrorCode::AxisOutOfRange, [&] { (void)transpose(m, 0, 2); });
    check_err(ErrorCode::AxisOutOfRange, [&] { (void)transpose(m, 1, 1); });
}

TEST_CASE("transpose index map (M, f*, k)", "[tensor]") {
    Tensor t = random_tensor(Shape{4, 6, 2}, 3);
    Tensor u = transpose(t, 0, 1);
    REQUIRE(u.shape() == Shape{6, 4, 2});
    for (std::size_t m = 0; m < 4; ++m)
        for (std::size_t f = 0; f < 6; ++f)
            for (std::size_t c = 0; c < 2; ++c) {
                // linearized offsets: in (m*6+f)*2+c, out (f*4+m)*2+c
                CHECK(u.values()[(f * 4 + m) * 2 + c] == t.values()[(m * 6 + f) * 2 + c]);
            }
}

TEST_CASE("transpose is an involution preserving values", "[tensor][property]") {
    SplitMix64 rng(17);
    for (int trial = 0; trial < 40; ++trial) {
        Shape s = random_shape(rng);
        if (s.rank() < 2) continue;
        std::size_t a = rng.below(s.rank());
        std::size_t b = (a + 1 + rng.below(s.rank() - 1)) % s.rank();
        Tensor t = random_tensor(s, rng.next());
        Tensor u = transpose(t, a, b);

        // element law at random positions
        for (int k = 0; k < 8; ++k) {
            auto idx = unravel(rng.below(t.size()), s);
            auto swapped = idx;
            std::swap(swapped[a], swapped[b]);
            CHECK(u.at(swapped) == t.at(idx));
        }
        CHECK(bit_equal(transpose(u, a, b), t));

        std::vector<float> x(t.values().begin(), t.values().end());
        std::vector<float> y(u.values().begin(), u.values().end());
        std::sort(x.begin(), x.end());
        std::sort(y.begin(), y.end());
        CHECK(x == y);
    }
}

TEST_CASE("pad fills and preserves", "[tensor]") {
    Tensor t(Shape{2}, {1, 2});
    Tensor p = pad(t, 0, 1, 0, 0.0f);
    std::vector<float> expected{0, 1, 2};
    CHECK(std::equal(expected.begin(), expected.end(), p.values().begin()));

    // patch 64: rows padded by ceil(63/2) before and floor(63/2) after
    Tensor img = Tensor::filled(Shape{1, 3, 5, 5}, 1.0f);
    Tensor rows = pad(img, 2, 32, 31, 0.0f);
    CHECK(rows.shape() == Shape{1, 3, 68, 5});
    CHECK(rows.at({0, 0, 31, 0}) == 0.0f);
    CHECK(rows.at({0, 0, 32, 0}) == 1.0f);
    CHECK(rows.at({0, 0, 36, 4}) == 1.0f);
    CHECK(rows.at({0, 0, 37, 4}) == 0.0f);

    check_err(ErrorCode::AxisOutOfRange, [&] { (void)pad(t, 1, 1, 1, 0.0f); });
}

TEST_CASE("crop", "[tensor]") {
    Tensor t(Shape{4}, {0, 1, 2, 3});
    Tensor c = crop(t, 0, 1, 2);
    CHECK(c.shape() == Shape{2});
    CHECK(c.at({0}) == 1.0f);
    CHECK(c.at({1}) == 2.0f);
    check_err(ErrorCode::RangeOutOfBounds, [&] { (void)crop(t, 0, 3, 2); });
    check_err(ErrorCode::AxisOutOfRange, [&] { (void)crop(t, 2, 0, 1); });
}

TEST_CASE("crop undoes pad", "[tensor][property]") {
    SplitMix64 rng(23);
    for (int trial = 0; trial < 40; ++trial) {
        Shape s = random_shape(rng);
        Tensor t = random_tensor(s, rng.next());
        std::size_t axis = rng.below(s.rank());
        std::size_t before = rng.below(4);
        std::size_t after = rng.below(4);
        Tensor p = pad(t, axis, before, after, 7.5f);
        CHECK(p.dim(axis) == s[axis] + before + after);
        CHECK(bit_equal(crop(p, axis, before, s[axis]), t));
    }
}

TEST_CASE("spatial pad and crop agree with the per-axis ops", "[tensor]") {
    Tensor t = random_tensor(Shape{2, 3, 4, 5}, 9);
    Tensor both = pad_spatial(t, 1, 2, 3, 0, -1.0f);
    CHECK(bit_equal(both, pad(pad(t, 2, 1, 2, -1.0f), 3, 3, 0, -1.0f)));
    CHECK(bit_equal(crop_spatial(both, 1, 4, 3, 5), t));
    CHECK(bit_equal(crop_spatial(t, 1, 2, 0, 3), crop(crop(t, 2, 1, 2), 3, 0, 3)));
}

TEST_CASE("concat stacks blocks in order", "[tensor]") {
    Tensor a(Shape{1}, {1});
    Tensor b(Shape{1}, {2});
    Tensor ab = concat({a, b}, 0);
    CHECK(ab.shape() == Shape{2});
    CHECK(ab.at({0}) == 1.0f);
    CHECK(ab.at({1}) == 2.0f);

    std::vector<Tensor> shifts;
    for (int i = 0; i < 4; ++i) shifts.push_back(random_tensor(Shape{1, 3, 5, 6}, i));
    Tensor stacked = concat(shifts, 0);
    CHECK(stacked.shape() == Shape{4, 3, 5, 6});

    check_err(ErrorCode::ShapeMismatch, [] {
        (void)concat({Tensor(Shape{1, 2}), Tensor(Shape{1, 3})}, 0);
    });
}

TEST_CASE("concat then crop recovers each block", "[tensor][property]") {
    SplitMix64 rng(31);
    for (int trial = 0; trial < 30; ++trial) {
        Shape base = random_shape(rng);
        std::size_t axis = rng.below(base.rank());
        std::vector<Tensor> parts;
        for (std::size_t i = 0, n = 1 + rng.below(4); i < n; ++i) {
            auto dims = base.dims();
            dims[axis] = 1 + rng.below(4);
            parts.push_back(random_tensor(Shape(dims), rng.next()));
        }
        Tensor joined = concat(parts, axis);
        std::size_t start = 0;
        for (const Tensor& p : parts) {
            CHECK(bit_equal(crop(joined, axis, start, p.dim(axis)), p));
            start += p.dim(axis);
        }
        CHECK(start == joined.dim(axis));
    }
}

TEST_CASE("dtns stream format", "[tensor][io]") {
    Tensor t = random_tensor(Shape{2, 3, 4}, 1);
    std::stringstream buf;
    write_dtns(buf, t);
    const std::string bytes = buf.str();
    REQUIRE(bytes.size() == 4 + 4 + 4 + 3 * 8 + 24 * 4);
    CHECK(bytes.substr(0, 4) == "DTNS");
    CHECK(bytes[4] == 1);  // version, little-endian
    CHECK(bytes[8] == 3);  // ndim
    CHECK(bytes[12] == 2);
    CHECK(bytes[20] == 3);
    CHECK(bytes[28] == 4);
    CHECK(bit_equal(read_dtns(buf), t));

    std::stringstream bad("DTNX....");
    check_err(ErrorCode::FormatError, [&] { (void)read_dtns(bad); });
    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    check_err(ErrorCode::FormatError, [&] { (void)read_dtns(truncated); });
}

TEST_CASE("allocation tracking sees tensor storage", "[tensor]") {
    const auto before = memory::live_bytes();
    {
        Tensor t(Shape{1000});
        CHECK(memory::live_bytes() - before == 4000);
        Tensor view = reshape(t, Shape{10, 100});
        CHECK(memory::live_bytes() - before == 4000);
    }
    CHECK(memory::live_bytes() == before);
}
