#pragma once

#include "densescan/convert.hpp"
#include "densescan/error.hpp"
#include "densescan/netspec.hpp"
#include "densescan/oracle.hpp"
#include "densescan/random.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

namespace densescan {

struct BenchRow {
    Size2 size;
    double dense_s = 0.0;
    double patch_s = 0.0;
    double speedup = 0.0;
    std::uint64_t dense_flops = 0;
    std::uint64_t patch_flops = 0;
    std::uint64_t peak_bytes = 0;
};

struct BenchOptions {
    std::size_t repeats = 5;
    std::size_t warmup = 1;
    std::uint64_t seed = 0;
    float tolerance = 1e-5f;
};

/// Median wall-clock seconds of `repeats` calls after `warmup` untimed calls.
inline double median_seconds(const std::function<void()>& fn, std::size_t repeats, std::size_t warmup) {
    for (std::size_t i = 0; i < warmup; ++i) fn();
    std::vector<double> samples;
    for (std::size_t i = 0; i < std::max<std::size_t>(1, repeats); ++i) {
        auto start = std::chrono::steady_clock::now();
        fn();
        samples.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    std::sort(samples.begin(), samples.end());
    const std::size_t n = samples.size();
    return n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
}

/// Times the image network against the batched per-patch baseline for each
/// size (rows returned by ascending area).
///
/// The baseline gets its patches pre-extracted, one batch per image row, so
/// only network processing is timed. Before any timing, one untimed pass of
/// both modes is compared; a mismatch beyond options.tolerance throws
/// VerificationFailed.
inline std::vector<BenchRow> time_modes(const NetworkSpec& spec, const WeightSet& weights, std::vector<Size2> sizes,
                                        const BenchOptions& options) {
    if (options.repeats == 0) throw Error(ErrorCode::InvalidArgument, "repeats must be >= 1");
    std::stable_sort(sizes.begin(), sizes.end(), [](Size2 a, Size2 b) { return a.area() < b.area(); });
    const std::uint64_t patch_flops = count_flops(spec, PerPatch{});
    const PatchGeometry g = spec.geometry();

    std::vector<BenchRow> rows;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        const Size2 size = sizes[i];
        const DensePlan plan = compile(spec, size);
        const Tensor image = random_tensor(Shape{spec.in_channels, size.h, size.w}, options.seed + i);

        std::vector<Tensor> batches;
        batches.reserve(size.h);
        for (std::size_t y = 0; y < size.h; ++y) batches.push_back(extract_patch_row(image, g, y));

        std::vector<Tensor> patch_out(size.h);
        auto run_baseline = [&] {
            for (std::size_t y = 0; y < size.h; ++y) patch_out[y] = run_patches(spec, weights, batches[y]);
        };
        Tensor dense_out;
        auto run_dense = [&] { dense_out = execute(plan, weights, image); };

        run_dense();
        run_baseline();
        Buffer assembled(plan.out_channels() * size.area());
        for (std::size_t y = 0; y < size.h; ++y) scatter_patch_row(patch_out[y], y, size.h, assembled);
        const DiffReport gate =
            compare(dense_out, Tensor(Shape{plan.out_channels(), size.h, size.w}, std::move(assembled)),
                    options.tolerance);
        if (!gate.pass)
            throw Error(ErrorCode::VerificationFailed, "dense output differs from per-patch output at " +
                                                           std::to_string(size.w) + "x" + std::to_string(size.h) +
                                                           ": " + format_report(gate));

        const std::size_t warmup = options.warmup > 0 ? options.warmup - 1 : 0;  // the gate pass counts as one
        BenchRow row;
        row.size = size;
        row.dense_s = median_seconds(run_dense, options.repeats, warmup);
        row.patch_s = median_seconds(run_baseline, options.repeats, warmup);
        row.speedup = row.dense_s > 0 ? row.patch_s / row.dense_s : 0.0;
        row.dense_flops = count_flops(plan);
        row.patch_flops = patch_flops * size.area();
        row.peak_bytes = estimate_memory(plan);
        rows.push_back(row);
    }
    return rows;
}

inline constexpr const char* kCsvHeader = "size_h,size_w,dense_s,patch_s,speedup,dense_flops,patch_flops,peak_bytes";

namespace detail {

template <typename T>
std::string locale_free(T value) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, end);
}

}  // namespace detail

/// CSV text with rows sorted by image area ascending. Numbers use '.' as the
/// decimal point regardless of the global locale.
inline std::string format_csv(std::vector<BenchRow> rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const BenchRow& a, const BenchRow& b) {
        return a.size.area() < b.size.area();
    });
    std::string out = std::string(kCsvHeader) + "\n";
    for (const auto& r : rows) {
        out += detail::locale_free(r.size.h) + "," + detail::locale_free(r.size.w) + "," +
               detail::locale_free(r.dense_s) + "," + detail::locale_free(r.patch_s) + "," +
               detail::locale_free(r.speedup) + "," + detail::locale_free(r.dense_flops) + "," +
               detail::locale_free(r.patch_flops) + "," + detail::locale_free(r.peak_bytes) + "\n";
    }
    return out;
}

inline void emit_csv(const std::vector<BenchRow>& rows, const std::string& path) {
    if (rows.empty()) throw Error(ErrorCode::InvalidArgument, "no benchmark rows to write");
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
    out << format_csv(rows);
    if (!out) throw Error(ErrorCode::IoError, "failed writing " + path);
}

}  // namespace densescan
