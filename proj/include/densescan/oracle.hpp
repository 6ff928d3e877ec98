#pragma once

#include "densescan/error.hpp"
#include "densescan/netspec.hpp"
#include "densescan/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <string>
#include <vector>

namespace densescan {

/// All patches centred on pixels of image row y, as a (I_w, c, P_h, P_w) batch
/// with zeros outside the image. Patch x covers rows y - pad_top ... y + pad_bottom
/// and cols x - pad_left ... x + pad_right.
inline Tensor extract_patch_row(const Tensor& image, const PatchGeometry& g, std::size_t y) {
    if (image.rank() != 3) throw Error(ErrorCode::ShapeMismatch, "expected a (c, H, W) image");
    const std::size_t c = image.dim(0);
    const std::size_t ih = image.dim(1);
    const std::size_t iw = image.dim(2);
    const std::size_t ph = g.patch.h;
    const std::size_t pw = g.patch.w;
    Buffer out(iw * c * ph * pw, 0.0f);
    for (std::size_t x = 0; x < iw; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t r = 0; r < ph; ++r) {
                // padded-image row y + r is original row y + r - pad_top
                if (y + r < g.pad_top || y + r - g.pad_top >= ih) continue;
                const std::size_t sy = y + r - g.pad_top;
                for (std::size_t q = 0; q < pw; ++q) {
                    if (x + q < g.pad_left || x + q - g.pad_left >= iw) continue;
                    const std::size_t sx = x + q - g.pad_left;
                    out[((x * c + ch) * ph + r) * pw + q] = image.data()[(ch * ih + sy) * iw + sx];
                }
            }
    return Tensor(Shape{iw, c, ph, pw}, std::move(out));
}

/// Places a (I_w, k) batch result as row y of a (k, I_h, I_w) buffer.
inline void scatter_patch_row(const Tensor& row_result, std::size_t y, std::size_t image_h, Buffer& out) {
    const std::size_t iw = row_result.dim(0);
    const std::size_t k = row_result.dim(1);
    for (std::size_t x = 0; x < iw; ++x)
        for (std::size_t ch = 0; ch < k; ++ch) out[(ch * image_h + y) * iw + x] = row_result.data()[x * k + ch];
}

/// Ground truth: the patch network run independently on the patch of every
/// pixel (one image row per batch, rows in order). Returns (k, I_h, I_w).
inline Tensor dense_by_patches(const NetworkSpec& spec, const WeightSet& weights, const Tensor& image) {
    const Tensor img = image.rank() == 4 ? reshape(image, Shape{image.dim(1), image.dim(2), image.dim(3)}) : image;
    if (img.rank() != 3 || img.dim(0) != spec.in_channels)
        throw Error(ErrorCode::ShapeMismatch, "image " + image.shape().str() + " does not match the network input");
    const std::size_t ih = img.dim(1);
    const std::size_t iw = img.dim(2);
    const std::size_t k = spec.out_channels();
    const PatchGeometry g = spec.geometry();
    Buffer out(k * ih * iw);
    for (std::size_t y = 0; y < ih; ++y)
        scatter_patch_row(run_patches(spec, weights, extract_patch_row(img, g, y)), y, ih, out);
    return Tensor(Shape{k, ih, iw}, std::move(out));
}

struct Location {
    std::size_t channel = 0;
    std::size_t y = 0;
    std::size_t x = 0;
};

struct DiffReport {
    float max_abs_diff = 0.0f;
    Location argmax;
    std::size_t num_exceeding = 0;  // elements with |diff| > tol
    float tolerance = 0.0f;
    bool pass = true;
};

/// Elementwise |dense - reference| on (k, H, W) tensors. NaN counts as an
/// infinite difference.
inline DiffReport compare(const Tensor& dense, const Tensor& reference, float tol) {
    if (dense.shape() != reference.shape())
        throw Error(ErrorCode::ShapeMismatch, dense.shape().str() + " vs " + reference.shape().str());
    if (dense.rank() != 3) throw Error(ErrorCode::ShapeMismatch, "compare expects (k, H, W) tensors");
    DiffReport report;
    report.tolerance = tol;
    const std::size_t h = dense.dim(1);
    const std::size_t w = dense.dim(2);
    std::size_t worst = 0;
    for (std::size_t i = 0; i < dense.size(); ++i) {
        float d = std::fabs(dense.data()[i] - reference.data()[i]);
        if (std::isnan(d)) d = INFINITY;
        if (d > tol) ++report.num_exceeding;
        if (d > report.max_abs_diff) {
            report.max_abs_diff = d;
            worst = i;
        }
    }
    report.argmax = {worst / (h * w), (worst / w) % h, worst % w};
    report.pass = report.max_abs_diff <= tol;
    return report;
}

inline std::string format_report(const DiffReport& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "max_abs_diff=%.9g at (c=%zu,y=%zu,x=%zu) exceeding=%zu tol=%.3g %s",
                  static_cast<double>(r.max_abs_diff), r.argmax.channel, r.argmax.y, r.argmax.x, r.num_exceeding,
                  static_cast<double>(r.tolerance), r.pass ? "PASS" : "FAIL");
    return buf;
}

}  // namespace densescan
