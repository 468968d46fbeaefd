#pragma once

// Raw annotated eye image -> cropped_masked square -> network input tensor.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/imgproc.hpp>

#include "pmiris/common.hpp"
#include "pmiris/dataset.hpp"
#include "pmiris/image.hpp"

namespace pmiris {

// Crops the axis-aligned square of side ceil(2*margin_factor*radius) centered
// on the rounded annotation center and zeroes every pixel strictly farther
// than margin_factor*radius from that center. Pixels inside the circle
// (pupil included) are copied unchanged; square regions outside the source
// frame are zero-filled.
inline Image crop_and_mask(const Image& image, const IrisAnnotation& ann, double margin_factor = 1.2) {
    require(margin_factor >= 1.0, ErrKind::Config, "margin_factor must be >= 1");
    require(!image.empty(), ErrKind::Config, "crop_and_mask: empty image");
    require(ann.radius_ri > 0.0, ErrKind::Validation, "crop_and_mask: radius_Ri must be > 0");
    const int cx = int(std::lround(ann.center_x));
    const int cy = int(std::lround(ann.center_y));
    if (cx < 0 || cx >= image.cols || cy < 0 || cy >= image.rows)
        fail(ErrKind::Consistency, "crop_and_mask: annotation center lies outside the image");

    const double mask_r = margin_factor * ann.radius_ri;
    const double mask_r2 = mask_r * mask_r;
    const int side = int(std::ceil(2.0 * mask_r));
    const int half = side / 2;
    const int y0 = cy - half;
    const int x0 = cx - half;

    Image out(side, side, 0);
    for (int r = 0; r < side; ++r) {
        const int sy = y0 + r;
        const double dy = double(sy - cy);
        for (int c = 0; c < side; ++c) {
            const int sx = x0 + c;
            const double dx = double(sx - cx);
            if (dx * dx + dy * dy > mask_r2) continue;        // outside the mask circle
            if (!image.in_bounds(sy, sx)) continue;           // off-frame, stays zero
            out.at(r, c) = image.at(sy, sx);
        }
    }
    return out;
}

// Per-channel normalization recipe applied after grayscale replication.
struct NormalizationRecipe {
    std::string name = "imagenet_rgb_v1";
    float mean[3] = {0.485f, 0.456f, 0.406f};
    float stddev[3] = {0.229f, 0.224f, 0.225f};
};

inline std::string normalization_tag(const NormalizationRecipe& r, int target_size) {
    char buf[192];
    std::snprintf(buf, sizeof(buf),
                  "gray8|bilinear%dx%d|rep3|(x/255-mean)/std|mean=%.3f,%.3f,%.3f|std=%.3f,%.3f,%.3f|%s",
                  target_size, target_size, r.mean[0], r.mean[1], r.mean[2], r.stddev[0], r.stddev[1],
                  r.stddev[2], r.name.c_str());
    return buf;
}

struct NetworkInput {
    int size = 0;                 // spatial side S
    std::vector<float> chw;       // 3 x S x S
    std::string normalization_tag;

    float at(int ch, int r, int c) const { return chw[(std::size_t(ch) * size + r) * size + c]; }
};

// Bilinear resize in the 8-bit domain (constant regions survive exactly),
// grayscale replicated to three channels, then the recipe's normalization.
inline NetworkInput prepare_for_network(const Image& image, int target_size,
                                        const NormalizationRecipe& recipe = {}) {
    require(target_size > 0, ErrKind::Config, "target_size must be positive");
    require(!image.empty(), ErrKind::Config, "prepare_for_network: empty image");

    cv::Mat resized;
    cv::Mat src = to_mat(image);
    if (image.rows == target_size && image.cols == target_size) {
        resized = src;
    } else {
        cv::resize(src, resized, cv::Size(target_size, target_size), 0, 0, cv::INTER_LINEAR);
    }

    NetworkInput out;
    out.size = target_size;
    out.normalization_tag = normalization_tag(recipe, target_size);
    out.chw.resize(std::size_t(3) * target_size * target_size);
    const std::size_t plane = std::size_t(target_size) * target_size;
    for (int ch = 0; ch < 3; ++ch) {
        const float m = recipe.mean[ch];
        const float inv_sd = 1.0f / recipe.stddev[ch];
        float* dst = out.chw.data() + ch * plane;
        for (int r = 0; r < target_size; ++r) {
            const std::uint8_t* srow = resized.ptr<std::uint8_t>(r);
            for (int c = 0; c < target_size; ++c)
                dst[std::size_t(r) * target_size + c] = (float(srow[c]) / 255.0f - m) * inv_sd;
        }
    }
    return out;
}

inline std::uint64_t input_digest(const NetworkInput& in) {
    std::uint64_t h = fnv1a64(&in.size, sizeof(in.size));
    return fnv1a64(in.chw.data(), in.chw.size() * sizeof(float), h);
}

// Writes cropped_masked versions of every record into a mirror directory
// (same filenames) for visual inspection.
inline std::vector<std::string> dump_cropped_masked(const Dataset& ds, const std::string& out_dir,
                                                    double margin_factor = 1.2) {
    std::vector<std::string> written;
    for (const auto& r : ds.records) {
        Image im = load_image_gray(r.image_path);
        Image cm = crop_and_mask(im, r.annotation, margin_factor);
        std::filesystem::path dst = std::filesystem::path(out_dir) /
                                    std::filesystem::path(r.image_path).filename();
        save_image_png(cm, dst.string());
        written.push_back(dst.string());
    }
    return written;
}

}  // namespace pmiris
