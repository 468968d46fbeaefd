#pragma once

// 8-bit grayscale image container plus OpenCV-backed file I/O. OpenCV stays
// behind this header; the rest of the library works on pmiris::Image.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "pmiris/common.hpp"

namespace pmiris {

struct Image {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> px;  // row-major

    Image() = default;
    Image(int r, int c, std::uint8_t fill = 0) : rows(r), cols(c), px(std::size_t(r) * c, fill) {}

    bool empty() const { return rows == 0 || cols == 0; }
    std::size_t size() const { return px.size(); }

    std::uint8_t& at(int r, int c) { return px[std::size_t(r) * cols + c]; }
    std::uint8_t at(int r, int c) const { return px[std::size_t(r) * cols + c]; }

    bool in_bounds(int r, int c) const { return r >= 0 && r < rows && c >= 0 && c < cols; }
};

inline cv::Mat to_mat(const Image& im) {
    cv::Mat m(im.rows, im.cols, CV_8UC1);
    std::memcpy(m.data, im.px.data(), im.px.size());
    return m;
}

inline Image from_mat(const cv::Mat& m) {
    require(m.type() == CV_8UC1, ErrKind::Internal, "from_mat expects CV_8UC1");
    Image im(m.rows, m.cols);
    if (m.isContinuous()) {
        std::memcpy(im.px.data(), m.data, im.px.size());
    } else {
        for (int r = 0; r < m.rows; ++r)
            std::memcpy(&im.px[std::size_t(r) * m.cols], m.ptr(r), std::size_t(m.cols));
    }
    return im;
}

// Loads an image that must decode to a single 8-bit channel.
inline Image load_image_gray(const std::string& path) {
    if (!std::filesystem::exists(path)) fail(ErrKind::Io, "image file not found: " + path);
    cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (m.empty()) fail(ErrKind::Io, "failed to decode image: " + path);
    if (m.channels() != 1 || m.depth() != CV_8U)
        fail(ErrKind::Validation, "image is not single-channel 8-bit grayscale: " + path);
    return from_mat(m);
}

inline void save_image_png(const Image& im, const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
    }
    if (!cv::imwrite(path, to_mat(im))) fail(ErrKind::Io, "failed to write image: " + path);
}

}  // namespace pmiris
