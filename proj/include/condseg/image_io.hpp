#pragma once

#include <csetjmp>
#include <cstdio>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "condseg/tensor.hpp"

namespace condseg {

namespace iodetail {

struct FileHandle {
    std::FILE* f = nullptr;
    explicit FileHandle(const std::string& path, const char* mode)
        : f(std::fopen(path.c_str(), mode)) {}
    ~FileHandle() {
        if (f) std::fclose(f);
    }
    FileHandle(const FileHandle&) = delete;
    FileHandle& operator=(const FileHandle&) = delete;
};

// Decodes to interleaved RGB8.
inline void read_png_rgb8(const std::string& path, std::vector<unsigned char>& rgb,
                          int& width, int& height) {
    FileHandle fh(path, "rb");
    if (!fh.f) throw std::runtime_error("cannot open image: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                             nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("unreadable PNG file: " + path);
    }
    png_init_io(png, fh.f);
    png_read_info(png, info);

    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    rgb.resize(static_cast<std::size_t>(width) * height * 3);
    std::vector<png_bytep> rows(height);
    for (int i = 0; i < height; ++i)
        rows[i] = rgb.data() + static_cast<std::size_t>(i) * width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
}

struct JpegErrorMgr {
    jpeg_error_mgr pub;
    std::jmp_buf jmp;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    std::longjmp(err->jmp, 1);
}

inline void read_jpeg_rgb8(const std::string& path, std::vector<unsigned char>& rgb,
                           int& width, int& height) {
    FileHandle fh(path, "rb");
    if (!fh.f) throw std::runtime_error("cannot open image: " + path);
    jpeg_decompress_struct cinfo;
    JpegErrorMgr jerr;
    cinfo.err = jpeg_std_error(&jerr.pub);
    jerr.pub.error_exit = jpeg_error_exit;
    if (setjmp(jerr.jmp)) {
        jpeg_destroy_decompress(&cinfo);
        throw std::runtime_error("unreadable JPEG file: " + path);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, fh.f);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    width = static_cast<int>(cinfo.output_width);
    height = static_cast<int>(cinfo.output_height);
    rgb.resize(static_cast<std::size_t>(width) * height * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        unsigned char* row =
            rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
}

inline bool ends_with_ci(const std::string& s, const std::string& suf) {
    if (s.size() < suf.size()) return false;
    for (std::size_t i = 0; i < suf.size(); ++i) {
        char a = s[s.size() - suf.size() + i], b = suf[i];
        if (std::tolower(static_cast<unsigned char>(a)) != b) return false;
    }
    return true;
}

}  // namespace iodetail

// RGB image in [0,1], shape (1,3,H,W). PNG and JPEG supported.
inline Tensor<float> read_image_rgb(const std::string& path) {
    std::vector<unsigned char> rgb;
    int w = 0, h = 0;
    if (iodetail::ends_with_ci(path, ".png"))
        iodetail::read_png_rgb8(path, rgb, w, h);
    else if (iodetail::ends_with_ci(path, ".jpg") ||
             iodetail::ends_with_ci(path, ".jpeg"))
        iodetail::read_jpeg_rgb8(path, rgb, w, h);
    else
        throw std::runtime_error("unsupported image format: " + path);
    Tensor<float> out({1, 3, h, w});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                out.at(0, c, i, j) =
                    rgb[(static_cast<std::size_t>(i) * w + j) * 3 + c] / 255.f;
    return out;
}

// Grayscale (channel mean) in [0,1], shape (1,1,H,W). Used for masks.
inline Tensor<float> read_image_gray(const std::string& path) {
    Tensor<float> rgb = read_image_rgb(path);
    Tensor<float> out({1, 1, rgb.shape.h, rgb.shape.w});
    const std::size_t hw = static_cast<std::size_t>(rgb.shape.h) * rgb.shape.w;
    for (std::size_t i = 0; i < hw; ++i)
        out.data[i] = (rgb.data[i] + rgb.data[hw + i] + rgb.data[2 * hw + i]) / 3.f;
    return out;
}

// 8-bit grayscale PNG; input values in [0,1] are scaled to 0..255.
inline void write_png_gray(const std::string& path, const Tensor<float>& img) {
    require(img.shape.n == 1 && img.shape.c == 1,
            "write_png_gray: expects (1,1,H,W)");
    const int h = img.shape.h, w = img.shape.w;
    iodetail::FileHandle fh(path, "wb");
    if (!fh.f) throw std::runtime_error("cannot write image: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                              nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("PNG write failed: " + path);
    }
    png_init_io(png, fh.f);
    png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(w);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            float v = std::clamp(img.at(0, 0, i, j), 0.f, 1.f);
            row[j] = static_cast<unsigned char>(std::lround(v * 255.f));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace condseg
