#pragma once

// 8-bit PNG frame IO (libpng simplified API). Byte 0..255 maps to [-1, 1]
// via v = byte/127.5 - 1, which round-trips exactly.

#include <cmath>
#include <cstring>
#include <filesystem>
#include <vector>

#include <png.h>

#include "roma/embedding.hpp"
#include "roma/errors.hpp"

namespace roma {

inline Frame read_png(const std::filesystem::path& path) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw LoadError("read_png: " + path.string() + ": " + img.message);
    bool gray = PNG_IMAGE_PIXEL_CHANNELS(img.format) == 1;
    img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    int channels = gray ? 1 : 3;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr))
        throw LoadError("read_png: " + path.string() + ": " + img.message);

    Frame f = Frame::make(static_cast<int>(img.height), static_cast<int>(img.width), channels);
    for (int y = 0; y < f.height; ++y)
        for (int x = 0; x < f.width; ++x)
            for (int c = 0; c < channels; ++c)
                f.at(c, y, x) =
                    buf[(static_cast<std::size_t>(y) * f.width + x) * channels + c] / 127.5 - 1.0;
    return f;
}

inline void write_png(const std::filesystem::path& path, const Frame& f) {
    if (f.channels != 1 && f.channels != 3)
        throw ArgumentError("write_png: frame must have 1 or 3 channels");
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(f.width);
    img.height = static_cast<png_uint_32>(f.height);
    img.format = f.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;

    std::vector<png_byte> buf(static_cast<std::size_t>(f.height) * f.width * f.channels);
    for (int y = 0; y < f.height; ++y)
        for (int x = 0; x < f.width; ++x)
            for (int c = 0; c < f.channels; ++c) {
                double v = std::round((f.at(c, y, x) + 1.0) * 127.5);
                buf[(static_cast<std::size_t>(y) * f.width + x) * f.channels + c] =
                    static_cast<png_byte>(std::clamp(v, 0.0, 255.0));
            }
    if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
        throw LoadError("write_png: " + path.string() + ": " + img.message);
}

} // namespace roma
