#include "msgnet/png_io.hpp"

#include <png.h>

#include <cstring>

#include "msgnet/errors.hpp"

namespace msgnet::png {

namespace {

void write_image(const std::filesystem::path& path, std::int64_t height, std::int64_t width, png_uint_32 format,
                 const std::uint8_t* data) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(width);
    img.height = static_cast<png_uint_32>(height);
    img.format = format;
    if (png_image_write_to_file(&img, path.c_str(), 0, data, 0, nullptr) == 0) {
        throw IoError("cannot write " + path.string() + ": " + img.message);
    }
}

std::vector<std::uint8_t> read_image(const std::filesystem::path& path, png_uint_32 format, std::int64_t& height,
                                     std::int64_t& width) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (png_image_begin_read_from_file(&img, path.c_str()) == 0) {
        throw IoError("cannot read " + path.string() + ": " + img.message);
    }
    img.format = format;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(img));
    if (png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr) == 0) {
        png_image_free(&img);
        throw IoError("cannot decode " + path.string() + ": " + img.message);
    }
    height = img.height;
    width = img.width;
    return buffer;
}

}  // namespace

void write_rgb(const std::filesystem::path& path, const shapeworld::Image& image) {
    write_image(path, image.height, image.width, PNG_FORMAT_RGB, image.rgb.data());
}

shapeworld::Image read_rgb(const std::filesystem::path& path) {
    shapeworld::Image out;
    out.rgb = read_image(path, PNG_FORMAT_RGB, out.height, out.width);
    return out;
}

void write_labels(const std::filesystem::path& path, const shapeworld::LayoutMap& layout) {
    write_image(path, layout.height, layout.width, PNG_FORMAT_GRAY, layout.labels.data());
}

shapeworld::LayoutMap read_labels(const std::filesystem::path& path) {
    shapeworld::LayoutMap out;
    // The simplified reader would gamma-convert palette/RGB inputs; class maps
    // are always written as linear 8-bit gray, which round-trips unchanged.
    out.labels = read_image(path, PNG_FORMAT_GRAY, out.height, out.width);
    return out;
}

}  // namespace msgnet::png
