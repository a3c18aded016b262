#pragma once

#include <filesystem>

#include "msgnet/shapeworld.hpp"

namespace msgnet::png {

void write_rgb(const std::filesystem::path& path, const shapeworld::Image& image);
shapeworld::Image read_rgb(const std::filesystem::path& path);

/// Single-channel 8-bit PNG holding raw class indices.
void write_labels(const std::filesystem::path& path, const shapeworld::LayoutMap& layout);
shapeworld::LayoutMap read_labels(const std::filesystem::path& path);

}  // namespace msgnet::png
