#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace msgnet {
struct DataConfig;
}

namespace msgnet::shapeworld {

inline constexpr std::int64_t kShapeCount = 3;
inline constexpr std::int64_t kColorCount = 4;
inline constexpr std::int64_t kObjectClasses = kShapeCount * kColorCount;
/// Object classes plus background (label 0).
inline constexpr std::int64_t kLayoutClasses = kObjectClasses + 1;

enum class Shape : std::uint8_t { square = 0, circle = 1, triangle = 2 };

struct Object {
    Shape shape = Shape::square;
    std::int64_t color = 0;
    // Top-left corner of the bounding box, in pixels.
    std::int64_t x = 0;
    std::int64_t y = 0;
    std::int64_t size = 0;

    /// Layout label in [1, kObjectClasses].
    std::uint8_t label() const { return static_cast<std::uint8_t>(1 + static_cast<std::int64_t>(shape) * kColorCount + color); }
    double center_x() const { return static_cast<double>(x) + static_cast<double>(size) / 2.0; }
    double center_y() const { return static_cast<double>(y) + static_cast<double>(size) / 2.0; }
    /// Whether the pixel whose center is (row + 0.5, col + 0.5) is covered.
    bool covers(std::int64_t row, std::int64_t col) const;
};

struct Scene {
    std::vector<Object> objects;
    std::int64_t image_size = 0;
};

/// Class-index grid; 0 is background.
struct LayoutMap {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<std::uint8_t> labels;

    static LayoutMap filled(std::int64_t height, std::int64_t width, std::uint8_t value);

    std::uint8_t at(std::int64_t row, std::int64_t col) const { return labels[static_cast<std::size_t>(row * width + col)]; }
    std::uint8_t& at(std::int64_t row, std::int64_t col) { return labels[static_cast<std::size_t>(row * width + col)]; }
    bool empty() const { return labels.empty(); }

    friend bool operator==(const LayoutMap&, const LayoutMap&) = default;
};

/// 8-bit RGB image, row-major, channel-interleaved.
struct Image {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<std::uint8_t> rgb;

    static Image filled(std::int64_t height, std::int64_t width, std::uint8_t value);

    std::uint8_t at(std::int64_t row, std::int64_t col, std::int64_t ch) const {
        return rgb[static_cast<std::size_t>((row * width + col) * 3 + ch)];
    }
    std::uint8_t& at(std::int64_t row, std::int64_t col, std::int64_t ch) {
        return rgb[static_cast<std::size_t>((row * width + col) * 3 + ch)];
    }

    friend bool operator==(const Image&, const Image&) = default;
};

struct SceneSample {
    Image image;
    LayoutMap layout;
    Scene scene;
};

/// Draws object geometry only. Throws ConfigError when the configuration
/// cannot be satisfied (objects larger than the frame, a corner margin that
/// leaves no room for the centered object, ...).
Scene sample_scene(std::uint64_t seed, const DataConfig& config, std::int64_t image_size, bool constraint_mode);

Image render(const Scene& scene);
LayoutMap rasterize_layout(const Scene& scene, bool box_annotation);

/// Deterministic per seed.
SceneSample generate_scene(std::uint64_t seed, const DataConfig& config, std::int64_t image_size,
                           bool constraint_mode);

/// Categorical bilinear resampling: one-hot encode, bilinearly interpolate
/// each class plane (half-pixel centers, edge clamped), argmax with ties to
/// the lowest class index.
LayoutMap resample_layout(const LayoutMap& layout, std::int64_t out_height, std::int64_t out_width,
                          std::int64_t class_count = kLayoutClasses);
LayoutMap downsample_layout(const LayoutMap& layout, std::int64_t factor, std::int64_t class_count = kLayoutClasses);
LayoutMap upsample_layout(const LayoutMap& layout, std::int64_t factor, std::int64_t class_count = kLayoutClasses);

struct Component {
    std::uint8_t label = 0;
    std::int64_t pixels = 0;
    std::int64_t min_row = 0;
    std::int64_t max_row = 0;
    std::int64_t min_col = 0;
    std::int64_t max_col = 0;
};

/// 4-connected components of equal non-background labels, in raster order
/// of their first pixel.
std::vector<Component> connected_components(const LayoutMap& layout);

enum class Split { train, val };

std::string to_string(Split split);

struct Dataset {
    std::int64_t image_size = 0;
    std::vector<Image> images;
    std::vector<LayoutMap> layouts;  // empty LayoutMap marks an unannotated item
    std::vector<Split> splits;

    std::size_t size() const { return images.size(); }
    std::vector<std::size_t> indices(Split split) const;
    Dataset subset(const std::vector<std::size_t>& indices) const;
    void append(const Dataset& other);
};

/// Scene i uses a seed derived from (seed, i); the last val_fraction of the
/// scenes is tagged as validation.
Dataset generate_dataset(const DataConfig& config, std::int64_t image_size, std::uint64_t seed);
Dataset generate_dataset(const DataConfig& config, std::int64_t image_size, std::uint64_t seed, std::int64_t count);

/// Layout: images/NNNNNN.png (RGB), layouts/NNNNNN.png (8-bit class indices)
/// and manifest.txt with one `image layout split` line per item.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace msgnet::shapeworld
