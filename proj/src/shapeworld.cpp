#include "msgnet/shapeworld.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "msgnet/config.hpp"
#include "msgnet/errors.hpp"
#include "msgnet/png_io.hpp"

namespace msgnet::shapeworld {

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, kColorCount> kPalette = {{
    {200, 40, 40},   // red
    {40, 150, 60},   // green
    {45, 75, 205},   // blue
    {230, 140, 20},  // orange
}};

constexpr int kPlacementAttempts = 200;

std::int64_t uniform_int(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

struct Box {
    std::int64_t x0, y0, x1, y1;  // half-open
    bool intersects(const Box& o, std::int64_t gap) const {
        return x0 < o.x1 + gap && o.x0 < x1 + gap && y0 < o.y1 + gap && o.y0 < y1 + gap;
    }
};

Box box_of(const Object& o) { return {o.x, o.y, o.x + o.size, o.y + o.size}; }

bool touches_corner(const Box& b, std::int64_t image_size, std::int64_t margin) {
    if (margin == 0) {
        return false;
    }
    const std::int64_t far = image_size - margin;
    const std::array<Box, 4> corners = {{{0, 0, margin, margin},
                                         {far, 0, image_size, margin},
                                         {0, far, margin, image_size},
                                         {far, far, image_size, image_size}}};
    return std::any_of(corners.begin(), corners.end(), [&](const Box& c) { return b.intersects(c, 0); });
}

Object random_class(std::mt19937_64& rng) {
    Object o;
    o.shape = static_cast<Shape>(uniform_int(rng, 0, kShapeCount - 1));
    o.color = uniform_int(rng, 0, kColorCount - 1);
    return o;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over the combined words.
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

bool Object::covers(std::int64_t row, std::int64_t col) const {
    const double px = static_cast<double>(col) + 0.5;
    const double py = static_cast<double>(row) + 0.5;
    const double s = static_cast<double>(size);
    if (px < static_cast<double>(x) || px >= static_cast<double>(x) + s || py < static_cast<double>(y) ||
        py >= static_cast<double>(y) + s) {
        return false;
    }
    switch (shape) {
        case Shape::square:
            return true;
        case Shape::circle: {
            const double dx = px - center_x();
            const double dy = py - center_y();
            return dx * dx + dy * dy <= (s / 2.0) * (s / 2.0);
        }
        case Shape::triangle: {
            // Apex at the top center, base along the bottom edge.
            const double depth = (py - static_cast<double>(y)) / s;
            return std::abs(px - center_x()) <= depth * s / 2.0;
        }
    }
    return false;
}

LayoutMap LayoutMap::filled(std::int64_t height, std::int64_t width, std::uint8_t value) {
    return {height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height * width), value)};
}

Image Image::filled(std::int64_t height, std::int64_t width, std::uint8_t value) {
    return {height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height * width * 3), value)};
}

Scene sample_scene(std::uint64_t seed, const DataConfig& config, std::int64_t image_size, bool constraint_mode) {
    config.validate(image_size);
    const std::int64_t margin = config.corner_margin;
    if (constraint_mode) {
        // The centered object must cover the center pixel and stay clear of the corners.
        const std::int64_t s = config.max_object_size;
        const Box center{(image_size - s) / 2, (image_size - s) / 2, (image_size - s) / 2 + s, (image_size - s) / 2 + s};
        if (touches_corner(center, image_size, margin)) {
            throw ConfigError("constraint mode: centered object of size " + std::to_string(s) +
                              " reaches the corner margin");
        }
    }

    std::mt19937_64 rng(seed);
    Scene scene;
    scene.image_size = image_size;
    const std::int64_t count = uniform_int(rng, config.min_objects, config.max_objects);
    std::vector<Box> placed;

    for (std::int64_t k = 0; k < count; ++k) {
        Object o = random_class(rng);
        o.size = uniform_int(rng, config.min_object_size, config.max_object_size);
        if (constraint_mode && k == 0) {
            o.x = (image_size - o.size) / 2;
            o.y = (image_size - o.size) / 2;
            placed.push_back(box_of(o));
            scene.objects.push_back(o);
            continue;
        }
        bool ok = false;
        for (int attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
            o.x = uniform_int(rng, 0, image_size - o.size);
            o.y = uniform_int(rng, 0, image_size - o.size);
            const Box b = box_of(o);
            ok = std::none_of(placed.begin(), placed.end(), [&](const Box& p) { return b.intersects(p, 1); });
            if (ok && constraint_mode) {
                ok = !touches_corner(b, image_size, margin);
            }
        }
        if (ok) {
            placed.push_back(box_of(o));
            scene.objects.push_back(o);
        } else if (static_cast<std::int64_t>(scene.objects.size()) < config.min_objects) {
            throw ConfigError("cannot place " + std::to_string(config.min_objects) +
                              " non-overlapping objects in the frame");
        }
    }
    return scene;
}

Image render(const Scene& scene) {
    const std::int64_t n = scene.image_size;
    Image img = Image::filled(n, n, 0);
    // Fixed light background with a diagonal shading ramp.
    for (std::int64_t r = 0; r < n; ++r) {
        for (std::int64_t c = 0; c < n; ++c) {
            const double t = static_cast<double>(r + c) / static_cast<double>(std::max<std::int64_t>(2 * n - 2, 1));
            const auto v = static_cast<std::uint8_t>(std::lround(238.0 - 48.0 * t));
            img.at(r, c, 0) = v;
            img.at(r, c, 1) = v;
            img.at(r, c, 2) = static_cast<std::uint8_t>(std::min(255, v + 6));
        }
    }
    for (const auto& o : scene.objects) {
        const auto& rgb = kPalette[static_cast<std::size_t>(o.color)];
        for (std::int64_t r = o.y; r < o.y + o.size; ++r) {
            for (std::int64_t c = o.x; c < o.x + o.size; ++c) {
                if (o.covers(r, c)) {
                    for (std::int64_t ch = 0; ch < 3; ++ch) {
                        img.at(r, c, ch) = rgb[static_cast<std::size_t>(ch)];
                    }
                }
            }
        }
    }
    return img;
}

LayoutMap rasterize_layout(const Scene& scene, bool box_annotation) {
    const std::int64_t n = scene.image_size;
    LayoutMap layout = LayoutMap::filled(n, n, 0);
    for (const auto& o : scene.objects) {
        for (std::int64_t r = o.y; r < o.y + o.size; ++r) {
            for (std::int64_t c = o.x; c < o.x + o.size; ++c) {
                if (box_annotation || o.covers(r, c)) {
                    layout.at(r, c) = o.label();
                }
            }
        }
    }
    return layout;
}

SceneSample generate_scene(std::uint64_t seed, const DataConfig& config, std::int64_t image_size,
                           bool constraint_mode) {
    SceneSample out;
    out.scene = sample_scene(seed, config, image_size, constraint_mode);
    out.image = render(out.scene);
    out.layout = rasterize_layout(out.scene, config.box_annotation);
    return out;
}

LayoutMap resample_layout(const LayoutMap& layout, std::int64_t out_height, std::int64_t out_width,
                          std::int64_t class_count) {
    if (class_count < 1 || class_count > 256) {
        throw ValidationError("class_count must be in [1, 256]");
    }
    if (out_height <= 0 || out_width <= 0 || layout.height <= 0 || layout.width <= 0) {
        throw ShapeError("resample_layout: empty grid");
    }
    for (const auto v : layout.labels) {
        if (v >= class_count) {
            throw ValidationError("layout label " + std::to_string(v) + " outside [0, " + std::to_string(class_count) + ")");
        }
    }

    struct Tap {
        std::int64_t lo, hi;
        double w_hi;
    };
    // Half-pixel-center source coordinates, clamped at the border.
    const auto taps = [](std::int64_t out, std::int64_t in) {
        std::vector<Tap> t(static_cast<std::size_t>(out));
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (std::int64_t i = 0; i < out; ++i) {
            double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in - 1));
            const auto lo = static_cast<std::int64_t>(std::floor(src));
            const auto hi = std::min(lo + 1, in - 1);
            t[static_cast<std::size_t>(i)] = {lo, hi, src - static_cast<double>(lo)};
        }
        return t;
    };
    const auto rows = taps(out_height, layout.height);
    const auto cols = taps(out_width, layout.width);

    LayoutMap out = LayoutMap::filled(out_height, out_width, 0);
    std::vector<double> score(static_cast<std::size_t>(class_count));
    for (std::int64_t r = 0; r < out_height; ++r) {
        const auto& tr = rows[static_cast<std::size_t>(r)];
        for (std::int64_t c = 0; c < out_width; ++c) {
            const auto& tc = cols[static_cast<std::size_t>(c)];
            std::fill(score.begin(), score.end(), 0.0);
            score[layout.at(tr.lo, tc.lo)] += (1.0 - tr.w_hi) * (1.0 - tc.w_hi);
            score[layout.at(tr.lo, tc.hi)] += (1.0 - tr.w_hi) * tc.w_hi;
            score[layout.at(tr.hi, tc.lo)] += tr.w_hi * (1.0 - tc.w_hi);
            score[layout.at(tr.hi, tc.hi)] += tr.w_hi * tc.w_hi;
            std::size_t best = 0;
            for (std::size_t k = 1; k < score.size(); ++k) {
                if (score[k] > score[best]) {
                    best = k;
                }
            }
            out.at(r, c) = static_cast<std::uint8_t>(best);
        }
    }
    return out;
}

LayoutMap downsample_layout(const LayoutMap& layout, std::int64_t factor, std::int64_t class_count) {
    if (factor < 1 || layout.height % factor != 0 || layout.width % factor != 0) {
        throw ShapeError("downsample_layout: " + std::to_string(layout.height) + "x" + std::to_string(layout.width) +
                         " is not divisible by factor " + std::to_string(factor));
    }
    return resample_layout(layout, layout.height / factor, layout.width / factor, class_count);
}

LayoutMap upsample_layout(const LayoutMap& layout, std::int64_t factor, std::int64_t class_count) {
    if (factor < 1) {
        throw ShapeError("upsample_layout: factor must be >= 1");
    }
    return resample_layout(layout, layout.height * factor, layout.width * factor, class_count);
}

std::vector<Component> connected_components(const LayoutMap& layout) {
    std::vector<Component> out;
    std::vector<char> seen(layout.labels.size(), 0);
    std::vector<std::int64_t> stack;
    for (std::int64_t r0 = 0; r0 < layout.height; ++r0) {
        for (std::int64_t c0 = 0; c0 < layout.width; ++c0) {
            const auto start = r0 * layout.width + c0;
            const auto label = layout.labels[static_cast<std::size_t>(start)];
            if (label == 0 || seen[static_cast<std::size_t>(start)]) {
                continue;
            }
            Component comp{label, 0, r0, r0, c0, c0};
            stack.assign(1, start);
            seen[static_cast<std::size_t>(start)] = 1;
            while (!stack.empty()) {
                const auto p = stack.back();
                stack.pop_back();
                const auto r = p / layout.width;
                const auto c = p % layout.width;
                ++comp.pixels;
                comp.min_row = std::min(comp.min_row, r);
                comp.max_row = std::max(comp.max_row, r);
                comp.min_col = std::min(comp.min_col, c);
                comp.max_col = std::max(comp.max_col, c);
                const std::array<std::array<std::int64_t, 2>, 4> nbrs = {{{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}}};
                for (const auto& [nr, nc] : nbrs) {
                    if (nr < 0 || nc < 0 || nr >= layout.height || nc >= layout.width) {
                        continue;
                    }
                    const auto q = nr * layout.width + nc;
                    if (!seen[static_cast<std::size_t>(q)] && layout.labels[static_cast<std::size_t>(q)] == label) {
                        seen[static_cast<std::size_t>(q)] = 1;
                        stack.push_back(q);
                    }
                }
            }
            out.push_back(comp);
        }
    }
    return out;
}

std::string to_string(Split split) { return split == Split::train ? "train" : "val"; }

std::vector<std::size_t> Dataset::indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i) {
        if (splits[i] == split) {
            out.push_back(i);
        }
    }
    return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& idx) const {
    Dataset out;
    out.image_size = image_size;
    for (const auto i : idx) {
        out.images.push_back(images.at(i));
        out.layouts.push_back(layouts.at(i));
        out.splits.push_back(splits.at(i));
    }
    return out;
}

void Dataset::append(const Dataset& other) {
    if (image_size == 0) {
        image_size = other.image_size;
    }
    if (other.size() > 0 && other.image_size != image_size) {
        throw ShapeError("cannot append datasets with different image sizes");
    }
    images.insert(images.end(), other.images.begin(), other.images.end());
    layouts.insert(layouts.end(), other.layouts.begin(), other.layouts.end());
    splits.insert(splits.end(), other.splits.begin(), other.splits.end());
}

Dataset generate_dataset(const DataConfig& config, std::int64_t image_size, std::uint64_t seed) {
    return generate_dataset(config, image_size, seed, config.dataset_size);
}

Dataset generate_dataset(const DataConfig& config, std::int64_t image_size, std::uint64_t seed, std::int64_t count) {
    Dataset ds;
    ds.image_size = image_size;
    const auto val_count = static_cast<std::int64_t>(std::floor(config.val_fraction * static_cast<double>(count)));
    for (std::int64_t i = 0; i < count; ++i) {
        auto s = generate_scene(mix_seed(seed, static_cast<std::uint64_t>(i)), config, image_size, config.constraint_mode);
        ds.images.push_back(std::move(s.image));
        ds.layouts.push_back(std::move(s.layout));
        ds.splits.push_back(i >= count - val_count ? Split::val : Split::train);
    }
    return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "layouts");
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) {
        throw IoError("cannot write manifest in " + dir.string());
    }
    manifest << "# msgnet dataset v1\n";
    manifest << "# image_size " << dataset.image_size << "\n";
    char name[32];
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        std::snprintf(name, sizeof(name), "%06zu.png", i);
        const auto image_rel = fs::path("images") / name;
        png::write_rgb(dir / image_rel, dataset.images[i]);
        std::string layout_rel = "-";
        if (!dataset.layouts[i].empty()) {
            layout_rel = (fs::path("layouts") / name).string();
            png::write_labels(dir / layout_rel, dataset.layouts[i]);
        }
        manifest << image_rel.string() << ' ' << layout_rel << ' ' << to_string(dataset.splits[i]) << '\n';
    }
    if (!manifest) {
        throw IoError("failed writing manifest in " + dir.string());
    }
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) {
        throw PrerequisiteError("no dataset manifest at " + (dir / "manifest.txt").string());
    }
    Dataset ds;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        std::istringstream ls(line);
        std::string image_rel, layout_rel, split;
        if (!(ls >> image_rel >> layout_rel >> split) || (split != "train" && split != "val")) {
            throw IoError("manifest line " + std::to_string(line_no) + " is malformed");
        }
        auto img = png::read_rgb(dir / image_rel);
        if (ds.image_size == 0) {
            ds.image_size = img.height;
        }
        if (img.height != ds.image_size || img.width != ds.image_size) {
            throw ShapeError("image " + image_rel + " does not match the dataset size");
        }
        LayoutMap layout;
        if (layout_rel != "-") {
            layout = png::read_labels(dir / layout_rel);
            if (layout.height != img.height || layout.width != img.width) {
                throw ShapeError("layout " + layout_rel + " does not match its image");
            }
        }
        ds.images.push_back(std::move(img));
        ds.layouts.push_back(std::move(layout));
        ds.splits.push_back(split == "train" ? Split::train : Split::val);
    }
    return ds;
}

}  // namespace msgnet::shapeworld
